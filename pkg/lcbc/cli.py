from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Callable, Sequence

import numpy as np

from lcbc import datasets, evalviz, seeding
from lcbc.config import ConfigError, Settings, load_settings, parse_overrides
from lcbc.datasets import LabeledSets
from lcbc.encoder import pool
from lcbc.envs import DUBINS_UNSAFE_HALF_WIDTH, Environment
from lcbc.ndmath import NumericError
from lcbc.pipeline import (
    MissingArtifactError,
    RunLayout,
    encode_labeled,
    load_dataset,
    load_stage1,
    load_stage2,
    save_stage1,
    save_stage2,
    train_stage1,
    train_stage2,
)

logger = logging.getLogger("lcbc.cli")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_MISSING = 2
EXIT_NUMERIC = 3


def _collect_random(settings: Settings, layout: RunLayout) -> None:
    env = Environment.from_settings(settings)
    wm = settings.world_model
    dataset = datasets.collect_random(
        env,
        settings.collect.random_transitions,
        settings.seed,
        episode_length=settings.collect.episode_length,
        workers=settings.collect.workers,
        min_transitions=wm.context + 1 + wm.horizon,
    )
    dataset.save(layout.random_dataset)
    print(f"random dataset: {dataset.manifest.transitions} transitions -> {layout.random_dataset}")


def _collect_labeled(settings: Settings, layout: RunLayout) -> None:
    env = Environment.from_settings(settings)
    dataset, sets = datasets.collect_labeled(
        env,
        settings.collect.labeled_trajectories,
        settings.seed,
        episode_length=settings.collect.labeled_episode_length,
        workers=settings.collect.workers,
    )
    dataset.save(layout.labeled_dataset)
    counts = sets.counts()
    print(f"labeled dataset: safe={counts['safe']} unsafe={counts['unsafe']} all={counts['all']} -> {layout.labeled_dataset}")


def _train_wm(settings: Settings, layout: RunLayout) -> None:
    dataset = load_dataset(layout.random_dataset, "random-action dataset (run collect-random first)")
    result = train_stage1(dataset, settings)
    save_stage1(result, layout)
    print(
        f"stage 1: final loss {result.fit.losses[-1]:.6f}, held-out one-step {result.held_out_one_step}, "
        f"copy baseline {result.held_out_copy_baseline}"
    )


def _train_safe(settings: Settings, layout: RunLayout) -> None:
    encoder, world_model = load_stage1(settings, layout)
    dataset = load_dataset(layout.labeled_dataset, "labeled dataset (run collect-labeled first)")
    latents = encode_labeled(encoder, dataset, LabeledSets.from_dataset(dataset), settings.world_model.context)
    result = train_stage2(latents, world_model, settings, layout=layout)
    save_stage2(result, layout)
    print(f"stage 2: {len(result.report.epochs)} epochs, barrier frozen at {result.report.barrier_frozen_at}")


def _held_out(settings: Settings, dataset: datasets.TransitionDataset) -> LabeledSets:
    _, held = datasets.split_episodes(dataset.num_episodes, settings.train.holdout_fraction, settings.seed)
    return LabeledSets.from_dataset(dataset, held if len(held) else None)


def _eval(settings: Settings, layout: RunLayout) -> None:
    encoder, world_model = load_stage1(settings, layout)
    barrier, policy = load_stage2(settings, layout)
    dataset = load_dataset(layout.labeled_dataset, "labeled dataset (run collect-labeled first)")
    env = Environment.from_settings(settings)
    held = _held_out(settings, dataset)
    latents = encode_labeled(encoder, dataset, held, settings.world_model.context)

    signs = evalviz.verify_signs(barrier, latents, held.safe, held.unsafe)
    candidates = latents.context_ready(held.all)
    rng = seeding.stream(settings.seed, "eval.decrease")
    if len(candidates) > settings.eval.verify_samples:
        candidates = np.sort(rng.choice(candidates, settings.eval.verify_samples, replace=False))
    decrease = evalviz.verify_decrease(barrier, policy, world_model, encoder, env, latents, candidates)

    steps = settings.eval.steps_for(env.kind)
    starts = evalviz.sample_starts(env, "safe", settings.eval.rollout_starts, settings.seed)
    runs = evalviz.compare_trajectories(
        evalviz.learned_controller(encoder, policy, env), evalviz.reference_controller(env), env, starts, steps
    )
    unsafe_starts = evalviz.sample_starts(env, "unsafe", settings.eval.rollout_starts, settings.seed)
    attraction_run = evalviz.rollout_safety(evalviz.learned_controller(encoder, policy, env), env, unsafe_starts, steps)
    summaries = [evalviz.summarize(result, name, "safe") for name, result in runs.items()]
    summaries.append(evalviz.summarize(attraction_run, "learned", "unsafe"))
    evalviz.write_trajectories_csv(layout.viz / "trajectories.csv", env.kind, runs)
    report = evalviz.write_verification_report(
        layout.verification,
        env=env,
        seed=settings.seed,
        signs=signs,
        decrease=decrease,
        rollouts=summaries,
        attraction=evalviz.attraction_rate(attraction_run),
    )
    print(
        f"eval: sign accuracy {report.safe_accuracy:.3f}/{report.unsafe_accuracy:.3f}, "
        f"latent violations {report.latent_violation_rate:.3f}, "
        f"rollout safety {runs['learned'].safety_rate:.3f} (reference {runs['reference'].safety_rate:.3f}) "
        f"-> {layout.verification}"
    )


def _axis_names(env: Environment) -> tuple[str, str]:
    return ("theta", "theta_dot") if env.kind == "pendulum" else ("x", "y")


def _viz_heatmap(settings: Settings, layout: RunLayout) -> None:
    encoder, _ = load_stage1(settings, layout)
    barrier, _ = load_stage2(settings, layout)
    env = Environment.from_settings(settings)
    grid = evalviz.default_grid(env, settings.eval.heatmap_grid, settings.eval.dubins_heatmap_theta)
    heatmap = evalviz.export_heatmap(barrier, encoder, env, grid, layout.viz, workers=settings.eval.workers)
    if settings.eval.png:
        from lcbc import plotting

        plotting.save_heatmap_png(layout.viz / "heatmap.png", heatmap.image, grid, _axis_names(env))
    print(f"heatmap: {len(heatmap.values)} cells, label agreement {heatmap.agreement:.3f} -> {layout.viz}")


def _viz_pca(settings: Settings, layout: RunLayout) -> None:
    encoder, _ = load_stage1(settings, layout)
    dataset = load_dataset(layout.labeled_dataset, "labeled dataset (run collect-labeled first)")
    rng = seeding.stream(settings.seed, "eval.pca")
    count = min(settings.eval.pca_samples, len(dataset.frames))
    picked = np.sort(rng.choice(len(dataset.frames), count, replace=False))
    pooled = pool(encoder.encode_batch(dataset.frames[picked]))
    labels = dataset.labels()[picked]
    projection = evalviz.pca_projection(pooled)
    evalviz.write_pca_csv(layout.viz / "pca.csv", projection.coords, labels)
    labelled = (labels == evalviz.SAFE) | (labels == evalviz.UNSAFE)
    probe = None
    if labelled.sum() >= 4 and len(set(labels[labelled].tolist())) == 2:
        probe = evalviz.linear_probe_accuracy(
            projection.coords[labelled], labels[labelled] == evalviz.UNSAFE, seed=settings.seed
        )
    if settings.eval.png:
        from lcbc import plotting

        plotting.save_pca_png(layout.viz / "pca.png", projection.coords, labels)
    logger.info("pca_done samples=%s probe_accuracy=%s", count, probe)
    print(f"pca: {count} samples, linear probe accuracy {probe} -> {layout.viz / 'pca.csv'}")


def _rollout(settings: Settings, layout: RunLayout) -> None:
    encoder, _ = load_stage1(settings, layout)
    _, policy = load_stage2(settings, layout)
    env = Environment.from_settings(settings)
    starts = evalviz.sample_starts(env, "safe", settings.eval.rollout_starts, settings.seed)
    runs = evalviz.compare_trajectories(
        evalviz.learned_controller(encoder, policy, env),
        evalviz.reference_controller(env),
        env,
        starts,
        settings.eval.steps_for(env.kind),
    )
    evalviz.write_trajectories_csv(layout.viz / "trajectories.csv", env.kind, runs)
    if settings.eval.png:
        from lcbc import plotting

        box = (DUBINS_UNSAFE_HALF_WIDTH, DUBINS_UNSAFE_HALF_WIDTH) if env.kind == "dubins" else None
        plotting.save_trajectories_png(
            layout.viz / "trajectories.png",
            {name: result.trajectories for name, result in runs.items()},
            _axis_names(env),
            unsafe_box=box,
        )
    print(
        f"rollout: learned safety {runs['learned'].safety_rate:.3f}, reference {runs['reference'].safety_rate:.3f} "
        f"-> {layout.viz / 'trajectories.csv'}"
    )


COMMANDS: dict[str, tuple[Callable[[Settings, RunLayout], None], str]] = {
    "collect-random": (_collect_random, "collect uniform-random-action episodes"),
    "collect-labeled": (_collect_labeled, "collect reference-policy episodes with safe/unsafe labels"),
    "train-wm": (_train_wm, "stage 1: pretrain and freeze the encoder, train the transition model"),
    "train-safe": (_train_safe, "stage 2: train barrier and policy"),
    "eval": (_eval, "verify the certificate conditions and write the verification report"),
    "viz-heatmap": (_viz_heatmap, "export B over the state plane as CSV and PPM"),
    "viz-pca": (_viz_pca, "project pooled latents on two principal components"),
    "rollout": (_rollout, "closed-loop rollouts of learned and reference controllers"),
}


def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys (file sections use [section] headers; --set takes section.key=value):\n  " + "\n  ".join(
        Settings.describe_keys()
    )
    parser = argparse.ArgumentParser(
        prog="lcbc",
        description="Latent control barrier certificates over a learned world model.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("command", choices=sorted(COMMANDS), help="pipeline step to run")
    parser.add_argument("--config", type=str, default=None, help="key = value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--seed", type=int, default=None, help="root seed (overrides the config file)")
    parser.add_argument("--out-dir", type=str, default=None, help="output directory (fallback: LCBC_OUT_DIR)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # Usage errors must not collide with EXIT_MISSING.
        if exc.code in (0, None):
            raise
        return EXIT_CONFIG
    try:
        overrides = parse_overrides(args.overrides)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out_dir is not None:
            overrides["out_dir"] = args.out_dir
        settings = load_settings(args.config, overrides=overrides)
    except ConfigError as exc:
        print(f"lcbc: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    logging.basicConfig(
        level=settings.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    layout = RunLayout(settings.out_dir)
    handler, _ = COMMANDS[args.command]
    logger.info("command_start command=%s env=%s seed=%s out_dir=%s", args.command, settings.env, settings.seed, layout.root)
    try:
        handler(settings, layout)
    except MissingArtifactError as exc:
        print(f"lcbc: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"lcbc: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:
        logger.exception("command_failed command=%s", args.command)
        print(f"lcbc: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logger.info("command_done command=%s", args.command)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
