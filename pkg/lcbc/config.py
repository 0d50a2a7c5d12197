from __future__ import annotations

import math
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

EnvKind = Literal["pendulum", "dubins"]

_TOP_LEVEL_SECTION = "run"
_NONE_LITERALS = {"", "none", "null"}


class ConfigError(ValueError):
    def __init__(self, message: str, *, line: int | None = None, source: str | None = None) -> None:
        self.line = line
        self.source = source
        where = ""
        if source and line is not None:
            where = f"{source}:{line}: "
        elif line is not None:
            where = f"line {line}: "
        elif source:
            where = f"{source}: "
        super().__init__(f"{where}{message}")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class PendulumConfig(_Section):
    mass: float = Field(default=1.0, gt=0)
    length: float = Field(default=1.0, gt=0)
    gravity: float = Field(default=10.0, gt=0)
    dt: float = Field(default=0.05, gt=0, le=1.0)
    torque_limit: float = Field(default=6.0, gt=0)
    theta_dot_limit: float = Field(default=3.5, gt=0)
    kp: float = Field(default=20.0, ge=0)
    kd: float = Field(default=4.0, ge=0)
    rod_width_px: float = Field(default=4.0, gt=0)


class DubinsConfig(_Section):
    speed: float = Field(default=1.0, gt=0)
    dt: float = Field(default=0.1, gt=0, le=1.0)
    turn_limit: float = Field(default=2.0, gt=0)
    box: float = Field(default=1.5, gt=0)
    goal_x: float = Field(default=1.2)
    goal_y: float = Field(default=1.2)
    goal_radius: float = Field(default=0.2, gt=0)
    obstacle_radius: float = Field(default=0.5, gt=0)
    k_theta: float = Field(default=3.0, ge=0)


class RenderConfig(_Section):
    width: int = Field(default=64, ge=8, le=1024)
    height: int = Field(default=64, ge=8, le=1024)


class EncoderConfig(_Section):
    preset: Literal["desk", "paper"] = "desk"
    patch: int = Field(default=8, ge=1)
    embed_dim: int = Field(default=64, ge=4)
    depth: int = Field(default=1, ge=0, le=12)
    heads: int = Field(default=4, ge=1)
    frozen: bool = True
    pretrain_epochs: int = Field(default=5, ge=0)
    pretrain_max_frames: int = Field(default=20_000, ge=1)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=1e-3, gt=0)
    decoder_hidden: int = Field(default=64, ge=1)
    import_path: Path | None = None

    @model_validator(mode="after")
    def _apply_paper_preset(self) -> EncoderConfig:
        # Pins the 384-dim, 16x16-patch geometry unless set explicitly.
        if self.preset == "paper":
            explicit = self.model_fields_set
            if "embed_dim" not in explicit:
                object.__setattr__(self, "embed_dim", 384)
            if "heads" not in explicit:
                object.__setattr__(self, "heads", 6)
            if "patch" not in explicit:
                object.__setattr__(self, "patch", 0)
        return self

    def resolved_patch(self, render: RenderConfig) -> int:
        return self.patch if self.patch > 0 else max(1, render.width // 16)


class WorldModelConfig(_Section):
    context: int = Field(default=3, ge=0, le=16)
    horizon: int = Field(default=3, ge=1, le=16)
    blocks: int = Field(default=2, ge=1, le=12)
    heads: int = Field(default=4, ge=1)
    epochs: int = Field(default=20, ge=1)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=1e-3, gt=0)
    max_grad_norm: float = Field(default=1.0, ge=0)


class BarrierConfig(_Section):
    hidden: list[int] = Field(default_factory=lambda: [64, 64])
    xi1: float = Field(default=1.0, gt=0)
    xi2: float = Field(default=1.0, gt=0)
    alpha: float = Field(default=1.0, gt=0)
    gamma: float = Field(default=0.1, ge=0)


class PolicyConfig(_Section):
    hidden: list[int] = Field(default_factory=lambda: [64, 64])
    joint_theta: bool = False


class OptimConfig(_Section):
    lr: float = Field(default=1e-3, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    max_grad_norm: float = Field(default=1.0, ge=0)


class CollectConfig(_Section):
    random_transitions: int = Field(default=50_000, ge=1)
    episode_length: int = Field(default=100, ge=2)
    labeled_trajectories: int = Field(default=250, ge=1)
    labeled_episode_length: int = Field(default=100, ge=2)
    workers: int = Field(default=4, ge=1, le=64)


class TrainConfig(_Section):
    stage2_max_epochs: int = Field(default=2000, ge=1)
    batch_size: int = Field(default=128, ge=1)
    convergence_window: int = Field(default=20, ge=2)
    convergence_tol: float = Field(default=1e-3, gt=0)
    smoothing: float = Field(default=0.9, ge=0, lt=1)
    holdout_fraction: float = Field(default=0.1, ge=0, lt=1)


class EvalConfig(_Section):
    verify_samples: int = Field(default=2000, ge=1)
    rollout_starts: int = Field(default=100, ge=1)
    rollout_steps: int | None = Field(default=None, ge=0)
    heatmap_grid: int = Field(default=50, ge=2)
    dubins_heatmap_theta: float = 0.0
    pca_samples: int = Field(default=1000, ge=3)
    png: bool = False
    probe_threshold: float = Field(default=0.9, ge=0, le=1)
    agreement_threshold: float = Field(default=0.8, ge=0, le=1)
    workers: int = Field(default=4, ge=1, le=64)

    def steps_for(self, env: EnvKind) -> int:
        if self.rollout_steps is not None:
            return self.rollout_steps
        return 200 if env == "pendulum" else 150


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="LCBC_",
        env_nested_delimiter="__",
        case_sensitive=False,
        extra="forbid",
    )

    env: EnvKind = Field(default="pendulum")
    seed: int = Field(default=0, ge=0)
    log_level: str = Field(default="INFO")
    out_dir: Path = Field(default=Path("runs/default"))

    pendulum: PendulumConfig = Field(default_factory=PendulumConfig)
    dubins: DubinsConfig = Field(default_factory=DubinsConfig)
    render: RenderConfig = Field(default_factory=RenderConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    world_model: WorldModelConfig = Field(default_factory=WorldModelConfig)
    barrier: BarrierConfig = Field(default_factory=BarrierConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    collect: CollectConfig = Field(default_factory=CollectConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @property
    def patch(self) -> int:
        return self.encoder.resolved_patch(self.render)

    @property
    def patch_grid(self) -> tuple[int, int]:
        return self.render.height // self.patch, self.render.width // self.patch

    @property
    def action_bounds(self) -> tuple[float, float]:
        if self.env == "pendulum":
            return -self.pendulum.torque_limit, self.pendulum.torque_limit
        return -self.dubins.turn_limit, self.dubins.turn_limit

    def validation_errors(self) -> list[str]:
        errors: list[str] = []
        patch = self.patch
        if self.render.width % patch or self.render.height % patch:
            errors.append(
                f"render {self.render.height}x{self.render.width} is not divisible by encoder patch {patch}"
            )
        if self.encoder.embed_dim % 4:
            errors.append(f"encoder.embed_dim={self.encoder.embed_dim} must be divisible by 4 (2-D position encoding)")
        if self.encoder.depth and self.encoder.embed_dim % self.encoder.heads:
            errors.append(f"encoder.embed_dim={self.encoder.embed_dim} is not divisible by encoder.heads")
        if self.encoder.embed_dim % self.world_model.heads:
            errors.append(f"encoder.embed_dim={self.encoder.embed_dim} is not divisible by world_model.heads")
        window = self.world_model.context + 1 + self.world_model.horizon
        if window > self.collect.episode_length:
            errors.append(
                f"context+1+horizon={window} exceeds collect.episode_length={self.collect.episode_length}"
            )
        if self.world_model.context + 2 > self.collect.labeled_episode_length:
            errors.append("collect.labeled_episode_length is shorter than one context window plus a successor")
        if self.collect.random_transitions < window:
            errors.append(f"collect.random_transitions must be at least {window}")
        if not self.barrier.hidden or any(width < 1 for width in self.barrier.hidden):
            errors.append("barrier.hidden must list positive layer widths")
        if not self.policy.hidden or any(width < 1 for width in self.policy.hidden):
            errors.append("policy.hidden must list positive layer widths")
        if self.env == "dubins" and not math.isclose(self.dubins.speed, 1.0):
            errors.append("dubins.speed is fixed at 1 for this task")
        return errors

    @classmethod
    def describe_keys(cls) -> list[str]:
        lines: list[str] = []
        for name, field in cls.model_fields.items():
            annotation = field.annotation
            if isinstance(annotation, type) and issubclass(annotation, BaseModel):
                defaults = annotation()
                for sub_name in annotation.model_fields:
                    lines.append(f"{name}.{sub_name} = {_render_value(getattr(defaults, sub_name))}")
            else:
                lines.append(f"{name} = {_render_value(field.get_default(call_default_factory=True))}")
        return lines


def _render_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(str(item) for item in value)
    return str(value)


def _coerce(raw: str) -> Any:
    value = raw.strip()
    if value.startswith("[") and value.endswith("]"):
        return [item.strip() for item in value[1:-1].split(",") if item.strip()]
    if value.lower() in _NONE_LITERALS:
        return None
    if "," in value:
        return [item.strip() for item in value.split(",") if item.strip()]
    if len(value) >= 2 and value[0] == value[-1] and value[0] in {'"', "'"}:
        return value[1:-1]
    return value


def parse_config_text(
    text: str,
    *,
    source: str = "<config>",
) -> tuple[dict[str, Any], dict[tuple[str, ...], int]]:
    """Parse ``[section]`` / ``key = value`` text into nested values plus a
    (section, key) → line index used to locate validation failures."""
    values: dict[str, Any] = {}
    lines: dict[tuple[str, ...], int] = {}
    section: str | None = None
    for number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"malformed section header {line!r}", line=number, source=source)
            name = line[1:-1].strip()
            if not name.isidentifier():
                raise ConfigError(f"invalid section name {name!r}", line=number, source=source)
            section = None if name == _TOP_LEVEL_SECTION else name
            if section is not None:
                lines.setdefault((section,), number)
            continue
        if "=" not in line:
            raise ConfigError(f"expected `key = value`, got {line!r}", line=number, source=source)
        key, _, raw_value = line.partition("=")
        key = key.strip()
        if not key.isidentifier():
            raise ConfigError(f"invalid key {key!r}", line=number, source=source)
        value = _coerce(raw_value.split(" #", 1)[0])
        if section is None:
            target = values
            location: tuple[str, ...] = (key,)
        else:
            target = values.setdefault(section, {})
            if not isinstance(target, dict):
                raise ConfigError(f"section [{section}] collides with a top-level key", line=number, source=source)
            location = (section, key)
        if key in target:
            raise ConfigError(f"duplicate key {'.'.join(location)}", line=number, source=source)
        target[key] = value
        lines[location] = number
    return values, lines


def parse_overrides(overrides: Iterable[str]) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for item in overrides:
        key, sep, raw_value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like section.key=value", source="--set")
        parts = [part.strip() for part in key.split(".") if part.strip()]
        if not parts or len(parts) > 2:
            raise ConfigError(f"override key {key!r} must be `key` or `section.key`", source="--set")
        target = values
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = _coerce(raw_value)
    return values


def _deep_merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_settings(
    config_path: Path | None = None,
    *,
    overrides: Mapping[str, Any] | None = None,
    check: bool = True,
) -> Settings:
    """Build settings from (highest first) overrides, the config file,
    ``LCBC_*`` environment variables, and defaults."""
    file_values: dict[str, Any] = {}
    line_index: dict[tuple[str, ...], int] = {}
    source = None
    if config_path is not None:
        path = Path(config_path)
        source = str(path)
        if not path.is_file():
            raise ConfigError("config file not found", source=source)
        file_values, line_index = parse_config_text(path.read_text(encoding="utf-8"), source=source)

    merged = _deep_merge(file_values, overrides or {})
    try:
        settings = Settings(**merged)
    except ValidationError as exc:
        first = exc.errors()[0]
        location = tuple(str(part) for part in first.get("loc", ()))
        line = None
        for width in range(len(location), 0, -1):
            line = line_index.get(location[:width])
            if line is not None:
                break
        dotted = ".".join(location) or "<root>"
        raise ConfigError(f"{dotted}: {first.get('msg', 'invalid value')}", line=line, source=source) from exc

    if check:
        problems = settings.validation_errors()
        if problems:
            raise ConfigError("; ".join(problems), source=source)
    return settings
