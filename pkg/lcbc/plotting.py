"""PNG companions of the CSV/PPM artifacts (written only when ``eval.png`` is on)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import numpy as np
from matplotlib.colors import TwoSlopeNorm
from matplotlib.figure import Figure

from lcbc.envs import LABEL_CODES, SafetyLabel
from lcbc.schemas import GridSpec

_LABEL_STYLE = {
    LABEL_CODES[SafetyLabel.safe]: ("safe", "tab:green"),
    LABEL_CODES[SafetyLabel.unsafe]: ("unsafe", "tab:red"),
    LABEL_CODES[SafetyLabel.neither]: ("neither", "tab:gray"),
}


def _save(fig: Figure, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    return path


def save_heatmap_png(path: Path, values: np.ndarray, grid: GridSpec, axis_names: tuple[str, str]) -> Path:
    values = np.asarray(values, dtype=np.float64).reshape(grid.resolution, grid.resolution)
    bound = float(np.max(np.abs(values))) or 1.0
    fig = Figure(figsize=(5, 4))
    ax = fig.add_subplot()
    image = ax.imshow(
        values,
        origin="lower",
        extent=(*grid.first_range, *grid.second_range),
        aspect="auto",
        cmap="RdBu_r",
        norm=TwoSlopeNorm(vcenter=0.0, vmin=-bound, vmax=bound),
    )
    first = np.linspace(*grid.first_range, grid.resolution)
    second = np.linspace(*grid.second_range, grid.resolution)
    if values.min() < 0 < values.max():
        ax.contour(first, second, values, levels=[0.0], colors="k", linewidths=1.0)
    ax.set_xlabel(axis_names[0])
    ax.set_ylabel(axis_names[1])
    fig.colorbar(image, ax=ax, label="B")
    return _save(fig, path)


def save_pca_png(path: Path, coords: np.ndarray, labels: np.ndarray) -> Path:
    fig = Figure(figsize=(5, 4))
    ax = fig.add_subplot()
    second = coords[:, 1] if coords.shape[1] > 1 else np.zeros(len(coords))
    for code, (name, colour) in _LABEL_STYLE.items():
        mask = labels == code
        if mask.any():
            ax.scatter(coords[mask, 0], second[mask], s=6, c=colour, label=name, alpha=0.7)
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    ax.legend(loc="best")
    return _save(fig, path)


def save_trajectories_png(
    path: Path,
    runs: dict[str, np.ndarray],
    axis_names: tuple[str, str],
    *,
    unsafe_box: tuple[float, float] | None = None,
) -> Path:
    """``runs`` maps a controller name to (n, T+1, state_dim) trajectories; the first two state columns are drawn."""
    colours = {"learned": "tab:green", "reference": "tab:red"}
    fig = Figure(figsize=(5, 5))
    ax = fig.add_subplot()
    if unsafe_box is not None:
        half_x, half_y = unsafe_box
        ax.fill(
            [-half_x, half_x, half_x, -half_x],
            [-half_y, -half_y, half_y, half_y],
            color="0.85",
            label="unsafe",
        )
    for name, trajectories in runs.items():
        colour = colours.get(name, "tab:blue")
        for index, trajectory in enumerate(trajectories):
            ax.plot(trajectory[:, 0], trajectory[:, 1], color=colour, lw=0.7, alpha=0.6, label=name if index == 0 else None)
    ax.set_xlabel(axis_names[0])
    ax.set_ylabel(axis_names[1])
    ax.legend(loc="best")
    return _save(fig, path)
