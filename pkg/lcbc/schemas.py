from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Annotated, Literal

from pydantic import BaseModel, Field

from lcbc.config import EnvKind

Rate = Annotated[float, Field(ge=0.0, le=1.0)]


class DatasetManifest(BaseModel):
    env: EnvKind
    kind: Literal["random", "labeled"]
    seed: int = Field(ge=0)
    episodes: int = Field(ge=0)
    transitions: int = Field(ge=0)
    frame_shape: tuple[int, int, int]
    action_dim: int = Field(ge=1)
    proprio_dim: int = Field(ge=1)
    state_dim: int = Field(ge=1)
    episode_lengths: list[int] = Field(default_factory=list)
    content_sha256: str = ""

    def to_text(self) -> str:
        lines = ["# lcbc dataset manifest"]
        for key, value in self.model_dump().items():
            if isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> DatasetManifest:
        values: dict[str, object] = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            value = value.strip()
            if key.strip() in {"frame_shape", "episode_lengths"}:
                values[key.strip()] = [int(v) for v in value.split(",") if v.strip()]
            else:
                values[key.strip()] = value
        return cls.model_validate(values)


class EpochRecord(BaseModel):
    epoch: int = Field(ge=1)
    l_pred: float | None = None
    held_out_pred: float | None = None
    l_barrier: float | None = None
    l_lie: float | None = None
    l_syn: float | None = None
    l_pi: float | None = None
    l_total: float
    barrier_frozen: bool = False
    safe_batch: int = 0
    unsafe_batch: int = 0


class TrainReport(BaseModel):
    """Per-epoch losses of one training stage. ``wall_clock_s`` is kept out of the CSV."""

    stage: Literal["stage1", "stage2"]
    env: EnvKind
    seed: int
    epochs: list[EpochRecord] = Field(default_factory=list)
    barrier_frozen_at: int | None = None
    converged: bool = False
    wall_clock_s: float = 0.0

    def to_csv(self) -> str:
        buffer = io.StringIO()
        fields = list(EpochRecord.model_fields)
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(fields)
        for record in self.epochs:
            row = record.model_dump()
            writer.writerow(["" if row[name] is None else repr(row[name]) for name in fields])
        return buffer.getvalue()

    def write_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path


class RolloutSummary(BaseModel):
    policy: Literal["learned", "reference"]
    start_region: Literal["safe", "neither", "unsafe"]
    starts: int = Field(ge=0)
    steps: int = Field(ge=0)
    safety_rate: Rate
    goal_rate: float | None = None


class VerificationReport(BaseModel):
    env: EnvKind
    seed: int
    safe_count: int = Field(gt=0)
    unsafe_count: int = Field(gt=0)
    safe_accuracy: Rate
    unsafe_accuracy: Rate
    decrease_samples: int = Field(gt=0)
    latent_violation_rate: Rate
    ground_truth_violation_rate: Rate
    decrease_agreement: Rate
    rollouts: list[RolloutSummary] = Field(default_factory=list)
    attraction_rate: float | None = None

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return path


class GridSpec(BaseModel):
    """Axis-aligned evaluation grid over the env's 2-D state plane."""

    resolution: int = Field(default=50, ge=2)
    first_range: tuple[float, float]
    second_range: tuple[float, float]
    fixed_theta: float = 0.0
