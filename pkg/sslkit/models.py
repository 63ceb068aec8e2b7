"""Pydantic models for reports, plans, histories and run records."""

import csv
import json
from datetime import datetime
from pathlib import Path
from typing import Any, ClassVar, Dict, FrozenSet, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator


class GradCheckReport(BaseModel):
    """Result of comparing an analytic gradient with central differences."""

    max_rel_error: float = Field(ge=0.0)
    worst_coordinate: Tuple[int, ...]
    step: float = Field(gt=0.0)
    n_coordinates: int = 0


class FoldPlan(BaseModel):
    """Assignment of every sample to one of ``k`` folds."""

    k: int = Field(ge=2)
    seed: int
    assignments: List[int]

    @model_validator(mode="after")
    def assignments_in_range(self) -> "FoldPlan":
        bad = [a for a in self.assignments if not 0 <= a < self.k]
        if bad:
            raise ValueError(f"fold index {bad[0]} outside [0, {self.k})")
        return self

    def val_indices(self, fold: int) -> List[int]:
        self._check_fold(fold)
        return [i for i, a in enumerate(self.assignments) if a == fold]

    def train_indices(self, fold: int) -> List[int]:
        self._check_fold(fold)
        return [i for i, a in enumerate(self.assignments) if a != fold]

    def fold_sizes(self) -> List[int]:
        sizes = [0] * self.k
        for a in self.assignments:
            sizes[a] += 1
        return sizes

    def _check_fold(self, fold: int) -> None:
        if not 0 <= fold < self.k:
            raise ValueError(f"fold index {fold} outside [0, {self.k})")

    def to_json(self) -> str:
        return json.dumps(
            {"k": self.k, "seed": self.seed, "assignments": self.assignments}
        )

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "FoldPlan":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))


UNDEFINED_CONVENTION = (
    "precision/recall/f1 with a zero denominator are reported as null and "
    "excluded from macro means"
)


class MetricsReport(BaseModel):
    """Confusion matrix with per-class and macro precision/recall/F1."""

    classes: List[str]
    confusion: List[List[int]]
    precision: List[Optional[float]]
    recall: List[Optional[float]]
    f1: List[Optional[float]]
    support: List[int]
    macro_precision: Optional[float] = None
    macro_recall: Optional[float] = None
    macro_f1: Optional[float] = None
    f1_of_means: Optional[float] = None
    accuracy: Optional[float] = None

    def to_json_dict(self) -> Dict[str, Any]:
        return {
            "classes": self.classes,
            "confusion": self.confusion,
            "per_class": {
                "precision": self.precision,
                "recall": self.recall,
                "f1": self.f1,
                "support": self.support,
            },
            "macro": {
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "f1": self.macro_f1,
            },
            "f1_of_means": self.f1_of_means,
            "accuracy": self.accuracy,
            "undefined_convention": UNDEFINED_CONVENTION,
        }

    def format_table(self) -> str:
        """Aligned-column text: one row per class, then the macro row."""

        def cell(value: Optional[float]) -> str:
            return "     -" if value is None else f"{value:6.4f}"

        width = max([len("macro")] + [len(c) for c in self.classes])
        lines = [f"{'class':<{width}}  precision  recall      f1  support"]
        for i, name in enumerate(self.classes):
            lines.append(
                f"{name:<{width}}  {cell(self.precision[i]):>9}  {cell(self.recall[i]):>6}"
                f"  {cell(self.f1[i]):>6}  {self.support[i]:>7}"
            )
        lines.append(
            f"{'macro':<{width}}  {cell(self.macro_precision):>9}  {cell(self.macro_recall):>6}"
            f"  {cell(self.macro_f1):>6}  {sum(self.support):>7}"
        )
        lines.append(f"f1 of macro precision/recall: {cell(self.f1_of_means).strip()}")
        lines.append(f"accuracy: {cell(self.accuracy).strip()}")
        return "\n".join(lines)

    @classmethod
    def from_json_dict(cls, data: Dict[str, Any]) -> "MetricsReport":
        per_class = data["per_class"]
        macro = data["macro"]
        return cls(
            classes=data["classes"],
            confusion=data["confusion"],
            precision=per_class["precision"],
            recall=per_class["recall"],
            f1=per_class["f1"],
            support=per_class["support"],
            macro_precision=macro["precision"],
            macro_recall=macro["recall"],
            macro_f1=macro["f1"],
            f1_of_means=data.get("f1_of_means"),
            accuracy=data.get("accuracy"),
        )


class ClassSummary(BaseModel):
    """Mean and sample standard deviation of one class over folds."""

    name: str
    precision_mean: Optional[float] = None
    precision_std: Optional[float] = None
    recall_mean: Optional[float] = None
    recall_std: Optional[float] = None
    f1_mean: Optional[float] = None
    f1_std: Optional[float] = None


class FoldSummary(BaseModel):
    """Aggregate of the per-fold metric reports of a cross-validation run."""

    n_folds: int
    per_class: List[ClassSummary]
    macro_precision_mean: Optional[float] = None
    macro_recall_mean: Optional[float] = None
    macro_f1_mean: Optional[float] = None
    macro_f1_std: Optional[float] = None


class EpochRecord(BaseModel):
    """Statistics of one completed epoch."""

    epoch: int
    loss: float
    val_macro_f1: Optional[float] = None
    seconds: float = 0.0
    batches: int = 0
    skipped_batches: int = 0
    queue_consultations: int = 0
    prototype_updates: int = 0
    clamped_logs: int = 0
    class_draws: Optional[List[int]] = None


HISTORY_COLUMNS = [
    "epoch",
    "loss",
    "val_macro_f1",
    "seconds",
    "batches",
    "skipped_batches",
    "queue_consultations",
    "prototype_updates",
    "clamped_logs",
]


class TrainHistory(BaseModel):
    """One record per completed epoch."""

    regime: str
    records: List[EpochRecord] = Field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    @property
    def last(self) -> Optional[EpochRecord]:
        return self.records[-1] if self.records else None

    def moving_average(self, window: int = 10) -> List[float]:
        """Trailing moving average of the epoch losses."""
        averages = []
        for i in range(len(self.records)):
            chunk = self.losses[max(0, i - window + 1): i + 1]
            averages.append(sum(chunk) / len(chunk))
        return averages

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(HISTORY_COLUMNS)
            for record in self.records:
                row = record.model_dump()
                writer.writerow(
                    ["" if row[c] is None else row[c] for c in HISTORY_COLUMNS]
                )


class RunManifest(BaseModel):
    """Provenance record written before a command produces outputs.

    ``started_at`` and ``finished_at`` are wall-clock times and differ between
    reruns. Every other field depends only on the command and its inputs.
    """

    TIMESTAMP_FIELDS: ClassVar[FrozenSet[str]] = frozenset({"started_at", "finished_at"})

    command: str
    config: Dict[str, Any] = Field(default_factory=dict)
    dataset_fingerprint: Optional[str] = None
    code_version: str
    arguments: Dict[str, Any] = Field(default_factory=dict)
    started_at: datetime
    finished_at: Optional[datetime] = None

    def without_timestamps(self) -> Dict[str, Any]:
        """Fields that reruns with the same inputs reproduce exactly."""
        return self.model_dump(mode="json", exclude=set(self.TIMESTAMP_FIELDS))


ShapeName = Literal["disk", "square", "ring", "cross", "diamond"]
SHAPES: Tuple[str, ...] = ("disk", "square", "ring", "cross", "diamond")


class SyntheticClassSpec(BaseModel):
    """One class of a synthetic dataset."""

    name: str
    count: int = Field(ge=1)
    color: Optional[Tuple[float, float, float]] = None
    shape: Optional[ShapeName] = None

    @field_validator("color")
    @classmethod
    def color_in_unit_cube(
        cls, v: Optional[Tuple[float, float, float]]
    ) -> Optional[Tuple[float, float, float]]:
        if v is not None and any(not 0.0 <= c <= 1.0 for c in v):
            raise ValueError("color channels must lie in [0, 1]")
        return v


class SyntheticSpec(BaseModel):
    """Recipe for a colored-blob dataset with a chosen class profile."""

    classes: List[SyntheticClassSpec]
    image_size: int = Field(default=32, ge=8)
    noise: float = Field(default=0.05, ge=0.0, description="Background noise std")
    signal: float = Field(default=1.0, gt=0.0, le=1.0, description="Blob opacity")
    radius: float = Field(default=0.28, gt=0.0, lt=0.5, description="Blob radius as a fraction of the side")

    @field_validator("classes")
    @classmethod
    def at_least_two(cls, v: List[SyntheticClassSpec]) -> List[SyntheticClassSpec]:
        if len(v) < 2:
            raise ValueError("a synthetic dataset needs at least 2 classes")
        names = [c.name for c in v]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        return v
