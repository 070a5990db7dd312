"""Accuracy-matrix analytics, the mixed score, and the persisted run record."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import jsonschema

SCHEMA_VERSION = 1
RECORD_FILE = "run_record.json"
MATRIX_FILE = "accuracy_matrix.csv"


class SchemaError(ValueError):
    pass


# rows[r - 1] holds accuracies (percent) on tasks 1..r measured after learning task r
AccuracyMatrix = List[List[float]]


def _check_matrix(matrix: AccuracyMatrix) -> None:
    for r, row in enumerate(matrix, start=1):
        if len(row) != r:
            raise ValueError(f"row {r} has {len(row)} entries, expected {r}")


def average_accuracy(matrix: AccuracyMatrix, after_task: int) -> float:
    """Mean accuracy over tasks 1..r after learning task r (1-based)."""
    if not 1 <= after_task <= len(matrix):
        raise ValueError(f"after_task must lie in 1..{len(matrix)}, got {after_task}")
    row = matrix[after_task - 1]
    return sum(row) / len(row)


def forgetting(matrix: AccuracyMatrix, task: int) -> float:
    """Accuracy on ``task`` just after learning it minus its accuracy at the end.

    Negative values mean the task improved later.
    """
    if not 1 <= task <= len(matrix):
        raise ValueError(f"task must lie in 1..{len(matrix)}, got {task}")
    return matrix[task - 1][task - 1] - matrix[-1][task - 1]


def mixed_score(a: float, n: float) -> float:
    """Score in [0, 1] rewarding accuracy ``a`` (percent) and penalizing parameter count ``n``."""
    if not 0.0 <= a <= 100.0:
        raise ValueError(f"accuracy must be a percentage in [0, 100], got {a}")
    if n < 0:
        raise ValueError(f"parameter count must be non-negative, got {n}")
    size_term = (math.cos(math.pi * (1.0 - math.exp(-math.log10(n + 1.0) / 10.0))) + 1.0) / 2.0
    return math.sqrt(a) / 10.0 * size_term


# ---------------------------------------------------------------------------
# run record
# ---------------------------------------------------------------------------

RUN_RECORD_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "method", "complete", "seed", "accuracy_matrix", "param_counts",
                 "genotypes", "ms_trajectory", "config"],
    "properties": {
        "schema_version": {"type": "integer"},
        "method": {"type": "string", "enum": ["seu", "sgd_baseline"]},
        "complete": {"type": "boolean"},
        "seed": {"type": "integer"},
        "accuracy_matrix": {"type": "array", "items": {
            "type": "array", "items": {"type": "number", "minimum": 0, "maximum": 100}}},
        "param_counts": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "genotypes": {"type": "array", "items": {"type": ["string", "null"]}},
        "task_refs": {"type": "array", "items": {"type": ["array", "null"], "items": {"type": "integer"}}},
        "ms_trajectory": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "config": {"type": "object"},
        "error": {"type": ["string", "null"]},
    },
}


@dataclass
class RunRecord:
    method: str
    seed: int
    config: dict
    accuracy_matrix: AccuracyMatrix = field(default_factory=list)
    param_counts: List[int] = field(default_factory=list)
    genotypes: List[Optional[str]] = field(default_factory=list)
    task_refs: List[Optional[List[int]]] = field(default_factory=list)
    ms_trajectory: List[float] = field(default_factory=list)
    complete: bool = False
    error: Optional[str] = None
    schema_version: int = SCHEMA_VERSION

    @property
    def n_tasks(self) -> int:
        return len(self.accuracy_matrix)

    def add_row(self, row: Sequence[float], param_count: int, genotype: Optional[str] = None,
                ref: Optional[Sequence[int]] = None) -> None:
        self.accuracy_matrix.append([float(v) for v in row])
        self.param_counts.append(int(param_count))
        self.genotypes.append(genotype)
        self.task_refs.append(list(ref) if ref is not None else None)
        avg = average_accuracy(self.accuracy_matrix, len(self.accuracy_matrix))
        self.ms_trajectory.append(mixed_score(avg, param_count))

    def final_average_accuracy(self) -> float:
        return average_accuracy(self.accuracy_matrix, self.n_tasks)

    def final_param_count(self) -> int:
        return self.param_counts[-1]

    def validate(self) -> None:
        data = self.to_dict()
        try:
            jsonschema.validate(data, RUN_RECORD_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise SchemaError(f"run record invalid at {list(exc.absolute_path)}: {exc.message}") from exc
        _check_matrix(self.accuracy_matrix)
        n = self.n_tasks
        if not (len(self.param_counts) == len(self.genotypes) == len(self.ms_trajectory) == n):
            raise SchemaError("matrix size, parameter snapshots, genotypes and MS trajectory disagree")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaError(f"run record schema version {version} != supported {SCHEMA_VERSION}")
        known = {f for f in cls.__dataclass_fields__}
        record = cls(**{k: v for k, v in data.items() if k in known})
        record.validate()
        return record

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / RECORD_FILE).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        write_matrix_csv(self.accuracy_matrix, directory / MATRIX_FILE)
        return directory / RECORD_FILE

    @classmethod
    def load(cls, path) -> "RunRecord":
        path = Path(path)
        if path.is_dir():
            path = path / RECORD_FILE
        return cls.from_dict(json.loads(path.read_text()))


def write_matrix_csv(matrix: AccuracyMatrix, path) -> None:
    """Row r = after learning task r; blank cells for tasks not yet learned."""
    m = len(matrix)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["after_task"] + [f"task_{c}" for c in range(1, m + 1)])
        for r, row in enumerate(matrix, start=1):
            w.writerow([r] + [repr(v) for v in row] + [""] * (m - r))


def write_plot_data(record: RunRecord, directory, label: str = "") -> List[Path]:
    """Per-figure CSVs: accuracy curves, heat-map grid, average-accuracy trajectory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    prefix = f"{label}_" if label else ""
    matrix = record.accuracy_matrix
    m = len(matrix)
    out = []

    path = directory / f"{prefix}accuracy_curves.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "after_task", "accuracy"])
        for c in range(1, m + 1):
            for r in range(c, m + 1):
                w.writerow([c, r, matrix[r - 1][c - 1]])
    out.append(path)

    # heat map: row = evaluated task, column = tasks learned so far (defined above the diagonal)
    path = directory / f"{prefix}heatmap.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task"] + [f"after_{r}" for r in range(1, m + 1)])
        for c in range(1, m + 1):
            w.writerow([c] + ["" if r < c else matrix[r - 1][c - 1] for r in range(1, m + 1)])
    out.append(path)

    path = directory / f"{prefix}avg_accuracy.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["after_task", "average_accuracy", "param_count", "mixed_score"])
        for r in range(1, m + 1):
            w.writerow([r, average_accuracy(matrix, r), record.param_counts[r - 1],
                        record.ms_trajectory[r - 1]])
    out.append(path)
    return out
