"""Accuracy bookkeeping, ACC/BWT and the report files written per run.

Files are byte-stable: JSON keys are sorted and every float is written with
17 significant digits, which round-trips exactly through a parse.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


class AccuracyMatrix:
    """Lower-triangular ``A[i][j]``: accuracy on task j+1 after learning tasks 1..i+1."""

    def __init__(self, num_tasks: int, rows=None):
        self.num_tasks = num_tasks
        self.rows: list[list[float]] = []
        for row in rows or []:
            self.add_row(row)

    def add_row(self, values) -> None:
        i = len(self.rows) + 1
        values = [float(v) for v in values]
        if i > self.num_tasks:
            raise ValueError("matrix already complete")
        if len(values) != i:
            raise ValueError(f"row {i} needs {i} entries, got {len(values)}")
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("accuracies must lie in [0, 1]")
        self.rows.append(values)

    @property
    def complete(self) -> bool:
        return len(self.rows) == self.num_tasks

    def __getitem__(self, ij):
        i, j = ij
        return self.rows[i][j]


def _require_complete(matrix: AccuracyMatrix) -> None:
    if not matrix.complete:
        raise ValueError(f"accuracy matrix has {len(matrix.rows)} of {matrix.num_tasks} rows")


def compute_acc(matrix: AccuracyMatrix) -> float:
    _require_complete(matrix)
    return math.fsum(matrix.rows[-1]) / matrix.num_tasks


def compute_bwt(matrix: AccuracyMatrix) -> float:
    """Mean change in accuracy on earlier tasks; 0 by convention for a single task."""
    _require_complete(matrix)
    t = matrix.num_tasks
    if t == 1:
        return 0.0
    last = matrix.rows[-1]
    return math.fsum(last[i] - matrix.rows[i][i] for i in range(t)) / (t - 1)


def frozen_bit_histogram(s_before, s_after, layers, total_bits: int) -> dict[str, list[int]]:
    """Per layer, how many parameters gained 0, 1, ..., N frozen bits."""
    gained = np.asarray(s_after, dtype=np.int64) - np.asarray(s_before, dtype=np.int64)
    return {layer.name: np.bincount(gained[layer.span], minlength=total_bits + 1).tolist()
            for layer in layers}


def frozen_table(s_after, layers):
    """Yield ``(layer, index, frozen_bits)`` for every parameter."""
    s_after = np.asarray(s_after)
    for layer in layers:
        for i, b in enumerate(s_after[layer.span].tolist()):
            yield layer.name, i, b


@dataclass
class RunReport:
    config: dict
    seed: int
    layers: list = field(default_factory=list)
    total_bits: int = 20
    matrix: AccuracyMatrix | None = None
    tasks: list[dict] = field(default_factory=list)
    frozen_bits: list[np.ndarray] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    status: str = "complete"
    error: str | None = None

    @property
    def acc(self) -> float | None:
        return compute_acc(self.matrix) if self.matrix is not None and self.matrix.complete else None

    @property
    def bwt(self) -> float | None:
        return compute_bwt(self.matrix) if self.matrix is not None and self.matrix.complete else None

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "seed": self.seed,
            "status": self.status,
            "error": self.error,
            "num_tasks": self.matrix.num_tasks if self.matrix else 0,
            "total_bits": self.total_bits,
            "accuracy_matrix": self.matrix.rows if self.matrix else [],
            "acc": self.acc,
            "bwt": self.bwt,
            "bwt_degenerate": bool(self.matrix is not None and self.matrix.num_tasks == 1),
            "layers": [
                {"name": layer.name, "offset": layer.offset, "size": layer.size,
                 "fan_in": layer.fan_in, "fan_out": layer.fan_out, "scale": layer.scale}
                for layer in self.layers
            ],
            "tasks": self.tasks,
        }


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot serialise non-finite float {x!r}")
    text = format(x, ".17g")
    if not any(c in text for c in ".en"):
        text += ".0"  # keep floats floats after a parse
    return text


def dumps(obj, indent: int = 0, step: int = 2) -> str:
    """Deterministic JSON: sorted keys, 17-significant-digit floats."""
    pad = " " * (indent + step)
    if obj is None or isinstance(obj, (bool, str)):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(obj[k], indent + step, step)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + " " * indent + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        if len(obj) == 0:
            return "[]"
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(dumps(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, indent + step, step) for v in obj) + "\n" + " " * indent + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def matrix_csv(rows, num_tasks: int) -> str:
    lines = ["task," + ",".join(str(j + 1) for j in range(num_tasks))]
    for i, row in enumerate(rows, start=1):
        cells = [_fmt_float(v) for v in row] + [""] * (num_tasks - len(row))
        lines.append(f"{i}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def serialize_report(report: RunReport, out_dir) -> list[Path]:
    """Write report.json, accuracy_matrix.csv, frozen_bits_task<t>.csv and timings.json."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc.strerror or exc}") from exc
    written = []
    data = report.to_json()
    path = out / "report.json"
    _write(path, dumps(data) + "\n")
    written.append(path)
    path = out / "accuracy_matrix.csv"
    _write(path, matrix_csv(data["accuracy_matrix"], data["num_tasks"]))
    written.append(path)
    for t, bits in enumerate(report.frozen_bits, start=1):
        path = out / f"frozen_bits_task{t}.csv"
        lines = ["layer,index,frozen_bits"]
        lines.extend(f"{name},{i},{b}" for name, i, b in frozen_table(bits, report.layers))
        _write(path, "\n".join(lines) + "\n")
        written.append(path)
    # wall-clock lives apart from report.json so that file stays reproducible
    path = out / "timings.json"
    _write(path, dumps({"seconds_per_task": list(report.wall_clock)}) + "\n")
    written.append(path)
    return written


def read_report(report_dir) -> dict:
    path = Path(report_dir)
    if path.is_dir():
        path = path / "report.json"
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def reserialize(data: dict) -> str:
    return dumps(data) + "\n"


def matrix_from_json(data: dict) -> AccuracyMatrix:
    return AccuracyMatrix(data["num_tasks"], data["accuracy_matrix"])


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())
