"""Accuracy matrix, OP/BWT, and run-report serialization."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

REPORT_FORMAT = "kifusion-report"
REPORT_VERSION = 1


class ReportError(ValueError):
    pass


class ReportChecksumError(ReportError):
    pass


class AccuracyMatrix:
    """``a[i, j]``: test accuracy on task i after training task j.

    Only cells with ``j >= i`` are ever filled; the rest stay undefined
    (stored as NaN, serialized as ``null``).
    """

    def __init__(self, k: int, cells=None):
        if k < 1:
            raise ValueError("matrix needs at least one task")
        self.k = k
        self.cells = np.full((k, k), np.nan) if cells is None else np.array(cells, dtype=np.float64)
        if self.cells.shape != (k, k):
            raise ValueError("cells must be K x K")

    def set(self, i: int, j: int, acc: float) -> None:
        if j < i:
            raise ValueError(f"cell ({i}, {j}) lies below the diagonal")
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"accuracy {acc} outside [0, 1]")
        self.cells[i, j] = acc

    def defined(self, i: int, j: int) -> bool:
        return not math.isnan(self.cells[i, j])

    @property
    def final_column(self) -> np.ndarray:
        return self.cells[:, -1].copy()

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.cells).copy()

    def to_lists(self) -> list[list[float | None]]:
        return [[None if math.isnan(v) else float(v) for v in row] for row in self.cells]

    @classmethod
    def from_lists(cls, rows) -> "AccuracyMatrix":
        return cls(len(rows), [[np.nan if v is None else v for v in row] for row in rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for row in self.to_lists():
            w.writerow(["null" if v is None else repr(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyMatrix":
        rows = [[None if v == "null" else float(v) for v in row] for row in csv.reader(io.StringIO(text)) if row]
        return cls.from_lists(rows)

    def render(self, percent: bool = True) -> str:
        lines = ["task " + " ".join(f"{'after ' + str(j + 1):>9}" for j in range(self.k))]
        for i, row in enumerate(self.to_lists()):
            cells = ["—" if v is None else (f"{100 * v:.1f}" if percent else f"{v:.4f}") for v in row]
            lines.append(f"{i + 1:>4} " + " ".join(f"{c:>9}" for c in cells))
        return "\n".join(lines)

    def __eq__(self, other) -> bool:
        return isinstance(other, AccuracyMatrix) and np.array_equal(self.cells, other.cells, equal_nan=True)


def _exact_mean(values) -> float:
    # summed as rationals, so the result is the correctly rounded mean of the stored floats
    return float(sum(map(Fraction, values), Fraction(0)) / len(values))


def overall_performance(m: AccuracyMatrix) -> float:
    """OP: mean accuracy over all tasks after the last one."""
    col = m.final_column
    if np.any(np.isnan(col)):
        raise ValueError("final column has undefined cells")
    return _exact_mean(col.tolist())


def backward_transfer(m: AccuracyMatrix) -> float:
    """BWT: mean of ``a[i, K] - a[i, i]`` over ``i < K``; negative means forgetting."""
    if m.k < 2:
        raise ValueError("backward transfer needs at least two tasks")
    final, diag = m.cells[:-1, -1], np.diag(m.cells)[:-1]
    if np.any(np.isnan(final)) or np.any(np.isnan(diag)):
        raise ValueError("diagonal or final column has undefined cells")
    diffs = [Fraction(a) - Fraction(b) for a, b in zip(final.tolist(), diag.tolist())]
    return float(sum(diffs, Fraction(0)) / len(diffs))


@dataclass
class RunReport:
    config: dict
    seed: int
    matrix: AccuracyMatrix
    op: float
    bwt: float
    bwt_defined: bool
    label: str = ""
    stream: dict = field(default_factory=dict)
    order_id: str = ""
    order: list = field(default_factory=list)
    update_counter: int = 0
    steps_per_task: list = field(default_factory=list)
    fusions_per_task: list = field(default_factory=list)
    cycle_log: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    backend: str = ""
    aborted: str | None = None

    @classmethod
    def from_matrix(cls, matrix: AccuracyMatrix, **kw) -> "RunReport":
        complete = not np.any(np.isnan(matrix.final_column))
        op = overall_performance(matrix) if complete else float("nan")
        bwt_defined = matrix.k >= 2 and complete
        bwt = backward_transfer(matrix) if bwt_defined else 0.0
        return cls(matrix=matrix, op=op, bwt=bwt, bwt_defined=bwt_defined, **kw)

    def to_payload(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["matrix"] = self.matrix.to_lists()
        d["op"] = None if math.isnan(self.op) else self.op
        return d

    @classmethod
    def from_payload(cls, d: dict) -> "RunReport":
        d = dict(d)
        d["matrix"] = AccuracyMatrix.from_lists(d["matrix"])
        d["op"] = float("nan") if d["op"] is None else d["op"]
        return cls(**d)

    def snapshot_cycles(self) -> list[int]:
        return [s["cycle"] for s in self.snapshots]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RunReport):
            return NotImplemented
        return _canonical(self.to_payload()) == _canonical(other.to_payload())


def _canonical(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text)
    tmp.replace(path)


def write_report(report: RunReport, path, matrix_csv: bool = True) -> None:
    """Write ``report`` as versioned, checksummed JSON.

    The accuracy matrix also goes to ``<stem>.matrix.csv`` next to it.
    """
    path = Path(path)
    payload = report.to_payload()
    doc = {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "sha256": hashlib.sha256(_canonical(payload).encode()).hexdigest(),
        "payload": payload,
    }
    _atomic_write(path, json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n")
    if matrix_csv:
        _atomic_write(matrix_csv_path(path), report.matrix.to_csv())


def matrix_csv_path(report_path) -> Path:
    p = Path(report_path)
    return p.with_name(p.stem + ".matrix.csv")


def read_report(path) -> RunReport:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ReportChecksumError(f"{path}: truncated or corrupt report ({exc.msg})") from None
    if not isinstance(doc, dict) or doc.get("format") != REPORT_FORMAT:
        raise ReportError(f"{path}: not a run report")
    if doc.get("version") != REPORT_VERSION:
        raise ReportError(f"{path}: report version {doc.get('version')} unsupported (expected {REPORT_VERSION})")
    payload = doc.get("payload")
    digest = hashlib.sha256(_canonical(payload).encode()).hexdigest()
    if digest != doc.get("sha256"):
        raise ReportChecksumError(f"{path}: checksum mismatch")
    report = RunReport.from_payload(payload)
    if report.bwt_defined:
        if abs(backward_transfer(report.matrix) - report.bwt) > 1e-12 or abs(overall_performance(report.matrix) - report.op) > 1e-12:
            raise ReportError(f"{path}: stored OP/BWT disagree with the matrix")
    return report


@dataclass
class ComparisonRow:
    label: str
    runs: int
    op_mean: float
    op_std: float
    bwt_mean: float
    bwt_std: float


def compare_runs(reports: Sequence[RunReport]) -> list[ComparisonRow]:
    """Mean and (population) std of OP/BWT per label, best OP first."""
    if not reports:
        raise ValueError("nothing to compare")
    ref = reports[0].stream
    for r in reports[1:]:
        if r.stream != ref:
            raise ValueError(f"run {r.label!r} (seed {r.seed}) used a different task stream")
    groups: dict[str, list[RunReport]] = {}
    for r in reports:
        groups.setdefault(r.label, []).append(r)
    rows = []
    for label, rs in groups.items():
        ops = np.array([r.op for r in rs])
        bwts = np.array([r.bwt for r in rs])
        rows.append(ComparisonRow(label, len(rs), float(ops.mean()), float(ops.std()), float(bwts.mean()), float(bwts.std())))
    rows.sort(key=lambda row: -row.op_mean)
    return rows


def format_comparison(rows: Sequence[ComparisonRow]) -> str:
    width = max(len("method"), *(len(r.label) for r in rows))
    out = [f"{'method':<{width}}  runs       OP (%)          BWT (%)"]
    for r in rows:
        out.append(
            f"{r.label:<{width}}  {r.runs:>4}  {100 * r.op_mean:6.2f} ± {100 * r.op_std:5.2f}"
            f"  {100 * r.bwt_mean:7.2f} ± {100 * r.bwt_std:5.2f}"
        )
    return "\n".join(out)


def comparison_csv(rows: Sequence[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "runs", "op_mean", "op_std", "bwt_mean", "bwt_std"])
    for r in rows:
        w.writerow([r.label, r.runs, repr(r.op_mean), repr(r.op_std), repr(r.bwt_mean), repr(r.bwt_std)])
    return buf.getvalue()
