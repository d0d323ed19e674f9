"""Accuracy evaluation, entropy/loss diagnostics and report files.

Report schemas (floats as 9 significant digits unless noted):

* ``eval.json``: ``{"model_tag", "avg_acc", "tasks": [{"task_id", "accuracy",
  "n_samples"}], "spearman": {task_id | "ALL": rho}}``; ``spearman`` only when a
  correlation report is given.
* ``correlation.csv``: ``bin_lower,bin_upper,count,mean_loss``; ``mean_loss`` is
  empty for an empty bin.
* ``coeffs.csv``: ``task_id,layer_index,coeff``; ``layer_index`` is -1 for
  task-wise coefficients. Coefficients use the shortest round-trip repr so the
  file reconstructs them exactly.
* ``trajectory.csv``: ``step,task_id,layer_index,coeff,mean_entropy``.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .adamerge import Trajectory
from .data import TaskBundle
from .errors import Empty, LengthMismatch
from .nn import MlpSpec, cross_entropy, forward, row_entropies
from .task_vectors import LAYER_WISE, TASK_WISE, MergeCoefficients

BIN_EDGES = tuple(round(0.1 * i, 1) for i in range(11)) + (float("inf"),)


def fmt(x: float) -> str:
    return f"{x:.9g}"


@dataclass
class EvalReport:
    per_task: dict[str, float]
    n_samples: dict[str, int]
    model_tag: str = ""

    @property
    def avg_acc(self) -> float:
        return float(np.mean(list(self.per_task.values())))


@dataclass
class CorrelationReport:
    per_task: dict[str, float]
    pooled: float
    bin_edges: tuple[float, ...] = BIN_EDGES
    bin_counts: list[int] = field(default_factory=list)
    bin_mean_loss: list[float] = field(default_factory=list)
    zero_variance: list[str] = field(default_factory=list)


def predict(spec: MlpSpec, theta, features: np.ndarray) -> np.ndarray:
    # np.argmax returns the lowest index among ties
    return np.argmax(forward(spec, theta, features).logits, axis=1)


def evaluate(spec: MlpSpec, theta, bundles: Sequence[TaskBundle], model_tag: str = "") -> EvalReport:
    per_task, counts = {}, {}
    for b in bundles:
        per_task[b.task_id] = float(np.mean(predict(spec, theta, b.test_x) == b.test_y))
        counts[b.task_id] = int(len(b.test_y))
    return EvalReport(per_task, counts, model_tag)


def _spearman(x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0:
        return 0.0, True
    return float(np.clip((rx * ry).sum() / denom, -1.0, 1.0)), False


def spearman(x, y) -> float:
    """Pearson correlation of average ranks; 0.0 (with a warning) if either side is constant."""
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(f"spearman needs two equal-length vectors, got {x.shape} and {y.shape}")
    if x.size == 0:
        raise Empty("spearman of empty input")
    rho, degenerate = _spearman(x, y)
    if degenerate:
        warnings.warn("spearman: zero variance input, returning 0", RuntimeWarning, stacklevel=2)
    return rho


def bin_by_entropy(entropies: np.ndarray, losses: np.ndarray, edges=BIN_EDGES) -> tuple[list[int], list[float]]:
    """Intervals ``(e_i, e_{i+1}]``; the first also takes entropy exactly 0."""
    idx = np.searchsorted(np.asarray(edges[1:-1]), entropies, side="left")
    counts, means = [], []
    for b in range(len(edges) - 1):
        sel = idx == b
        counts.append(int(sel.sum()))
        means.append(float(losses[sel].mean()) if sel.any() else float("nan"))
    return counts, means


def entropy_loss_correlation(spec: MlpSpec, theta, bundles: Sequence[TaskBundle]) -> CorrelationReport:
    all_h, all_l, per_task, flat = [], [], {}, []
    for b in bundles:
        tape = forward(spec, theta, b.test_x)
        h, l = row_entropies(tape), cross_entropy(tape, b.test_y)
        rho, degenerate = _spearman(h, l)
        per_task[b.task_id] = rho
        if degenerate:
            flat.append(b.task_id)
        all_h.append(h)
        all_l.append(l)
    h, l = np.concatenate(all_h), np.concatenate(all_l)
    pooled, degenerate = _spearman(h, l)
    if degenerate:
        flat.append("ALL")
    if flat:
        warnings.warn(f"spearman: zero variance for {flat}, reported as 0", RuntimeWarning, stacklevel=2)
    counts, means = bin_by_entropy(h, l)
    return CorrelationReport(per_task, pooled, BIN_EDGES, counts, means, flat)


def coefficient_rows(coeffs: np.ndarray, mode: str, task_ids: Sequence[str]):
    if mode == TASK_WISE:
        for tid, c in zip(task_ids, coeffs):
            yield tid, -1, float(c)
    else:
        for tid, row in zip(task_ids, coeffs):
            for l, c in enumerate(row):
                yield tid, l, float(c)


def emit_reports(
    out_dir: str | Path,
    eval_report: EvalReport | None = None,
    correlation: CorrelationReport | None = None,
    trajectory: Trajectory | None = None,
    coeffs: MergeCoefficients | None = None,
) -> list[Path]:
    """Write whichever of eval.json, correlation.csv, trajectory.csv, coeffs.csv apply."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if eval_report is not None:
        doc = {
            "model_tag": eval_report.model_tag,
            "avg_acc": float(fmt(eval_report.avg_acc)),
            "tasks": [
                {"task_id": t, "accuracy": float(fmt(a)), "n_samples": eval_report.n_samples[t]}
                for t, a in eval_report.per_task.items()
            ],
        }
        if correlation is not None:
            doc["spearman"] = {**{t: float(fmt(r)) for t, r in correlation.per_task.items()},
                               "ALL": float(fmt(correlation.pooled))}
        path = out / "eval.json"
        path.write_text(json.dumps(doc, indent=2) + "\n")
        written.append(path)
    if correlation is not None:
        path = out / "correlation.csv"
        with path.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["bin_lower", "bin_upper", "count", "mean_loss"])
            edges = correlation.bin_edges
            for i, (n, m) in enumerate(zip(correlation.bin_counts, correlation.bin_mean_loss)):
                w.writerow([fmt(edges[i]), fmt(edges[i + 1]), n, "" if n == 0 else fmt(m)])
        written.append(path)
    if trajectory is not None:
        path = out / "trajectory.csv"
        with path.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "task_id", "layer_index", "coeff", "mean_entropy"])
            for p in trajectory.points:
                for tid, l, c in coefficient_rows(p.coeffs, trajectory.mode, trajectory.task_ids):
                    w.writerow([p.step, tid, l, fmt(c), fmt(p.mean_entropy)])
        written.append(path)
    if coeffs is not None:
        path = out / "coeffs.csv"
        with path.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["task_id", "layer_index", "coeff"])
            for tid, l, c in coefficient_rows(coeffs.values, coeffs.mode, coeffs.task_ids):
                w.writerow([tid, l, repr(c)])
        written.append(path)
    return written


def read_coeffs_csv(path: str | Path) -> MergeCoefficients:
    with Path(path).open(newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise Empty(f"{path} has no coefficient rows")
    task_ids = list(dict.fromkeys(r["task_id"] for r in rows))
    if all(int(r["layer_index"]) == -1 for r in rows):
        values = {r["task_id"]: float(r["coeff"]) for r in rows}
        return MergeCoefficients(TASK_WISE, np.array([values[t] for t in task_ids]), tuple(task_ids))
    layers = max(int(r["layer_index"]) for r in rows) + 1
    matrix = np.full((len(task_ids), layers), np.nan)
    for r in rows:
        matrix[task_ids.index(r["task_id"]), int(r["layer_index"])] = float(r["coeff"])
    return MergeCoefficients(LAYER_WISE, matrix, tuple(task_ids))
