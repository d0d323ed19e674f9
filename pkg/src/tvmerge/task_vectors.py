"""Task vectors, the trim / elect-sign / disjoint-merge operator, and merging."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CoefficientArityMismatch, InvalidArgument, InvalidFraction, NonFinite
from .params import ParamSet, validate_aligned

RAW = "raw"
PHI = "phi"
TASK_WISE = "task_wise"
LAYER_WISE = "layer_wise"

DEFAULT_LAMBDA = 0.3
DEFAULT_KEEP_FRACTION = 0.2


@dataclass(frozen=True)
class TaskVector:
    delta: ParamSet
    source_task: str = ""
    processed: str = RAW

    def to_paramset(self) -> ParamSet:
        meta = dict(self.delta.meta, processed=self.processed, source_task=self.source_task)
        return self.delta.with_arrays([e.data for e in self.delta], meta)

    @classmethod
    def from_paramset(cls, p: ParamSet) -> "TaskVector":
        processed = p.meta.get("processed", RAW)
        if processed not in (RAW, PHI):
            raise InvalidArgument(f"unknown processed flag {processed!r}")
        return cls(p, p.meta.get("source_task", ""), processed)


@dataclass(frozen=True)
class MergeCoefficients:
    """Task-wise ``(K,)`` or layer-wise ``(K, L)`` merging coefficients.

    Values are unconstrained reals.
    """

    mode: str
    values: np.ndarray
    task_ids: tuple[str, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "task_ids", tuple(self.task_ids))
        if self.mode == TASK_WISE:
            ok = values.ndim == 1
        elif self.mode == LAYER_WISE:
            ok = values.ndim == 2 and values.shape[1] >= 1
        else:
            raise InvalidArgument(f"unknown coefficient mode {self.mode!r}")
        if not ok or values.shape[0] < 1 or values.shape[0] != len(self.task_ids):
            raise CoefficientArityMismatch(
                f"{self.mode} coefficients of shape {values.shape} for {len(self.task_ids)} tasks"
            )
        if not np.all(np.isfinite(values)):
            raise NonFinite("merging coefficients must be finite")

    @property
    def k(self) -> int:
        return self.values.shape[0]

    @classmethod
    def constant(cls, mode: str, task_ids: Sequence[str], value: float, layers: int = 1) -> "MergeCoefficients":
        shape = (len(task_ids),) if mode == TASK_WISE else (len(task_ids), layers)
        return cls(mode, np.full(shape, float(value)), tuple(task_ids))

    def as_matrix(self, layers: int) -> np.ndarray:
        """Broadcast to a ``(K, layers)`` matrix."""
        if self.mode == TASK_WISE:
            return np.repeat(self.values[:, None], layers, axis=1)
        if self.values.shape[1] != layers:
            raise CoefficientArityMismatch(f"{self.values.shape[1]} coefficient columns for {layers} layers")
        return self.values

    def replace(self, values: np.ndarray) -> "MergeCoefficients":
        return MergeCoefficients(self.mode, values, self.task_ids)


def make_task_vector(theta_k: ParamSet, theta_pre: ParamSet, source_task: str = "") -> TaskVector:
    """``theta_k - theta_pre`` in float64 (exact for float32 inputs)."""
    validate_aligned([theta_pre, theta_k])
    arrays = [a.data.astype(np.float64) - b.data.astype(np.float64) for a, b in zip(theta_k.entries, theta_pre.entries)]
    return TaskVector(theta_pre.with_arrays(arrays, meta={}), source_task, RAW)


def trim_count(keep_fraction: float, size: int) -> int:
    if not 0.0 < keep_fraction <= 1.0:
        raise InvalidFraction(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    # round first so that e.g. 0.7 * 10 keeps 7, not 8
    return min(size, max(1, math.ceil(round(keep_fraction * size, 9))))


def phi(vectors: Sequence[TaskVector], keep_fraction: float = DEFAULT_KEEP_FRACTION) -> list[TaskVector]:
    """Trim, elect sign, and disjoint-merge a list of raw task vectors.

    Returns one processed vector per input; their sum is, coordinate-wise, the
    mean of the trimmed values whose sign agrees with the elected sign.
    """
    if not vectors:
        raise InvalidArgument("phi needs at least one task vector")
    if any(v.processed != RAW for v in vectors):
        raise InvalidArgument("phi expects raw task vectors")
    validate_aligned([v.delta for v in vectors])
    flats = np.stack([v.delta.flat() for v in vectors])
    size = flats.shape[1]
    keep = trim_count(keep_fraction, size)

    trimmed = np.zeros_like(flats)
    for k, row in enumerate(flats):
        # stable sort: equal magnitudes keep the lower flat index first
        top = np.argsort(-np.abs(row), kind="stable")[:keep]
        trimmed[k, top] = row[top]

    total = trimmed[0].copy()
    for row in trimmed[1:]:
        total += row
    elected = np.sign(total)
    agree = (np.sign(trimmed) == elected) & (elected != 0)
    counts = agree.sum(axis=0)

    out = []
    for k, v in enumerate(vectors):
        share = np.zeros(size)
        np.divide(trimmed[k], counts, out=share, where=agree[k])
        out.append(TaskVector(v.delta.unflatten(share, np.float64), v.source_task, PHI))
    return out


def compose_arrays(theta_pre: ParamSet, vectors: Sequence[TaskVector], coeff_matrix: np.ndarray) -> list[np.ndarray]:
    """float64 merged tensors ``pre^l + sum_k c[k, l] * T_k^l`` in entry order.

    Accumulation runs over tasks in list order for every coordinate.
    """
    layers = theta_pre.layer_count
    if coeff_matrix.shape != (len(vectors), layers):
        raise CoefficientArityMismatch(f"coefficients {coeff_matrix.shape} for {len(vectors)} vectors x {layers} layers")
    out = []
    for i, e in enumerate(theta_pre.entries):
        acc = e.data.astype(np.float64)
        for k, v in enumerate(vectors):
            acc = acc + coeff_matrix[k, e.layer_index] * v.delta.entries[i].data
        out.append(acc)
    return out


def compose(theta_pre: ParamSet, vectors: Sequence[TaskVector], coeffs: MergeCoefficients) -> ParamSet:
    """Merged model in ``theta_pre``'s dtype. Task-wise coefficients are broadcast over layers."""
    if not vectors:
        raise InvalidArgument("compose needs at least one task vector")
    validate_aligned([theta_pre] + [v.delta for v in vectors])
    if coeffs.k != len(vectors):
        raise CoefficientArityMismatch(f"{coeffs.k} coefficients for {len(vectors)} task vectors")
    merged = compose_arrays(theta_pre, vectors, coeffs.as_matrix(theta_pre.layer_count))
    for e, a in zip(theta_pre.entries, merged):
        if not np.all(np.isfinite(a)):
            raise NonFinite(f"{e.name}: merged weights contain NaN or Inf")
    return theta_pre.with_arrays([a.astype(e.data.dtype) for e, a in zip(theta_pre.entries, merged)])


def fixed_task_arithmetic(theta_pre: ParamSet, vectors: Sequence[TaskVector], lam: float = DEFAULT_LAMBDA) -> ParamSet:
    ids = [v.source_task or str(i) for i, v in enumerate(vectors)]
    return compose(theta_pre, vectors, MergeCoefficients.constant(TASK_WISE, ids, lam))


def weight_average(theta_pre: ParamSet, vectors: Sequence[TaskVector]) -> ParamSet:
    return fixed_task_arithmetic(theta_pre, vectors, 1.0 / len(vectors))
