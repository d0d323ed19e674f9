"""Unsupervised learning of merging coefficients by entropy minimization."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DivergedAtStep, EmptyPool, InvalidArgument, NonFinite
from .nn import MlpSpec, coeff_gradient
from .params import ParamSet, validate_aligned
from .task_vectors import (
    LAYER_WISE,
    TASK_WISE,
    MergeCoefficients,
    TaskVector,
    compose,
    make_task_vector,
    phi,
)

log = logging.getLogger(__name__)

PLAIN = "plain"
PLUS_PLUS = "plus_plus"


@dataclass
class AdaMergeConfig:
    mode: str = LAYER_WISE
    variant: str = PLAIN
    init_coeff: float = 0.3
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    steps: int = 500
    seed: int = 0
    phi_keep_fraction: float = 0.2
    log_every: int = 10
    threads: int = 1

    def __post_init__(self):
        if self.mode not in (TASK_WISE, LAYER_WISE):
            raise InvalidArgument(f"mode must be task_wise or layer_wise, got {self.mode!r}")
        if self.variant not in (PLAIN, PLUS_PLUS):
            raise InvalidArgument(f"variant must be plain or plus_plus, got {self.variant!r}")
        if not self.learning_rate > 0:
            raise InvalidArgument("learning_rate must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise InvalidArgument("adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.steps < 0 or self.log_every < 1 or self.threads < 1:
            raise InvalidArgument("batch_size, log_every and threads must be >= 1; steps >= 0")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, shape) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adam_step(
    state: AdamState, coeffs: MergeCoefficients, grad: np.ndarray, config: AdaMergeConfig
) -> tuple[AdamState, MergeCoefficients]:
    g = np.asarray(grad, np.float64)
    if g.shape != coeffs.values.shape or state.m.shape != g.shape:
        raise InvalidArgument(f"gradient shape {g.shape} does not match coefficients {coeffs.values.shape}")
    if not np.all(np.isfinite(g)):
        raise NonFinite("non-finite gradient passed to adam_step")
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new = coeffs.values - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    if not np.all(np.isfinite(new)):
        raise NonFinite("adam update produced non-finite coefficients")
    return AdamState(m, v, t), coeffs.replace(new)


@dataclass(frozen=True)
class TrajectoryPoint:
    step: int
    coeffs: np.ndarray
    mean_entropy: float
    wall_ms: float


@dataclass
class Trajectory:
    mode: str
    task_ids: tuple[str, ...]
    points: list[TrajectoryPoint] = field(default_factory=list)

    def append(self, point: TrajectoryPoint) -> None:
        if self.points and point.step <= self.points[-1].step:
            raise InvalidArgument("trajectory steps must increase")
        self.points.append(point)

    def __len__(self) -> int:
        return len(self.points)


def sample_batches(
    pools: Mapping[str, np.ndarray], batch_size: int, rng: np.random.Generator
) -> list[tuple[str, np.ndarray]]:
    """One batch per task: without replacement when the pool is big enough."""
    out = []
    for task_id, pool in pools.items():
        n = len(pool)
        if n == 0:
            raise EmptyPool(f"unlabeled pool for task {task_id!r} is empty")
        idx = rng.choice(n, size=batch_size, replace=n < batch_size)
        out.append((task_id, np.asarray(pool)[idx]))
    return out


@dataclass
class AdaMergeResult:
    coeffs: MergeCoefficients
    trajectory: Trajectory
    merged: ParamSet
    vectors: list[TaskVector]


def build_vectors(
    theta_pre: ParamSet, finetuned: Sequence[ParamSet], task_ids: Sequence[str], variant: str, keep_fraction: float
) -> list[TaskVector]:
    vectors = [make_task_vector(ft, theta_pre, tid) for ft, tid in zip(finetuned, task_ids)]
    return phi(vectors, keep_fraction) if variant == PLUS_PLUS else vectors


def adamerge_run(
    config: AdaMergeConfig,
    theta_pre: ParamSet,
    finetuned: Sequence[ParamSet],
    unlabeled: Mapping[str, np.ndarray],
    spec: MlpSpec | None = None,
    task_ids: Sequence[str] | None = None,
) -> AdaMergeResult:
    """Learn task-wise or layer-wise coefficients on unlabeled pools.

    Each step draws ``batch_size`` samples from every pool and takes one Adam
    step on the mean entropy of the concatenated batch. The trajectory records
    the coefficients in force and the batch objective every ``log_every``
    steps, plus a final point at ``steps`` when it falls on the grid.
    """
    if not finetuned:
        raise InvalidArgument("need at least one fine-tuned model")
    if not unlabeled:
        raise EmptyPool("no unlabeled pools given")
    for tid, pool in unlabeled.items():
        if len(pool) == 0:
            raise EmptyPool(f"unlabeled pool for task {tid!r} is empty")
    validate_aligned([theta_pre, *finetuned])
    spec = spec or MlpSpec.from_params(theta_pre)
    if task_ids is None:
        task_ids = [ft.meta.get("task_id", str(i)) for i, ft in enumerate(finetuned)]
    task_ids = tuple(task_ids)

    vectors = build_vectors(theta_pre, finetuned, task_ids, config.variant, config.phi_keep_fraction)
    coeffs = MergeCoefficients.constant(config.mode, task_ids, config.init_coeff, theta_pre.layer_count)
    state = AdamState.fresh(coeffs.values.shape)
    trajectory = Trajectory(config.mode, task_ids)
    rng = np.random.default_rng(config.seed)
    started = time.perf_counter()

    def objective(step: int):
        batches = [b for _, b in sample_batches(unlabeled, config.batch_size, rng)]
        try:
            return coeff_gradient(spec, theta_pre, vectors, coeffs, batches, threads=config.threads)
        except NonFinite:
            raise DivergedAtStep(step) from None

    def record(step: int, value: float):
        ms = (time.perf_counter() - started) * 1000.0
        trajectory.append(TrajectoryPoint(step, coeffs.values.copy(), value, ms))

    for step in range(config.steps):
        grad = objective(step)
        if step % config.log_every == 0:
            record(step, grad.objective_value)
            log.info("step %d mean entropy %.6f", step, grad.objective_value)
        state, coeffs = adam_step(state, coeffs, grad.values, config)

    if config.steps % config.log_every == 0:
        record(config.steps, objective(config.steps).objective_value)

    merged = compose(theta_pre, vectors, coeffs)
    scheme = f"adamerging{'++' if config.variant == PLUS_PLUS else ''}-{'task' if config.mode == TASK_WISE else 'layer'}"
    merged = merged.with_arrays([e.data for e in merged], {**theta_pre.meta, "scheme": scheme, "seed": str(config.seed)})
    return AdaMergeResult(coeffs, trajectory, merged, vectors)
