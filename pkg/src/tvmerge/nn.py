"""A small ReLU MLP classifier with hand-written reverse mode.

Weights live in a :class:`ParamSet` as ``layer{l}.weight`` (out x in) and
``layer{l}.bias`` (out,), both in layer ``l``. All arithmetic runs in float64.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, InvalidDistribution, NonFinite, ShapeMismatch
from .params import ParamSet
from .task_vectors import MergeCoefficients, TaskVector, compose_arrays

# entropies and losses are in nats
LOG = np.log


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if len(self.layer_dims) < 2 or any(d < 1 for d in self.layer_dims):
            raise InvalidArgument(f"layer_dims must hold >= 2 positive sizes, got {self.layer_dims}")
        if self.activation != "relu":
            raise InvalidArgument(f"unsupported activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def class_count(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    def arch(self) -> str:
        return "mlp:" + "-".join(map(str, self.layer_dims))

    @classmethod
    def from_arch(cls, arch: str) -> "MlpSpec":
        kind, _, dims = arch.partition(":")
        if kind != "mlp" or not dims:
            raise InvalidArgument(f"not an mlp architecture id: {arch!r}")
        return cls(tuple(int(d) for d in dims.split("-")))

    @classmethod
    def from_params(cls, theta: ParamSet) -> "MlpSpec":
        if "arch" not in theta.meta:
            raise InvalidArgument("checkpoint has no 'arch' meta entry")
        return cls.from_arch(theta.meta["arch"])


def weight_name(layer: int) -> str:
    return f"layer{layer}.weight"


def bias_name(layer: int) -> str:
    return f"layer{layer}.bias"


def init_params(spec: MlpSpec, seed: int, meta: dict | None = None) -> ParamSet:
    """He-normal weights, zero biases, float32."""
    rng = np.random.default_rng(seed)
    entries = []
    for l, (fan_in, fan_out) in enumerate(zip(spec.layer_dims[:-1], spec.layer_dims[1:])):
        w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        entries.append((weight_name(l), l, w.astype(np.float32)))
        entries.append((bias_name(l), l, np.zeros(fan_out, np.float32)))
    return ParamSet(entries, {"arch": spec.arch(), "seed": str(seed), **(meta or {})})


def _weights(spec: MlpSpec, theta) -> list[tuple[np.ndarray, np.ndarray]]:
    """Accepts a ParamSet or a list of arrays in entry order."""
    arrays = [e.data for e in theta] if isinstance(theta, ParamSet) else list(theta)
    if len(arrays) != 2 * spec.num_layers:
        raise ShapeMismatch(f"expected {2 * spec.num_layers} tensors for {spec.arch()}, got {len(arrays)}")
    out = []
    for l, (fan_in, fan_out) in enumerate(zip(spec.layer_dims[:-1], spec.layer_dims[1:])):
        w, b = arrays[2 * l], arrays[2 * l + 1]
        if w.shape != (fan_out, fan_in) or b.shape != (fan_out,):
            raise ShapeMismatch(f"layer {l}: got {w.shape}/{b.shape}, expected {(fan_out, fan_in)}/{(fan_out,)}")
        out.append((np.asarray(w, np.float64), np.asarray(b, np.float64)))
    return out


@dataclass
class ForwardTape:
    inputs: list[np.ndarray]  # input to each layer (x, then post-relu activations)
    pre_activations: list[np.ndarray]
    logits: np.ndarray
    log_probs: np.ndarray
    probs: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - LOG(np.exp(shifted).sum(axis=-1, keepdims=True))


def forward(spec: MlpSpec, theta, batch: np.ndarray) -> ForwardTape:
    x = np.asarray(batch, np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeMismatch(f"batch shape {x.shape}, expected (B, {spec.input_dim})")
    layers = _weights(spec, theta)
    inputs, pres = [], []
    h = x
    for l, (w, b) in enumerate(layers):
        inputs.append(h)
        z = h @ w.T + b
        pres.append(z)
        h = np.maximum(z, 0.0) if l < len(layers) - 1 else z
    logp = log_softmax(h)
    return ForwardTape(inputs, pres, h, logp, np.exp(logp))


def _check_distribution(p: np.ndarray) -> None:
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-4):
        raise InvalidDistribution("probabilities must be non-negative and sum to 1")


def entropy(p_row) -> float:
    """Shannon entropy of one probability vector, with 0 log 0 = 0."""
    p = np.asarray(p_row, np.float64)
    _check_distribution(p)
    nz = p > 0
    return float(-(p[nz] * LOG(p[nz])).sum())


def entropy_grad_logits(p_row) -> np.ndarray:
    """d entropy / d logits for ``p = softmax(z)``: ``-p_j (log p_j + H)``."""
    p = np.asarray(p_row, np.float64)
    h = entropy(p)
    logp = np.where(p > 0, LOG(np.where(p > 0, p, 1.0)), 0.0)
    return -p * (logp + h)


def row_entropies(tape: ForwardTape) -> np.ndarray:
    return -(tape.probs * tape.log_probs).sum(axis=1)


def entropy_upstream(tape: ForwardTape) -> np.ndarray:
    """Per-row d entropy / d logits, computed from log-probabilities."""
    h = row_entropies(tape)
    return -tape.probs * (tape.log_probs + h[:, None])


def cross_entropy(tape: ForwardTape, labels: np.ndarray) -> np.ndarray:
    return -tape.log_probs[np.arange(tape.batch_size), labels]


def backward_params(spec: MlpSpec, theta, tape: ForwardTape, upstream: np.ndarray) -> list[np.ndarray]:
    """Gradient of ``mean_i <upstream_i, logits_i>`` w.r.t. every tensor, in entry order."""
    layers = _weights(spec, theta)
    g = np.asarray(upstream, np.float64)
    if g.shape != tape.logits.shape:
        raise ShapeMismatch(f"upstream shape {g.shape} != logits shape {tape.logits.shape}")
    g = g / tape.batch_size
    grads: list[np.ndarray] = [None] * (2 * len(layers))
    for l in range(len(layers) - 1, -1, -1):
        w, _ = layers[l]
        grads[2 * l] = g.T @ tape.inputs[l]
        grads[2 * l + 1] = g.sum(axis=0)
        if l > 0:
            g = (g @ w) * (tape.pre_activations[l - 1] > 0)
    return grads


def backward_paramset(spec: MlpSpec, theta: ParamSet, tape: ForwardTape, upstream: np.ndarray) -> ParamSet:
    return theta.with_arrays(backward_params(spec, theta, tape, upstream), meta={})


@dataclass(frozen=True)
class CoeffGradient:
    values: np.ndarray  # (K,) or (K, L)
    objective_value: float


def _chunk_terms(spec: MlpSpec, weights: list[np.ndarray], batch: np.ndarray):
    tape = forward(spec, weights, batch)
    grads = backward_params(spec, weights, tape, entropy_upstream(tape))
    return float(row_entropies(tape).mean()), grads


def coeff_gradient(
    spec: MlpSpec,
    theta_pre: ParamSet,
    vectors: Sequence[TaskVector],
    coeffs: MergeCoefficients,
    batch,
    threads: int = 1,
) -> CoeffGradient:
    """Mean prediction entropy of the merged model and its gradient w.r.t. the coefficients.

    ``batch`` is one ``(B, d)`` matrix or a list of chunks; chunk results are
    combined in list order weighted by size, so the result does not depend on
    ``threads``.
    """
    chunks = [np.asarray(batch)] if isinstance(batch, np.ndarray) else [np.asarray(c) for c in batch]
    if not chunks or any(c.shape[0] == 0 for c in chunks):
        raise InvalidArgument("coeff_gradient needs a non-empty batch")
    layers = theta_pre.layer_count
    matrix = coeffs.as_matrix(layers)
    weights = compose_arrays(theta_pre, vectors, matrix)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda c: _chunk_terms(spec, weights, c), chunks))
    else:
        results = [_chunk_terms(spec, weights, c) for c in chunks]

    total = sum(c.shape[0] for c in chunks)
    objective = 0.0
    grads = [np.zeros_like(w) for w in weights]
    for c, (h, g) in zip(chunks, results):
        share = c.shape[0] / total
        objective += share * h
        for acc, part in zip(grads, g):
            acc += share * part

    layer_of = [e.layer_index for e in theta_pre.entries]
    by_layer = np.zeros((len(vectors), layers))
    for k, v in enumerate(vectors):
        for i, e in enumerate(v.delta.entries):
            by_layer[k, layer_of[i]] += float(np.dot(grads[i].ravel(), e.data.ravel()))
    values = by_layer if coeffs.mode == "layer_wise" else by_layer.sum(axis=1)
    if not (np.isfinite(objective) and np.all(np.isfinite(values))):
        raise NonFinite("entropy or its gradient is not finite")
    return CoeffGradient(values, objective)


def merged_entropy(spec: MlpSpec, theta_pre: ParamSet, vectors, coeffs: MergeCoefficients, batch) -> float:
    """Objective only, on the same float64 path as :func:`coeff_gradient`."""
    weights = compose_arrays(theta_pre, vectors, coeffs.as_matrix(theta_pre.layer_count))
    return float(row_entropies(forward(spec, weights, batch)).mean())
