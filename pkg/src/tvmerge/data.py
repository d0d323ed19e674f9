"""Synthetic multi-task classification bundles, a reference trainer, corruptions."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter1d

from .errors import InvalidArgument
from .nn import MlpSpec, backward_params, forward
from .params import ParamSet, load_checkpoint, save_checkpoint, single_tensor

TEST_FRACTION = 0.2

# reference fixture: generator and trainer settings used by the CLI defaults
DEFAULT_SEPARATION = 7.0
DEFAULT_ROTATION = 0.9
DEFAULT_SHIFT = 6.0
DEFAULT_HIDDEN = (32, 32, 32)
DEFAULT_GRANULARITY = 2
DEFAULT_PRETRAIN_EPOCHS = 5
DEFAULT_PRETRAIN_LR = 0.05
DEFAULT_FINETUNE_EPOCHS = 2
DEFAULT_FINETUNE_LR = 0.02
REFERENCE_SEED = 5
CORRUPTIONS = ("gauss_noise", "impulse_noise", "contrast_scale", "feature_dropout", "blur_smooth")


@dataclass
class TaskBundle:
    task_id: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    seed: int = 0
    means: np.ndarray | None = None
    noise: float = 1.0
    params: dict = field(default_factory=dict)

    @property
    def unlabeled(self) -> np.ndarray:
        """Test features with labels withheld."""
        return self.test_x

    def with_test_features(self, test_x: np.ndarray) -> "TaskBundle":
        return TaskBundle(self.task_id, self.train_x, self.train_y, test_x, self.test_y,
                          self.seed, self.means, self.noise, dict(self.params))


def _rotation(dim: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal map turning every vector by ``angle`` (exactly, for even ``dim``)."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    c, s = math.cos(angle), math.sin(angle)
    block = np.eye(dim)
    for i in range(0, dim - 1, 2):
        block[i:i + 2, i:i + 2] = [[c, -s], [s, c]]
    return q @ block @ q.T


def _split(n: int, key: str) -> tuple[np.ndarray, np.ndarray]:
    digests = [hashlib.blake2b(f"{key}:{i}".encode(), digest_size=8).digest() for i in range(n)]
    order = sorted(range(n), key=lambda i: digests[i])
    n_test = max(1, round(TEST_FRACTION * n)) if n > 1 else 0
    test = np.sort(np.array(order[:n_test], dtype=np.int64))
    train = np.sort(np.array(order[n_test:], dtype=np.int64))
    return train, test


def generate_tasks(
    n_tasks: int,
    dim: int,
    classes: int,
    per_class: int,
    seed: int,
    noise: float = 1.0,
    separation: float = DEFAULT_SEPARATION,
    rotation: float = DEFAULT_ROTATION,
    shift: float = DEFAULT_SHIFT,
) -> list[TaskBundle]:
    """Gaussian-cluster tasks that share a mean grid, each under its own rotation.

    ``rotation`` (radians) sets how far each task's class means are turned away
    from the shared grid; larger angles give less related tasks. ``shift``
    moves each task's clusters by that distance along a random direction.
    """
    if min(n_tasks, dim, classes, per_class) < 1:
        raise InvalidArgument("n_tasks, dim, classes and per_class must all be >= 1")
    if noise < 0 or separation <= 0:
        raise InvalidArgument("noise must be >= 0 and separation > 0")
    rng = np.random.default_rng(seed)
    grid = rng.standard_normal((classes, dim))
    grid *= separation / np.linalg.norm(grid, axis=1, keepdims=True)
    bundles = []
    for k in range(n_tasks):
        task_rng = np.random.default_rng([seed, k])
        means = grid @ _rotation(dim, rotation, task_rng).T
        if shift:
            center = task_rng.standard_normal(dim)
            means = means + shift * center / np.linalg.norm(center)
        labels = np.repeat(np.arange(classes), per_class)
        x = means[labels] + noise * task_rng.standard_normal((labels.size, dim))
        # float32-representable so that bundles survive a save/load unchanged
        x = x.astype(np.float32).astype(np.float64)
        train, test = _split(labels.size, f"{seed}:{k}")
        bundles.append(TaskBundle(
            f"task{k}", x[train], labels[train], x[test], labels[test], seed, means, noise,
            {"dim": dim, "classes": classes, "per_class": per_class, "separation": separation,
             "rotation": rotation, "shift": shift},
        ))
    return bundles


def mixture_bundle(bundles: Sequence[TaskBundle]) -> TaskBundle:
    """All tasks' train and test splits concatenated."""
    return TaskBundle(
        "mixture",
        np.concatenate([b.train_x for b in bundles]), np.concatenate([b.train_y for b in bundles]),
        np.concatenate([b.test_x for b in bundles]), np.concatenate([b.test_y for b in bundles]),
    )


def soft_targets(labels: np.ndarray, classes: int, granularity: int = 1) -> np.ndarray:
    """Uniform mass over the group of ``granularity`` consecutive classes holding each label."""
    if granularity < 1:
        raise InvalidArgument("granularity must be >= 1")
    start = (labels // granularity) * granularity
    cols = np.arange(classes)
    mask = (cols >= start[:, None]) & (cols < np.minimum(start + granularity, classes)[:, None])
    return mask / mask.sum(axis=1, keepdims=True)


def reference_train(
    spec: MlpSpec,
    init: ParamSet,
    bundle: TaskBundle,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    granularity: int = 1,
    losses: list | None = None,
) -> ParamSet:
    """Mini-batch gradient descent on cross-entropy from ``init``.

    With ``granularity > 1`` the target spreads evenly over groups of that many
    adjacent classes, so the model learns only which group a sample is in.
    ``losses``, if given, receives the full-train-set loss before training and
    after every epoch.
    """
    if epochs < 0 or lr <= 0 or batch_size < 1:
        raise InvalidArgument("epochs must be >= 0, lr > 0, batch_size >= 1")
    weights = [e.data.astype(np.float64) for e in init]
    x, y = bundle.train_x, bundle.train_y
    if y.size and (y.min() < 0 or y.max() >= spec.class_count):
        raise InvalidArgument("labels outside the class range")
    targets = soft_targets(y, spec.class_count, granularity)
    rng = np.random.default_rng(seed)

    def full_loss():
        return float(-(targets * forward(spec, weights, x).log_probs).sum(axis=1).mean())

    if losses is not None:
        losses.append(full_loss())
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            tape = forward(spec, weights, x[idx])
            upstream = tape.probs - targets[idx]
            for w, g in zip(weights, backward_params(spec, weights, tape, upstream)):
                w -= lr * g
        if losses is not None:
            losses.append(full_loss())
    return init.with_arrays([w.astype(e.data.dtype) for w, e in zip(weights, init)])


def finetune_seed(seed: int, task_index: int) -> int:
    return seed + 1 + task_index


@dataclass
class ReferenceFixture:
    spec: MlpSpec
    bundles: list[TaskBundle]
    pretrained: ParamSet
    finetuned: list[ParamSet]

    @property
    def task_ids(self) -> list[str]:
        return [b.task_id for b in self.bundles]


def reference_fixture(
    n_tasks: int = 8, dim: int = 32, classes: int = 4, per_class: int = 200, seed: int = REFERENCE_SEED
) -> ReferenceFixture:
    """Data, pretrained and fine-tuned models, seeded like the CLI pipeline.

    Equivalent to ``gen-data --seed S``, ``pretrain --seed S`` and
    ``finetune --task task<k> --seed S+1+k`` with default options.
    """
    from .nn import init_params

    bundles = generate_tasks(n_tasks, dim, classes, per_class, seed)
    spec = MlpSpec((dim, *DEFAULT_HIDDEN, classes))
    init = init_params(spec, seed, {"role": "pretrained"})
    pre = reference_train(spec, init, mixture_bundle(bundles), DEFAULT_PRETRAIN_EPOCHS, DEFAULT_PRETRAIN_LR,
                          seed, granularity=DEFAULT_GRANULARITY)
    finetuned = []
    for k, b in enumerate(bundles):
        ft = reference_train(spec, pre, b, DEFAULT_FINETUNE_EPOCHS, DEFAULT_FINETUNE_LR, finetune_seed(seed, k))
        finetuned.append(ft.with_arrays([e.data for e in ft], {**pre.meta, "role": "finetuned", "task_id": b.task_id,
                                                                 "seed": str(finetune_seed(seed, k))}))
    return ReferenceFixture(spec, bundles, pre, finetuned)


@dataclass(frozen=True)
class CorruptionKind:
    kind: str
    severity: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise InvalidArgument(f"unknown corruption {self.kind!r}; expected one of {CORRUPTIONS}")
        if not (self.severity >= 0 and math.isfinite(self.severity)):
            raise InvalidArgument("corruption severity must be a finite non-negative number")
        if self.kind in ("impulse_noise", "feature_dropout") and self.severity > 1:
            raise InvalidArgument(f"{self.kind} severity is a probability, got {self.severity}")


def corrupt(features: np.ndarray, kind: CorruptionKind) -> np.ndarray:
    x = np.asarray(features, np.float64)
    rng = np.random.default_rng(kind.seed)
    s = kind.severity
    if kind.kind == "gauss_noise":
        out = x + s * rng.standard_normal(x.shape)
    elif kind.kind == "impulse_noise":
        hit = rng.random(x.shape) < s
        signs = np.where(rng.random(x.shape) < 0.5, -1.0, 1.0)
        out = np.where(hit, signs * np.abs(x).max(initial=0.0), x)
    elif kind.kind == "contrast_scale":
        if s == 1.0:
            return x.copy()
        mean = x.mean(axis=-1, keepdims=True)
        out = (x - mean) * s + mean
    elif kind.kind == "feature_dropout":
        out = np.where(rng.random(x.shape) < s, 0.0, x)
    else:
        window = max(1, math.ceil(s))
        out = x if window == 1 else uniform_filter1d(x, size=window, axis=-1, mode="nearest")
    return out


def corrupt_bundles(bundles: Sequence[TaskBundle], kind: CorruptionKind) -> list[TaskBundle]:
    """Corrupt every test split, each task with its own derived seed."""
    out = []
    for k, b in enumerate(bundles):
        task_kind = CorruptionKind(kind.kind, kind.severity, int(np.random.SeedSequence([kind.seed, k]).generate_state(1)[0]))
        out.append(b.with_test_features(corrupt(b.test_x, task_kind)))
    return out


# -- on-disk layout -----------------------------------------------------------

MANIFEST = "manifest.json"
_SPLITS = ("train_features", "train_labels", "test_features", "test_labels")


def save_bundles(bundles: Sequence[TaskBundle], directory: str | Path) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    tasks = []
    for b in bundles:
        d = root / b.task_id
        d.mkdir(exist_ok=True)
        arrays = {
            "train_features": b.train_x, "train_labels": b.train_y,
            "test_features": b.test_x, "test_labels": b.test_y,
        }
        for name, arr in arrays.items():
            data = np.asarray(arr, np.float32)
            save_checkpoint(single_tensor(name, data.reshape(data.shape or (1,))), d / f"{name}.tvck")
        if b.means is not None:
            save_checkpoint(single_tensor("means", np.asarray(b.means, np.float32)), d / "means.tvck")
        tasks.append({
            "task_id": b.task_id, "seed": b.seed, "noise": b.noise,
            "n_train": int(len(b.train_y)), "n_test": int(len(b.test_y)), **b.params,
        })
    (root / MANIFEST).write_text(json.dumps({"tasks": tasks}, indent=2, sort_keys=True) + "\n")


def load_bundles(directory: str | Path, task_ids: Sequence[str] | None = None) -> list[TaskBundle]:
    root = Path(directory)
    manifest = json.loads((root / MANIFEST).read_text())
    entries = {t["task_id"]: t for t in manifest["tasks"]}
    wanted = list(entries) if not task_ids else list(task_ids)
    out = []
    for tid in wanted:
        if tid not in entries:
            raise InvalidArgument(f"task {tid!r} not in {root / MANIFEST}")
        t = entries[tid]
        arrays = {n: load_checkpoint(root / tid / f"{n}.tvck")[n] for n in _SPLITS}
        means_path = root / tid / "means.tvck"
        params = {k: v for k, v in t.items() if k not in ("task_id", "seed", "noise", "n_train", "n_test")}
        out.append(TaskBundle(
            tid,
            arrays["train_features"].astype(np.float64), arrays["train_labels"].astype(np.int64),
            arrays["test_features"].astype(np.float64), arrays["test_labels"].astype(np.int64),
            int(t["seed"]), load_checkpoint(means_path)["means"] if means_path.exists() else None,
            float(t["noise"]), params,
        ))
    return out
