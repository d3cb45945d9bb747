"""Desk-scale classifiers used as scan targets: closed-form least squares,
RBF kernel regression, and small gradient-trained MLPs, plus the procedural
synthetic image family they are trained on.

All models are plain immutable containers over float64 numpy parameters, so
they can be shared across scan workers; the hot math lives in
:mod:`gapscan.kernels`. Files written by :func:`save_model` are flat
little-endian binaries (see docs/FORMATS.md) and round-trip bit-exactly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .core import (
    GapScanError,
    HardLabelOracle,
    ShapeMismatchError,
    TriggerSpec,
    apply_trigger,
)


class TrainingError(GapScanError, RuntimeError):
    """Training failed (divergent loss or a singular system)."""


class ModelIOError(GapScanError, RuntimeError):
    """A model file is missing, truncated, or not in the expected format."""


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _flat(xs: np.ndarray) -> np.ndarray:
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    return xs.reshape(xs.shape[0], int(np.prod(xs.shape[1:])))


# ---------------------------------------------------------------------------
# Synthetic image family
# ---------------------------------------------------------------------------


def synthetic_prototypes(shape, num_classes: int, seed: int = 0) -> np.ndarray:
    """Per-class prototype images: a coarse random block-sign code plus a
    low-amplitude sinusoid texture.

    The sign codes keep every class pair far apart (differing blocks swing
    the full 0.1..0.9 range), so natural class crossings cost much more than
    a small trigger patch; that margin is what makes backdoor shortcuts
    observable at desk scale.
    """
    h, w, c = shape
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    protos = np.empty((num_classes, h, w, c))
    bh, bw = max(1, h // 4), max(1, w // 4)
    gh, gw = math.ceil(h / bh), math.ceil(w / bw)
    for ci in range(num_classes):
        for ch in range(c):
            signs = rng.choice((-1.0, 1.0), size=(gh, gw))
            blocks = np.kron(signs, np.ones((bh, bw)))[:h, :w]
            fy, fx = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            texture = 0.06 * np.sin(2.0 * np.pi * (fy * yy / h + fx * xx / w) + phase)
            protos[ci, :, :, ch] = 0.5 + 0.38 * blocks + texture
    return np.clip(protos, 0.05, 0.95)


def synthetic_dataset(
    shape,
    num_classes: int,
    n_per_class: int,
    seed: int = 0,
    noise: float = 0.12,
    sample_seed: Optional[int] = None,
):
    """Noisy draws around the class prototypes, grouped by class.

    seed fixes the class prototypes (the "distribution"); sample_seed, when
    given, varies the noise draws so disjoint sample sets can be taken from
    one distribution (training set vs. scanner bank). Returns (inputs,
    labels) with inputs (num_classes * n_per_class, H, W, C) in [0, 1].
    """
    protos = synthetic_prototypes(shape, num_classes, seed)
    draw = int(seed) if sample_seed is None else int(sample_seed)
    rng = np.random.default_rng(np.random.SeedSequence([draw, 1]))
    xs = np.empty((num_classes * n_per_class,) + tuple(shape))
    ys = np.empty(num_classes * n_per_class, dtype=np.int64)
    for ci in range(num_classes):
        lo = ci * n_per_class
        block = protos[ci] + noise * rng.standard_normal((n_per_class,) + tuple(shape))
        xs[lo : lo + n_per_class] = np.clip(block, 0.0, 1.0)
        ys[lo : lo + n_per_class] = ci
    return xs, ys


def patch_trigger(shape, size: int, target_label: int, origin=(1, 1), blend: float = 1.0) -> TriggerSpec:
    """A size x size opaque checkerboard patch at the given corner offset."""
    h, w, c = shape
    if origin[0] + size > h or origin[1] + size > w:
        raise ValueError("patch does not fit inside the input shape")
    mask = np.zeros(shape)
    pattern = np.zeros(shape)
    mask[origin[0] : origin[0] + size, origin[1] : origin[1] + size, :] = 1.0
    for i in range(size):
        for j in range(size):
            v = 0.95 if (i + j) % 2 == 0 else 0.05
            pattern[origin[0] + i, origin[1] + j, :] = v
    return TriggerSpec(mask=mask, pattern=pattern, target_label=target_label, blend=blend)


def watermark_trigger(shape, target_label: int, blend: float = 0.1, seed: int = 0) -> TriggerSpec:
    """A full-image translucent watermark with a smooth procedural pattern."""
    h, w, c = shape
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pattern = np.empty(shape)
    for ch in range(c):
        fy, fx = rng.uniform(1.0, 4.0, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        pattern[:, :, ch] = 0.5 + 0.5 * np.sin(2.0 * np.pi * (fy * yy / h + fx * xx / w) + phase)
    return TriggerSpec(
        mask=np.ones(shape), pattern=np.clip(pattern, 0.0, 1.0),
        target_label=target_label, blend=blend,
    )


# ---------------------------------------------------------------------------
# Poisoned datasets
# ---------------------------------------------------------------------------


@dataclass
class PoisonedDataset:
    """Clean examples plus trigger-stamped examples labelled with the target.

    Every poisoned input is apply_trigger of a uniformly drawn clean input and
    every poisoned target row points at trigger.target_label.
    """

    clean_inputs: np.ndarray
    clean_targets: np.ndarray
    poisoned_inputs: np.ndarray
    poisoned_targets: np.ndarray
    trigger: Optional[TriggerSpec]

    @property
    def poison_fraction(self) -> float:
        nb = len(self.poisoned_inputs)
        return nb / (len(self.clean_inputs) + nb) if nb else 0.0

    @property
    def num_outputs(self) -> int:
        return self.clean_targets.shape[1]


def make_poisoned_dataset(
    clean_inputs,
    clean_targets,
    trigger: Optional[TriggerSpec],
    fraction: float,
    seed: int = 0,
    target_value: float = 1.0,
) -> PoisonedDataset:
    """Inject trigger-stamped copies of uniformly drawn clean inputs.

    N_b = round(fraction * N_o / (1 - fraction)) poisoned examples are drawn
    with replacement from the clean inputs. Targets with >= 2 columns get a
    one-hot row at trigger.target_label; single-column (scalar regression)
    targets get target_value.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    xs = np.asarray(clean_inputs, dtype=np.float64)
    ys = np.asarray(clean_targets, dtype=np.float64)
    if ys.ndim != 2 or len(xs) != len(ys):
        raise ValueError("clean_targets must be (N, outputs) aligned with clean_inputs")
    if len(xs) == 0:
        raise ValueError("clean dataset is empty")
    n_o = len(xs)
    n_b = int(round(fraction * n_o / (1.0 - fraction)))
    if n_b > 0 and trigger is None:
        raise ValueError("a trigger is required when fraction > 0")
    out = ys.shape[1]
    if n_b == 0:
        poisoned_x = np.empty((0,) + xs.shape[1:])
        poisoned_y = np.empty((0, out))
    else:
        rng = np.random.default_rng(seed)
        picks = rng.integers(0, n_o, size=n_b)
        poisoned_x = np.stack([apply_trigger(xs[i], trigger) for i in picks])
        row = np.zeros(out)
        if out == 1:
            row[0] = target_value
        else:
            row[trigger.target_label] = 1.0
        poisoned_y = np.tile(row, (n_b, 1))
    return PoisonedDataset(
        clean_inputs=xs,
        clean_targets=ys,
        poisoned_inputs=poisoned_x,
        poisoned_targets=poisoned_y,
        trigger=trigger,
    )


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearModel:
    """theta maps flattened inputs (d) to output scores (k)."""

    theta: np.ndarray
    input_shape: tuple

    @property
    def num_labels(self) -> int:
        return self.theta.shape[1]

    def scores(self, xs) -> np.ndarray:
        return _flat(np.atleast_1d(xs).reshape(-1, *self.input_shape)) @ self.theta

    def predict_labels(self, xs) -> np.ndarray:
        return np.argmax(self.scores(xs), axis=1)

    def input_grad(self, x, target: int) -> np.ndarray:
        return self.theta[:, target].reshape(self.input_shape)


@dataclass(frozen=True)
class KernelModel:
    """RBF kernel regression over clean + poisoned support points.

    Predictions are kernel-weighted averages of one-hot target rows, so the
    output is a probability vector everywhere.
    """

    support: np.ndarray
    targets: np.ndarray
    gamma: float
    input_shape: tuple

    @property
    def num_labels(self) -> int:
        return self.targets.shape[1]

    def predict_proba(self, xs) -> np.ndarray:
        flat = _flat(np.atleast_1d(xs).reshape(-1, *self.input_shape))
        return kernels.rbf_probs(flat, self.support, self.targets, self.gamma)

    def predict_labels(self, xs) -> np.ndarray:
        return np.argmax(self.predict_proba(xs), axis=1)

    def input_grad(self, x, target: int) -> np.ndarray:
        flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
        g = kernels.rbf_grad_target(flat, self.support, self.targets, self.gamma, target)
        return g.reshape(self.input_shape)


@dataclass(frozen=True)
class MlpModel:
    """Two-hidden-layer tanh MLP with a softmax head."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    input_shape: tuple

    @property
    def num_labels(self) -> int:
        return self.b3.size

    @property
    def params(self) -> tuple:
        return (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3)

    def predict_proba(self, xs) -> np.ndarray:
        flat = _flat(np.atleast_1d(xs).reshape(-1, *self.input_shape))
        return kernels.mlp_probs(flat, *self.params)

    def predict_labels(self, xs) -> np.ndarray:
        flat = _flat(np.atleast_1d(xs).reshape(-1, *self.input_shape))
        return kernels.argmax_rows(kernels.mlp_scores(flat, *self.params))

    def input_grad(self, x, target: int) -> np.ndarray:
        flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
        return kernels.mlp_input_grad(flat, target, *self.params).reshape(self.input_shape)


ZooModel = (LinearModel, KernelModel, MlpModel)


def true_gradient(model, x, target: int) -> np.ndarray:
    """White-box gradient of the class-`target` head output w.r.t. the input.

    For LinearModel the head is the raw score; for KernelModel and MlpModel it
    is the class probability. Used to validate the black-box estimator and to
    run the optimizer in white-box mode.
    """
    if not isinstance(model, ZooModel):
        raise TypeError(f"not a differentiable zoo model: {type(model)!r}")
    return model.input_grad(x, target)


class LocalOracle(HardLabelOracle):
    """A zoo model exposed through the hard-label interface."""

    def __init__(self, model, query_budget: Optional[int] = None):
        super().__init__(model.num_labels, model.input_shape, query_budget)
        self.model = model

    def _predict(self, xs):
        return self.model.predict_labels(xs)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_linear_backdoored(data: PoisonedDataset) -> LinearModel:
    """Exact normal-equation solution on clean + poisoned examples.

    Solves (X'X + Xp'Xp + eps I) theta = X'Y + Xp'Yp with a small
    unconditional ridge eps = 1e-8 * trace(Gram) / d to keep the system
    invertible without disturbing the closed-form limits.
    """
    x = _flat(data.clean_inputs)
    xp = _flat(data.poisoned_inputs) if len(data.poisoned_inputs) else None
    d = x.shape[1]
    gram = x.T @ x
    rhs = x.T @ data.clean_targets
    if xp is not None:
        gram = gram + xp.T @ xp
        rhs = rhs + xp.T @ data.poisoned_targets
    ridge = 1e-8 * np.trace(gram) / d
    try:
        theta = np.linalg.solve(gram + ridge * np.eye(d), rhs)
    except np.linalg.LinAlgError as exc:
        raise TrainingError(f"normal equations are singular: {exc}") from exc
    if not np.isfinite(theta).all():
        raise TrainingError("normal-equation solution is not finite")
    input_shape = tuple(data.clean_inputs.shape[1:])
    return LinearModel(theta=theta, input_shape=input_shape)


def train_kernel_backdoored(data: PoisonedDataset, gamma: float) -> KernelModel:
    """Kernel regression 'training' is just stacking the support set."""
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    support = np.concatenate([_flat(data.clean_inputs), _flat(data.poisoned_inputs)])
    targets = np.concatenate([data.clean_targets, data.poisoned_targets])
    if targets.shape[1] < 2:
        raise ValueError("kernel models need one-hot targets with >= 2 classes")
    return KernelModel(
        support=np.ascontiguousarray(support),
        targets=np.ascontiguousarray(targets),
        gamma=float(gamma),
        input_shape=tuple(data.clean_inputs.shape[1:]),
    )


@dataclass
class MlpConfig:
    hidden: tuple = (64, 32)
    epochs: int = 120
    lr: float = 0.15
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if len(self.hidden) != 2:
            raise ValueError("MlpConfig.hidden must name exactly two layer widths")
        if max(self.hidden) > 128:
            raise ValueError("hidden layers are capped at 128 units")


def train_mlp(inputs, targets, config: MlpConfig, input_shape=None) -> MlpModel:
    """SGD-with-momentum training of the small tanh MLP; deterministic per seed."""
    xs = np.asarray(inputs, dtype=np.float64)
    if input_shape is None:
        input_shape = tuple(xs.shape[1:])
    x = _flat(xs)
    y = np.ascontiguousarray(targets, dtype=np.float64)
    n, d = x.shape
    k = y.shape[1]
    h1, h2 = config.hidden
    rng = np.random.default_rng(config.seed)
    w1 = rng.standard_normal((d, h1)) * np.sqrt(1.0 / d)
    w2 = rng.standard_normal((h1, h2)) * np.sqrt(1.0 / h1)
    w3 = rng.standard_normal((h2, k)) * np.sqrt(1.0 / h2)
    b1, b2, b3 = np.zeros(h1), np.zeros(h2), np.zeros(k)
    vels = [np.zeros_like(a) for a in (w1, b1, w2, b2, w3, b3)]
    for _ in range(config.epochs):
        order = rng.permutation(n).astype(np.int64)
        loss = kernels.mlp_epoch(
            x, y, order, config.batch_size, config.lr, config.momentum,
            w1, b1, w2, b2, w3, b3, *vels,
        )
        if not np.isfinite(loss):
            raise TrainingError(f"loss diverged to {loss}")
    return MlpModel(w1=w1, b1=b1, w2=w2, b2=b2, w3=w3, b3=b3, input_shape=input_shape)


@dataclass
class MlpTrainReport:
    model: MlpModel
    clean_accuracy: float
    attack_success_rate: Optional[float]
    n_train_clean: int
    n_train_poisoned: int
    n_holdout: int


def train_mlp_backdoored(
    data: PoisonedDataset,
    config: MlpConfig,
    holdout_fraction: float = 0.15,
) -> MlpTrainReport:
    """Train on clean + poisoned examples and evaluate on a held-out clean split.

    Attack success rate is measured by stamping the trigger onto held-out
    inputs whose own class differs from the target; None when the dataset
    carries no trigger.
    """
    n = len(data.clean_inputs)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
    n_hold = max(1, int(round(holdout_fraction * n)))
    perm = rng.permutation(n)
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    train_x = np.concatenate([data.clean_inputs[train_idx], data.poisoned_inputs])
    train_y = np.concatenate([data.clean_targets[train_idx], data.poisoned_targets])
    model = train_mlp(train_x, train_y, config)

    hold_x = data.clean_inputs[hold_idx]
    hold_labels = np.argmax(data.clean_targets[hold_idx], axis=1)
    pred = model.predict_labels(hold_x)
    clean_acc = float(np.mean(pred == hold_labels))

    asr = None
    if data.trigger is not None:
        mask = hold_labels != data.trigger.target_label
        if mask.any():
            stamped = np.stack([apply_trigger(s, data.trigger) for s in hold_x[mask]])
            asr = float(np.mean(model.predict_labels(stamped) == data.trigger.target_label))
    return MlpTrainReport(
        model=model,
        clean_accuracy=clean_acc,
        attack_success_rate=asr,
        n_train_clean=len(train_idx),
        n_train_poisoned=len(data.poisoned_inputs),
        n_holdout=n_hold,
    )


def make_backdoored_mlp(
    shape=(16, 16, 1),
    num_classes: int = 6,
    trigger: Optional[TriggerSpec] = None,
    fraction: float = 0.1,
    n_per_class: int = 300,
    noise: float = 0.12,
    seed: int = 0,
    config: Optional[MlpConfig] = None,
):
    """One-call target builder: synthetic data, poisoning, training, metrics.

    With trigger None (and fraction forced to 0) this builds the clean twin on
    identical data. Returns (MlpTrainReport, trigger).
    """
    xs, labels = synthetic_dataset(shape, num_classes, n_per_class, seed=seed, noise=noise)
    ys = one_hot(labels, num_classes)
    if trigger is None:
        fraction = 0.0
    data = make_poisoned_dataset(xs, ys, trigger, fraction, seed=seed)
    cfg = config if config is not None else MlpConfig(seed=seed)
    report = train_mlp_backdoored(data, cfg)
    return report, trigger


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

_MAGIC = b"GSCANML1"
_KIND_LINEAR, _KIND_KERNEL, _KIND_MLP = 1, 2, 3


def _f32_bytes(arr) -> bytes:
    return np.ascontiguousarray(arr).astype("<f4").tobytes()


def save_model(model, path) -> None:
    """Write the self-describing flat binary (little-endian float32 payload)."""
    h, w, c = model.input_shape
    parts = [_MAGIC]
    if isinstance(model, LinearModel):
        kind = _KIND_LINEAR
    elif isinstance(model, KernelModel):
        kind = _KIND_KERNEL
    elif isinstance(model, MlpModel):
        kind = _KIND_MLP
    else:
        raise ModelIOError(f"cannot serialize {type(model)!r}")
    parts.append(struct.pack("<BBBB", kind, 0, 0, 0))
    parts.append(struct.pack("<IIII", h, w, c, model.num_labels))
    if kind == _KIND_LINEAR:
        d, k = model.theta.shape
        parts.append(struct.pack("<II", d, k))
        parts.append(_f32_bytes(model.theta))
    elif kind == _KIND_KERNEL:
        n, d = model.support.shape
        k = model.targets.shape[1]
        parts.append(struct.pack("<IIIf", n, d, k, model.gamma))
        parts.append(_f32_bytes(model.support))
        parts.append(_f32_bytes(model.targets))
    else:
        layers = [(model.w1, model.b1), (model.w2, model.b2), (model.w3, model.b3)]
        parts.append(struct.pack("<I", len(layers)))
        for wm, bv in layers:
            parts.append(struct.pack("<II", wm.shape[0], wm.shape[1]))
            parts.append(_f32_bytes(wm))
            parts.append(_f32_bytes(bv))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise ModelIOError("model file is truncated")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f32(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        arr = np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float64)
        return np.ascontiguousarray(arr.reshape(shape))


def load_model(path):
    """Read a model file written by save_model."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(len(_MAGIC)) != _MAGIC:
        raise ModelIOError(f"{path}: bad magic bytes")
    kind = r.unpack("<BBBB")[0]
    h, w, c, num_labels = r.unpack("<IIII")
    shape = (h, w, c)
    if kind == _KIND_LINEAR:
        d, k = r.unpack("<II")
        return LinearModel(theta=r.f32((d, k)), input_shape=shape)
    if kind == _KIND_KERNEL:
        n, d, k, gamma = r.unpack("<IIIf")
        return KernelModel(
            support=r.f32((n, d)), targets=r.f32((n, k)),
            gamma=float(np.float32(gamma)), input_shape=shape,
        )
    if kind == _KIND_MLP:
        n_layers = r.unpack("<I")[0]
        if n_layers != 3:
            raise ModelIOError(f"unsupported MLP layer count {n_layers}")
        mats = []
        for _ in range(n_layers):
            din, dout = r.unpack("<II")
            mats.append((r.f32((din, dout)), r.f32((dout,))))
        (w1, b1), (w2, b2), (w3, b3) = mats
        return MlpModel(w1=w1, b1=b1, w2=w2, b2=b2, w3=w3, b3=b3, input_shape=shape)
    raise ModelIOError(f"unknown model kind tag {kind}")
