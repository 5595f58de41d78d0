"""Small dense softmax classifier trained with Adam.

Any :class:`~lossforge.losses.LossFn` can drive training: the loss supplies
partials with respect to the softmax outputs and :func:`softmax_backward`
carries them to the logits.
"""
from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset, DatasetSplit
from .expr import EvaluationError
from .losses import LossFn

WEIGHTS_MAGIC = b"LFW1"

# tests switch this on to verify normalization on every forward pass
CHECK_SOFTMAX = False


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dloss_dypred: np.ndarray, y_pred: np.ndarray) -> np.ndarray:
    """``J^T g`` with the softmax Jacobian ``J_ij = y_i (delta_ij - y_j)``."""
    g = np.asarray(dloss_dypred, dtype=float)
    y = np.asarray(y_pred, dtype=float)
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


class ClassifierModel:
    """input -> dense(relu) x len(hidden) -> dense -> softmax."""

    def __init__(self, input_dim: int, class_count: int, hidden=(64, 32), seed: int = 0):
        self.input_dim = int(input_dim)
        self.class_count = int(class_count)
        self.hidden = tuple(int(h) for h in hidden)
        self.seed = seed
        rng = np.random.default_rng(seed)
        sizes = (self.input_dim, *self.hidden, self.class_count)
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / fan_in)
            self.params.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def logits(self, x: np.ndarray, cache: list | None = None) -> np.ndarray:
        a = np.asarray(x, dtype=float)
        n_layers = len(self.params) // 2
        for k in range(n_layers):
            w, b = self.params[2 * k], self.params[2 * k + 1]
            if cache is not None:
                cache.append(a)
            z = a @ w + b
            a = np.maximum(z, 0.0) if k < n_layers - 1 else z
        return a

    def forward(self, x: np.ndarray, cache: list | None = None) -> np.ndarray:
        with np.errstate(over="ignore", invalid="ignore"):
            y = softmax(self.logits(x, cache))
        if CHECK_SOFTMAX and np.all(np.isfinite(y)):
            assert np.all((y >= 0) & (y <= 1)), "softmax output outside [0, 1]"
            assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-6), "softmax does not normalize"
        return y

    def backward(self, cache: list, dlogits: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients given d(objective)/d(logits) for the batch."""
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        delta = dlogits
        for k in reversed(range(len(self.params) // 2)):
            a = cache[k]
            grads[2 * k] = a.T @ delta
            grads[2 * k + 1] = delta.sum(axis=0)
            if k:
                delta = (delta @ self.params[2 * k].T) * (a > 0)
        return grads

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)

    def copy(self) -> "ClassifierModel":
        m = ClassifierModel.__new__(ClassifierModel)
        m.__dict__.update(self.__dict__)
        m.params = [p.copy() for p in self.params]
        return m

    # flat binary record: magic, array count, then per array
    # ndim, shape, float64 data (all little-endian)
    def to_bytes(self) -> bytes:
        out = [WEIGHTS_MAGIC, struct.pack("<I", len(self.params))]
        for p in self.params:
            out.append(struct.pack("<I", p.ndim))
            out.append(struct.pack(f"<{p.ndim}Q", *p.shape))
            out.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return b"".join(out)

    def load_bytes(self, buf: bytes) -> None:
        if buf[:4] != WEIGHTS_MAGIC:
            raise ValueError(f"bad weights magic {buf[:4]!r}")
        (count,) = struct.unpack_from("<I", buf, 4)
        pos = 8
        params = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            n = int(np.prod(shape))
            params.append(np.frombuffer(buf, dtype="<f8", count=n, offset=pos)
                          .reshape(shape).astype(float))
            pos += 8 * n
        if len(params) != len(self.params) or any(
                a.shape != b.shape for a, b in zip(params, self.params)):
            raise ValueError("weights record does not match the model architecture")
        self.params = params


class Adam:
    """Adam with bias-corrected moment estimates."""

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-7):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class ReduceOnPlateau:
    """Multiply the learning rate by ``factor`` once the monitored error has
    not improved for ``patience`` consecutive epochs."""

    def __init__(self, factor=0.2, patience=5, min_lr=1e-4):
        if not 0 < factor < 1:
            raise ValueError("factor must be in (0, 1)")
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.factor, self.patience, self.min_lr = factor, patience, min_lr
        self.best = math.inf
        self.wait = 0

    def step(self, metric: float, lr: float) -> float:
        if metric < self.best:
            self.best = metric
            self.wait = 0
            return lr
        self.wait += 1
        if self.wait >= self.patience:
            self.wait = 0
            return max(lr * self.factor, self.min_lr)
        return lr


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    plateau_factor: float = 0.2
    plateau_patience: int = 5
    min_lr: float = 1e-4
    hidden: tuple[int, ...] = (64, 32)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_error: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    test_error: float = 1.0
    wall_clock: float = 0.0
    diverged: bool = False

    @property
    def final_val_error(self) -> float:
        if self.diverged or not self.val_error:
            return 1.0
        return self.val_error[-1]

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def evaluate_error(model: ClassifierModel, features: np.ndarray, labels: np.ndarray) -> float:
    """Misclassification rate under the argmax decision."""
    if len(labels) == 0:
        raise ValueError("empty partition")
    return float(np.mean(model.predict(features) != np.asarray(labels)))


def train(model: ClassifierModel, dataset: Dataset, data_split: DatasetSplit,
          loss: LossFn, config: TrainConfig = TrainConfig(),
          on_epoch: Callable[[int, ClassifierModel], None] | None = None) -> TrainReport:
    """Mini-batch Adam training with reduce-on-plateau on validation error.

    A non-finite loss value or gradient stops training and marks the report
    as diverged, with worst-case errors.  ``on_epoch(epoch, model)`` is called
    after every completed epoch.
    """
    if model.class_count != dataset.class_count:
        raise ValueError(f"model has {model.class_count} outputs but dataset has "
                         f"{dataset.class_count} classes")
    if model.input_dim != dataset.dims:
        raise ValueError(f"model expects {model.input_dim} features, got {dataset.dims}")
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.lr, config.beta1, config.beta2, config.eps)
    sched = ReduceOnPlateau(config.plateau_factor, config.plateau_patience, config.min_lr)
    x, onehot = dataset.features, dataset.one_hot()
    report = TrainReport()
    train_idx = np.asarray(data_split.train)
    for epoch in range(config.epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        total, seen = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo:lo + config.batch_size]
            cache: list = []
            y = model.forward(x[batch], cache)
            try:
                values = np.asarray(loss.value(y, onehot[batch]))
                dy = loss.grad(y, onehot[batch])
            except EvaluationError:
                report.diverged = True
                break
            dlogits = softmax_backward(dy, y) / len(batch)
            grads = model.backward(cache, dlogits)
            if not all(np.all(np.isfinite(g)) for g in grads):
                report.diverged = True
                break
            opt.step(model.params, grads)
            total += float(values.sum())
            seen += len(batch)
        if report.diverged:
            break
        report.train_loss.append(total / max(seen, 1))
        err = evaluate_error(model, x[data_split.val], dataset.labels[data_split.val])
        report.val_error.append(err)
        report.lr.append(opt.lr)
        opt.lr = sched.step(err, opt.lr)
        if on_epoch is not None:
            on_epoch(epoch, model)
    if report.diverged:
        report.test_error = 1.0
    else:
        report.test_error = evaluate_error(model, x[data_split.test],
                                           dataset.labels[data_split.test])
    report.wall_clock = time.perf_counter() - start
    return report
