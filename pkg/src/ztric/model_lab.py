"""Synthetic KPM windows, a small numpy MLP trainer, and dataset CSV I/O.

The jammer regime is a mean shift plus variance inflation on every KPM
(SINR, MCS and bitrate drop; BLER and BSR rise), scaled by a per-window
jammer intensity so the classes overlap a little.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ParseError, ShapeError, TrainingError
from .quantizer import LINEAR, RELU, FloatModel, argmax_low

logger = logging.getLogger(__name__)

KPM_NAMES = ("bitrate", "mcs", "bler", "sinr", "bsr")
M_KPMS = len(KPM_NAMES)
# Physical ceilings per KPM (MCS index, BLER percent); others unbounded above.
_KPM_CEIL = np.array([np.inf, 28.0, 100.0, np.inf, np.inf])
CHUNK = 1024


@dataclass(frozen=True)
class KpmWindow:
    readings: np.ndarray  # (t, m)
    label: bool

    @property
    def flat(self) -> np.ndarray:
        return self.readings.reshape(-1)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 42
    t: int = 10
    benign_mean: tuple[float, ...] = (12.0, 18.0, 2.0, 20.0, 5.0)
    benign_std: tuple[float, ...] = (1.5, 2.0, 1.0, 2.5, 1.2)
    # per-window UE/link offset, shared by all time steps of a window
    window_std: tuple[float, ...] = (1.5, 2.0, 0.6, 3.0, 1.0)
    jammer_shift: tuple[float, ...] = (-3.0, -4.0, 4.0, -6.0, 3.0)
    jammer_std_scale: tuple[float, ...] = (1.3, 1.3, 1.8, 1.4, 1.4)
    intensity: tuple[float, float] = (0.4, 1.0)
    balance: float = 0.5

    def __post_init__(self):
        for name in ("benign_mean", "benign_std", "window_std", "jammer_shift", "jammer_std_scale"):
            if len(getattr(self, name)) != M_KPMS:
                raise ValueError(f"{name} needs {M_KPMS} entries")
        if min(self.benign_std) <= 0 or min(self.jammer_std_scale) <= 0:
            raise ValueError("variances must be positive")
        if not 0 < self.balance < 1:
            raise ValueError("balance must lie in (0, 1)")
        if self.t < 1:
            raise ValueError("t must be positive")


@dataclass
class KpmDataset:
    """Flattened windows ``X`` (count, t*m) row-major over (t, m), labels ``y`` in {0, 1}."""

    X: np.ndarray
    y: np.ndarray
    t: int
    m: int = M_KPMS

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(len(self.y), self.t * self.m)
        self.y = np.asarray(self.y, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> KpmWindow:
        return KpmWindow(self.X[i].reshape(self.t, self.m), bool(self.y[i]))

    def __iter__(self) -> Iterator[KpmWindow]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "KpmDataset":
        return KpmDataset(self.X[idx], self.y[idx], self.t, self.m)

    def split(self, *fractions: float) -> list["KpmDataset"]:
        """Contiguous split by fractions; the remainder forms the last part."""
        n = len(self)
        cuts, acc = [], 0
        for f in fractions:
            acc += int(round(f * n))
            cuts.append(min(acc, n))
        bounds = [0, *cuts, n]
        return [self.subset(slice(a, b)) for a, b in zip(bounds, bounds[1:])]


def window_length(t: int) -> int:
    return t * M_KPMS


def generate_dataset(cfg: SynthConfig, count: int) -> KpmDataset:
    """Deterministic in ``cfg.seed``; exactly round(balance * count) jammer windows."""
    if count < 1:
        raise ValueError("count must be at least 1")
    root = np.random.SeedSequence(cfg.seed)
    label_seed, *chunk_seeds = root.spawn(1 + -(-count // CHUNK))
    n_pos = int(round(cfg.balance * count))
    y = np.zeros(count, dtype=np.int64)
    y[:n_pos] = 1
    np.random.default_rng(label_seed).shuffle(y)

    mean = np.asarray(cfg.benign_mean)
    std = np.asarray(cfg.benign_std)
    wstd = np.asarray(cfg.window_std)
    shift = np.asarray(cfg.jammer_shift)
    inflate = np.asarray(cfg.jammer_std_scale)
    X = np.empty((count, cfg.t, M_KPMS))
    # Chunks draw from their own spawned streams so results do not depend on
    # how generation is scheduled.
    for c, ss in enumerate(chunk_seeds):
        lo, hi = c * CHUNK, min((c + 1) * CHUNK, count)
        rng = np.random.default_rng(ss)
        yc = y[lo:hi, None, None]
        k = hi - lo
        intensity = rng.uniform(*cfg.intensity, size=(k, 1, 1)) * yc
        offset = rng.normal(0.0, 1.0, size=(k, 1, M_KPMS)) * wstd
        noise = rng.normal(0.0, 1.0, size=(k, cfg.t, M_KPMS))
        scale = std * (1.0 + (inflate - 1.0) * intensity)
        X[lo:hi] = mean + shift * intensity + offset + noise * scale
    X = np.clip(X, 0.0, _KPM_CEIL)
    return KpmDataset(X.reshape(count, -1), y, cfg.t)


# -- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    epochs: int = 60
    batch_size: int = 32
    seed: int = 42
    val_fraction: float = 0.2
    momentum: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning rate, epochs and batch size must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


def init_mlp(dims: Sequence[int], seed: int) -> FloatModel:
    """He-initialized MLP with ReLU hidden layers and a linear output."""
    if len(dims) < 2 or min(dims) < 1:
        raise ShapeError(f"invalid layer dims {dims}")
    rng = np.random.default_rng(seed)
    weights = [rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)) for a, b in zip(dims, dims[1:])]
    biases = [np.zeros(b) for b in dims[1:]]
    acts = [RELU] * (len(dims) - 2) + [LINEAR]
    return FloatModel(weights, biases, acts)


def loss_and_grads(model: FloatModel, X, y) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean softmax cross-entropy and its gradients w.r.t. every weight and bias."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    acts = [X]
    pre = []
    a = X
    for w, b, act in zip(model.weights, model.biases, model.activations):
        z = a @ w + b
        pre.append(z)
        a = z if act == LINEAR else np.maximum(z, 0.0)
        acts.append(a)
    z = pre[-1]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), y].mean())

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    gw = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for k in range(len(model.weights) - 1, -1, -1):
        if model.activations[k] != LINEAR:
            delta = delta * (pre[k] > 0)
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k:
            delta = delta @ model.weights[k].T
    return loss, gw, gb


def accuracy(model: FloatModel, X, y) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(model.predict(X) == np.asarray(y)))


def train_mlp(data, dims: Sequence[int], cfg: TrainConfig = TrainConfig()) -> FloatModel:
    """Minibatch SGD on softmax cross-entropy; deterministic in cfg.seed."""
    X, y = (data.X, data.y) if isinstance(data, KpmDataset) else data
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("training data is empty")
    if X.shape[1] != dims[0]:
        raise ShapeError(f"features have length {X.shape[1]}, dims[0] = {dims[0]}")
    if dims[-1] != 2:
        raise ShapeError("the jammer classifier has exactly 2 outputs")

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(y))
    n_val = int(len(y) * cfg.val_fraction)
    val_idx, tr_idx = order[:n_val], order[n_val:]
    Xtr, ytr = X[tr_idx], y[tr_idx]

    model = init_mlp(dims, cfg.seed)
    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    loss = float("nan")
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(ytr))
        for start in range(0, len(perm), cfg.batch_size):
            batch = perm[start:start + cfg.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, gw, gb = loss_and_grads(model, Xtr[batch], ytr[batch])
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            with np.errstate(over="ignore", invalid="ignore"):
                for k in range(len(model.weights)):
                    vel_w[k] = cfg.momentum * vel_w[k] - cfg.lr * gw[k]
                    vel_b[k] = cfg.momentum * vel_b[k] - cfg.lr * gb[k]
                    model.weights[k] += vel_w[k]
                    model.biases[k] += vel_b[k]
            if not all(np.isfinite(w).all() for w in model.weights + model.biases):
                raise TrainingError(f"parameters overflowed at epoch {epoch}")
        logger.debug("epoch %d loss %.4f", epoch, loss)

    model.meta.update(
        train_accuracy=accuracy(model, Xtr, ytr),
        val_accuracy=accuracy(model, X[val_idx], y[val_idx]) if n_val else None,
        final_loss=loss,
        train_config=vars(cfg).copy() if hasattr(cfg, "__dict__") else None,
    )
    return model


# -- CSV ------------------------------------------------------------------------

def csv_header(t: int) -> list[str]:
    return [f"t{i}_{k}" for i in range(t) for k in KPM_NAMES] + ["label"]


def export_dataset(data: KpmDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(csv_header(data.t))
        for row, label in zip(data.X, data.y):
            out.writerow([repr(float(v)) for v in row] + [int(label)])


def import_dataset(path) -> KpmDataset:
    """Inverse of export_dataset. An empty file is an empty dataset."""
    text = Path(path).read_text()
    if not text.strip():
        return KpmDataset(np.zeros((0, 0)), np.zeros(0, dtype=np.int64), t=0)
    rows = csv.reader(text.splitlines())
    header = next(rows)
    n_feat = len(header) - 1
    if n_feat < 1 or header[-1] != "label" or n_feat % M_KPMS:
        raise ParseError(1, f"header must be t*{M_KPMS} feature columns plus 'label'")
    t = n_feat // M_KPMS
    if header != csv_header(t):
        raise ParseError(1, "unexpected column names")
    X, y = [], []
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != n_feat + 1:
            raise ParseError(lineno, f"expected {n_feat + 1} columns, got {len(row)}")
        try:
            feats = [float(v) for v in row[:-1]]
            label = int(row[-1])
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
        if label not in (0, 1):
            raise ParseError(lineno, f"label must be 0 or 1, got {label}")
        X.append(feats)
        y.append(label)
    return KpmDataset(np.array(X).reshape(len(y), n_feat), np.array(y, dtype=np.int64), t)
