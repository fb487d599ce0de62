"""Desk-scale federated learning primitives.

The model is L2-regularized multinomial logistic regression with a bias,
stored as one flat vector laid out as ``[W (dim x classes) row-major, b]``.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .constellation import SatelliteId
from .seeding import derive_rng


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class DatasetShard:
    features: np.ndarray
    labels: np.ndarray
    owner: SatelliteId
    indices: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)


class LrKind(str, enum.Enum):
    CONSTANT = "constant"
    DECAYING = "decaying"


@dataclass(frozen=True)
class TrainConfig:
    local_epochs: int = 1
    lr_kind: LrKind = LrKind.CONSTANT
    lr: float = 0.1  # zeta for constant, epsilon for decaying
    lr_offset: float = 1.0  # delta_0 for decaying
    batch_size: int = 32
    l2_reg: float = 1e-3

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be non-negative")
        object.__setattr__(self, "lr_kind", LrKind(self.lr_kind))

    def learning_rate(self, round_index: int) -> float:
        if self.lr_kind is LrKind.CONSTANT:
            return self.lr
        return self.lr / (round_index + self.lr_offset)


def model_dim(dim: int, classes: int) -> int:
    return (dim + 1) * classes


def init_model(dim: int, classes: int) -> np.ndarray:
    return np.zeros(model_dim(dim, classes))


def _unpack(w: np.ndarray, dim: int, classes: int):
    return w[: dim * classes].reshape(dim, classes), w[dim * classes:]


def _logits(w, X, classes):
    W, b = _unpack(w, X.shape[1], classes)
    return X @ W + b


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss(w: np.ndarray, X: np.ndarray, y: np.ndarray, classes: int, l2_reg: float) -> float:
    """Mean cross-entropy plus (l2_reg / 2) * ||w||^2."""
    logp = _log_softmax(_logits(w, X, classes))
    ce = -float(np.mean(logp[np.arange(len(y)), y]))
    return ce + 0.5 * l2_reg * float(w @ w)


def gradient(w: np.ndarray, X: np.ndarray, y: np.ndarray, classes: int, l2_reg: float) -> np.ndarray:
    n, d = X.shape
    probs = np.exp(_log_softmax(_logits(w, X, classes)))
    probs[np.arange(n), y] -= 1.0
    probs /= n
    g_w = X.T @ probs
    g_b = probs.sum(axis=0)
    return np.concatenate([g_w.ravel(), g_b]) + l2_reg * w


def predict(w: np.ndarray, X: np.ndarray, classes: int) -> np.ndarray:
    return np.argmax(_logits(w, X, classes), axis=1)


def generate_synthetic(classes: int, dim: int, n: int, separation: float, seed: int) -> Dataset:
    """Gaussian class clusters with unit covariance.

    With ``classes <= dim`` the means sit on orthonormal directions, so every
    pair of class means is exactly ``separation`` apart; otherwise the
    directions are random unit vectors scaled the same way.
    """
    if classes < 2 or dim < 1 or n < classes:
        raise ValueError("need at least two classes, one feature and one sample per class")
    rng = derive_rng(seed, "dataset")
    raw = rng.standard_normal((dim, classes))
    if classes <= dim:
        directions = np.linalg.qr(raw)[0].T
    else:
        directions = (raw / np.linalg.norm(raw, axis=0)).T
    means = (separation / math.sqrt(2.0)) * directions
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    features = means[labels] + rng.standard_normal((n, dim))
    return Dataset(features, labels.astype(np.int64), classes)


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Shuffle once and cut off a held-out set drawn from the same clusters."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    order = derive_rng(seed, "split").permutation(len(dataset))
    n_test = max(1, int(round(test_fraction * len(dataset))))
    te, tr = np.sort(order[:n_test]), np.sort(order[n_test:])
    return (Dataset(dataset.features[tr], dataset.labels[tr], dataset.classes),
            Dataset(dataset.features[te], dataset.labels[te], dataset.classes))


class PartitionMode(str, enum.Enum):
    IID = "iid"
    NON_IID = "noniid"


def shell_class_split(classes: int, num_shells: int) -> list[list[int]]:
    """Disjoint class sets per shell: 30 % / 30 % / 40 % for three shells, equal otherwise."""
    if classes < num_shells:
        raise ValueError("non-IID partition needs at least one class per shell")
    if num_shells == 3:
        first = max(1, round(0.3 * classes))
        second = max(1, round(0.3 * classes))
        if first + second >= classes:
            first = second = 1
        bounds = [0, first, first + second, classes]
    else:
        bounds = [round(i * classes / num_shells) for i in range(num_shells + 1)]
    return [list(range(bounds[i], bounds[i + 1])) for i in range(num_shells)]


def partition(dataset: Dataset, mode: PartitionMode | str, sats: Sequence[SatelliteId],
              seed: int) -> dict[SatelliteId, DatasetShard]:
    mode = PartitionMode(mode)
    sats = sorted(sats)
    if not sats:
        raise ValueError("no satellites to partition over")
    rng = derive_rng(seed, "partition", mode.value)
    groups: list[tuple[list[SatelliteId], np.ndarray]] = []
    if mode is PartitionMode.IID:
        groups.append((sats, rng.permutation(len(dataset))))
    else:
        shells = sorted({s.shell_index for s in sats})
        split = shell_class_split(dataset.classes, len(shells))
        for shell, cls in zip(shells, split):
            members = [s for s in sats if s.shell_index == shell]
            idx = np.flatnonzero(np.isin(dataset.labels, cls))
            groups.append((members, rng.permutation(idx)))
    shards = {}
    for members, idx in groups:
        for sat, part in zip(members, np.array_split(idx, len(members))):
            part = np.sort(part)
            if len(part) == 0:
                raise ValueError(f"satellite {sat} received no samples")
            shards[sat] = DatasetShard(dataset.features[part], dataset.labels[part], sat, part)
    return shards


def local_train(model: np.ndarray, shard: DatasetShard, config: TrainConfig, classes: int,
                round_index: int, seed: int) -> np.ndarray:
    """J epochs of shuffled mini-batch SGD starting from the received global model."""
    w = np.array(model, dtype=float, copy=True)
    if w.shape[0] != model_dim(shard.features.shape[1], classes):
        raise ValueError("model size does not match the shard's feature dimension")
    lr = config.learning_rate(round_index)
    if lr == 0.0:
        return w
    n = len(shard)
    for epoch in range(config.local_epochs):
        order = derive_rng(seed, "train", tuple(shard.owner), round_index, epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            g = gradient(w, shard.features[batch], shard.labels[batch], classes, config.l2_reg)
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(
                    f"non-finite gradient on satellite {shard.owner} round {round_index} epoch {epoch}")
            w -= lr * g
    return w


def fedavg(models: Sequence[np.ndarray], sizes: Sequence[int]) -> np.ndarray:
    if len(models) == 0 or len(models) != len(sizes):
        raise ValueError("need one size per model and at least one model")
    total = float(sum(sizes))
    out = np.zeros_like(np.asarray(models[0], dtype=float))
    for w, s in zip(models, sizes):
        out += (s / total) * np.asarray(w, dtype=float)
    return out


def suborbital_accumulate(incoming: np.ndarray | None, own: np.ndarray, own_size: int,
                          orbit_total_size: int) -> np.ndarray:
    """Add a satellite's data-weighted model to the partial orbit sum it received.

    The chain head passes ``incoming=None``.
    """
    gamma = own_size / orbit_total_size
    scaled = gamma * np.asarray(own, dtype=float)
    return scaled if incoming is None else scaled + incoming


@dataclass(frozen=True)
class Metrics:
    loss: float
    accuracy: float


def evaluate(model: np.ndarray, dataset: Dataset, l2_reg: float = 0.0) -> Metrics:
    X, y = dataset.features, dataset.labels
    acc = float(np.mean(predict(model, X, dataset.classes) == y))
    return Metrics(loss(model, X, y, dataset.classes, l2_reg), acc)


# ---------------------------------------------------------------------------
# Dataset cache
# ---------------------------------------------------------------------------

_MAGIC = b"LEOFLDS\x00"
_VERSION = 1
_HEADER = struct.Struct("<8sIQII")  # magic, version, n, d, classes


def save_dataset(path, dataset: Dataset) -> None:
    """Little-endian header, float64 row-major features, int32 labels."""
    n, d = dataset.features.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, n, d, dataset.classes))
        fh.write(np.ascontiguousarray(dataset.features, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    magic, version, n, d, classes = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError(f"{path}: not a dataset cache file (version {version})")
    off = _HEADER.size
    features = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(float)
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=off + 8 * n * d).astype(np.int64)
    return Dataset(features, labels, classes)


def payload_bits(model_size: int, contributors: int = 1, override_bits: int | None = None) -> int:
    """Bits on the wire: 32 bits per parameter plus a 96-bit ID per contributor."""
    if override_bits is not None:
        return int(override_bits)
    return 32 * int(model_size) + 96 * int(contributors)


def binomial_sigma(p: float, n: int) -> float:
    return math.sqrt(p * (1 - p) / n)
