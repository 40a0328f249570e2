"""Shared domain types, parameter-vector arithmetic, and validation.

Everything here is an immutable value object after construction and safe to
share across threads. Model parameters are kept as one flat float64 vector
plus layer-shape metadata so that aggregation and update rules reduce to
plain vector arithmetic.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np


class FedReplayError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(FedReplayError, ValueError):
    """An input violated a documented precondition or invariant."""


class ShapeMismatchError(ValidationError):
    """Two parameter vectors with incompatible layer shapes were combined."""

    def __init__(self, left, right):
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"parameter shape mismatch: {self.left} vs {self.right}")


class DivergenceError(FedReplayError, RuntimeError):
    """An iterative update produced non-finite values."""

    def __init__(self, message: str, iteration: int):
        self.iteration = iteration
        super().__init__(f"{message} (iteration {iteration})")


def derive_seed(*parts: int | str) -> int:
    """Stable 64-bit seed derived from a mix of integers and string tags.

    Hash-based so that distinct purposes ("partition", task 2, client 0, ...)
    get independent, reproducible streams from one experiment seed.
    """
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, str):
            h.update(b"s")
            h.update(p.encode("utf-8"))
        elif isinstance(p, (int, np.integer)):
            h.update(b"i")
            h.update(int(p).to_bytes(16, "little", signed=True))
        else:
            raise ValidationError(f"seed parts must be int or str, got {type(p).__name__}")
    return int.from_bytes(h.digest()[:8], "little")


def seeded_rng(*parts: int | str) -> np.random.Generator:
    """Fresh generator owned by the caller, keyed by (seed, purpose tags)."""
    return np.random.default_rng(derive_seed(*parts))


def largest_remainder_round(weights: Sequence[float], total: int) -> np.ndarray:
    """Hamilton apportionment: split `total` units proportionally to `weights`.

    Floors the fractional shares and hands the leftover units to the largest
    remainders (ties broken by ascending index). All-zero weights fall back
    to an equal split. Returns ints summing exactly to `total`.
    """
    w = np.asarray(weights, dtype=np.float64)
    if total < 0:
        raise ValidationError(f"cannot apportion a negative total ({total})")
    if w.size == 0:
        if total != 0:
            raise ValidationError("cannot apportion a positive total over zero bins")
        return np.zeros(0, dtype=np.int64)
    if np.any(w < 0):
        raise ValidationError("apportionment weights must be non-negative")
    wsum = float(w.sum())
    shares = np.full(w.size, total / w.size) if wsum == 0.0 else w / wsum * total
    quotas = np.floor(shares).astype(np.int64)
    leftover = int(total - quotas.sum())
    if leftover > 0:
        remainders = shares - quotas
        # stable argsort on (-remainder) keeps ascending-index tie-break
        order = np.argsort(-remainders, kind="stable")
        quotas[order[:leftover]] += 1
    return quotas


@dataclass(frozen=True)
class LayerShape:
    """Weight matrix dimensions (rows, cols) plus its bias length."""

    rows: int
    cols: int
    bias: int

    @property
    def size(self) -> int:
        return self.rows * self.cols + self.bias


@dataclass(frozen=True)
class ModelParams:
    """Flat float64 parameter vector with per-layer shape metadata.

    Layout is [W0 (row-major), b0, W1, b1, ...]. The backing array is frozen
    on construction; arithmetic always returns new instances.
    """

    values: np.ndarray
    shapes: tuple[LayerShape, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            v = v.reshape(-1)
        if not v.flags.c_contiguous or v is self.values and v.flags.writeable:
            v = v.copy()
        expected = sum(s.size for s in self.shapes)
        if v.size != expected:
            raise ValidationError(
                f"parameter vector has {v.size} entries, shapes require {expected}"
            )
        if not np.all(np.isfinite(v)):
            bad = int(np.flatnonzero(~np.isfinite(v))[0])
            raise ValidationError(f"non-finite parameter entry at index {bad}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def layer_arrays(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Read-only (W, b) views per layer, in declaration order."""
        out = []
        off = 0
        for s in self.shapes:
            w = self.values[off : off + s.rows * s.cols].reshape(s.rows, s.cols)
            off += s.rows * s.cols
            b = self.values[off : off + s.bias]
            off += s.bias
            out.append((w, b))
        return out


def param_axpy(alpha: float, x: ModelParams, y: ModelParams) -> ModelParams:
    """Return y + alpha * x without touching either input."""
    if x.shapes != y.shapes:
        raise ShapeMismatchError(x.shapes, y.shapes)
    return ModelParams(y.values + alpha * x.values, y.shapes)


def param_l2_norm(x: ModelParams) -> float:
    """Euclidean norm of the flat parameter vector."""
    v = x.values
    finite = np.isfinite(v)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise ValidationError(f"non-finite parameter entry at index {bad}")
    return float(np.sqrt(np.dot(v, v)))


@dataclass(frozen=True)
class LabeledSample:
    """One replayable sample: feature vector, class label, domain id, stable uid."""

    uid: int
    features: np.ndarray
    label: int
    domain: int = 0

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        f.setflags(write=False)
        object.__setattr__(self, "features", f)


@dataclass(frozen=True)
class Dataset:
    """Validated collection of samples with a declared class count and feature dim."""

    samples: tuple[LabeledSample, ...]
    num_classes: int
    feature_dim: int

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.num_classes < 1:
            raise ValidationError(f"num_classes must be positive, got {self.num_classes}")
        if self.feature_dim < 1:
            raise ValidationError(f"feature_dim must be positive, got {self.feature_dim}")
        seen: set[int] = set()
        for s in self.samples:
            if s.uid < 0:
                raise ValidationError(f"negative uid {s.uid}")
            if s.uid in seen:
                raise ValidationError(f"duplicate uid {s.uid} in dataset")
            seen.add(s.uid)
            if s.features.shape != (self.feature_dim,):
                raise ValidationError(
                    f"sample {s.uid} has {s.features.shape} features, expected ({self.feature_dim},)"
                )
            if not np.all(np.isfinite(s.features)):
                raise ValidationError(f"sample {s.uid} has non-finite features")
            if not 0 <= s.label < self.num_classes:
                raise ValidationError(
                    f"sample {s.uid} label {s.label} outside 0..{self.num_classes - 1}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    @cached_property
    def feature_matrix(self) -> np.ndarray:
        if not self.samples:
            m = np.zeros((0, self.feature_dim))
        else:
            m = np.stack([s.features for s in self.samples])
        m.setflags(write=False)
        return m

    @cached_property
    def label_vector(self) -> np.ndarray:
        v = np.array([s.label for s in self.samples], dtype=np.int64)
        v.setflags(write=False)
        return v

    def uids(self) -> set[int]:
        return {s.uid for s in self.samples}

    def class_histogram(self) -> "ClassHistogram":
        return ClassHistogram.from_labels(int(s.label) for s in self.samples)


@dataclass(frozen=True)
class ClassHistogram:
    """Per-class sample counts (class id -> non-negative count)."""

    counts: Mapping[int, int]

    def __post_init__(self):
        frozen = {}
        for y in sorted(self.counts):
            n = int(self.counts[y])
            if n < 0:
                raise ValidationError(f"negative count {n} for class {y}")
            frozen[int(y)] = n
        object.__setattr__(self, "counts", frozen)

    @classmethod
    def from_labels(cls, labels: Iterable[int]) -> "ClassHistogram":
        counts: dict[int, int] = {}
        for y in labels:
            counts[int(y)] = counts.get(int(y), 0) + 1
        return cls(counts)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def get(self, y: int) -> int:
        return self.counts.get(y, 0)

    def classes(self) -> tuple[int, ...]:
        return tuple(sorted(self.counts))


ALLOCATION_MODES = ("dynamic", "fixed_equal")


@dataclass(frozen=True)
class FederationConfig:
    """Validated federation and training hyperparameters.

    `pool` counts exemplar slots (whole samples, not bytes). `pool = 0` is
    accepted so the no-replay ablation can run through the same pipeline.
    """

    num_clients: int = 5
    rounds_per_task: int = 5
    local_epochs: int = 2
    info_iters: int = 3
    pool: int = 1200
    m_min: int = 0
    m_max: int = 400
    mix: float = 0.4
    momentum: float = 0.4
    info_lr: float = 0.005
    mg_weight: float = 0.1
    train_lr: float = 0.15
    batch_size: int = 64
    seed: int = 0
    allocation_mode: str = "dynamic"

    def __post_init__(self):
        for key in ("num_clients", "rounds_per_task", "local_epochs", "info_iters",
                    "m_max", "batch_size"):
            if getattr(self, key) < 1:
                raise ValidationError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.pool < 0:
            raise ValidationError(f"pool must be >= 0, got {self.pool}")
        if self.m_min < 0:
            raise ValidationError(f"m_min must be >= 0, got {self.m_min}")
        if self.m_min > self.m_max:
            raise ValidationError(f"m_min ({self.m_min}) > m_max ({self.m_max})")
        if self.num_clients * self.m_min > self.pool:
            raise ValidationError(
                f"num_clients * m_min ({self.num_clients * self.m_min}) exceeds pool ({self.pool})"
            )
        if not 0.0 <= self.mix <= 1.0:
            raise ValidationError(f"mix must lie in [0, 1], got {self.mix}")
        if not 0.0 < self.momentum < 1.0:
            raise ValidationError(f"momentum must lie strictly in (0, 1), got {self.momentum}")
        for key in ("info_lr", "train_lr"):
            if getattr(self, key) <= 0:
                raise ValidationError(f"{key} must be positive, got {getattr(self, key)}")
        if self.mg_weight < 0:
            raise ValidationError(f"mg_weight must be >= 0, got {self.mg_weight}")
        if self.allocation_mode not in ALLOCATION_MODES:
            raise ValidationError(
                f"allocation_mode must be one of {ALLOCATION_MODES}, got {self.allocation_mode!r}"
            )
