"""Flat parameter-vector arithmetic, clipping, masking and seeded noise.

Parameter vectors are 1-D float64 numpy arrays. Functions here never modify
their inputs; they always return a fresh array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# Stream purposes. Every random draw in a run is keyed by
# (purpose, round, virtual-client index) so results do not depend on the
# order in which worker threads happen to run.
PURPOSE_INIT = 0
PURPOSE_SAMPLE = 1
PURPOSE_GROUP = 2
PURPOSE_CAP = 3
PURPOSE_BATCH = 4
PURPOSE_HEAD = 5
PURPOSE_NOISE = 6
PURPOSE_TREE = 7
PURPOSE_EVAL = 8
PURPOSE_DATA = 9


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, key)``.

    The generator is a counter-based Philox keyed through ``SeedSequence``;
    the same ``(seed, key)`` gives bit-identical draws on every platform, and
    streams with different keys are statistically independent.
    """

    seed: int
    key: tuple[int, ...] = ()

    def child(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(int(k) for k in key))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.key)
        return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class TrainableMask:
    """Boolean mask over a parameter vector; ``True`` marks a frozen entry."""

    frozen: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "frozen", np.asarray(self.frozen, dtype=bool).copy())
        self.frozen.setflags(write=False)

    @classmethod
    def none(cls, length: int) -> "TrainableMask":
        return cls(np.zeros(length, dtype=bool))

    @classmethod
    def from_indices(cls, length: int, frozen: Iterable[int]) -> "TrainableMask":
        m = np.zeros(length, dtype=bool)
        m[list(frozen)] = True
        return cls(m)

    @classmethod
    def from_ranges(cls, length: int, ranges: Sequence[tuple[int, int]]) -> "TrainableMask":
        m = np.zeros(length, dtype=bool)
        for lo, hi in ranges:
            if not 0 <= lo <= hi <= length:
                raise ValueError(f"frozen range [{lo}, {hi}) outside [0, {length})")
            m[lo:hi] = True
        return cls(m)

    def __len__(self) -> int:
        return self.frozen.shape[0]

    def trainable_weights(self) -> np.ndarray:
        """0/1 float vector that multiplies gradients."""
        return (~self.frozen).astype(np.float64)


def as_param_vector(values) -> np.ndarray:
    v = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ValueError("parameter vector contains NaN or Inf")
    return v


def l2_norm(v: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64)))


def clip_to_norm(v: np.ndarray, gamma: float) -> np.ndarray:
    """Scale ``v`` by ``min(1, gamma / ||v||)``.

    ``gamma`` may be ``inf`` to disable clipping. The zero vector is returned
    unchanged.
    """
    if not gamma > 0:
        raise ValueError(f"clip norm must be positive, got {gamma}")
    v = np.asarray(v, dtype=np.float64)
    norm = l2_norm(v)
    if norm == 0.0 or norm <= gamma:
        return v.copy()
    return v * (gamma / norm)


def add_scaled(dst: np.ndarray, src: np.ndarray, c: float) -> np.ndarray:
    """Return ``dst + c * src``."""
    dst = np.asarray(dst, dtype=np.float64)
    src = np.asarray(src, dtype=np.float64)
    if dst.shape != src.shape:
        raise ValueError(f"length mismatch: {dst.shape[0]} vs {src.shape[0]}")
    return dst + c * src


def sample_gaussian_vector(length: int, stddev: float, rng: RngStream) -> np.ndarray:
    if stddev < 0 or math.isnan(stddev):
        raise ValueError(f"stddev must be non-negative, got {stddev}")
    if stddev == 0:
        return np.zeros(length, dtype=np.float64)
    return stddev * rng.generator().standard_normal(length)


def apply_mask(v: np.ndarray, mask: TrainableMask) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != len(mask):
        raise ValueError(f"length mismatch: vector {v.shape[0]} vs mask {len(mask)}")
    out = v.copy()
    out[mask.frozen] = 0.0
    return out
