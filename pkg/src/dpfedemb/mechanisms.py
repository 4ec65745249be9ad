"""Noise mechanisms applied to the sum of clipped virtual-client updates.

Two mechanisms are provided: independent Gaussian noise per round, and
binary-tree correlated noise where the noisy *prefix sums* of the updates are
released and per-round deltas are their differences.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .params import RngStream, sample_gaussian_vector

MECHANISMS = ("gaussian", "tree")


@dataclass(frozen=True)
class NoiseConfig:
    noise_multiplier: float
    clip_norm: float
    mechanism: str = "gaussian"

    def __post_init__(self):
        if not self.noise_multiplier >= 0:
            raise ValueError(f"noise multiplier must be >= 0, got {self.noise_multiplier}")
        if not self.clip_norm > 0:
            raise ValueError(f"clip norm must be > 0, got {self.clip_norm}")
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}, got {self.mechanism!r}")
        if self.noise_multiplier > 0 and math.isinf(self.clip_norm):
            raise ValueError("noise requires a finite clip norm")

    @property
    def noise_std(self) -> float:
        """Standard deviation of the noise added to the summed updates."""
        if self.noise_multiplier == 0:
            return 0.0
        return self.noise_multiplier * self.clip_norm


def sum_updates(updates: Sequence[np.ndarray]) -> np.ndarray:
    """Sum in list order, so the result does not depend on which thread
    produced which update."""
    if len(updates) == 0:
        raise ValueError("no updates to aggregate")
    total = np.array(updates[0], dtype=np.float64, copy=True)
    for u in updates[1:]:
        if u.shape != total.shape:
            raise ValueError("updates have different lengths")
        total += u
    return total


def gaussian_aggregate(updates: Sequence[np.ndarray], cfg: NoiseConfig, rng: RngStream) -> np.ndarray:
    """``(sum(updates) + N(0, (sigma*gamma)^2 I)) / len(updates)``."""
    total = sum_updates(updates)
    total += sample_gaussian_vector(total.shape[0], cfg.noise_std, rng)
    return total / len(updates)


def dyadic_blocks(t: int) -> list[tuple[int, int]]:
    """Decompose steps ``1..t`` into complete dyadic blocks.

    A block ``(level, index)`` covers steps ``index*2**level + 1`` through
    ``(index+1)*2**level``. There is one block per set bit of ``t``.
    """
    blocks = []
    start = 0
    for level in range(t.bit_length() - 1, -1, -1):
        if t >> level & 1:
            blocks.append((level, start >> level))
            start += 1 << level
    return blocks


@dataclass
class TreeState:
    """Lazily materialized node noise for a binary tree over ``total_steps``.

    Node noise is drawn from a stream keyed by the node, so a node has the same
    value in every prefix that uses it. Nodes are cached until they stop being
    part of the current prefix decomposition.
    """

    total_steps: int
    length: int
    rng: RngStream
    _cache: dict = field(default_factory=dict, repr=False)
    last_step: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("tree needs at least one step")

    @property
    def depth(self) -> int:
        """Maximum number of nodes a single leaf touches."""
        return (self.total_steps - 1).bit_length() + 1

    def node_noise(self, level: int, index: int, scale: float) -> np.ndarray:
        key = (level, index, scale)
        if key not in self._cache:
            self._cache[key] = sample_gaussian_vector(self.length, scale, self.rng.child(level, index))
        return self._cache[key]

    def evict_except(self, keep: list[tuple[int, int]]) -> None:
        wanted = set(keep)
        for key in list(self._cache):
            if key[:2] not in wanted:
                del self._cache[key]


def tree_prefix_noise(state: TreeState, t: int, scale: float) -> np.ndarray:
    """Noise attached to the prefix sum over steps ``1..t``."""
    if not 1 <= t <= state.total_steps:
        raise ValueError(f"step {t} outside 1..{state.total_steps}")
    if scale < 0:
        raise ValueError("scale must be >= 0")
    out = np.zeros(state.length)
    for level, index in dyadic_blocks(t):
        out += state.node_noise(level, index, scale)
    return out


def tree_server_delta(round_sum: np.ndarray, num_clients: int, state: TreeState, t: int,
                      cfg: NoiseConfig) -> np.ndarray:
    """Per-round update recovered from consecutive noisy prefix sums.

    ``round_sum`` is the sum of this round's clipped updates. The released
    noisy prefix is ``sum_{s<=t} round_sum_s + prefix_noise(t)``; the returned
    delta is its difference with the previous prefix, divided by
    ``num_clients``. Must be called with ``t = 1, 2, ...`` in order.
    """
    if t != state.last_step + 1:
        raise RuntimeError(f"tree steps must be consecutive: expected {state.last_step + 1}, got {t}")
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    scale = cfg.noise_std
    noise = tree_prefix_noise(state, t, scale)
    if t > 1:
        noise = noise - tree_prefix_noise(state, t - 1, scale)
    state.last_step = t
    state.evict_except(dyadic_blocks(t))
    return (np.asarray(round_sum, dtype=np.float64) + noise) / num_clients


@dataclass(frozen=True)
class AdaptiveClipState:
    clip_norm: float
    target_quantile: float = 0.5
    learning_rate: float = 0.2

    def __post_init__(self):
        if not self.clip_norm > 0 or math.isinf(self.clip_norm):
            raise ValueError("adaptive clip norm must be positive and finite")
        if not 0 < self.target_quantile < 1:
            raise ValueError("target quantile must be in (0, 1)")
        if not self.learning_rate > 0:
            raise ValueError("clip learning rate must be > 0")


def adaptive_clip_step(state: AdaptiveClipState, unclipped_fraction: float) -> AdaptiveClipState:
    """Geometric update ``C <- C * exp(-lr * (b - q))``.

    ``unclipped_fraction`` is the fraction of updates whose norm was at most
    the current clip norm.
    """
    if not 0.0 <= unclipped_fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {unclipped_fraction}")
    factor = math.exp(-state.learning_rate * (unclipped_fraction - state.target_quantile))
    clip = min(max(state.clip_norm * factor, sys.float_info.min), sys.float_info.max)
    return AdaptiveClipState(clip, state.target_quantile, state.learning_rate)
