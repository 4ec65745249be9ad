"""Verification metrics for embeddings: pair scores, recall@FAR, ROC.

A pair is accepted when its similarity score is at least the threshold.
For a FAR budget ``f`` over ``N`` negative pairs at most ``a = max{c : c/N <= f}``
negatives may be accepted, so the threshold is the smallest observed score
strictly above the ``(a+1)``-th largest negative score. Positives tied with
that negative are rejected.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from .params import RngStream

METRICS = ("cosine", "inner")
_TILE = 1024


class UnresolvableFARError(ValueError):
    """Too few negative pairs to resolve the requested false accept rate."""


@dataclass(eq=False)
class EmbeddingSet:
    embeddings: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != self.labels.shape[0]:
            raise ValueError(f"embeddings {self.embeddings.shape} vs labels {self.labels.shape}")
        if self.embeddings.shape[0] < 2:
            raise ValueError("need at least two embeddings")

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class RocCurve:
    far: np.ndarray
    recall: np.ndarray
    thresholds: np.ndarray

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.far.tolist(), self.recall.tolist()))


def _prepare(emb: np.ndarray, metric: str) -> np.ndarray:
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    if metric == "cosine":
        nrm = np.linalg.norm(emb, axis=1, keepdims=True)
        return emb / np.where(nrm > 0, nrm, 1.0)
    return emb


def _tile_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    s = np.zeros((a.shape[0], b.shape[0]))
    for k in range(a.shape[1]):
        s += np.multiply.outer(a[:, k], b[:, k])
    return s


def pairwise_scores(es: EmbeddingSet, metric: str = "cosine") -> tuple[np.ndarray, np.ndarray]:
    """Scores of all unordered pairs ``i < j``, split into same-label
    (positive) and different-label (negative) pairs.

    Computed tile by tile so memory stays bounded. Each score is accumulated
    over features in a fixed order rather than by BLAS, whose rounding
    depends on block shape, so the result is bit-identical for any tile size.
    """
    e = _prepare(es.embeddings, metric)
    labels = es.labels
    n = e.shape[0]
    pos, neg = [], []
    for i0 in range(0, n, _TILE):
        i1 = min(i0 + _TILE, n)
        for j0 in range(i0, n, _TILE):
            j1 = min(j0 + _TILE, n)
            s = _tile_dot(e[i0:i1], e[j0:j1])
            same = labels[i0:i1, None] == labels[None, j0:j1]
            if i0 == j0:
                keep = np.triu(np.ones(s.shape, dtype=bool), k=1)
            else:
                keep = np.ones(s.shape, dtype=bool)
            pos.append(s[keep & same])
            neg.append(s[keep & ~same])
    return np.concatenate(pos), np.concatenate(neg)


def allowed_false_accepts(far_target: float, num_neg: int) -> int:
    """Largest ``c`` with ``c / num_neg <= far_target`` (float comparison)."""
    a = min(int(math.floor(far_target * num_neg)), num_neg)
    while a < num_neg and (a + 1) / num_neg <= far_target:
        a += 1
    while a > 0 and a / num_neg > far_target:
        a -= 1
    return a


def recall_from_scores(pos: np.ndarray, neg: np.ndarray, far_target: float) -> tuple[float, float]:
    """Return ``(recall, threshold)`` at the given FAR budget."""
    if not 0.0 < far_target <= 1.0:
        raise ValueError(f"FAR target must be in (0, 1], got {far_target}")
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.size == 0:
        raise UnresolvableFARError("no positive pairs")
    if neg.size == 0 or 1.0 / neg.size > far_target:
        raise UnresolvableFARError(
            f"FAR {far_target:g} needs at least {math.ceil(1 / far_target)} negative pairs, have {neg.size}")
    a = allowed_false_accepts(far_target, neg.size)
    if a >= neg.size:
        return 1.0, float(min(pos.min(), neg.min()))
    # (a+1)-th largest negative; every accepted score must be strictly above it.
    cut = np.partition(neg, neg.size - a - 1)[neg.size - a - 1]
    recall = float(np.count_nonzero(pos > cut)) / pos.size
    above = np.concatenate([pos[pos > cut], neg[neg > cut]])
    threshold = float(above.min()) if above.size else math.inf
    return recall, threshold


def recall_at_far(es: EmbeddingSet, far_target: float, metric: str = "cosine") -> float:
    pos, neg = pairwise_scores(es, metric)
    return recall_from_scores(pos, neg, far_target)[0]


def minibatch_scores(es: EmbeddingSet, batch: int, rng: RngStream,
                     metric: str = "cosine") -> tuple[np.ndarray, np.ndarray]:
    if batch < 2:
        raise ValueError("batch must be >= 2")
    n = len(es)
    if batch >= n:
        return pairwise_scores(es, metric)
    order = rng.generator().permutation(n)
    pos, neg = [], []
    for s in range(0, n, batch):
        idx = np.sort(order[s:s + batch])
        if idx.size < 2:
            continue
        p, q = pairwise_scores(EmbeddingSet(es.embeddings[idx], es.labels[idx]), metric)
        pos.append(p)
        neg.append(q)
    return np.concatenate(pos), np.concatenate(neg)


def recall_at_far_minibatch(es: EmbeddingSet, far_target: float, batch: int, rng: RngStream,
                            metric: str = "cosine") -> float:
    """Recall@FAR using only pairs that fall inside the same random minibatch."""
    pos, neg = minibatch_scores(es, batch, rng, metric)
    return recall_from_scores(pos, neg, far_target)[0]


def roc_from_scores(pos: np.ndarray, neg: np.ndarray, num_points: int = 50) -> RocCurve:
    if num_points < 2:
        raise ValueError("num_points must be >= 2")
    if len(neg) == 0:
        raise UnresolvableFARError("no negative pairs")
    fars = np.geomspace(1.0 / len(neg), 1.0, num_points)
    fars[-1] = 1.0
    rec, thr = zip(*(recall_from_scores(pos, neg, f) for f in fars))
    return RocCurve(fars, np.array(rec), np.array(thr))


def roc_points(es: EmbeddingSet, metric: str = "cosine", num_points: int = 50) -> RocCurve:
    pos, neg = pairwise_scores(es, metric)
    return roc_from_scores(pos, neg, num_points)


def subsample_by_label(es: EmbeddingSet, num_labels: int, rng: RngStream) -> EmbeddingSet:
    """Keep all embeddings of ``num_labels`` randomly chosen identities.

    Cheap approximate validation; carries no fidelity guarantee.
    """
    labels = np.unique(es.labels)
    if num_labels >= labels.size:
        return es
    keep = rng.generator().choice(labels, size=num_labels, replace=False)
    mask = np.isin(es.labels, keep)
    return EmbeddingSet(es.embeddings[mask], es.labels[mask])


def write_roc_csv(curve: RocCurve, fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["far", "recall", "threshold"])
    for f, r, t in zip(curve.far, curve.recall, curve.thresholds):
        w.writerow([repr(float(f)), repr(float(r)), repr(float(t))])


def summary(pos: np.ndarray, neg: np.ndarray, fars: Sequence[float] = (1e-3, 1e-2, 1e-1)) -> dict:
    """``{"recall@<far>": value}``; unresolvable entries map to ``None``."""
    out = {"num_positive_pairs": int(len(pos)), "num_negative_pairs": int(len(neg))}
    for f in fars:
        try:
            out[f"recall@{f:g}"] = recall_from_scores(pos, neg, f)[0]
        except UnresolvableFARError:
            out[f"recall@{f:g}"] = None
    return out


def write_summary_json(data: dict, fh: IO[str]) -> None:
    json.dump(data, fh, indent=2, sort_keys=True)
    fh.write("\n")
