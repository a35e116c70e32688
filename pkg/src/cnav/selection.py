"""Keyframe selection over frozen visual embeddings.

Frames whose local outlier factor exceeds 1 sit in sparse regions of
the embedding space: doorway transitions, goal approaches, decision
points.  Those are the frames worth replaying.  Cosine distances feed a
k-distance neighborhood (with the classical tie rule, so neighborhoods
can exceed k), reachability distances give a local reachability
density, and the LOF of a frame is the mean neighbor-to-self density
ratio.  Uniform and k-means baselines provide the comparison samplers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .tensor import as_f64


@dataclass
class LofConfig:
    k_neighbors: int = 10
    threshold: float = 1.0
    epsilon_norm: float = 1e-12
    min_keep: int = 2
    max_keep_ratio: float = 1.0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if not 0 < self.max_keep_ratio <= 1:
            raise ValueError("max_keep_ratio must lie in (0, 1]")


@dataclass
class KeyframeSet:
    indices: list[int]  # strictly increasing frame indices (0-based)
    scores: list[float]  # LOF score per selected index
    length: int  # source sequence length

    def __post_init__(self):
        assert all(b > a for a, b in zip(self.indices, self.indices[1:]))
        assert len(self.indices) == len(self.scores)

    @property
    def retention(self) -> float:
        return len(self.indices) / self.length


def cosine_distance(u, v, eps: float = 1e-12) -> float:
    """1 - cos similarity, clipped to [0, 2] with endpoint snapping.

    Values within ``eps`` of 0 or 2 collapse to the exact endpoint so
    that duplicate and antipodal pairs tie exactly.
    """
    pair = np.stack([as_f64(u), as_f64(v)])
    return float(_kernels.cosine_distance_matrix(pair, eps)[0, 1])


def k_distance_neighborhood(seq, i: int, k: int, eps: float = 1e-12):
    """(d_k, neighborhood) of frame i: every j != i with d(i,j) <= d_k.

    Ties at the k-distance are included, so the neighborhood may hold
    more than k frames.
    """
    emb = as_f64(seq)
    L = len(emb)
    if L < 2:
        raise ValueError("need at least two frames")
    if not 1 <= k <= L - 1:
        raise ValueError(f"k must lie in [1, {L - 1}]")
    dist = np.asarray(_kernels.cosine_distance_matrix(emb, eps))[i]
    others = np.delete(np.arange(L), i)
    order = others[np.argsort(dist[others], kind="stable")]
    d_k = float(dist[order[k - 1]])
    neighborhood = {int(j) for j in others if dist[j] <= d_k}
    return d_k, neighborhood


def lof_scores(seq, cfg: LofConfig) -> np.ndarray:
    """LOF per frame; k is clamped to len(seq) - 1."""
    emb = as_f64(seq)
    L = len(emb)
    if L < 2:
        raise ValueError("LOF needs at least two frames")
    k = min(cfg.k_neighbors, L - 1)
    return np.asarray(_kernels.lof_scores(np.ascontiguousarray(emb), k, cfg.epsilon_norm))


def select_keyframes(seq, cfg: LofConfig) -> KeyframeSet:
    """Frames with LOF above threshold, plus guard rails.

    The final frame (the stop decision) is always kept.  If fewer than
    ``min_keep`` frames qualify, the top scorers fill the gap; if more
    than ``max_keep_ratio * L`` qualify, only the top scorers survive.
    Indices come back in temporal order.
    """
    emb = as_f64(seq)
    L = len(emb)
    if L == 1:
        return KeyframeSet(indices=[0], scores=[1.0], length=1)
    scores = lof_scores(emb, cfg)
    selected = {i for i in range(L) if scores[i] > cfg.threshold}
    selected.add(L - 1)

    keep_min = min(cfg.min_keep, L)
    cap = min(L, max(keep_min, math.ceil(cfg.max_keep_ratio * L)))
    by_score = sorted(range(L), key=lambda i: (-scores[i], i))
    if len(selected) < keep_min:
        for i in by_score:
            if len(selected) >= keep_min:
                break
            selected.add(i)
    if len(selected) > cap:
        ranked = [i for i in by_score if i in selected and i != L - 1]
        selected = set(ranked[: cap - 1]) | {L - 1}

    indices = sorted(selected)
    return KeyframeSet(indices=indices, scores=[float(scores[i]) for i in indices], length=L)


def uniform_sample(length: int, ratio: float) -> list[int]:
    """ceil(ratio * L) evenly spaced indices including both endpoints.

    At least two indices are returned whenever the sequence has two
    frames, since the endpoints are always included.
    """
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    if length == 1:
        return [0]
    n = min(length, max(2, math.ceil(ratio * length)))
    span = length - 1
    return [int(math.floor(j * span / (n - 1) + 0.5)) for j in range(n)]


def _kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(len(points)))
    centers[0] = points[first]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(len(points)))
        else:
            idx = int(rng.choice(len(points), p=d2 / total))
        centers[j] = points[idx]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def cluster_sample(seq, ratio: float, seed: int = 0, max_iter: int = 50) -> list[int]:
    """k-means representatives on cosine-normalized embeddings.

    k = ceil(ratio * L); each centroid contributes the nearest unused
    frame index (next-nearest on collisions).  Deterministic under the
    seed.
    """
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    emb = as_f64(seq)
    L = len(emb)
    k = min(L, max(1, math.ceil(ratio * L)))
    norms = np.sqrt((emb * emb).sum(axis=1))
    unit = emb / np.maximum(norms, 1e-12)[:, None]
    rng = np.random.default_rng(seed)
    centers = _kmeans_plus_plus(unit, k, rng)
    labels = np.full(L, -1, dtype=np.intp)
    for _ in range(max_iter):
        d2 = ((unit[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = unit[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    d2 = ((unit[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    taken: list[int] = []
    for j in range(k):
        for idx in np.argsort(d2[:, j], kind="stable"):
            if int(idx) not in taken:
                taken.append(int(idx))
                break
    return sorted(taken)
