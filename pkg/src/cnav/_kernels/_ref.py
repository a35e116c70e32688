"""Pure NumPy kernels: the fallback backend.

Semantics here are the reference; the compiled backend in ``_core.pyx``
must match these functions to near machine precision (see tests and
``benchmarks/kernel_bench.py``).
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_forward(xa: np.ndarray, u: np.ndarray):
    """Run a gated recurrent cell over a sequence from a zero state.

    ``xa`` is the precomputed input-side affine map, one row per step,
    laid out as [update | reset | candidate] blocks of width H.  ``u`` is
    the hidden-side weight matrix with the same block layout.  Returns
    the hidden states (L, H) and the per-step gate activations (L, 3H)
    saved for the backward pass.
    """
    L, h3 = xa.shape
    H = h3 // 3
    uz, ur, uc = u[:, :H], u[:, H : 2 * H], u[:, 2 * H :]
    hs = np.empty((L, H))
    gates = np.empty((L, h3))
    h = np.zeros(H)
    for t in range(L):
        z = _sigmoid(xa[t, :H] + h @ uz)
        r = _sigmoid(xa[t, H : 2 * H] + h @ ur)
        c = np.tanh(xa[t, 2 * H :] + (r * h) @ uc)
        h = (1.0 - z) * h + z * c
        gates[t, :H] = z
        gates[t, H : 2 * H] = r
        gates[t, 2 * H :] = c
        hs[t] = h
    return hs, gates


def gru_backward(d_hs: np.ndarray, hs: np.ndarray, gates: np.ndarray, u: np.ndarray):
    """Backpropagate through ``gru_forward``.

    Given upstream gradients for every hidden state, returns the gradient
    of the input-side affine rows (L, 3H) and of the hidden-side weights
    (H, 3H).
    """
    L, H = hs.shape
    uz, ur, uc = u[:, :H], u[:, H : 2 * H], u[:, 2 * H :]
    d_xa = np.empty((L, 3 * H))
    d_u = np.zeros_like(u)
    zero = np.zeros(H)
    dh = zero
    for t in range(L - 1, -1, -1):
        h_prev = hs[t - 1] if t > 0 else zero
        z = gates[t, :H]
        r = gates[t, H : 2 * H]
        c = gates[t, 2 * H :]
        dht = d_hs[t] + dh
        dz = dht * (c - h_prev)
        dc = dht * z
        dhp = dht * (1.0 - z)
        dac = dc * (1.0 - c * c)
        drh = dac @ uc.T
        dr = drh * h_prev
        dhp = dhp + drh * r
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        d_xa[t, :H] = daz
        d_xa[t, H : 2 * H] = dar
        d_xa[t, 2 * H :] = dac
        d_u[:, :H] += np.outer(h_prev, daz)
        d_u[:, H : 2 * H] += np.outer(h_prev, dar)
        d_u[:, 2 * H :] += np.outer(r * h_prev, dac)
        dh = dhp + daz @ uz.T + dar @ ur.T
    return d_xa, d_u


def cosine_distance_matrix(emb: np.ndarray, eps: float) -> np.ndarray:
    """All-pairs cosine distance 1 - u.v/(|u||v|), canonicalized.

    Norms below ``eps`` are clamped to ``eps`` before normalizing.
    Distances are clipped to [0, 2] and snapped: values below ``eps``
    collapse to exactly 0, values above 2 - eps to exactly 2.  The snap
    makes tie structure identical across backends and brute-force
    re-implementations, which matters for LOF neighborhoods.

    Duplicate rows are mapped through a unique-row table so that equal
    inputs always produce equal distances.
    """
    norms = np.sqrt((emb * emb).sum(axis=1))
    unit = emb / np.maximum(norms, eps)[:, None]
    uniq, inverse = np.unique(unit, axis=0, return_inverse=True)
    d = 1.0 - uniq @ uniq.T
    np.clip(d, 0.0, 2.0, out=d)
    d[d < eps] = 0.0
    d[d > 2.0 - eps] = 2.0
    dist = d[np.ix_(inverse.ravel(), inverse.ravel())]
    np.fill_diagonal(dist, 0.0)
    return np.ascontiguousarray(dist)


def lof_scores_from_dist(dist: np.ndarray, k: int, eps: float) -> np.ndarray:
    """Local outlier factor for every row of a distance matrix.

    Neighborhoods use the classical tie rule: every other point within
    the k-th nearest distance belongs to the neighborhood, so its size
    can exceed ``k``.  A zero mean reachability distance is replaced by
    ``eps`` before inversion, which makes all-identical inputs score 1.
    """
    L = dist.shape[0]
    off = dist.copy()
    np.fill_diagonal(off, np.inf)
    d_k = np.sort(off, axis=1)[:, k - 1]
    neigh = off <= d_k[:, None]
    counts = neigh.sum(axis=1)
    reach = np.maximum(d_k[None, :], off)
    mean_reach = np.where(neigh, reach, 0.0).sum(axis=1) / counts
    lrd = 1.0 / np.maximum(mean_reach, eps)
    return (neigh @ lrd) / counts / lrd


def lof_scores(emb: np.ndarray, k: int, eps: float) -> np.ndarray:
    return lof_scores_from_dist(cosine_distance_matrix(emb, eps), k, eps)
