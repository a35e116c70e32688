"""Brute-force reference implementations, used only by the test suite.

Everything here is written directly from first principles and shares no
code with the modules it checks: LOF from the distance/neighborhood
definitions, gradients from central finite differences, geodesics from
a plain BFS, k-means from exhaustive partition enumeration, and
line-of-sight from exact rational arithmetic.  All entry points are
guarded to desk-scale inputs so they never end up on a production path.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from fractions import Fraction

import numpy as np

_MAX_POINTS = 200
_MAX_PARAM_ENTRIES = 10_000


def _cosine_distance(u, v, eps: float) -> float:
    nu = math.sqrt(sum(x * x for x in u))
    nv = math.sqrt(sum(x * x for x in v))
    dot = sum(a * b for a, b in zip(u, v))
    d = 1.0 - dot / (max(nu, eps) * max(nv, eps))
    d = min(max(d, 0.0), 2.0)
    if d < eps:
        return 0.0
    if d > 2.0 - eps:
        return 2.0
    return d


def lof_bruteforce(seq, k: int, eps: float = 1e-12) -> list[float]:
    """Local outlier factor per frame, straight from the definitions.

    For each i: d_k is the distance to the k-th nearest other frame, the
    neighborhood holds every j with d(i, j) <= d_k (ties included),
    reach-dist(i, j) = max(d_k(j), d(i, j)), LRD is the inverse mean
    reachability (epsilon-guarded), and LOF is the mean neighbor/self
    LRD ratio.
    """
    pts = [list(map(float, row)) for row in seq]
    L = len(pts)
    assert 2 <= L <= _MAX_POINTS, "oracle accepts desk-scale inputs only"
    assert 1 <= k <= L - 1
    dist = [[_cosine_distance(pts[i], pts[j], eps) for j in range(L)] for i in range(L)]

    d_k = []
    neigh = []
    for i in range(L):
        others = sorted(dist[i][j] for j in range(L) if j != i)
        d_k.append(others[k - 1])
        neigh.append([j for j in range(L) if j != i and dist[i][j] <= others[k - 1]])

    lrd = []
    for i in range(L):
        reach = [max(d_k[j], dist[i][j]) for j in neigh[i]]
        mean_reach = sum(reach) / len(reach)
        lrd.append(1.0 / max(mean_reach, eps))

    scores = []
    for i in range(L):
        scores.append(sum(lrd[j] / lrd[i] for j in neigh[i]) / len(neigh[i]))
    return scores


def fd_gradient(lossfn, params: dict[str, np.ndarray], step: float = 1e-5):
    """Central-difference gradient of a pure scalar loss, per entry."""
    assert step > 0
    total = sum(int(np.asarray(p).size) for p in params.values())
    assert total <= _MAX_PARAM_ENTRIES, "oracle accepts desk-scale inputs only"
    grads = {}
    work = {name: np.array(p, dtype=np.float64) for name, p in params.items()}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            hi = lossfn(work)
            flat[idx] = orig - step
            lo = lossfn(work)
            flat[idx] = orig
            gflat[idx] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return grads


def geodesic_bfs(scene, start: tuple[int, int], category: int) -> int:
    """Exact BFS distance to the nearest success-region cell.

    The success region is every free cell within Chebyshev distance 1 of
    an instance of the category.  Raises if unreachable.
    """
    h, w = scene.grid.shape
    assert h * w <= _MAX_POINTS * _MAX_POINTS
    goal_cells = set()
    for obj in scene.objects:
        if obj.category != category:
            continue
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                r, c = obj.row + dr, obj.col + dc
                if 0 <= r < h and 0 <= c < w and scene.grid[r, c] == 0:
                    goal_cells.add((r, c))
    if not goal_cells:
        raise ValueError(f"category {category} not present")
    if start in goal_cells:
        return 0
    seen = {start}
    frontier = deque([(start, 0)])
    while frontier:
        (r, c), d = frontier.popleft()
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nxt = (r + dr, c + dc)
            if nxt in seen:
                continue
            if not (0 <= nxt[0] < h and 0 <= nxt[1] < w) or scene.grid[nxt] != 0:
                continue
            if nxt in goal_cells:
                return d + 1
            seen.add(nxt)
            frontier.append((nxt, d + 1))
    raise ValueError(f"success region of category {category} unreachable from {start}")


def visible_bruteforce(grid: np.ndarray, a: tuple[int, int], b: tuple[int, int]) -> bool:
    """Midpoint-sampling line of sight evaluated with exact rationals.

    Samples the center-to-center segment at i/n for i in 1..n-1 where n
    is the Chebyshev distance; a sample exactly on a cell boundary
    blocks nothing, otherwise the cell containing it must not be a wall.
    """
    ar, ac = a
    br, bc = b
    n = max(abs(br - ar), abs(bc - ac))
    if n <= 1:
        return True
    half = Fraction(1, 2)
    for i in range(1, n):
        x = Fraction(ar) + Fraction(i * (br - ar), n)
        y = Fraction(ac) + Fraction(i * (bc - ac), n)
        if (x + half).denominator == 1 or (y + half).denominator == 1:
            continue
        r = math.floor(x + half)
        c = math.floor(y + half)
        if (r, c) != (br, bc) and grid[r, c] == 1:
            return False
    return True


def exact_kmeans(points: np.ndarray, k: int):
    """Globally optimal k-means by enumerating all assignments.

    Returns (labels, centroids, cost); only for tiny inputs.
    """
    pts = np.asarray(points, dtype=np.float64)
    L = len(pts)
    assert k >= 1 and L <= 12 and k <= 3, "oracle accepts tiny inputs only"
    best = None
    for labels in itertools.product(range(k), repeat=L):
        if len(set(labels)) != k:
            continue
        cost = 0.0
        centroids = np.zeros((k, pts.shape[1]))
        for j in range(k):
            members = pts[[i for i in range(L) if labels[i] == j]]
            centroids[j] = members.mean(axis=0)
            cost += ((members - centroids[j]) ** 2).sum()
        if best is None or cost < best[2]:
            best = (np.array(labels), centroids, cost)
    return best
