"""Inner loops for proposal pooling, IoU tables and top-k hit counting.

Each kernel has a pure-numpy implementation and a numba ``@njit`` twin. The
module-level names dispatch to numba unless ``WSRA_DISABLE_NUMBA`` is set to a
truthy value or numba is not importable. Both variants are importable directly
(``*_numpy`` / ``*_numba``) so tests and the benchmark can compare them.
"""
from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("WSRA_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not _DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"


def pool_rows_numpy(V: np.ndarray, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Mean of rows ``V[starts[p]:ends[p]]`` for every p, via prefix sums."""
    csum = np.zeros((V.shape[0] + 1, V.shape[1]), dtype=np.float64)
    np.cumsum(V, axis=0, out=csum[1:])
    counts = (ends - starts).astype(np.float64)
    return (csum[ends] - csum[starts]) / counts[:, None]


def iou_table_numpy(a_start, a_end, b_start, b_end) -> np.ndarray:
    """Pairwise half-open IoU between span arrays ``a`` (P) and ``b`` (Q) -> (P, Q)."""
    inter = np.minimum(a_end[:, None], b_end[None, :]) - np.maximum(a_start[:, None], b_start[None, :])
    inter = np.maximum(inter, 0.0)
    union = (a_end - a_start)[:, None] + (b_end - b_start)[None, :] - inter
    return inter / union


def topk_hits_numpy(ranks: np.ndarray, target: np.ndarray, k: int) -> int:
    """Count rows of ``ranks`` (trials x candidates, a ranking per row) whose
    first ``k`` entries contain ``target[row]``."""
    return int(np.count_nonzero((ranks[:, :k] == target[:, None]).any(axis=1)))


if HAS_NUMBA:

    @njit(cache=True)
    def pool_rows_numba(V, starts, ends):
        T, d = V.shape
        csum = np.zeros((T + 1, d))
        for r in range(T):
            for j in range(d):
                csum[r + 1, j] = csum[r, j] + V[r, j]
        P = starts.shape[0]
        out = np.empty((P, d))
        for p in range(P):
            a = starts[p]
            b = ends[p]
            n = b - a
            for j in range(d):
                out[p, j] = (csum[b, j] - csum[a, j]) / n
        return out

    @njit(cache=True)
    def iou_table_numba(a_start, a_end, b_start, b_end):
        P = a_start.shape[0]
        Q = b_start.shape[0]
        out = np.empty((P, Q))
        for i in range(P):
            for j in range(Q):
                lo = max(a_start[i], b_start[j])
                hi = min(a_end[i], b_end[j])
                inter = hi - lo if hi > lo else 0.0
                union = (a_end[i] - a_start[i]) + (b_end[j] - b_start[j]) - inter
                out[i, j] = inter / union
        return out

    @njit(cache=True)
    def topk_hits_numba(ranks, target, k):
        hits = 0
        for r in range(ranks.shape[0]):
            for c in range(k):
                if ranks[r, c] == target[r]:
                    hits += 1
                    break
        return hits

else:  # pragma: no cover
    pool_rows_numba = pool_rows_numpy
    iou_table_numba = iou_table_numpy
    topk_hits_numba = topk_hits_numpy


def pool_rows(V, starts, ends) -> np.ndarray:
    V = np.ascontiguousarray(V, dtype=np.float64)
    starts = np.asarray(starts, dtype=np.int64)
    ends = np.asarray(ends, dtype=np.int64)
    if USE_NUMBA:
        return pool_rows_numba(V, starts, ends)
    return pool_rows_numpy(V, starts, ends)


def iou_table(a_start, a_end, b_start, b_end) -> np.ndarray:
    args = [np.ascontiguousarray(x, dtype=np.float64) for x in (a_start, a_end, b_start, b_end)]
    if USE_NUMBA:
        return iou_table_numba(*args)
    return iou_table_numpy(*args)


def topk_hits(ranks, target, k: int) -> int:
    ranks = np.ascontiguousarray(ranks, dtype=np.int64)
    target = np.ascontiguousarray(target, dtype=np.int64)
    if USE_NUMBA:
        return int(topk_hits_numba(ranks, target, int(k)))
    return topk_hits_numpy(ranks, target, int(k))
