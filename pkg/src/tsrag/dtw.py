"""Dynamic time warping and top-K retrieval over a knowledge base.

Local cost is the squared difference ``(a_i - b_j)**2``. The DP finds the
warping path with the smallest summed cost; similarity is then
``sqrt(cost) / M`` where ``M`` is the number of cells on that path.

When several optimal paths exist, ``M`` is taken from the one a backtrack
from the last cell would follow, preferring the diagonal predecessor, then
the vertical one ``(i-1, j)``, then the horizontal one ``(i, j-1)``. The
backtrack always steps to the predecessor the forward recurrence took its
minimum from, so path length can be carried forward in the rolling rows and
no full matrix is needed.
"""
from __future__ import annotations

import functools
import math
import operator
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np
from numba import njit

from .core import znormalize
from .errors import DataError

if TYPE_CHECKING:
    from .knowledge_base import KnowledgeBase

DEFAULT_TOP_K = 5
BRUTE_FORCE_MAX_LEN = 7

# Move codes, in tie-break preference order.
_DIAG, _VERT, _HORIZ = 0, 1, 2


@dataclass(frozen=True)
class DtwResult:
    cost: float
    path_length: int
    similarity: float


@dataclass(frozen=True)
class RetrievalResult:
    kb_id: int
    similarity: float
    path_length: int
    rank: int


@njit(cache=True, nogil=True)
def _pick(diag, vert, horiz):
    # Returns (best value, move code); ties resolved diag > vert > horiz.
    if diag <= vert and diag <= horiz:
        return diag, 0
    if vert <= horiz:
        return vert, 1
    return horiz, 2


@njit(cache=True, nogil=True)
def _dtw_kernel(a, b, band):
    n = a.shape[0]
    m = b.shape[0]
    inf = np.inf
    prev_cost = np.full(m, inf)
    prev_len = np.zeros(m, dtype=np.int64)
    cur_cost = np.full(m, inf)
    cur_len = np.zeros(m, dtype=np.int64)
    for i in range(n):
        lo = 0
        hi = m - 1
        if band >= 0:
            lo = max(0, i - band)
            hi = min(m - 1, i + band)
        for j in range(m):
            cur_cost[j] = inf
            cur_len[j] = 0
        for j in range(lo, hi + 1):
            diff = a[i] - b[j]
            d = diff * diff
            if i == 0 and j == 0:
                cur_cost[j] = d
                cur_len[j] = 1
                continue
            diag = prev_cost[j - 1] if (i > 0 and j > 0) else inf
            vert = prev_cost[j] if i > 0 else inf
            horiz = cur_cost[j - 1] if j > 0 else inf
            best, move = _pick(diag, vert, horiz)
            if best == inf:
                continue
            cur_cost[j] = d + best
            if move == 0:
                cur_len[j] = prev_len[j - 1] + 1
            elif move == 1:
                cur_len[j] = prev_len[j] + 1
            else:
                cur_len[j] = cur_len[j - 1] + 1
        prev_cost, cur_cost = cur_cost, prev_cost
        prev_len, cur_len = cur_len, prev_len
    return prev_cost[m - 1], prev_len[m - 1]


@njit(cache=True, nogil=True)
def _dtw_matrix(a, b, band):
    n = a.shape[0]
    m = b.shape[0]
    acc = np.full((n, m), np.inf)
    for i in range(n):
        lo = 0
        hi = m - 1
        if band >= 0:
            lo = max(0, i - band)
            hi = min(m - 1, i + band)
        for j in range(lo, hi + 1):
            diff = a[i] - b[j]
            d = diff * diff
            if i == 0 and j == 0:
                acc[i, j] = d
                continue
            diag = acc[i - 1, j - 1] if (i > 0 and j > 0) else np.inf
            vert = acc[i - 1, j] if i > 0 else np.inf
            horiz = acc[i, j - 1] if j > 0 else np.inf
            best, _ = _pick(diag, vert, horiz)
            if best != np.inf:
                acc[i, j] = d + best
    return acc


@njit(cache=True, nogil=True)
def _dtw_many(query, contexts, band, costs, lengths):
    for r in range(contexts.shape[0]):
        c, length = _dtw_kernel(query, contexts[r], band)
        costs[r] = c
        lengths[r] = length


def _check_inputs(a, b, band) -> tuple[np.ndarray, np.ndarray, int]:
    x = np.ascontiguousarray(a, dtype=np.float64)
    y = np.ascontiguousarray(b, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise DataError("DTW inputs must be one-dimensional")
    if x.size == 0 or y.size == 0:
        raise DataError("DTW inputs must be non-empty")
    if band is None:
        return x, y, -1
    band = int(band)
    if band < abs(x.size - y.size):
        raise DataError(f"band {band} too narrow for lengths {x.size} and {y.size}: "
                        f"no warping path reaches the last cell")
    return x, y, band


def _result(cost: float, length: int) -> DtwResult:
    return DtwResult(cost=float(cost), path_length=int(length),
                     similarity=math.sqrt(cost) / length)


def dtw(a: Sequence[float], b: Sequence[float], band: int | None = None) -> DtwResult:
    """DTW between ``a`` and ``b``, optionally inside a Sakoe-Chiba band.

    ``band`` is the half-width around the diagonal and must be at least
    ``|len(a) - len(b)|``.

    >>> dtw([1, 2, 3], [2, 3, 4])
    DtwResult(cost=2.0, path_length=4, similarity=0.3535533905932738)
    """
    x, y, w = _check_inputs(a, b, band)
    cost, length = _dtw_kernel(x, y, w)
    return _result(cost, length)


def dtw_path(a: Sequence[float], b: Sequence[float],
             band: int | None = None) -> list[tuple[int, int]]:
    """Optimal warping path as 0-based ``(i, j)`` pairs from ``(0, 0)`` to the end."""
    x, y, w = _check_inputs(a, b, band)
    acc = _dtw_matrix(x, y, w)
    i, j = x.size - 1, y.size - 1
    path = [(i, j)]
    while i > 0 or j > 0:
        diag = acc[i - 1, j - 1] if i > 0 and j > 0 else math.inf
        vert = acc[i - 1, j] if i > 0 else math.inf
        horiz = acc[i, j - 1] if j > 0 else math.inf
        _, move = _pick(diag, vert, horiz)
        if move == _DIAG:
            i, j = i - 1, j - 1
        elif move == _VERT:
            i -= 1
        else:
            j -= 1
        path.append((i, j))
    path.reverse()
    return path


def _enumerate_paths(n: int, m: int):
    # Yields every warping path as a list of cells, walking back from the last
    # cell and trying moves in tie-break preference order.
    steps = ((-1, -1), (-1, 0), (0, -1))

    def walk(i, j, tail):
        tail.append((i, j))
        if i == 0 and j == 0:
            yield tail[::-1]
        else:
            for di, dj in steps:
                pi, pj = i + di, j + dj
                if pi >= 0 and pj >= 0:
                    yield from walk(pi, pj, tail)
        tail.pop()

    yield from walk(n - 1, m - 1, [])


def dtw_brute_force(a: Sequence[float], b: Sequence[float]) -> DtwResult:
    """Reference DTW by enumerating every warping path (test oracle).

    Each path's cost is summed left to right along the path, the same order
    the DP accumulates in. Among minimal paths the first one met in
    backtrack-preference order is kept, which is the one ``dtw`` reports.
    Inputs are limited to 7 points each.
    """
    x = [float(v) for v in a]
    y = [float(v) for v in b]
    if not x or not y:
        raise DataError("DTW inputs must be non-empty")
    if len(x) > BRUTE_FORCE_MAX_LEN or len(y) > BRUTE_FORCE_MAX_LEN:
        raise DataError(f"brute-force DTW limited to {BRUTE_FORCE_MAX_LEN}x{BRUTE_FORCE_MAX_LEN}")
    best_cost = math.inf
    best_len = 0
    for path in _enumerate_paths(len(x), len(y)):
        terms = [(x[i] - y[j]) * (x[i] - y[j]) for i, j in path]
        cost = functools.reduce(operator.add, terms)
        if cost < best_cost:
            best_cost = cost
            best_len = len(path)
    return _result(best_cost, best_len)


def dtw_against(query: Sequence[float], contexts: np.ndarray,
                band: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """DTW costs and path lengths from ``query`` to each row of ``contexts``."""
    rows = np.ascontiguousarray(contexts, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise DataError("contexts must be a non-empty 2-D array")
    q, _, w = _check_inputs(query, rows[0], band)
    costs = np.empty(rows.shape[0])
    lengths = np.empty(rows.shape[0], dtype=np.int64)
    _dtw_many(q, rows, w, costs, lengths)
    return costs, lengths


def retrieve_top_k(query: Sequence[float], kb: KnowledgeBase, k: int = DEFAULT_TOP_K,
                   band: int | None = None, normalize: bool = True,
                   require_continuation: bool = False) -> list[RetrievalResult]:
    """Rank knowledge base entries by DTW similarity to ``query``.

    The query is z-normalized on its own before comparison (KB contexts are
    stored normalized). Every entry is scanned; the best ``min(k, |kb|)``
    come back ordered by ``(similarity, kb_id)``. With
    ``require_continuation`` only entries carrying a continuation compete.
    """
    if k < 1:
        raise DataError("top-k must be at least 1")
    entries = kb.entries
    if require_continuation:
        entries = [e for e in entries if e.continuation]
    if not entries:
        raise DataError("knowledge base has no eligible entries")
    q = znormalize(query)[0] if normalize else np.asarray(query, dtype=np.float64)
    contexts = np.array([e.context for e in entries], dtype=np.float64)
    costs, lengths = dtw_against(q, contexts, band)
    sims = np.sqrt(costs) / lengths
    ids = np.array([e.kb_id for e in entries])
    order = np.lexsort((ids, sims))[:k]
    return [RetrievalResult(kb_id=int(ids[i]), similarity=float(sims[i]),
                            path_length=int(lengths[i]), rank=r)
            for r, i in enumerate(order, start=1)]
