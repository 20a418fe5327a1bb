"""Hot inner loops: exact kNN with exclusion, ground-truth ranking, k-occurrence.

Every kernel exists twice. The ``*_nb`` variants are explicit loops compiled
by numba; the ``*_np`` variants are vectorised numpy. Both implement the same
tie-breaking (lowest index wins) and accumulate squared distances in the same
coordinate order, so they agree exactly on every input. The public wrappers
pick one according to :data:`hubvse._accel.USE_NUMBA`.
"""
import numpy as np

from . import _accel
from ._accel import njit


# -- kNN under squared l2 distance ---------------------------------------------

@njit
def _knn_nb(queries, points, k, excluded):
    nq, d = queries.shape
    npts = points.shape[0]
    out = np.empty((nq, k), dtype=np.int64)
    best_d = np.empty(k, dtype=np.float64)
    best_i = np.empty(k, dtype=np.int64)
    for q in range(nq):
        filled = 0
        for p in range(npts):
            if excluded[q, p]:
                continue
            acc = 0.0
            for j in range(d):
                diff = queries[q, j] - points[p, j]
                acc += diff * diff
            # insertion into a sorted top-k buffer; strict < keeps the
            # earlier index ahead on ties
            if filled < k:
                pos = filled
                filled += 1
            elif acc < best_d[k - 1]:
                pos = k - 1
            else:
                continue
            while pos > 0 and acc < best_d[pos - 1]:
                best_d[pos] = best_d[pos - 1]
                best_i[pos] = best_i[pos - 1]
                pos -= 1
            best_d[pos] = acc
            best_i[pos] = p
        for r in range(k):
            out[q, r] = best_i[r]
    return out


def _sq_dists_np(queries, points):
    acc = np.zeros((queries.shape[0], points.shape[0]))
    for j in range(queries.shape[1]):
        diff = queries[:, j, None] - points[None, :, j]
        acc += diff * diff
    return acc


def _knn_np(queries, points, k, excluded):
    dist = _sq_dists_np(queries, points)
    dist[excluded] = np.inf
    order = np.argsort(dist, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def knn_rows(queries, points, k, excluded=None):
    """Indices of the ``k`` nearest ``points`` for every query row.

    ``excluded`` is an optional boolean mask of shape (n_queries, n_points);
    masked points are never returned. The caller guarantees that every query
    keeps at least ``k`` usable points.
    """
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    if excluded is None:
        excluded = np.zeros((queries.shape[0], points.shape[0]), dtype=np.bool_)
    excluded = np.ascontiguousarray(excluded, dtype=np.bool_)
    if _accel.USE_NUMBA:
        return _knn_nb(queries, points, int(k), excluded)
    return _knn_np(queries, points, int(k), excluded)


# -- rank of the best ground-truth item ----------------------------------------

@njit
def _best_rank_nb(scores, gt_start, gt_count):
    nq, ng = scores.shape
    out = np.empty(nq, dtype=np.int64)
    for q in range(nq):
        best = ng + 1
        for g in range(gt_start[q], gt_start[q] + gt_count):
            s = scores[q, g]
            rank = 1
            for j in range(ng):
                v = scores[q, j]
                if v > s or (v == s and j < g):
                    rank += 1
            if rank < best:
                best = rank
        out[q] = best
    return out


def _best_rank_np(scores, gt_start, gt_count):
    order = np.argsort(-scores, axis=1, kind="stable")
    lo = gt_start[:, None]
    hit = (order >= lo) & (order < lo + gt_count)
    return hit.argmax(axis=1).astype(np.int64) + 1


def best_ground_truth_rank(scores, gt_start, gt_count):
    """1-based rank of the highest-ranked ground-truth column per query row.

    Ground truth for query ``q`` is the contiguous column block
    ``[gt_start[q], gt_start[q] + gt_count)``. Columns are ordered by
    descending score, ties by lowest column index.
    """
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    gt_start = np.ascontiguousarray(gt_start, dtype=np.int64)
    if _accel.USE_NUMBA:
        return _best_rank_nb(scores, gt_start, int(gt_count))
    return _best_rank_np(scores, gt_start, int(gt_count))


# -- k-occurrence ----------------------------------------------------------------

@njit
def _k_occurrence_nb(scores, k):
    nq, ng = scores.shape
    counts = np.zeros(ng, dtype=np.int64)
    top_s = np.empty(k, dtype=np.float64)
    top_i = np.empty(k, dtype=np.int64)
    for q in range(nq):
        filled = 0
        for g in range(ng):
            s = scores[q, g]
            if filled < k:
                pos = filled
                filled += 1
            elif s > top_s[k - 1]:
                pos = k - 1
            else:
                continue
            while pos > 0 and s > top_s[pos - 1]:
                top_s[pos] = top_s[pos - 1]
                top_i[pos] = top_i[pos - 1]
                pos -= 1
            top_s[pos] = s
            top_i[pos] = g
        for r in range(k):
            counts[top_i[r]] += 1
    return counts


def _k_occurrence_np(scores, k):
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return np.bincount(order.ravel(), minlength=scores.shape[1]).astype(np.int64)


def k_occurrence(scores, k):
    """How many query rows place each gallery column in their top ``k``."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if _accel.USE_NUMBA:
        return _k_occurrence_nb(scores, int(k))
    return _k_occurrence_np(scores, int(k))


KERNELS = {
    "knn": (_knn_nb, _knn_np),
    "best_rank": (_best_rank_nb, _best_rank_np),
    "k_occurrence": (_k_occurrence_nb, _k_occurrence_np),
}
