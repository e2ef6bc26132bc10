"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

The numba path is used when numba imports cleanly and ``MOJITO_NO_NUMBA`` is
unset (or ``0``). Both paths are always importable so tests and the benchmark
can compare them directly.
"""
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional speedup
    HAVE_NUMBA = False


def _numba_disabled():
    return os.environ.get("MOJITO_NO_NUMBA", "0").lower() not in ("", "0", "false", "no")


USE_NUMBA = HAVE_NUMBA and not _numba_disabled()


# ---------------------------------------------------------------------------
# scatter-add of gradient rows into an embedding table
# ---------------------------------------------------------------------------

def scatter_add_rows_numpy(out, ids, rows):
    """out[ids[i]] += rows[i] for flat ``ids`` and ``rows`` of shape (n, d)."""
    np.add.at(out, ids, rows)
    return out


def _scatter_add_rows_py(out, ids, rows):
    n, d = rows.shape
    for i in range(n):
        r = ids[i]
        for j in range(d):
            out[r, j] += rows[i, j]
    return out


# ---------------------------------------------------------------------------
# k-core: alternating user/item pruning to the fixed point
# ---------------------------------------------------------------------------

def kcore_mask_numpy(users, items, n_users, n_items, k_user, k_item):
    alive = np.ones(users.shape[0], dtype=np.bool_)
    while True:
        before = int(alive.sum())
        ucount = np.bincount(users[alive], minlength=n_users)
        alive &= ucount[users] >= k_user
        icount = np.bincount(items[alive], minlength=n_items)
        alive &= icount[items] >= k_item
        if int(alive.sum()) == before:
            return alive


def _kcore_mask_py(users, items, n_users, n_items, k_user, k_item):
    n = users.shape[0]
    alive = np.ones(n, dtype=np.bool_)
    ucount = np.zeros(n_users, dtype=np.int64)
    icount = np.zeros(n_items, dtype=np.int64)
    for e in range(n):
        ucount[users[e]] += 1
        icount[items[e]] += 1
    changed = True
    while changed:
        changed = False
        for e in range(n):
            if alive[e] and ucount[users[e]] < k_user:
                alive[e] = False
                icount[items[e]] -= 1
                changed = True
        for e in range(n):
            if alive[e] and icount[items[e]] < k_item:
                alive[e] = False
                ucount[users[e]] -= 1
                changed = True
    return alive


# ---------------------------------------------------------------------------
# 1-based rank of the target (column 0) among candidates, ties by item id
# ---------------------------------------------------------------------------

def target_ranks_numpy(scores, ids):
    t_score = scores[:, :1]
    t_id = ids[:, :1]
    better = (scores > t_score) | ((scores == t_score) & (ids < t_id))
    return 1 + better[:, 1:].sum(axis=1).astype(np.int64)


def _target_ranks_py(scores, ids):
    n, m = scores.shape
    out = np.empty(n, dtype=np.int64)
    for u in range(n):
        s0 = scores[u, 0]
        i0 = ids[u, 0]
        r = 1
        for c in range(1, m):
            s = scores[u, c]
            if s > s0 or (s == s0 and ids[u, c] < i0):
                r += 1
        out[u] = r
    return out


if HAVE_NUMBA:
    scatter_add_rows_numba = njit(cache=True)(_scatter_add_rows_py)
    kcore_mask_numba = njit(cache=True)(_kcore_mask_py)
    target_ranks_numba = njit(cache=True)(_target_ranks_py)
else:  # pragma: no cover
    scatter_add_rows_numba = _scatter_add_rows_py
    kcore_mask_numba = _kcore_mask_py
    target_ranks_numba = _target_ranks_py


def scatter_add_rows(out, ids, rows):
    ids = np.ascontiguousarray(ids, dtype=np.int64).ravel()
    rows = np.ascontiguousarray(rows, dtype=np.float64).reshape(ids.shape[0], -1)
    if USE_NUMBA:
        return scatter_add_rows_numba(out, ids, rows)
    return scatter_add_rows_numpy(out, ids, rows)


def kcore_mask(users, items, n_users, n_items, k_user, k_item):
    users = np.ascontiguousarray(users, dtype=np.int64)
    items = np.ascontiguousarray(items, dtype=np.int64)
    if USE_NUMBA:
        return kcore_mask_numba(users, items, n_users, n_items, k_user, k_item)
    return kcore_mask_numpy(users, items, n_users, n_items, k_user, k_item)


def target_ranks(scores, ids):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    if USE_NUMBA:
        return target_ranks_numba(scores, ids)
    return target_ranks_numpy(scores, ids)
