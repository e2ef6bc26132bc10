"""Long-term preference: attentive FISM over items sampled from the user's
history. Context never enters these scores."""
import numpy as np

from . import autograd as ag


def fism_user_repr(item_table, user_vecs, F, V):
    """Target-dependent user vectors.

    ``m_u + sum_{f in F minus v} softmax_f(m_f . m_v) m_f`` for every target in
    ``V``. Shapes: ``user_vecs`` (n, d), ``F`` (n, N), ``V`` (n, T); returns
    ``(repr (n, T, d), fallback (n, T) bool)`` where ``fallback`` marks targets
    for which ``F`` held nothing but the target itself (repr is then m_u).
    Duplicates in ``F`` are separate terms.
    """
    F = np.asarray(F, dtype=np.int64)
    V = np.asarray(V, dtype=np.int64)
    mf = ag.embedding_lookup(item_table, F)
    mv = ag.embedding_lookup(item_table, V)
    sims = ag.matmul(mv, ag.transpose(mf))
    keep = (F[:, None, :] != V[:, :, None]) & (F[:, None, :] != 0)
    w = ag.softmax_rows(sims, mask=keep, allow_empty=True)
    agg = ag.matmul(w, mf)
    u = ag.reshape(user_vecs, (user_vecs.shape[0], 1, user_vecs.shape[-1]))
    return ag.add(u, agg), ~keep.any(axis=-1)


def long_term_scores(item_table, user_table, users, F, V):
    """``m_v . m~_u(v)`` for targets ``V`` (n, T); returns a (n, T) Tensor."""
    users = np.asarray(users, dtype=np.int64)
    mu = ag.embedding_lookup(user_table, users)
    rep, _ = fism_user_repr(item_table, mu, F, V)
    mv = ag.embedding_lookup(item_table, np.asarray(V, dtype=np.int64))
    return ag.tsum(ag.mul(mv, rep), axis=-1)


def long_term_score(item_table, user_table, u, F, v):
    """Single user, single target convenience form; returns a scalar Tensor."""
    s = long_term_scores(item_table, user_table, [u], np.asarray(F)[None, :], [[v]])
    return ag.reshape(s, ())
