"""Input layer: item embeddings, periodic context embeddings, positions.

Each calendar context type with period ``P`` is embedded through truncated
Fourier features ``[a0, a_k cos(2 pi k c / P), a_k sin(2 pi k c / P)]`` with
learnable amplitudes ``a`` and a learnable projection to ``d``. The raw
feature inner product depends only on ``(c - c') mod P``, so the embedding
is translation invariant and cyclic (December sits next to January).
"""
import numpy as np

from . import autograd as ag
from .errors import ContractError, EmbeddingIndexError


def n_frequencies(period, d):
    """Number of harmonics K for a context of the given period."""
    return max(0, min(8, (period - 1) // 2, (d - 1) // 2))


def fourier_basis(period, K):
    """(period, 2K+1) table of ``[1, cos(2 pi k c/P)..., sin(2 pi k c/P)...]``."""
    c = np.arange(period, dtype=np.float64)[:, None]
    k = np.arange(1, K + 1, dtype=np.float64)[None, :]
    ang = 2.0 * np.pi * k * c / period
    return np.hstack([np.ones((period, 1)), np.cos(ang), np.sin(ang)])


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class TemporalEmbedding:
    """Owns the item table, per-context Fourier kernels, the fusion layer and
    the position table; all live in the shared parameter store."""

    def __init__(self, store, schema, n_items, d, L, rng):
        self.store = store
        self.schema = schema
        self.d = d
        self.L = L
        self.n_items = n_items

        item = rng.normal(0.0, 0.01, size=(n_items + 1, d))
        item[0] = 0.0
        self.item_emb = store.add("item_emb", item)
        self.pos_emb = store.add("pos_emb", rng.normal(0.0, 0.01, size=(L, 2 * d)))

        self.K = []
        self.basis = []
        self.amp = []
        self.proj = []
        for name, period in zip(schema.names, schema.cardinalities):
            K = n_frequencies(period, d)
            self.K.append(K)
            self.basis.append(fourier_basis(period, K))
            a = np.concatenate([[1.0], 1.0 / np.arange(1, K + 1)])
            self.amp.append(store.add(f"mercer.{name}.amp", a))
            self.proj.append(store.add(f"mercer.{name}.proj", _uniform(rng, 2 * K + 1, (2 * K + 1, d))))

        C = len(schema)
        self.fuse_w = store.add("fusion.w", _uniform(rng, C * d, (C * d, d)))
        self.fuse_b = store.add("fusion.b", _uniform(rng, C * d, (1, d)))

    # -- context kernel -----------------------------------------------------

    def _amp_vector(self, j):
        a = self.amp[j]
        K = self.K[j]
        if K == 0:
            return a
        return ag.concat([a[0:1], a[1:], a[1:]])

    def raw_features(self, j, c):
        """Amplitude-weighted Fourier features of value ``c`` (taken mod P)."""
        period = self.schema.cardinalities[j]
        return ag.mul(ag.Tensor(self.basis[j][np.asarray(c) % period]), self._amp_vector(j))

    def mercer_table(self, j):
        """Embeddings of every value of context type ``j``: (P_j, d)."""
        feats = ag.mul(ag.Tensor(self.basis[j]), self._amp_vector(j))
        return ag.matmul(feats, self.proj[j])

    def mercer_embed(self, j, c):
        period = self.schema.cardinalities[j]
        if not 0 <= int(c) < period:
            raise EmbeddingIndexError(
                f"context {self.schema.names[j]} value {c} out of range [0, {period})"
            )
        return ag.matmul(self.raw_features(j, np.array([int(c)])), self.proj[j])

    def fuse_context(self, contexts):
        """Fused context embedding g([m_c1; ...; m_cC]) for int array (..., C)."""
        contexts = np.asarray(contexts, dtype=np.int64)
        if contexts.shape[-1] != len(self.schema):
            raise ContractError(
                f"context tuples have {contexts.shape[-1]} entries, schema has {len(self.schema)}"
            )
        parts = [
            ag.embedding_lookup(self.mercer_table(j), contexts[..., j], padding_idx=None)
            for j in range(len(self.schema))
        ]
        h = parts[0] if len(parts) == 1 else ag.concat(parts)
        return ag.add(ag.matmul(h, self.fuse_w), self.fuse_b)

    def item_embed(self, ids):
        return ag.embedding_lookup(self.item_emb, ids, padding_idx=0)

    # -- model input --------------------------------------------------------

    def build_input(self, items, contexts, use_context=True):
        """X0 rows ``[m_item; m_context] + p_l`` for ids (..., L) and contexts (..., L, C)."""
        items = np.asarray(items, dtype=np.int64)
        if items.shape[-1] != self.L:
            raise ContractError(f"sequence length {items.shape[-1]} != L={self.L}")
        m_item = self.item_embed(items)
        if use_context:
            m_ctx = self.fuse_context(contexts)
        else:
            m_ctx = ag.Tensor(np.zeros(items.shape + (self.d,)))
        return ag.add(ag.concat([m_item, m_ctx]), self.pos_emb)
