"""MOJITO: short-term mixture-attention encoder plus long-term attentive FISM."""
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .attention import MixtureAttentionBlock, encode
from .embedding import TemporalEmbedding
from .errors import ContractError
from .longterm import long_term_scores
from .optim import ParameterStore

LOG_FLOOR = 1e-12


@dataclass
class TrainBatch:
    """Right-aligned training windows for a set of users.

    ``pos[i, l]`` is the true item following input position ``l`` and
    ``pos_ctx[i, l]`` its context; ``neg`` holds one sampled negative per
    position; ``F`` the FISM items per user. Item 0 marks padding.
    """

    users: np.ndarray
    items: np.ndarray
    ctx: np.ndarray
    pos: np.ndarray
    pos_ctx: np.ndarray
    neg: np.ndarray
    F: np.ndarray

    def subset(self, idx):
        return TrainBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


class MojitoModel:
    def __init__(self, config, n_users, n_items):
        self.config = config
        self.schema = config.context_schema
        self.n_users = n_users
        self.n_items = n_items
        self.d = config.d
        self.use_context = config.use_context
        rng = np.random.default_rng([config.seed, 0])
        self.store = ParameterStore()
        self.embed = TemporalEmbedding(self.store, self.schema, n_items, config.d, config.L, rng)
        self.blocks = [
            MixtureAttentionBlock(
                self.store, f"block{b}", config.d, config.H, rng,
                attention_mode=config.attention_mode, dropout=config.dropout,
            )
            for b in range(config.B)
        ]
        users = rng.normal(0.0, 0.01, size=(n_users + 1, config.d))
        users[0] = 0.0
        self.user_emb = self.store.add("user_emb", users)

    @property
    def item_emb(self):
        return self.embed.item_emb

    # -- short term ---------------------------------------------------------

    def encode(self, items, ctx, rng=None, mode="inference"):
        X0 = self.embed.build_input(items, ctx, use_context=self.use_context)
        return encode(X0, self.blocks, rng, mode, use_context=self.use_context)

    def context_embedding(self, ctx):
        if not self.use_context:
            ctx = np.asarray(ctx)
            return ag.Tensor(np.zeros(ctx.shape[:-1] + (self.d,)))
        return self.embed.fuse_context(ctx)

    def short_term_scores(self, x, cands, next_ctx):
        """``x . [m_v ; m_c]`` for encoder rows ``x`` (..., 2d), candidate ids
        ``cands`` and target contexts ``next_ctx``; batch axes broadcast."""
        cands = np.asarray(cands, dtype=np.int64)
        if (cands == 0).any():
            raise ContractError("padding item 0 cannot be scored")
        x_item, x_ctx = ag.split_last_dim(x, [self.d, self.d])
        m_item = self.embed.item_embed(cands)
        m_ctx = self.context_embedding(next_ctx)
        return ag.add(ag.tsum(ag.mul(x_item, m_item), axis=-1), ag.tsum(ag.mul(x_ctx, m_ctx), axis=-1))

    # -- long term ----------------------------------------------------------

    def long_term_scores(self, users, F, V):
        return long_term_scores(self.item_emb, self.user_emb, users, F, V)

    # -- combined -----------------------------------------------------------

    def combined_score(self, users, items, ctx, next_ctx, cands, F, rng=None, mode="inference"):
        """Differentiable ``lam * r_short + (1 - lam) * r_long`` of candidates
        (n, M) scored from the last encoder row."""
        lam = self.config.lam
        XB, _ = self.encode(items, ctx, rng, mode=mode)
        short = self.short_term_scores(XB[:, -1:, :], cands, np.asarray(next_ctx)[:, None, :])
        long = self.long_term_scores(users, F, cands)
        return ag.add(ag.scale(short, lam), ag.scale(long, 1.0 - lam))

    def predict_topk(self, user, items, ctx, next_ctx, candidates, k, F):
        """Top ``k`` of ``candidates`` by combined score, ties by ascending id."""
        cands = np.asarray(candidates, dtype=np.int64)
        if cands.size == 0:
            raise ContractError("predict_topk needs at least one candidate")
        _, _, comb, _ = self.score_candidates(
            np.asarray([user]), np.asarray(items)[None], np.asarray(ctx)[None],
            np.asarray(next_ctx)[None], cands[None], np.asarray(F)[None],
        )
        order = np.lexsort((cands, -comb[0]))
        return cands[order[:k]]

    def score_candidates(self, users, items, ctx, next_ctx, cands, F):
        """Inference scores of candidates (n, M) for windows ending before the
        target; returns numpy ``(short, long, combined, heads)``."""
        lam = self.config.lam
        with ag.no_grad():
            XB, heads = self.encode(items, ctx, mode="inference")
            x_last = XB[:, -1:, :]
            short = self.short_term_scores(x_last, cands, np.asarray(next_ctx)[:, None, :]).data
            long = self.long_term_scores(users, F, cands).data
        return short, long, lam * short + (1.0 - lam) * long, [h.data for h in heads]

    # -- losses -------------------------------------------------------------

    def _bce(self, r_pos, r_neg, valid):
        lp = ag.log(ag.sigmoid(r_pos), clamp_min=LOG_FLOOR)
        ln = ag.log(ag.sigmoid(ag.scale(r_neg, -1.0)), clamp_min=LOG_FLOOR)
        return ag.scale(ag.tsum(ag.mul(ag.add(lp, ln), valid.astype(np.float64))), -1.0)

    def sequence_loss(self, batch, which, rng=None, XB=None):
        """Negative-sampling BCE summed over every non-padding target position."""
        valid = batch.pos != 0
        if which == "short":
            if XB is None:
                XB, _ = self.encode(batch.items, batch.ctx, rng, mode="train")
            pos = np.where(valid, batch.pos, 1)
            neg = np.where(valid, batch.neg, 1)
            r_pos = self.short_term_scores(XB, pos, batch.pos_ctx)
            r_neg = self.short_term_scores(XB, neg, batch.pos_ctx)
        elif which == "long":
            r_pos = self.long_term_scores(batch.users, batch.F, batch.pos)
            r_neg = self.long_term_scores(batch.users, batch.F, np.where(valid, batch.neg, 0))
        else:
            raise ContractError(f"loss kind must be short or long, got {which!r}")
        return self._bce(r_pos, r_neg, valid)

    def loss(self, batch, rng):
        lam = self.config.lam
        ls = self.sequence_loss(batch, "short", rng)
        ll = self.sequence_loss(batch, "long")
        return ag.add(ag.scale(ls, lam), ag.scale(ll, 1.0 - lam))

    # -- diagnostics --------------------------------------------------------

    def mixture_weights(self):
        """(B, H, 2) numpy array of per-head (item, context) weights."""
        with ag.no_grad():
            return np.stack([b.mixture_weights(self.use_context).data for b in self.blocks])

    def sigmas(self):
        with ag.no_grad():
            return np.stack([b.sigmas().data for b in self.blocks])
