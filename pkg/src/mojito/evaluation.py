"""Leave-one-out ranking evaluation and the head-redundancy diagnostic."""
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import autograd as ag
from .data import pad_window, sample_eval_negatives, sample_fism_items
from .errors import ContractError

CHUNK = 64
STREAM_EVAL_NEG, STREAM_EVAL_FISM = 11, 12


def _check_rank(rank):
    if rank is not None and rank < 1:
        raise ContractError(f"rank must be >= 1 (or None for a miss), got {rank}")


def hr_at_k(rank, k=10):
    """1 if the target is inside the top ``k``; ``rank=None`` is a miss."""
    _check_rank(rank)
    return int(rank is not None and rank <= k)


def ndcg_at_k(rank, k=10):
    """``1/log2(rank+1)`` inside the top ``k``, else 0 (one relevant item)."""
    _check_rank(rank)
    if rank is None or rank > k:
        return 0.0
    return float(1.0 / np.log2(rank + 1.0))


def metrics_from_ranks(ranks, k=10):
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        return 0.0, 0.0
    hit = ranks <= k
    hr = float(hit.mean())
    ndcg = float(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0).mean())
    return hr, ndcg


def format_mean_std(mean, std):
    return f"{mean:.2f} ± {std:.2f}"


def eval_threads():
    raw = os.environ.get("MOJITO_THREADS")
    if raw:
        return max(1, int(raw))
    return min(4, os.cpu_count() or 1)


@dataclass
class EvalReport:
    hr_at_10: float
    ndcg_at_10: float
    n_users: int
    seed: int
    split: str
    config_hash: str = ""
    ranks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)
    head_redundancy_mean: float = None
    head_redundancy_std: float = None
    n_exhausted: int = 0

    def to_dict(self):
        return {
            "hr10": self.hr_at_10,
            "ndcg10": self.ndcg_at_10,
            "head_redundancy_mean": self.head_redundancy_mean,
            "head_redundancy_std": self.head_redundancy_std,
            "n_users": self.n_users,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "split": self.split,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass
class EvalInputs:
    users: np.ndarray
    items: np.ndarray
    ctx: np.ndarray
    next_ctx: np.ndarray
    cands: np.ndarray
    n_exhausted: int


def build_eval_inputs(split, which, seed, L, n_neg=1000):
    """Windows, target contexts and candidate lists (target in column 0).

    Negatives come from a seeded stream walked in user order. Ragged lists
    (users with fewer than ``n_neg`` eligible items) are padded by repeating
    the target, which never changes its rank.
    """
    rng = np.random.default_rng([seed, STREAM_EVAL_NEG])
    items, ctx, nxt, cand_rows = [], [], [], []
    exhausted = 0
    for u in split.users:
        seq, c, target, tctx = split.eval_input(u, which)
        i_w, c_w = pad_window(seq, c, L)
        negs, ex = sample_eval_negatives(rng, split.history[u], split.n_items, n_neg)
        exhausted += int(ex)
        items.append(i_w)
        ctx.append(c_w)
        nxt.append(tctx)
        cand_rows.append(np.concatenate([[target], negs]).astype(np.int64))
    width = max(len(r) for r in cand_rows)
    cands = np.stack([np.pad(r, (0, width - len(r)), constant_values=r[0]) for r in cand_rows])
    C = len(split.schema)
    return EvalInputs(split.users.copy(), np.stack(items), np.stack(ctx).reshape(len(items), L, C),
                      np.stack(nxt), cands, exhausted)


def eval_fism_items(split, which, seed, N):
    rng = np.random.default_rng([seed, STREAM_EVAL_FISM])
    rows = []
    for u in split.users:
        seq, _, _, _ = split.eval_input(u, which)
        rows.append(sample_fism_items(rng, seq, N))
    return np.stack(rows)


def _chunked(n, fn, threads):
    chunks = [slice(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, chunks))
    return [fn(c) for c in chunks]


def pairwise_head_distances(heads):
    """Length-normalised L2 distance between every pair of head outputs,
    per probe; returns a flat array over (probe, pair)."""
    H = len(heads)
    if H < 2:
        raise ContractError("head redundancy needs at least two heads")
    flat = [h.reshape(h.shape[0], -1) for h in heads]
    size = flat[0].shape[1]
    out = []
    for i in range(H):
        for j in range(i + 1, H):
            out.append(np.linalg.norm(flat[i] - flat[j], axis=1) / np.sqrt(size))
    return np.concatenate(out)


def head_redundancy(model, items, ctx):
    """Mean and std of pairwise head distances at the last block (inference)."""
    if model.config.H < 2:
        raise ContractError("head redundancy needs H >= 2")
    with ag.no_grad():
        _, heads = model.encode(np.asarray(items), np.asarray(ctx), mode="inference")
    d = pairwise_head_distances([h.data for h in heads])
    return float(d.mean()), float(d.std())


def evaluate(model, split, which, eval_seed, head_stats=True, threads=None, n_neg=None):
    cfg = model.config
    n_neg = cfg.n_eval_negatives if n_neg is None else n_neg
    inp = build_eval_inputs(split, which, eval_seed, cfg.L, n_neg)
    F = eval_fism_items(split, which, eval_seed, cfg.N)
    want_heads = head_stats and cfg.H >= 2

    def run(sl):
        _, _, comb, heads = model.score_candidates(
            inp.users[sl], inp.items[sl], inp.ctx[sl], inp.next_ctx[sl], inp.cands[sl], F[sl]
        )
        dist = pairwise_head_distances(heads) if want_heads else None
        return _kernels.target_ranks(comb, inp.cands[sl]), dist

    parts = _chunked(len(inp.users), run, threads or eval_threads())
    ranks = np.concatenate([p[0] for p in parts])
    hr, ndcg = metrics_from_ranks(ranks)
    rep = EvalReport(hr, ndcg, len(ranks), int(eval_seed), which, cfg.hash(), ranks,
                     n_exhausted=inp.n_exhausted)
    if want_heads:
        # pairs are grouped per chunk; order does not affect mean/std
        d = np.concatenate([p[1] for p in parts])
        rep.head_redundancy_mean = float(d.mean())
        rep.head_redundancy_std = float(d.std())
    return rep


def evaluate_scores(split, which, eval_seed, score_fn, L=50, n_neg=1000, config_hash=""):
    """Run the protocol with an arbitrary scorer ``score_fn(users, cands) -> scores``."""
    inp = build_eval_inputs(split, which, eval_seed, L, n_neg)
    scores = np.asarray(score_fn(inp.users, inp.cands), dtype=np.float64)
    ranks = _kernels.target_ranks(scores, inp.cands)
    hr, ndcg = metrics_from_ranks(ranks)
    return EvalReport(hr, ndcg, len(ranks), int(eval_seed), which, config_hash, ranks,
                      n_exhausted=inp.n_exhausted)


def popularity_counts(split):
    counts = np.zeros(split.n_items + 1, dtype=np.float64)
    for u in split.users:
        np.add.at(counts, split.train_items[u], 1.0)
    return counts


def popularity_baseline(split, which="test", eval_seed=0, n_neg=1000):
    """Score every candidate by its training-set interaction count."""
    counts = popularity_counts(split)
    return evaluate_scores(split, which, eval_seed, lambda users, cands: counts[cands], n_neg=n_neg,
                           config_hash="popularity")


def training_target_hr(model, split, k=10, seed=0):
    """HR@k of the training targets, each ranked against the whole catalogue
    using the encoder row that precedes it."""
    from .train import make_training_windows, sample_fism_batch

    w = make_training_windows(split, model.config.L)
    F = sample_fism_batch(np.random.default_rng([seed, STREAM_EVAL_FISM]), split, w.users,
                          model.config.N)
    all_items = np.arange(1, split.n_items + 1)
    lam = model.config.lam
    d = model.d
    with ag.no_grad():
        XB, _ = model.encode(w.items, w.ctx, mode="inference")
        x = XB.data
        item_tab = model.item_emb.data[1:]
        short = x[..., :d] @ item_tab.T
        mc = model.context_embedding(w.pos_ctx).data
        short += (x[..., d:] * mc).sum(-1, keepdims=True)
        long = model.long_term_scores(w.users, F, np.tile(all_items, (len(w.users), 1))).data
    scores = lam * short + (1.0 - lam) * long[:, None, :]
    valid = w.pos != 0
    s = scores[valid]
    tgt = w.pos[valid]
    ts = s[np.arange(len(tgt)), tgt - 1]
    ids = all_items[None, :]
    better = (s > ts[:, None]) | ((s == ts[:, None]) & (ids < tgt[:, None]))
    ranks = 1 + better.sum(axis=1)
    return float((ranks <= k).mean())
