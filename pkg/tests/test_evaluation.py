import json

import numpy as np
import pytest

from mojito.data import ContextSchema, RawEvent, build_dataset, leave_one_out_split
from mojito.errors import ContractError
from mojito.evaluation import (
    build_eval_inputs,
    evaluate,
    eval_fism_items,
    evaluate_scores,
    format_mean_std,
    head_redundancy,
    hr_at_k,
    metrics_from_ranks,
    ndcg_at_k,
    pairwise_head_distances,
    popularity_baseline,
    popularity_counts,
)
from mojito._kernels import target_ranks

from conftest import make_model, make_split


def brute_rank(scores, ids, target_col=0):
    order = sorted(range(len(ids)), key=lambda c: (-scores[c], ids[c]))
    return order.index(target_col) + 1


def wide_split(n_users, n_items, per_user=3, seed=0):
    """Users with short histories over a large catalogue, so every user has
    at least 1000 eligible negatives."""
    rng = np.random.default_rng(seed)
    events = []
    for u in range(n_users):
        for e, it in enumerate(rng.choice(n_items, size=per_user, replace=False)):
            events.append(RawEvent(f"u{u}", f"i{it}", 1_600_000_000 + e * 3600))
    return leave_one_out_split(build_dataset(events, ContextSchema.parse("hour")))


class TestMetrics:
    def test_ndcg_values(self):
        assert ndcg_at_k(1) == 1.0
        assert ndcg_at_k(2) == pytest.approx(0.63093, abs=1e-5)
        assert ndcg_at_k(11, 10) == 0.0
        assert ndcg_at_k(None) == 0.0

    def test_hr_values(self):
        assert hr_at_k(10, 10) == 1
        assert hr_at_k(11, 10) == 0
        assert hr_at_k(None) == 0

    @pytest.mark.parametrize("fn", [hr_at_k, ndcg_at_k])
    def test_rank_zero_rejected(self, fn):
        with pytest.raises(ContractError):
            fn(0)

    def test_batched_matches_scalar(self, rng):
        ranks = rng.integers(1, 30, size=100)
        hr, ndcg = metrics_from_ranks(ranks)
        assert hr == pytest.approx(np.mean([hr_at_k(r) for r in ranks]), abs=1e-15)
        assert ndcg == pytest.approx(np.mean([ndcg_at_k(r) for r in ranks]), abs=1e-15)
        assert ndcg <= hr

    def test_format(self):
        assert format_mean_std(0.8512, 0.4271) == "0.85 ± 0.43"
        assert format_mean_std(0.0, 0.0) == "0.00 ± 0.00"


class TestRanking:
    @pytest.mark.parametrize("trial", range(200))
    def test_brute_force_oracle(self, trial):
        rng = np.random.default_rng(trial)
        n, m = 4, int(rng.integers(1, 21))
        # small integer scores force plenty of ties
        scores = rng.integers(0, 4, size=(n, m)).astype(float)
        ids = np.stack([rng.permutation(np.arange(1, 60))[:m] for _ in range(n)])
        got = target_ranks(scores, ids)
        ref = [brute_rank(scores[i], ids[i]) for i in range(n)]
        np.testing.assert_array_equal(got, ref)
        hr, ndcg = metrics_from_ranks(got)
        assert hr == np.mean([hr_at_k(r) for r in ref])
        assert ndcg == pytest.approx(np.mean([ndcg_at_k(r) for r in ref]), abs=1e-15)

    def test_invariant_to_candidate_order(self, rng):
        scores = rng.integers(0, 5, size=(6, 15)).astype(float)
        ids = np.tile(np.arange(1, 16), (6, 1))
        perm = np.concatenate([[0], 1 + rng.permutation(14)])
        np.testing.assert_array_equal(target_ranks(scores, ids),
                                      target_ranks(scores[:, perm], ids[:, perm]))


class TestEvaluateScores:
    def test_oracle_scorer_is_perfect(self):
        split = make_split(n_users=8, n_items=30)
        rep = evaluate_scores(split, "test", 0, lambda u, c: (np.arange(c.shape[1]) == 0)[None] * 1.0)
        assert rep.hr_at_10 == 1.0 and rep.ndcg_at_10 == 1.0

    def test_random_scorer_calibration(self):
        split = wide_split(2000, 1100)
        rng = np.random.default_rng(5)
        rep = evaluate_scores(split, "test", 0, lambda u, c: rng.random(c.shape))
        assert rep.n_users == 2000 and rep.n_exhausted == 0
        assert abs(rep.hr_at_10 - 10 / 1001) <= 0.005

    def test_candidates_exclude_history(self):
        split = make_split(n_users=5, n_items=40)
        inp = build_eval_inputs(split, "test", 3, L=5, n_neg=20)
        for row, u in zip(inp.cands, inp.users):
            assert not set(row[1:]) & set(split.history[u].tolist())

    def test_seeded(self):
        split = make_split(n_users=30, n_items=60)
        a = build_eval_inputs(split, "val", 3, L=5, n_neg=10).cands
        b = build_eval_inputs(split, "val", 3, L=5, n_neg=10).cands
        c = build_eval_inputs(split, "val", 4, L=5, n_neg=10).cands
        assert np.array_equal(a, b) and not np.array_equal(a, c)


class TestPopularity:
    def test_universal_target(self):
        events = []
        for u in range(6):
            seq = [f"x{u}", "pop", f"y{u}", "pop"]
            events += [RawEvent(f"u{u}", it, k) for k, it in enumerate(seq)]
        split = leave_one_out_split(build_dataset(events, ContextSchema.parse("hour")))
        assert popularity_baseline(split, n_neg=50).hr_at_10 == 1.0

    def test_uniform_popularity_falls_back_to_ids(self):
        split = make_split(n_users=6, n_items=40)
        rep = evaluate_scores(split, "test", 0, lambda u, c: np.zeros(c.shape), n_neg=30)
        inp = build_eval_inputs(split, "test", 0, L=50, n_neg=30)
        ref = [1 + int((np.unique(row[1:]) < row[0]).sum()) for row in inp.cands]
        np.testing.assert_array_equal(rep.ranks, ref)

    def test_counting_oracle(self):
        split = make_split(n_users=8, n_items=25, per_user=9)
        counts = {}
        for u in split.users:
            for it in split.train_items[u]:
                counts[int(it)] = counts.get(int(it), 0) + 1
        np.testing.assert_array_equal(popularity_counts(split)[1:],
                                      [counts.get(i, 0) for i in range(1, split.n_items + 1)])
        rep = popularity_baseline(split, n_neg=10)
        inp = build_eval_inputs(split, "test", 0, L=50, n_neg=10)
        ref = [brute_rank([counts.get(int(c), 0) for c in row], row) for row in inp.cands]
        np.testing.assert_array_equal(rep.ranks, ref)


class TestEvaluateModel:
    def test_report_invariants_and_json(self):
        model, split = make_model(split=make_split(n_users=10, n_items=30))
        rep = evaluate(model, split, "test", 7, n_neg=15)
        assert 0.0 <= rep.ndcg_at_10 <= rep.hr_at_10 <= 1.0
        d = json.loads(rep.to_json())
        for key in ("hr10", "ndcg10", "head_redundancy_mean", "head_redundancy_std", "n_users",
                    "seed", "config_hash"):
            assert key in d
        assert d["n_users"] == 10 and d["seed"] == 7

    def test_deterministic_and_thread_independent(self):
        # more users than one scoring chunk, so the pool really splits work
        model, split = make_model(split=make_split(n_users=150, n_items=30))
        a = evaluate(model, split, "val", 1, threads=1, n_neg=15)
        b = evaluate(model, split, "val", 1, threads=3, n_neg=15)
        assert a.to_json() == b.to_json()
        np.testing.assert_array_equal(a.ranks, b.ranks)

    def test_ranks_match_predict_topk(self):
        model, split = make_model(split=make_split(n_users=4, n_items=30))
        rep = evaluate(model, split, "test", 2, n_neg=12)
        inp = build_eval_inputs(split, "test", 2, model.config.L, n_neg=12)
        F = eval_fism_items(split, "test", 2, model.config.N)
        for i, u in enumerate(inp.users):
            row = inp.cands[i]
            order = model.predict_topk(u, inp.items[i], inp.ctx[i], inp.next_ctx[i], row,
                                       len(row), F[i])
            assert rep.ranks[i] == list(order).index(row[0]) + 1


class TestHeadRedundancy:
    def test_cloned_heads_give_zero(self):
        model, split = make_model(H=3)
        for blk in model.blocks:
            blk.mix_logits.data[:] = blk.mix_logits.data[0]
            blk.log_var.data[:] = blk.log_var.data[0]
        seqs = np.stack([split.sequences()[u][0][:5] for u in split.users[:3]])
        ctx = np.stack([split.sequences()[u][1][:5] for u in split.users[:3]])
        mean, std = head_redundancy(model, seqs, ctx)
        assert mean == 0.0 and std == 0.0

    def test_random_init_positive(self):
        model, split = make_model(H=2)
        seqs = np.stack([split.sequences()[u][0][:5] for u in split.users[:3]])
        ctx = np.stack([split.sequences()[u][1][:5] for u in split.users[:3]])
        assert head_redundancy(model, seqs, ctx)[0] > 0

    def test_single_head_rejected(self):
        model, split = make_model(H=1)
        with pytest.raises(ContractError):
            head_redundancy(model, np.ones((1, 5), int), np.zeros((1, 5, 2), int))

    def test_symmetric_and_normalised(self, rng):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
        d_ab = pairwise_head_distances([a, b])
        np.testing.assert_array_equal(d_ab, pairwise_head_distances([b, a]))
        ref = np.linalg.norm((a - b).reshape(2, -1), axis=1) / np.sqrt(12)
        np.testing.assert_allclose(d_ab, ref, atol=1e-15)
