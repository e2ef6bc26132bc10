import numpy as np
import pytest

from mojito import autograd as ag
from mojito.config import MojitoConfig
from mojito.data import ContextSchema, RawEvent, build_dataset, leave_one_out_split
from mojito.errors import ContractError, NonFiniteLossError
from mojito.model import MojitoModel, TrainBatch
from mojito.train import Trainer, make_training_windows, sample_fism_batch

from conftest import make_model, make_split


def batch_for(model, split, seed=0):
    w = make_training_windows(split, model.config.L)
    rng = np.random.default_rng(seed)
    w.neg = Trainer(model, split)._negatives(w)
    w.F = sample_fism_batch(rng, split, w.users, model.config.N)
    return w


def grad_norms(model):
    return {k: float(np.abs(t.grad).sum()) for k, t in model.store.items()}


class TestShortTermScore:
    def test_zero_encoder_row(self):
        model, _ = make_model()
        x = ag.Tensor(np.zeros((1, 8)))
        s = model.short_term_scores(x, np.array([[1, 2, 3]]), np.array([[0, 0]])).data
        np.testing.assert_array_equal(s, 0.0)

    def test_identical_embeddings_identical_scores(self, rng):
        model, _ = make_model()
        model.item_emb.data[2] = model.item_emb.data[5]
        x = ag.Tensor(rng.normal(size=(1, 8)))
        s = model.short_term_scores(x, np.array([[2, 5]]), np.array([[1, 3]])).data
        assert s[0, 0] == s[0, 1]

    def test_direct_dot_product(self, rng):
        model, _ = make_model()
        x = rng.normal(size=(1, 8))
        ctx = np.array([[4, 17]])
        s = model.short_term_scores(ag.Tensor(x), np.array([[3]]), ctx).data
        ref = x[0] @ np.concatenate([model.item_emb.data[3], model.embed.fuse_context(ctx).data[0]])
        assert s[0, 0] == pytest.approx(ref, abs=1e-14)

    def test_padding_candidate_rejected(self, rng):
        model, _ = make_model()
        with pytest.raises(ContractError):
            model.short_term_scores(ag.Tensor(np.zeros((1, 8))), np.array([[0]]), np.array([[0, 0]]))


class TestCombinedScore:
    def _inputs(self, model, split, rng):
        u = split.users[:2]
        items = rng.integers(1, split.n_items + 1, size=(2, model.config.L))
        ctx = np.stack([rng.integers(0, 7, size=(model.config.L,)),
                        rng.integers(0, 24, size=(model.config.L,))], axis=-1)[None].repeat(2, 0)
        nxt = np.array([[1, 5], [2, 6]])
        cands = rng.integers(1, split.n_items + 1, size=(2, 4))
        F = rng.integers(1, split.n_items + 1, size=(2, model.config.N))
        return u, items, ctx, nxt, cands, F

    @pytest.mark.parametrize("lam", [0.0, 0.3, 1.0])
    def test_lambda_combination(self, lam, rng):
        model, split = make_model(lam=lam)
        args = self._inputs(model, split, rng)
        short, long, comb, _ = model.score_candidates(*args)
        np.testing.assert_allclose(comb, lam * short + (1 - lam) * long, atol=1e-14)
        if lam == 1.0:
            assert np.array_equal(comb, short)
        if lam == 0.0:
            assert np.array_equal(comb, long)
        np.testing.assert_allclose(model.combined_score(*args).data, comb, atol=1e-14)

    def test_long_term_ignores_target_context(self, rng):
        model, split = make_model()
        u, items, ctx, nxt, cands, F = self._inputs(model, split, rng)
        _, long1, _, _ = model.score_candidates(u, items, ctx, nxt, cands, F)
        _, long2, _, _ = model.score_candidates(u, items, ctx, (nxt + 3) % 7, cands, F)
        assert np.array_equal(long1, long2)


class TestPredictTopk:
    def _args(self, model, split, rng):
        L = model.config.L
        items = rng.integers(1, split.n_items + 1, size=L)
        ctx = np.stack([rng.integers(0, 7, L), rng.integers(0, 24, L)], -1)
        F = rng.integers(1, split.n_items + 1, size=model.config.N)
        return items, ctx, np.array([2, 3]), F

    def test_single_candidate(self, rng):
        model, split = make_model()
        items, ctx, nxt, F = self._args(model, split, rng)
        np.testing.assert_array_equal(model.predict_topk(1, items, ctx, nxt, [4], 10, F), [4])

    def test_sort_oracle(self, rng):
        model, split = make_model()
        items, ctx, nxt, F = self._args(model, split, rng)
        cands = np.arange(1, split.n_items + 1)
        _, _, comb, _ = model.score_candidates([1], items[None], ctx[None], nxt[None], cands[None],
                                               F[None])
        ref = [c for _, c in sorted(zip(-comb[0], cands))][:3]
        np.testing.assert_array_equal(model.predict_topk(1, items, ctx, nxt, cands, 3, F), ref)

    def test_ties_by_ascending_id(self, rng):
        model, split = make_model()
        items, ctx, nxt, F = self._args(model, split, rng)
        model.item_emb.data[[2, 5, 7]] = 0.0
        model.user_emb.data[...] = 0.0
        out = model.predict_topk(1, items, ctx, nxt, [7, 5, 2], 3, F)
        np.testing.assert_array_equal(out, [2, 5, 7])

    def test_k_larger_than_candidates(self, rng):
        model, split = make_model()
        items, ctx, nxt, F = self._args(model, split, rng)
        assert len(model.predict_topk(1, items, ctx, nxt, [1, 2], 10, F)) == 2

    def test_empty_candidates(self, rng):
        model, split = make_model()
        items, ctx, nxt, F = self._args(model, split, rng)
        with pytest.raises(ContractError):
            model.predict_topk(1, items, ctx, nxt, [], 10, F)


class TestLoss:
    def test_zero_scores_give_two_log_two(self):
        model, _ = make_model()
        z = ag.Tensor(np.zeros((1, 3)))
        loss = model._bce(z, z, np.array([[True, True, False]]))
        assert loss.item() == pytest.approx(2 * 2 * np.log(2), abs=1e-12)

    def test_saturated_loss_vanishes(self):
        model, _ = make_model()
        loss = model._bce(ag.Tensor([[30.0]]), ag.Tensor([[-30.0]]), np.array([[True]]))
        assert 0.0 <= loss.item() < 1e-6

    def test_scalar_oracle(self):
        model, _ = make_model()
        rp, rn = 0.7, -0.2
        sig = lambda x: 1 / (1 + np.exp(-x))  # noqa: E731
        loss = model._bce(ag.Tensor([[rp]]), ag.Tensor([[rn]]), np.array([[True]])).item()
        assert loss == pytest.approx(-(np.log(sig(rp)) + np.log(1 - sig(rn))), abs=1e-12)

    def test_loss_nonnegative_and_finite_at_extremes(self):
        model, _ = make_model()
        loss = model._bce(ag.Tensor([[-1e4, 1e4]]), ag.Tensor([[1e4, -1e4]]), np.ones((1, 2), bool))
        assert np.isfinite(loss.item()) and loss.item() > 0

    def test_padding_positions_do_not_count(self):
        model, split = make_model()
        b = batch_for(model, split)
        ref = model.sequence_loss(b, "long").item()
        b2 = TrainBatch(*(getattr(b, f).copy() for f in b.__dataclass_fields__))
        pad = b2.pos == 0
        b2.neg[pad] = 1 + (b2.neg[pad] % split.n_items)
        assert model.sequence_loss(b2, "long").item() == ref

    def test_unknown_kind(self):
        model, split = make_model()
        with pytest.raises(ContractError):
            model.sequence_loss(batch_for(model, split), "medium")


class TestLambdaEndpoints:
    def test_lambda_one_freezes_users(self):
        model, split = make_model(lam=1.0)
        ag.backward(model.loss(batch_for(model, split), np.random.default_rng(0)))
        assert np.all(model.user_emb.grad == 0.0)

    def test_lambda_zero_freezes_encoder(self):
        model, split = make_model(lam=0.0)
        ag.backward(model.loss(batch_for(model, split), np.random.default_rng(0)))
        g = grad_norms(model)
        enc = [k for k in g if k.startswith("block") or k.startswith(("mercer", "fusion", "pos_emb"))]
        assert enc and all(g[k] == 0.0 for k in enc)
        assert g["user_emb"] > 0

    def test_generic_loss_reaches_everything(self):
        model, split = make_model(lam=0.5)
        ag.backward(model.loss(batch_for(model, split), np.random.default_rng(0)))
        dead = [k for k, v in grad_norms(model).items() if v == 0.0]
        assert dead == []


def tiny_markov(n_events=10, shared=False):
    """5 users cycling through 8 items; ``shared`` gives every user the same phase."""
    events = []
    for u in range(5):
        for e in range(n_events):
            events.append(RawEvent(f"u{u}", f"i{((0 if shared else u) + e) % 8}", e * 3600))
    return leave_one_out_split(build_dataset(events, ContextSchema.parse("hour")))


class TestTrainer:
    def _model(self, split, **kw):
        base = dict(d=8, L=6, B=1, H=1, N=3, lr=0.01, batch_size=5, seed=0, schema="hour",
                    dropout=0.0, patience=0)
        base.update(kw)
        return MojitoModel(MojitoConfig(**base), split.n_users, split.n_items)

    def test_loss_strictly_decreases_first_five_epochs(self):
        # epoch losses carry sampling noise, so the setup keeps lr small and sequences long
        split = tiny_markov(24, shared=True)
        tr = Trainer(self._model(split, L=20, lr=0.003), split)
        losses = [tr.run_epoch() for _ in range(5)]
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    @pytest.mark.parametrize("seed", range(3))
    def test_loss_falls_over_twenty_epochs(self, seed):
        split = tiny_markov(24, shared=True)
        tr = Trainer(self._model(split, L=20, lr=0.003, seed=seed), split)
        losses = [tr.run_epoch() for _ in range(20)]
        assert losses[-1] < losses[0] - 1e-3

    def test_epoch_one_deterministic(self):
        split = tiny_markov()
        a = Trainer(self._model(split), split).run_epoch()
        b = Trainer(self._model(split), split).run_epoch()
        assert a == b

    def test_simplex_after_every_step(self):
        split = make_split()
        model, _ = make_model(split, H=3, B=2)
        seen = []

        def check(tr):
            p = tr.model.mixture_weights()
            seen.append(p)
            assert np.all(p >= 0)
            np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)

        tr = Trainer(model, split, on_step=check)
        tr.run_epoch()
        assert len(seen) == 2

    def test_padding_row_stays_zero(self):
        split = tiny_markov()
        model = self._model(split)
        tr = Trainer(model, split)
        for _ in range(3):
            tr.run_epoch()
        assert np.all(model.item_emb.data[0] == 0.0)

    def test_fit_restores_best_and_logs(self, tmp_path):
        split = tiny_markov()
        model = self._model(split)
        log_path = tmp_path / "log.tsv"
        res = Trainer(model, split).fit(max_epochs=4, log_path=log_path)
        lines = log_path.read_text().splitlines()
        assert lines[0] == "epoch\ttrain_loss\tval_ndcg10\tval_hr10"
        assert len(lines) == 5
        best = max(res.history, key=lambda r: r.val_ndcg10)
        assert res.best_epoch == best.epoch

    def test_early_stopping(self):
        split = tiny_markov()
        model = self._model(split, patience=1, lr=1e-9)
        res = Trainer(model, split).fit(max_epochs=20)
        assert len(res.history) < 20

    def test_non_finite_loss_dumps_batch(self, tmp_path):
        split = tiny_markov()
        model = self._model(split)
        model.user_emb.data[...] = np.nan
        with pytest.raises(NonFiniteLossError) as exc:
            Trainer(model, split, dump_dir=tmp_path).run_epoch()
        assert exc.value.dump_path and np.load(exc.value.dump_path)["users"].size > 0

    def test_user_with_full_history_gets_negatives(self):
        events = [RawEvent("a", f"i{k % 3}", k) for k in range(8)]
        split = leave_one_out_split(build_dataset(events, ContextSchema.parse("hour")))
        model = self._model(split, N=2)
        tr = Trainer(model, split)
        w = tr.windows
        neg = tr._negatives(w)
        valid = w.pos != 0
        assert np.all(neg[valid] != w.pos[valid])
        assert np.isfinite(tr.run_epoch())
