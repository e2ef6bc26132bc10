import numpy as np
import pytest

from mojito import autograd as ag
from mojito.errors import ContractError, DataFormatError
from mojito.optim import (
    CKPT_MAGIC,
    ParameterStore,
    adam_step,
    load_store_state,
    read_checkpoint,
    save_checkpoint,
)


def adam_oracle(w, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return w


class TestParameterStore:
    def test_parameters_require_grad_and_moments_match(self, store):
        t = store.add("w", np.ones((2, 3)))
        assert t.requires_grad
        assert store.m["w"].shape == store.v["w"].shape == (2, 3)

    def test_duplicate_name(self, store):
        store.add("w", np.ones(2))
        with pytest.raises(ContractError):
            store.add("w", np.ones(2))

    def test_state_dict_round_trip(self, store):
        store.add("w", np.arange(4.0))
        snap = store.state_dict()
        store["w"].data += 1
        store.load_state_dict(snap)
        np.testing.assert_array_equal(store["w"].data, np.arange(4.0))


class TestAdamStep:
    def test_single_step_oracle(self, store):
        w0 = np.array([0.5, -1.0, 2.0])
        g = np.array([0.3, -2.0, 1e-3])
        w = store.add("w", w0)
        w.grad = g.copy()
        adam_step(store, lr=0.01)
        np.testing.assert_allclose(w.data, adam_oracle(w0, [g], 0.01), rtol=0, atol=1e-15)

    def test_multi_step_oracle(self, store, rng):
        w0 = rng.normal(size=5)
        grads = [rng.normal(size=5) for _ in range(7)]
        w = store.add("w", w0)
        for g in grads:
            w.grad = g.copy()
            adam_step(store, lr=0.05)
        np.testing.assert_allclose(w.data, adam_oracle(w0, grads, 0.05), atol=1e-13)

    def test_zero_grad_leaves_parameter(self, store):
        w = store.add("w", np.array([1.0, 2.0]))
        w.grad = np.zeros(2)
        adam_step(store, lr=0.1)
        np.testing.assert_array_equal(w.data, [1.0, 2.0])

    def test_grads_zeroed_after_step(self, store):
        w = store.add("w", np.ones(2))
        w.grad = np.ones(2)
        adam_step(store, lr=0.1)
        np.testing.assert_array_equal(w.grad, np.zeros(2))

    def test_missing_grad_names_parameter(self, store):
        store.add("encoder.wq", np.ones(2))
        with pytest.raises(ContractError, match="encoder.wq"):
            adam_step(store, lr=0.1)

    def test_scalar_quadratic(self, store):
        w = store.add("w", np.array(0.0))
        for _ in range(200):
            diff = ag.sub(w, 3.0)
            ag.backward(ag.mul(diff, diff))
            adam_step(store, lr=0.1)
        assert abs(w.item() - 3.0) < 0.1


class TestCheckpoint:
    def _store(self, rng):
        s = ParameterStore()
        s.add("a", rng.normal(size=(2, 3)))
        s.add("b.c", rng.normal(size=4))
        for t in s.params.values():
            t.grad = rng.normal(size=t.shape)
        adam_step(s, lr=0.01)
        return s

    def test_round_trip(self, tmp_path, rng):
        s = self._store(rng)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, s, {"hello": 1})
        meta, params, adam = read_checkpoint(path)
        assert meta == {"hello": 1}
        fresh = ParameterStore()
        fresh.add("a", np.zeros((2, 3)))
        fresh.add("b.c", np.zeros(4))
        load_store_state(fresh, params, adam)
        for k in s:
            assert np.array_equal(fresh[k].data, s[k].data)
            assert np.array_equal(fresh.m[k], s.m[k])
            assert np.array_equal(fresh.v[k], s.v[k])
            assert fresh.steps[k] == s.steps[k] == 1

    def test_magic_header(self, tmp_path, rng):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, self._store(rng), {})
        assert path.read_bytes().startswith(CKPT_MAGIC)

    def test_bytes_deterministic(self, tmp_path):
        p1, p2 = tmp_path / "1.ckpt", tmp_path / "2.ckpt"
        save_checkpoint(p1, self._store(np.random.default_rng(0)), {"x": [1, 2]})
        save_checkpoint(p2, self._store(np.random.default_rng(0)), {"x": [1, 2]})
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint\n")
        with pytest.raises(DataFormatError):
            read_checkpoint(path)

    def test_rejects_truncated(self, tmp_path, rng):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, self._store(rng), {})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataFormatError, match="truncated"):
            read_checkpoint(path)
