"""Training loop: per-epoch negatives, minibatch Adam, validation-based
early stopping on NDCG@10."""
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .data import pad_window, sample_fism_items, sample_negatives_batch
from .errors import ContractError, NonFiniteLossError
from .model import TrainBatch
from .optim import adam_step

log = logging.getLogger(__name__)

# rng stream ids under the config seed
STREAM_INIT, STREAM_SHUFFLE, STREAM_NEG, STREAM_FISM, STREAM_NOISE = range(5)


def make_training_windows(split, L):
    """Input/target windows per user: inputs are the train sequence minus its
    last event, targets the sequence shifted by one, both right-aligned to L.
    Users with fewer than two train events have no target and are skipped."""
    users, items, ctx, pos, pos_ctx = [], [], [], [], []
    C = len(split.schema)
    for u in split.users:
        s, c = split.train_items[u], split.train_ctx[u]
        if len(s) < 2:
            continue
        i_in, c_in = pad_window(s[:-1], c[:-1], L)
        i_tg, c_tg = pad_window(s[1:], c[1:], L)
        users.append(u)
        items.append(i_in)
        ctx.append(c_in)
        pos.append(i_tg)
        pos_ctx.append(c_tg)
    if not users:
        raise ContractError("no user has at least two training events")
    return TrainBatch(
        np.asarray(users, dtype=np.int64),
        np.stack(items),
        np.stack(ctx).reshape(len(users), L, C),
        np.stack(pos),
        np.stack(pos_ctx).reshape(len(users), L, C),
        np.zeros((len(users), L), dtype=np.int64),
        np.zeros((len(users), 0), dtype=np.int64),
    )


def sample_fism_batch(rng, split, users, N):
    return np.stack([sample_fism_items(rng, split.train_items[u], N) for u in users])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_ndcg10: float
    val_hr10: float
    seconds: float = 0.0

    def tsv(self):
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.val_ndcg10:.6f}\t{self.val_hr10:.6f}"


@dataclass
class TrainResult:
    best_epoch: int
    best_val_ndcg10: float
    history: list = field(default_factory=list)


class Trainer:
    """Runs epochs over a split; ``on_step(trainer)`` fires after every Adam step."""

    def __init__(self, model, split, dump_dir=None, on_step=None):
        self.model = model
        self.split = split
        self.cfg = model.config
        self.dump_dir = dump_dir
        self.on_step = on_step
        seed = self.cfg.seed
        self.rng_shuffle = np.random.default_rng([seed, STREAM_SHUFFLE])
        self.rng_neg = np.random.default_rng([seed, STREAM_NEG])
        self.rng_fism = np.random.default_rng([seed, STREAM_FISM])
        self.rng_noise = np.random.default_rng([seed, STREAM_NOISE])
        self.windows = make_training_windows(split, self.cfg.L)
        self.hist = split.history_matrix()
        self.epoch = 0
        self.steps = 0
        model.store.zero_grad()

    def _check_finite(self, loss, batch):
        if np.isfinite(loss.item()):
            return
        dump = None
        if self.dump_dir:
            os.makedirs(self.dump_dir, exist_ok=True)
            dump = os.path.join(self.dump_dir, f"nonfinite_epoch{self.epoch}_step{self.steps}.npz")
            np.savez(dump, **{k: getattr(batch, k) for k in batch.__dataclass_fields__})
        raise NonFiniteLossError(
            f"non-finite loss {loss.item()} at epoch {self.epoch} step {self.steps}; "
            f"users {batch.users.tolist()[:20]}" + (f"; batch dumped to {dump}" if dump else ""),
            dump_path=dump,
        )

    def _negatives(self, w):
        # a user who has seen every item gets negatives that merely differ from the target
        full = self.hist[w.users, 1:].all(axis=1)
        hist = self.hist
        if full.any():
            hist = hist.copy()
            hist[w.users[full]] = False
        neg = sample_negatives_batch(self.rng_neg, hist, w.users, w.pos.shape)
        clash = full[:, None] & (neg == w.pos)
        while clash.any():
            neg[clash] = self.rng_neg.integers(1, self.hist.shape[1], size=int(clash.sum()))
            clash = full[:, None] & (neg == w.pos)
        return neg

    def run_epoch(self):
        """One pass over all training windows; returns loss per target position."""
        self.epoch += 1
        w = self.windows
        w.neg = self._negatives(w)
        order = self.rng_shuffle.permutation(len(w.users))
        total, n_pos = 0.0, 0
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            batch = w.subset(idx)
            batch.F = sample_fism_batch(self.rng_fism, self.split, batch.users, self.cfg.N)
            loss = self.model.loss(batch, self.rng_noise)
            self._check_finite(loss, batch)
            ag.backward(loss)
            adam_step(self.model.store, self.cfg.lr)
            self.steps += 1
            total += loss.item()
            n_pos += int((batch.pos != 0).sum())
            if self.on_step is not None:
                self.on_step(self)
        return total / max(n_pos, 1)

    def fit(self, max_epochs=None, log_path=None, eval_seed=None):
        """Train with validation each epoch; restores the best-NDCG@10 weights
        (and Adam state) at the end."""
        from .evaluation import evaluate

        max_epochs = self.cfg.max_epochs if max_epochs is None else max_epochs
        eval_seed = self.cfg.seed if eval_seed is None else eval_seed
        store = self.model.store
        best = (-1.0, 0, None)
        history = []
        stale = 0
        fh = open(log_path, "w", encoding="utf-8") if log_path else None
        try:
            if fh:
                fh.write("epoch\ttrain_loss\tval_ndcg10\tval_hr10\n")
            for _ in range(max_epochs):
                t0 = time.perf_counter()
                loss = self.run_epoch()
                rep = evaluate(self.model, self.split, "val", eval_seed, head_stats=False)
                rec = EpochRecord(self.epoch, loss, rep.ndcg_at_10, rep.hr_at_10,
                                  time.perf_counter() - t0)
                history.append(rec)
                if fh:
                    fh.write(rec.tsv() + "\n")
                    fh.flush()
                log.info("epoch %d loss %.4f val ndcg@10 %.4f hr@10 %.4f (%.1fs)",
                         rec.epoch, rec.train_loss, rec.val_ndcg10, rec.val_hr10, rec.seconds)
                if rep.ndcg_at_10 > best[0]:
                    snap = (store.state_dict(), {k: (store.m[k].copy(), store.v[k].copy(),
                                                      store.steps[k]) for k in store})
                    best = (rep.ndcg_at_10, self.epoch, snap)
                    stale = 0
                else:
                    stale += 1
                    if self.cfg.patience and stale >= self.cfg.patience:
                        log.info("early stop after %d epochs without improvement", stale)
                        break
        finally:
            if fh:
                fh.close()
        if best[2] is not None:
            params, adam = best[2]
            store.load_state_dict(params)
            for k, (m, v, s) in adam.items():
                store.m[k][...] = m
                store.v[k][...] = v
                store.steps[k] = s
        return TrainResult(best[1], best[0], history)


def train(model, split, log_path=None, dump_dir=None):
    return Trainer(model, split, dump_dir=dump_dir).fit(log_path=log_path)
