"""Event ingestion, calendar contexts, k-core filtering, splits and sampling."""
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import ContractError, DataFormatError, DomainError

log = logging.getLogger(__name__)

PAD = 0

CALENDAR_CARDINALITY = {"month": 12, "day_of_month": 31, "day_of_week": 7, "hour": 24}
DEFAULT_SCHEMA = "month,day_of_month,day_of_week,hour"


class RawEvent(NamedTuple):
    user_id: str
    item_id: str
    timestamp: int


@dataclass(frozen=True)
class ContextSchema:
    names: tuple
    cardinalities: tuple

    def __post_init__(self):
        if not self.names:
            raise ContractError("context schema needs at least one context type")
        if len(self.names) != len(self.cardinalities):
            raise ContractError("schema names and cardinalities differ in length")
        if any(c < 2 for c in self.cardinalities):
            raise ContractError(f"every context cardinality must be >= 2: {self.cardinalities}")

    @classmethod
    def parse(cls, text):
        """Parse ``"month,day_of_week"``; only calendar-derived types are known."""
        names = tuple(n.strip() for n in str(text).split(",") if n.strip())
        unknown = [n for n in names if n not in CALENDAR_CARDINALITY]
        if unknown:
            raise ContractError(
                f"unknown context types {unknown}; known: {sorted(CALENDAR_CARDINALITY)}"
            )
        return cls(names, tuple(CALENDAR_CARDINALITY[n] for n in names))

    def __len__(self):
        return len(self.names)

    def __str__(self):
        return ",".join(self.names)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def load_events(path, fmt="tsv", column_map=None, delimiter=None, skip_header=False,
                max_malformed=0.01):
    """Read delimiter-separated (user, item, timestamp) rows.

    Returns ``(events, n_malformed)``. Extra columns (e.g. ratings) are
    ignored. Rows with too few fields or a non-integer / negative timestamp
    are skipped and counted; if they exceed ``max_malformed`` of the rows a
    ``DataFormatError`` quoting a few of them is raised.
    """
    if delimiter is None:
        delimiter = {"tsv": "\t", "csv": ","}.get(fmt)
        if delimiter is None:
            raise ContractError(f"unknown format {fmt!r}; use tsv, csv or pass a delimiter")
    cols = {"user": 0, "item": 1, "time": 2}
    if column_map:
        cols.update(column_map)
    need = max(cols["user"], cols["item"], cols["time"]) + 1

    events = []
    bad = []
    n_rows = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if skip_header and lineno == 1:
                continue
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            n_rows += 1
            parts = line.split(delimiter)
            if len(parts) < need:
                bad.append((lineno, line))
                continue
            try:
                ts = int(parts[cols["time"]].strip())
            except ValueError:
                bad.append((lineno, line))
                continue
            if ts < 0:
                bad.append((lineno, line))
                continue
            events.append(RawEvent(parts[cols["user"]].strip(), parts[cols["item"]].strip(), ts))
    if bad:
        log.warning("%s: skipped %d malformed rows of %d", path, len(bad), n_rows)
        if len(bad) > max_malformed * n_rows:
            sample = "; ".join(f"line {n}: {t!r}" for n, t in bad[:3])
            raise DataFormatError(
                f"{path}: {len(bad)}/{n_rows} rows malformed (> {max_malformed:.0%}), e.g. {sample}"
            )
    return events, len(bad)


# ---------------------------------------------------------------------------
# k-core
# ---------------------------------------------------------------------------

def k_core_filter(events, k_user, k_item):
    """Keep the largest subset in which every user has >= k_user events and
    every item >= k_item events (duplicates count separately)."""
    if k_user < 1 or k_item < 1:
        raise ContractError(f"k_user and k_item must be >= 1, got {k_user}, {k_item}")
    if not events:
        return []
    _, ucode = np.unique([e.user_id for e in events], return_inverse=True)
    _, icode = np.unique([e.item_id for e in events], return_inverse=True)
    keep = _kernels.kcore_mask(
        ucode, icode, int(ucode.max()) + 1, int(icode.max()) + 1, int(k_user), int(k_item)
    )
    out = [e for e, k in zip(events, keep) if k]
    if not out:
        log.warning("k-core(%d, %d) removed every event", k_user, k_item)
    return out


# ---------------------------------------------------------------------------
# contexts
# ---------------------------------------------------------------------------

def derive_contexts(timestamps, schema):
    """Vectorised UTC calendar features, 0-based, one column per schema type."""
    ts = np.asarray(timestamps, dtype=np.int64)
    secs = ts.astype("datetime64[s]")
    days = secs.astype("datetime64[D]")
    months = days.astype("datetime64[M]")
    cols = []
    for name in schema.names:
        if name == "month":
            cols.append(months.astype(np.int64) % 12)
        elif name == "day_of_month":
            cols.append((days - months.astype("datetime64[D]")).astype(np.int64))
        elif name == "day_of_week":
            # 1970-01-01 was a Thursday (Monday = 0)
            cols.append((days.astype(np.int64) + 3) % 7)
        elif name == "hour":
            cols.append((ts % 86400) // 3600)
        else:  # pragma: no cover - schema.parse rejects these
            raise ContractError(f"cannot derive context {name!r}")
    return np.stack(cols, axis=-1).astype(np.int64) if cols else np.zeros(ts.shape + (0,), np.int64)


def derive_context(timestamp, schema):
    return tuple(int(v) for v in derive_contexts(np.array([timestamp]), schema)[0])


# ---------------------------------------------------------------------------
# indexed dataset and leave-one-out split
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Users and items re-indexed from 1 (item 0 is padding); each user's
    events sorted by timestamp with ties kept in input order."""

    schema: ContextSchema
    user_ids: list
    item_ids: list
    items: dict
    timestamps: dict

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def n_items(self):
        return len(self.item_ids)

    @property
    def n_events(self):
        return int(sum(len(v) for v in self.items.values()))

    def contexts(self, u):
        return derive_contexts(self.timestamps[u], self.schema)

    def sequences(self):
        return {u: (self.items[u], self.contexts(u)) for u in self.items}

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(f"{self.schema}|{self.n_users}|{self.n_items}".encode())
        for u in sorted(self.items):
            h.update(np.int64(u).tobytes())
            h.update(np.ascontiguousarray(self.items[u], dtype=np.int64).tobytes())
            h.update(np.ascontiguousarray(self.timestamps[u], dtype=np.int64).tobytes())
        return h.hexdigest()[:16]


def build_dataset(events, schema):
    users = sorted({e.user_id for e in events})
    items = sorted({e.item_id for e in events})
    uidx = {u: i + 1 for i, u in enumerate(users)}
    iidx = {v: i + 1 for i, v in enumerate(items)}
    per_items = {}
    per_ts = {}
    for e in events:
        u = uidx[e.user_id]
        per_items.setdefault(u, []).append(iidx[e.item_id])
        per_ts.setdefault(u, []).append(e.timestamp)
    out_items, out_ts = {}, {}
    for u in per_items:
        ts = np.asarray(per_ts[u], dtype=np.int64)
        order = np.argsort(ts, kind="stable")
        out_items[u] = np.asarray(per_items[u], dtype=np.int64)[order]
        out_ts[u] = ts[order]
    return Dataset(schema, users, items, out_items, out_ts)


@dataclass
class SplitDataset:
    schema: ContextSchema
    n_users: int
    n_items: int
    users: np.ndarray
    train_items: dict
    train_ctx: dict
    val_item: dict
    val_ctx: dict
    test_item: dict
    test_ctx: dict
    history: dict
    fingerprint: str = ""
    _hist_matrix: np.ndarray = field(default=None, repr=False)

    def sequences(self):
        return {u: (self.train_items[u], self.train_ctx[u]) for u in self.users}

    def train_history(self, u):
        return np.unique(self.train_items[u])

    def history_matrix(self):
        """Boolean (n_users+1, n_items+1) matrix of each user's train items."""
        if self._hist_matrix is None:
            m = np.zeros((self.n_users + 1, self.n_items + 1), dtype=bool)
            for u in self.users:
                m[u, self.train_items[u]] = True
            self._hist_matrix = m
        return self._hist_matrix

    def eval_input(self, u, which):
        """Input events and target for ``which`` in {val, test}; the test input
        includes the validation event."""
        if which == "val":
            return self.train_items[u], self.train_ctx[u], self.val_item[u], self.val_ctx[u]
        if which == "test":
            items = np.append(self.train_items[u], self.val_item[u])
            ctx = np.vstack([self.train_ctx[u], self.val_ctx[u][None, :]])
            return items, ctx, self.test_item[u], self.test_ctx[u]
        raise ContractError(f"split must be 'val' or 'test', got {which!r}")


def leave_one_out_split(dataset):
    """Last event -> test, penultimate -> validation, rest -> train.
    Users with fewer than 3 events are dropped with a warning."""
    users = []
    tr_i, tr_c, va_i, va_c, te_i, te_c, hist = {}, {}, {}, {}, {}, {}, {}
    dropped = 0
    for u in sorted(dataset.items):
        items = dataset.items[u]
        if len(items) < 3:
            dropped += 1
            continue
        ctx = dataset.contexts(u)
        users.append(u)
        tr_i[u], tr_c[u] = items[:-2], ctx[:-2]
        va_i[u], va_c[u] = int(items[-2]), ctx[-2]
        te_i[u], te_c[u] = int(items[-1]), ctx[-1]
        hist[u] = np.unique(items)
    if dropped:
        log.warning("leave-one-out: dropped %d users with fewer than 3 events", dropped)
    return SplitDataset(
        dataset.schema, dataset.n_users, dataset.n_items, np.asarray(users, dtype=np.int64),
        tr_i, tr_c, va_i, va_c, te_i, te_c, hist, fingerprint=dataset.fingerprint(),
    )


def pad_window(items, contexts, L):
    """Right-align the last ``L`` events, left-padding item 0 / context zeros."""
    items = np.asarray(items, dtype=np.int64)[-L:]
    contexts = np.asarray(contexts, dtype=np.int64)[-L:]
    n = len(items)
    out_i = np.zeros(L, dtype=np.int64)
    out_c = np.zeros((L, contexts.shape[1]), dtype=np.int64)
    if n:
        out_i[L - n:] = items
        out_c[L - n:] = contexts
    return out_i, out_c


def build_sequences(dataset, L):
    """Per-user ``(items[L], contexts[L, C])`` windows of the most recent events."""
    if L < 2:
        raise ContractError(f"L must be >= 2, got {L}")
    out = {}
    empty = 0
    for u, (items, ctx) in dataset.sequences().items():
        if len(items) == 0:
            empty += 1
            continue
        out[u] = pad_window(items, ctx, L)
    if empty:
        log.warning("build_sequences: %d users without events excluded", empty)
    return out


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_negative(rng, user_history, item_count):
    """Uniform item in 1..item_count outside ``user_history`` (rejection)."""
    hist = set(int(i) for i in user_history)
    hist.discard(PAD)
    if item_count <= len(hist):
        raise DomainError(f"no negative item available: {item_count} items, history {len(hist)}")
    while True:
        o = int(rng.integers(1, item_count + 1))
        if o not in hist:
            return o


def sample_negatives_batch(rng, hist_matrix, users, shape):
    """Vectorised rejection sampling: one negative per cell of ``shape`` for
    each row user, using a boolean history matrix."""
    n_items = hist_matrix.shape[1] - 1
    users = np.asarray(users, dtype=np.int64)
    if (hist_matrix[users, 1:].sum(axis=1) >= n_items).any():
        raise DomainError("a user has interacted with every item; no negative exists")
    u = np.broadcast_to(users.reshape((-1,) + (1,) * (len(shape) - 1)), shape)
    out = rng.integers(1, n_items + 1, size=shape)
    bad = hist_matrix[u, out]
    while bad.any():
        out[bad] = rng.integers(1, n_items + 1, size=int(bad.sum()))
        bad = hist_matrix[u, out]
    return out


def sample_eval_negatives(rng, user_history, item_count, n=1000):
    """``n`` distinct non-interacted items; returns ``(items, exhausted)``.

    When fewer than ``n`` items are eligible, all of them are returned in id
    order and ``exhausted`` is True.
    """
    eligible = np.setdiff1d(np.arange(1, item_count + 1), np.asarray(user_history, dtype=np.int64))
    if len(eligible) <= n:
        return eligible, len(eligible) < n
    return np.sort(rng.choice(eligible, size=n, replace=False)), False


def sample_fism_items(rng, user_history, N):
    """``N`` items from the user's history: without replacement when the
    history has at least ``N`` distinct items, with replacement otherwise."""
    hist = np.unique(np.asarray(user_history, dtype=np.int64))
    hist = hist[hist != PAD]
    if len(hist) == 0:
        raise DomainError("cannot sample FISM items from an empty history")
    return rng.choice(hist, size=N, replace=len(hist) < N)


# ---------------------------------------------------------------------------
# dataset directory
# ---------------------------------------------------------------------------

def write_dataset_dir(dataset, out_dir, stats):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "items.tsv"), "w", encoding="utf-8") as fh:
        for i, name in enumerate(dataset.item_ids, 1):
            fh.write(f"{i}\t{name}\n")
    with open(os.path.join(out_dir, "users.tsv"), "w", encoding="utf-8") as fh:
        for i, name in enumerate(dataset.user_ids, 1):
            fh.write(f"{i}\t{name}\n")
    with open(os.path.join(out_dir, "sequences.tsv"), "w", encoding="utf-8") as fh:
        for u in sorted(dataset.items):
            body = ",".join(f"{i}:{t}" for i, t in zip(dataset.items[u], dataset.timestamps[u]))
            fh.write(f"{u}\t{body}\n")
    stats = dict(stats, schema=str(dataset.schema), fingerprint=dataset.fingerprint())
    with open(os.path.join(out_dir, "stats.json"), "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_dataset_dir(path):
    stats_path = os.path.join(path, "stats.json")
    if not os.path.exists(stats_path):
        raise DataFormatError(f"{path} is not a preprocessed dataset directory (no stats.json)")
    with open(stats_path, encoding="utf-8") as fh:
        stats = json.load(fh)
    schema = ContextSchema.parse(stats["schema"])

    def read_index(name):
        with open(os.path.join(path, name), encoding="utf-8") as fh:
            return [line.rstrip("\n").split("\t", 1)[1] for line in fh if line.strip()]

    user_ids = read_index("users.tsv")
    item_ids = read_index("items.tsv")
    items, ts = {}, {}
    with open(os.path.join(path, "sequences.tsv"), encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            u, body = line.rstrip("\n").split("\t")
            pairs = [p.split(":") for p in body.split(",")]
            items[int(u)] = np.array([int(a) for a, _ in pairs], dtype=np.int64)
            ts[int(u)] = np.array([int(b) for _, b in pairs], dtype=np.int64)
    return Dataset(schema, user_ids, item_ids, items, ts), stats
