"""Synthetic event streams with a known temporal or sequential signal."""
import dataclasses
from dataclasses import dataclass

import numpy as np

from .data import CALENDAR_CARDINALITY, ContextSchema, RawEvent, derive_contexts
from .errors import ConfigError

DAY = 86400


@dataclass(frozen=True)
class SyntheticSpec:
    """``kind='pool'``: each event's item comes from the pool of its current
    ``driver`` context value (prob. 1 - noise) or uniformly from all items.
    ``kind='markov'``: the next item is a fixed successor of the previous
    one (prob. 1 - noise) or uniform. Pools default to a contiguous partition
    of the items into one block per context value."""

    n_users: int = 200
    n_items: int = 200
    events_per_user: int = 100
    kind: str = "pool"
    driver: str = "day_of_week"
    noise: float = 0.1
    seed: int = 0
    stride: int = 6 * 3600
    start: int = 1_600_000_000
    pools: tuple = None

    def __post_init__(self):
        problems = []
        for name in ("n_users", "n_items", "events_per_user", "stride"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.noise <= 1.0:
            problems.append(f"noise must be in [0,1], got {self.noise}")
        if self.kind not in ("pool", "markov"):
            problems.append(f"kind must be pool or markov, got {self.kind!r}")
        if self.driver not in CALENDAR_CARDINALITY:
            problems.append(f"driver must be one of {sorted(CALENDAR_CARDINALITY)}, got {self.driver!r}")
        elif self.kind == "pool" and self.pools is None and self.n_items < CALENDAR_CARDINALITY[self.driver]:
            problems.append(f"n_items must be >= {CALENDAR_CARDINALITY[self.driver]} to give every "
                            f"{self.driver} value a pool")
        if self.start < 0:
            problems.append(f"start must be >= 0, got {self.start}")
        if problems:
            raise ConfigError(problems)

    def item_pools(self):
        """One array of 1-based item ids per driver value; pools are disjoint."""
        if self.pools is not None:
            pools = [np.asarray(p, dtype=np.int64) for p in self.pools]
        else:
            P = CALENDAR_CARDINALITY[self.driver]
            pools = np.array_split(np.arange(1, self.n_items + 1), P)
        seen = np.concatenate(pools)
        if len(seen) != len(np.unique(seen)) or any(len(p) == 0 for p in pools):
            raise ConfigError("item pools must be nonempty and disjoint")
        return pools


def parse_spec_text(text):
    fields = {f.name: f for f in dataclasses.fields(SyntheticSpec) if f.name != "pools"}
    values, problems = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected key=value")
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            problems.append(f"unknown key {key!r}")
            continue
        ftype = fields[key].type
        try:
            values[key] = ftype(raw) if ftype in (int, float) else raw
        except ValueError:
            problems.append(f"{key}: cannot parse {raw!r}")
    try:
        spec = SyntheticSpec(**values)
    except ConfigError as exc:
        raise ConfigError(problems + exc.problems) from None
    if problems:
        raise ConfigError(problems)
    return spec


def _user_starts(spec, rng):
    # random phase within a week so no two users need share a calendar
    phases = rng.integers(0, max(1, 7 * DAY // spec.stride), size=spec.n_users)
    return spec.start + phases * spec.stride


def generate(spec):
    """Pool-driven stream; returns RawEvents with ids ``u<n>`` / ``i<n>``."""
    if spec.kind == "markov":
        return markov_variant(spec)
    rng = np.random.default_rng(spec.seed)
    pools = spec.item_pools()
    schema = ContextSchema.parse(spec.driver)
    starts = _user_starts(spec, rng)
    events = []
    for u in range(spec.n_users):
        ts = starts[u] + spec.stride * np.arange(spec.events_per_user, dtype=np.int64)
        ctx = derive_contexts(ts, schema)[:, 0]
        for t, c in zip(ts, ctx):
            if rng.random() < spec.noise:
                item = int(rng.integers(1, spec.n_items + 1))
            else:
                pool = pools[c]
                item = int(pool[rng.integers(len(pool))])
            events.append(RawEvent(f"u{u + 1}", f"i{item}", int(t)))
    return events


def successor_map(spec):
    """A single random cycle through every item: ``succ[i]`` follows ``i``."""
    rng = np.random.default_rng([spec.seed, 1])
    order = rng.permutation(np.arange(1, spec.n_items + 1))
    succ = np.zeros(spec.n_items + 1, dtype=np.int64)
    succ[order] = np.roll(order, -1)
    return succ


def markov_variant(spec):
    rng = np.random.default_rng(spec.seed)
    succ = successor_map(spec)
    starts = _user_starts(spec, rng)
    events = []
    for u in range(spec.n_users):
        item = int(rng.integers(1, spec.n_items + 1))
        for e in range(spec.events_per_user):
            if e > 0:
                if rng.random() < spec.noise:
                    item = int(rng.integers(1, spec.n_items + 1))
                else:
                    item = int(succ[item])
            events.append(RawEvent(f"u{u + 1}", f"i{item}", int(starts[u] + e * spec.stride)))
    return events


def pool_hit_floor(spec, k=10):
    """Lower bound on HR@k for a scorer that knows the target's context pool
    and ranks that pool first, with ties inside the pool broken blindly.

    The target falls in its pool with probability ``(1-noise) + noise*share``;
    it then lands in the top ``k`` with probability at least ``min(1, k/|pool|)``.
    """
    pools = spec.item_pools()
    sizes = np.array([len(p) for p in pools], dtype=np.float64)
    share = sizes / spec.n_items
    in_pool = (1.0 - spec.noise) + spec.noise * share
    return float(np.mean(in_pool * np.minimum(1.0, k / sizes)))


def write_events_tsv(events, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in events:
            fh.write(f"{e.user_id}\t{e.item_id}\t{e.timestamp}\n")
