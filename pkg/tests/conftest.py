import numpy as np
import pytest

from mojito.config import MojitoConfig
from mojito.data import ContextSchema, RawEvent, build_dataset, leave_one_out_split
from mojito.model import MojitoModel
from mojito.optim import ParameterStore


def make_events(n_users=6, n_items=9, per_user=7, seed=0, stride=3600 * 7):
    rng = np.random.default_rng(seed)
    events = []
    for u in range(n_users):
        for e in range(per_user):
            item = int(rng.integers(1, n_items + 1))
            events.append(RawEvent(f"u{u}", f"i{item}", 1_600_000_000 + u * 1000 + e * stride))
    return events


def make_split(schema="day_of_week,hour", **kw):
    return leave_one_out_split(build_dataset(make_events(**kw), ContextSchema.parse(schema)))


def make_model(split=None, **cfg):
    split = split or make_split()
    base = dict(d=4, L=5, B=1, H=2, N=3, lam=0.5, batch_size=4, max_epochs=2, seed=3,
                schema=str(split.schema), dropout=0.0)
    base.update(cfg)
    config = MojitoConfig(**base)
    return MojitoModel(config, split.n_users, split.n_items), split


@pytest.fixture
def store():
    return ParameterStore()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
