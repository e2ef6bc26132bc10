"""Parameter storage, Adam, and the checkpoint file format."""
import json
import os

import numpy as np

from .autograd import Tensor
from .errors import ContractError, DataFormatError

CKPT_MAGIC = b"MOJITO-CKPT-1\n"


class ParameterStore:
    """Ordered name -> Tensor map plus per-parameter Adam state."""

    def __init__(self):
        self.params = {}
        self.m = {}
        self.v = {}
        self.steps = {}

    def add(self, name, data):
        if name in self.params:
            raise ContractError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        self.steps[name] = 0
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        if missing:
            raise ContractError(f"state is missing parameters: {sorted(missing)}")
        for k, t in self.params.items():
            if state[k].shape != t.data.shape:
                raise ContractError(f"{k}: shape {state[k].shape} != {t.data.shape}")
            t.data[...] = state[k]


def adam_step(store, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update of every parameter; grads are zeroed after."""
    for name, p in store.items():
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {name!r} has no gradient")
    for name, p in store.items():
        g = p.grad
        t = store.steps[name] + 1
        store.steps[name] = t
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
        p.grad = np.zeros_like(p.data)


def save_checkpoint(path, store, meta):
    """Write parameters, Adam moments and step counters.

    Layout: the magic line, one JSON header line (metadata plus an entry table
    of name/kind/shape), then the raw little-endian float64 buffers in entry
    order. The file is written to a temp name and renamed into place.
    """
    entries = []
    blobs = []
    for name, t in store.items():
        for kind, arr in (("param", t.data), ("adam_m", store.m[name]), ("adam_v", store.v[name])):
            entries.append({"name": name, "kind": kind, "shape": list(arr.shape)})
            blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = {
        "meta": meta,
        "entries": entries,
        "steps": {k: int(v) for k, v in store.steps.items()},
    }
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_checkpoint(path):
    """Return ``(meta, params, adam)`` where ``adam`` maps name -> (m, v, steps)."""
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != CKPT_MAGIC:
            raise DataFormatError(f"{path}: not a MOJITO-CKPT-1 checkpoint")
        header = json.loads(fh.readline().decode("utf-8"))
        raw = fh.read()
    params, moments = {}, {}
    off = 0
    for e in header["entries"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if off + n > len(raw):
            raise DataFormatError(f"{path}: truncated at entry {e['name']}/{e['kind']}")
        arr = np.frombuffer(raw, dtype="<f8", count=n // 8, offset=off).reshape(shape).copy()
        off += n
        if e["kind"] == "param":
            params[e["name"]] = arr
        else:
            moments[(e["name"], e["kind"])] = arr
    adam = {
        k: (moments[(k, "adam_m")], moments[(k, "adam_v")], header["steps"].get(k, 0))
        for k in params
    }
    return header["meta"], params, adam


def load_store_state(store, params, adam=None):
    store.load_state_dict(params)
    if adam:
        for k in store.params:
            m, v, steps = adam[k]
            store.m[k][...] = m
            store.v[k][...] = v
            store.steps[k] = steps
