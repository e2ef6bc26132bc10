"""Stacked self-attention blocks whose per-head attention logits are a
two-component Gaussian mixture over item-based and context-based
query-key products.

All heads of a block share the same global projections (one query/key pair
per component, one value projection); a head is distinguished only by its
mixture weights. Training draws each component's logits with the
reparameterisation ``QK^T + sigma_k * eps`` and blends them with the head's
weights; inference uses the noiseless mean.
"""
import numpy as np

from . import autograd as ag
from .errors import ContractError

COMPONENTS = ("it", "c")


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def causal_mask(L):
    return np.tril(np.ones((L, L), dtype=bool))


class MixtureAttentionBlock:
    def __init__(self, store, prefix, d, H, rng, attention_mode="literal", dropout=0.0,
                 init_log_var=np.log(0.01)):
        self.d = d
        self.H = H
        self.mode = attention_mode
        self.dropout = dropout
        D = 2 * d
        p = lambda name, data: store.add(f"{prefix}.{name}", data)  # noqa: E731
        self.wq = {k: p(f"wq_{k}", _uniform(rng, d, (d, d))) for k in COMPONENTS}
        self.wk = {k: p(f"wk_{k}", _uniform(rng, d, (d, d))) for k in COMPONENTS}
        self.wv = p("wv", _uniform(rng, D, (D, D)))
        self.wo = p("wo", _uniform(rng, H * D, (H * D, D)))
        self.mix_logits = p("mix_logits", rng.normal(0.0, 1.0, size=(H, 2)))
        self.log_var = p("log_var", np.full(2, float(init_log_var)))
        self.w1 = p("w1", _uniform(rng, D, (D, D)))
        self.b1 = p("b1", _uniform(rng, D, (1, D)))
        self.w2 = p("w2", _uniform(rng, D, (D, D)))
        self.b2 = p("b2", _uniform(rng, D, (1, D)))
        if attention_mode == "compat":
            self.ln1 = (p("ln1_g", np.ones((1, D))), p("ln1_b", np.zeros((1, D))))
            self.ln2 = (p("ln2_g", np.ones((1, D))), p("ln2_b", np.zeros((1, D))))

    def mixture_weights(self, use_context=True):
        """(H, 2) head weights over (item, context); each row on the simplex."""
        if not use_context:
            return ag.Tensor(np.tile([1.0, 0.0], (self.H, 1)))
        return ag.softmax_rows(self.mix_logits)

    def sigmas(self):
        return ag.exp(ag.scale(self.log_var, 0.5))


def _halves(X, d):
    if X.shape[-1] != 2 * d:
        raise ContractError(f"attention input width {X.shape[-1]} != 2d={2 * d}")
    return {"it": X[..., :d], "c": X[..., d:]}


def component_logits(X, block, k, masked=True):
    """Q_k K_k^T on the item (``it``) or context (``c``) half of ``X``.

    With ``masked`` the entries above the diagonal are -inf.
    """
    Xk = _halves(X, block.d)[k]
    q = ag.matmul(Xk, block.wq[k])
    kk = ag.matmul(Xk, block.wk[k])
    out = ag.matmul(q, ag.transpose(kk))
    if masked:
        L = X.shape[-2]
        out = ag.masked_fill(out, causal_mask(L), -np.inf)
    return out


def _mixture_logits(logits, p, sig, j, rng, mode, use_context):
    comps = ("it", "c") if use_context else ("it",)
    A = None
    for ci, k in enumerate(COMPONENTS):
        if k not in comps:
            continue
        Ak = logits[k]
        if mode == "train":
            Ak = ag.gaussian_reparam(Ak, sig[ci], rng)
        term = ag.mul(Ak, p[j, ci])
        A = term if A is None else ag.add(A, term)
    return A


def head_attention(X, block, j, rng=None, mode="inference", use_context=True, _cache=None):
    """Output of head ``j``: softmax(A_j / sqrt(d), causal) @ (X W_V)."""
    if mode == "train" and rng is None:
        raise ContractError("train-mode attention needs an rng")
    if _cache is None:
        _cache = _block_cache(X, block, use_context)
    logits, V, p, sig = _cache
    A = _mixture_logits(logits, p, sig, j, rng, mode, use_context)
    L = X.shape[-2]
    att = ag.softmax_rows(ag.scale(A, 1.0 / np.sqrt(block.d)), mask=causal_mask(L))
    return ag.matmul(att, V)


def attention_weights(X, block, j, use_context=True):
    """Inference-mode attention matrix of head ``j`` (rows sum to 1)."""
    with ag.no_grad():
        logits, _, p, sig = _block_cache(X, block, use_context)
        A = _mixture_logits(logits, p, sig, j, None, "inference", use_context)
        L = X.shape[-2]
        return ag.softmax_rows(ag.scale(A, 1.0 / np.sqrt(block.d)), mask=causal_mask(L)).data


def _block_cache(X, block, use_context):
    comps = COMPONENTS if use_context else ("it",)
    logits = {k: component_logits(X, block, k, masked=False) for k in comps}
    V = ag.matmul(X, block.wv)
    return logits, V, block.mixture_weights(use_context), block.sigmas()


def _sal(X, block, rng, mode, use_context):
    cache = _block_cache(X, block, use_context)
    heads = [head_attention(X, block, j, rng, mode, use_context, _cache=cache) for j in range(block.H)]
    cat = heads[0] if block.H == 1 else ag.concat(heads)
    return ag.matmul(cat, block.wo), heads


def _ffl(X, block):
    h = ag.relu(ag.add(ag.matmul(X, block.w1), block.b1))
    return ag.add(ag.matmul(h, block.w2), block.b2)


def sab_forward(X, block, rng=None, mode="inference", use_context=True, return_heads=False):
    """One block: FFL(SAL(X)); in ``compat`` mode pre-norm residual branches
    with dropout wrap both layers."""
    if block.mode == "literal":
        sal, heads = _sal(X, block, rng, mode, use_context)
        out = _ffl(sal, block)
    else:
        drop = block.dropout if mode == "train" else 0.0
        xn = ag.layer_norm(X, *block.ln1)
        sal, heads = _sal(xn, block, rng, mode, use_context)
        h1 = ag.add(X, ag.dropout(sal, drop, rng))
        out = ag.add(h1, ag.dropout(_ffl(ag.layer_norm(h1, *block.ln2), block), drop, rng))
    return (out, heads) if return_heads else out


def encode(X0, blocks, rng=None, mode="inference", use_context=True):
    """Run the block stack; returns ``(X_B, heads)`` with the per-head
    outputs of the last block."""
    if not blocks:
        raise ContractError("encoder needs at least one block")
    X = X0
    heads = None
    for block in blocks:
        X, heads = sab_forward(X, block, rng, mode, use_context, return_heads=True)
    return X, heads
