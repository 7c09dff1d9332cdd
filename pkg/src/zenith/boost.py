"""Token Boost: tokenwise SwiGLU and tokenwise sparse mixture-of-experts.

Weights with a leading token axis, e.g. ``(T, D, r)``, are applied per token
through :func:`zenith.tensor.tokenwise_matmul`. Weights without it, e.g.
``(D, r)``, are shared by all tokens. The shared form is the plain SwiGLU /
SMoE used as the ablation baseline.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ConfigError
from .features import glorot
from .tensor import Tensor


def _project(x, w):
    return tn.tokenwise_matmul(x, w) if w.ndim == 3 else x @ w


def swiglu(x, w1, w2, w3):
    """``(Swish(x W1) * (x W2)) W3`` (tokenwise when the weights are 3-D)."""
    return tn.swiglu(x, w1, w2, w3)


@dataclass
class SwigluParams:
    w1: Tensor
    w2: Tensor
    w3: Tensor

    @property
    def tokenwise(self):
        return self.w1.ndim == 3

    def tensors(self, category="token_boost"):
        yield "w1", self.w1, category
        yield "w2", self.w2, category
        yield "w3", self.w3, category


def init_swiglu(D, r, rng, tokens=None):
    lead = () if tokens is None else (tokens,)
    return SwigluParams(glorot(rng, D, r, lead + (D, r)), glorot(rng, D, r, lead + (D, r)),
                        glorot(rng, r, D, lead + (r, D)))


def tswiglu_forward(x, p):
    """Apply token i's own W1/W2/W3 to token i (or shared weights if 2-D)."""
    if p.tokenwise and x.shape[-2] != p.w1.shape[0]:
        raise ConfigError(f"TSwiGLU has {p.w1.shape[0]} token weight sets, input has {x.shape[-2]} tokens")
    return swiglu(x, p.w1, p.w2, p.w3)


# ---------------------------------------------------------------------------
# routing


@dataclass
class TsmoeParams:
    """Router ``(T, D, E_s)`` (tokenwise) or ``(D, E_s)`` (shared); experts are
    SwiGLU sets of shape D x r / r x D shared across tokens."""

    router: Tensor
    shared: list
    sparse: list
    active: int
    unweighted: bool = False

    def __post_init__(self):
        if not 1 <= self.active <= len(self.sparse):
            raise ConfigError(f"E_a = {self.active} must satisfy 1 <= E_a <= E_s = {len(self.sparse)}")

    @property
    def n_sparse(self):
        return len(self.sparse)

    def tensors(self):
        yield "router", self.router, "router"
        for i, e in enumerate(self.shared):
            for name, t, cat in e.tensors("shared_experts"):
                yield f"shared{i}.{name}", t, cat
        for i, e in enumerate(self.sparse):
            for name, t, cat in e.tensors("sparse_experts"):
                yield f"sparse{i}.{name}", t, cat


def init_tsmoe(T, D, r, E_c, E_s, E_a, rng, tokenwise=True, unweighted=False):
    if E_c < 0:
        raise ConfigError("E_c must be >= 0")
    router = glorot(rng, D, E_s, (T, D, E_s) if tokenwise else (D, E_s))
    shared = [init_swiglu(D, r, rng) for _ in range(E_c)]
    sparse = [init_swiglu(D, r, rng) for _ in range(E_s)]
    return TsmoeParams(router, shared, sparse, E_a, unweighted)


@dataclass
class RouterTrace:
    """Routing record of one batch.

    ``logits``/``probs`` have shape ``(..., T, E_s)``; ``mask`` is the 0/1
    top-E_a dispatch; ``loads[i]`` is the fraction of positions routed to
    expert i and ``mean_probs[i]`` its mean routing probability.
    """

    logits: Tensor
    probs: Tensor
    mask: np.ndarray
    loads: np.ndarray
    mean_probs: Tensor
    batch: int
    tokens: int
    active: int

    @property
    def n_experts(self):
        return self.mask.shape[-1]

    def check(self, atol=1e-9):
        """Assert the routing invariants; returns self for chaining."""
        p = self.probs.data
        assert np.allclose(p.sum(-1), 1.0, atol=atol), "router probabilities do not sum to 1"
        assert (self.mask.sum(-1) == self.active).all(), "dispatch mask does not select E_a experts"
        assert abs(self.loads.sum() - self.active) <= atol, "expert loads do not sum to E_a"
        return self


def top_k_mask(logits, k):
    """0/1 mask of the ``k`` largest entries along the last axis; ties go to the lower index."""
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(logits.shape, dtype=np.float64)
    np.put_along_axis(mask, order, 1.0, axis=-1)
    return mask


def route_tokens(x, p):
    """Compute gate logits ``W_0^i t_i`` per token, their softmax and top-E_a dispatch."""
    logits = _project(x, p.router)
    probs = tn.softmax(logits, axis=-1)
    mask = top_k_mask(logits.data, p.active)
    t = x.shape[-2]
    positions = int(np.prod(x.shape[:-1]))
    e = p.n_sparse
    loads = mask.reshape(-1, e).sum(axis=0) / positions
    mean_probs = probs.reshape(positions, e).mean(axis=0)
    return RouterTrace(logits, probs, mask, loads, mean_probs, positions // t, t, p.active)


def tsmoe_forward(x, p, trace):
    """Shared experts summed unweighted plus the activated sparse experts.

    Sparse outputs are weighted by routing probabilities renormalised over
    the activated set (weight 1 each when ``p.unweighted``). Each sparse
    expert runs only on the rows routed to it.
    """
    shape = x.shape
    d = shape[-1]
    flat = x.reshape(-1, d)
    n = flat.shape[0]
    out = None
    for e in p.shared:
        y = swiglu(flat, e.w1, e.w2, e.w3)
        out = y if out is None else out + y

    mask = trace.mask.reshape(n, p.n_sparse)
    if p.unweighted:
        weights = None
    else:
        masked = trace.probs.reshape(n, p.n_sparse) * mask
        weights = masked / masked.sum(axis=-1, keepdims=True)
    rows_all, outs = [], []
    for i, e in enumerate(p.sparse):
        rows = np.flatnonzero(mask[:, i])
        if rows.size == 0:
            continue
        y = swiglu(tn.take(flat, rows, unique=True), e.w1, e.w2, e.w3)
        if weights is not None:
            y = y * tn.take(weights[:, i:i + 1], rows, unique=True)
        rows_all.append(rows)
        outs.append(y)
    sparse_out = tn.index_add(n, np.concatenate(rows_all), tn.concat(outs, axis=0))
    out = sparse_out if out is None else out + sparse_out
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# auxiliary losses


def load_balance_loss(trace, alpha):
    """``alpha / (B T E_s) * sum_i (f_i / E_a) * mean_prob_i``.

    Only ``mean_probs`` carries gradient; the loads come from the discrete mask.
    """
    if alpha == 0:
        return Tensor(0.0)
    scale = alpha / (trace.batch * trace.tokens * trace.n_experts * trace.active)
    return (trace.mean_probs * trace.loads).sum() * scale


def compensated_alpha(alpha_switch, batch, tokens, n_experts):
    """Load-loss weight giving the same gradient scale as a switch-style loss.

    The switch form is ``alpha_switch * E_s * sum_i (f_i / E_a) * mean_prob_i``;
    :func:`load_balance_loss` divides by ``B T E_s`` instead of multiplying by
    ``E_s``, so the equivalent weight is ``alpha_switch * B * T * E_s**2``.
    """
    return alpha_switch * batch * tokens * n_experts ** 2


def z_loss(trace, beta):
    """``beta / (B T) * sum_{b,t} logsumexp(z_{b,t})^2``."""
    if beta == 0:
        return Tensor(0.0)
    lse = tn.logsumexp(trace.logits, axis=-1)
    return (lse * lse).sum() * (beta / (trace.batch * trace.tokens))


@dataclass
class AuxLossConfig:
    alpha: float = 1e-2
    beta: float = 1e-3

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")


# ---------------------------------------------------------------------------
# regeneration


@dataclass
class RegenParams:
    """Shared D x D map regenerating the tokens RSA drops, plus the output norm."""

    w: Tensor | None
    b: Tensor | None
    norm_g: Tensor
    norm_b: Tensor

    def tensors(self):
        if self.w is not None:
            yield "regen_w", self.w, "regeneration"
            yield "regen_b", self.b, "bias"
        yield "norm_g", self.norm_g, "norm"
        yield "norm_b", self.norm_b, "norm"


def init_regen(T, t_hat, D, rng):
    w = b = None
    if T > t_hat:
        w = glorot(rng, D, D, (D, D))
        b = Tensor(np.zeros(D), True)
    return RegenParams(w, b, Tensor(np.ones(D), True), Tensor(np.zeros(D), True))


def token_regeneration(x, o_tb, p):
    """``Norm(concat(O_TB, MLP(X[T_hat:])) + X)`` restoring T tokens."""
    t, t_hat = x.shape[-2], o_tb.shape[-2]
    if t_hat > t:
        raise ConfigError(f"token boost output has {t_hat} tokens, more than the input's {t}")
    if t_hat < t:
        if p.w is None:
            raise ConfigError("regeneration weights missing: layer was built for T_hat == T")
        regen = x[..., t_hat:, :] @ p.w + p.b
        o_tb = tn.concat([o_tb, regen], axis=-2)
    return tn.layer_norm(o_tb + x, p.norm_g, p.norm_b)


def write_router_summary(path, rows):
    """Write ``(step, layer, loads, mean_probs)`` rows as long-format CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "layer", "expert", "load", "mean_prob"])
        for step, layer, loads, probs in rows:
            for i, (f, pi) in enumerate(zip(loads, probs)):
                w.writerow([step, layer, i, repr(float(f)), repr(float(pi))])
