"""Token Fusion: retokenized self-attention and tokenwise multi-head attention.

Both variants apply attention scores to values directly, without softmax
and (for RSA) without 1/sqrt(d) scaling. ``softmax=True`` switches on a
row softmax over the scores for experimentation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ConfigError
from .features import glorot
from .tensor import Tensor


def retokenize(o1, D):
    """Row-major flatten of ``(..., T, k)`` and reshape into ``(..., T*k/D, D)``.

    This is a pure reshape: no arithmetic, and the result is a view of the
    input buffer.
    """
    t, k = o1.shape[-2:]
    if (t * k) % D:
        raise ConfigError(f"cannot retokenize {t}x{k} into tokens of width {D}: T*k % D != 0")
    return o1.reshape(o1.shape[:-2] + (t * k // D, D))


def inverse_retokenize(o, k):
    t_hat, d = o.shape[-2:]
    if (t_hat * d) % k:
        raise ConfigError(f"cannot split {t_hat}x{d} into rows of width {k}")
    return o.reshape(o.shape[:-2] + (t_hat * d // k, k))


@dataclass
class RsaParams:
    """``w_r`` is D x k; the residual MLP is a shared D x D linear map plus bias."""

    w_r: Tensor
    res_w: Tensor
    res_b: Tensor
    norm_g: Tensor
    norm_b: Tensor
    t_hat: int

    def tensors(self):
        yield "w_r", self.w_r, "rsa_projection"
        yield "res_w", self.res_w, "residual_mlp"
        yield "res_b", self.res_b, "bias"
        yield "norm_g", self.norm_g, "norm"
        yield "norm_b", self.norm_b, "norm"


def init_rsa(T, D, k, rng):
    if (T * k) % D:
        raise ConfigError(f"T*k = {T * k} is not a multiple of D = {D}")
    t_hat = T * k // D
    if T % t_hat:
        raise ConfigError(f"T_hat = {t_hat} must divide T = {T}")
    return RsaParams(glorot(rng, D, k, (D, k)), glorot(rng, D, D, (D, D)),
                     Tensor(np.zeros(D), True), Tensor(np.ones(D), True),
                     Tensor(np.zeros(D), True), t_hat)


def rsa_residual(x, p):
    """Shared linear map per token, then mean over consecutive blocks of T/T_hat tokens."""
    t, d = x.shape[-2:]
    h = x @ p.res_w + p.res_b
    block = t // p.t_hat
    if block == 1:
        return h
    return h.reshape(x.shape[:-2] + (p.t_hat, block, d)).mean(axis=-2)


def rsa_interaction(x, w_r, softmax=False):
    """``O1 = X X^T X W_R`` with shape ``(..., T, k)``."""
    scores = x @ x.mT
    if softmax:
        scores = tn.softmax(scores * (1.0 / math.sqrt(x.shape[-1])), axis=-1)
    return (scores @ x) @ w_r


def rsa_forward(x, p, softmax=False):
    """Retokenized self-attention: ``Norm(retokenize(X X^T X W_R) + MLP(X))``."""
    t, d = x.shape[-2:]
    if t * p.w_r.shape[1] != p.t_hat * d:
        raise ConfigError(f"T*k = {t * p.w_r.shape[1]} != T_hat*D = {p.t_hat * d}")
    o_tf = retokenize(rsa_interaction(x, p.w_r, softmax), d)
    return tn.layer_norm(o_tf + rsa_residual(x, p), p.norm_g, p.norm_b)


@dataclass
class TmhsaParams:
    """Per-token projections stacked as ``(T, D, D)``; head h owns columns
    ``h*d_k:(h+1)*d_k``, so ``wq[i][:, h*d_k:(h+1)*d_k]`` is q_(i,h)."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    heads: int
    norm_g: Tensor
    norm_b: Tensor

    def tensors(self):
        yield "wq", self.wq, "attention"
        yield "wk", self.wk, "attention"
        yield "wv", self.wv, "attention"
        yield "norm_g", self.norm_g, "norm"
        yield "norm_b", self.norm_b, "norm"

    def head_projection(self, which, token, head):
        w = {"q": self.wq, "k": self.wk, "v": self.wv}[which].data
        dk = w.shape[-1] // self.heads
        return w[token][:, head * dk:(head + 1) * dk]


def init_tmhsa(T, D, H, rng):
    if H < 1 or D % H:
        raise ConfigError(f"heads H = {H} must divide D = {D}")
    # fan-in/fan-out of one token's full D x D block
    return TmhsaParams(*(glorot(rng, D, D, (T, D, D)) for _ in range(3)), H,
                       Tensor(np.ones(D), True), Tensor(np.zeros(D), True))


def tmhsa_attention(x, p, softmax=False):
    """Concatenated head outputs ``(Q_h K_h^T / sqrt(d_k)) V_h``, shape ``(..., T, D)``."""
    t, d = x.shape[-2:]
    h = p.heads
    if d % h:
        raise ConfigError(f"heads H = {h} must divide D = {d}")
    dk = d // h
    lead = x.shape[:-2]

    def split(w):
        y = tn.tokenwise_matmul(x, w).reshape(lead + (t, h, dk))
        return y.swapaxes(-2, -3)

    q, k, v = split(p.wq), split(p.wk), split(p.wv)
    scores = (q @ k.mT) * (1.0 / math.sqrt(dk))
    if softmax:
        scores = tn.softmax(scores, axis=-1)
    out = scores @ v
    return out.swapaxes(-2, -3).reshape(lead + (t, d))


def tmhsa_forward(x, p, softmax=False):
    """Tokenwise multi-head self-attention with residual: ``Norm(O_TF + X)``."""
    return tn.layer_norm(tmhsa_attention(x, p, softmax) + x, p.norm_g, p.norm_b)
