# coding: utf-8
"""Token Boost: tokenwise SwiGLU, tokenwise sparse MoE and the router losses.

Run with ``python3 demos/04_token_boost_and_routing.py``.
"""

# # Tokenwise SwiGLU
#
# SwiGLU(x) = (Swish(x W1) * (x W2)) W3. The tokenwise version keeps one
# (W1, W2, W3) set per token, stored with a leading token axis.

import numpy as np

from zenith.boost import (compensated_alpha, init_regen, init_swiglu, init_tsmoe, load_balance_loss,
                          route_tokens, token_regeneration, tsmoe_forward, tswiglu_forward, z_loss)
from zenith.tensor import Tensor

rng = np.random.default_rng(0)
B, T, D, r = 32, 4, 8, 8
x = Tensor(rng.standard_normal((B, T, D)))

p = init_swiglu(D, r, rng, tokens=T)
print("tokenwise SwiGLU weights:", p.w1.shape, "output:", tswiglu_forward(x, p).shape)

# # Routing
#
# Each token has its own router W_0^i. Softmax gives routing probabilities
# and the E_a largest logits are dispatched. The trace records per-expert
# loads f_i (fraction of positions routed, summing to E_a) and mean
# probabilities.

moe = init_tsmoe(T, D, r, E_c=1, E_s=4, E_a=2, rng=rng)
trace = route_tokens(x, moe).check()
print("loads f_i:", trace.loads.round(3), " sum:", trace.loads.sum())
print("mean probabilities:", trace.mean_probs.data.round(3))

# The shared expert always runs. Each routed expert only sees its rows and
# is weighted by its routing probability renormalised over the activated
# pair.

y = tsmoe_forward(x, moe, trace)
print("TSMoE output:", y.shape)

# # Auxiliary losses
#
# The load loss rewards agreement between loads and probabilities, and is
# smallest for uniform routing. The z-loss penalises large router logits.

print("load loss (alpha=1):", load_balance_loss(trace, 1.0).item())
print("z-loss (beta=1):", z_loss(trace, 1.0).item())

# The printed load-loss form divides by B T E_s, so a useful weight has to
# undo that. `compensated_alpha` gives the weight matching a switch-style
# coefficient of 0.01 at this batch shape.

print("compensated alpha:", compensated_alpha(1e-2, B, T, moe.n_sparse))

# # Token regeneration
#
# When Token Fusion shrinks T tokens to T_hat, regeneration restores the
# dropped ones with a shared linear map of the layer input and normalises
# the residual sum.

T_hat = 2
o_tb = Tensor(rng.standard_normal((B, T_hat, D)))
out = token_regeneration(x, o_tb, init_regen(T, T_hat, D, rng))
print("regenerated:", o_tb.shape, "->", out.shape)
