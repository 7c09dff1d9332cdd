# coding: utf-8
"""Token Fusion: retokenized self-attention and tokenwise multi-head attention.

Run with ``python3 demos/03_token_fusion.py``.
"""

# # Retokenization is a reshape
#
# A T x k matrix is flattened row by row and cut into tokens of width D.
# Nothing is computed, so the inverse recovers the input bit for bit.

import numpy as np

from zenith import tensor as tn
from zenith.fusion import (init_rsa, init_tmhsa, inverse_retokenize, retokenize, rsa_forward,
                           rsa_interaction, tmhsa_attention, tmhsa_forward)
from zenith.tensor import Tensor

o1 = Tensor(np.arange(1.0, 9.0).reshape(2, 4))
print("2 x 4 retokenized to width 8:", retokenize(o1, 8).data)

o1 = Tensor(np.random.default_rng(0).standard_normal((8, 256)))
o_tf = retokenize(o1, 512)
print("8 x 256 ->", o_tf.shape, " round trip exact:",
      np.array_equal(inverse_retokenize(o_tf, 256).data, o1.data))

# # Retokenized self-attention
#
# The interaction term is X Xᵀ X W_R: every token mixes with every other
# token through their inner products, with no softmax. The T x k result
# is retokenized to T_hat tokens and added to a residual that maps T
# tokens down to T_hat by block averaging.

rng = np.random.default_rng(1)
T, D, k = 8, 16, 8
x = Tensor(rng.standard_normal((T, D)))
rsa = init_rsa(T, D, k, rng)
print("T_hat =", rsa.t_hat)

explicit = x.data @ x.data.T @ x.data @ rsa.w_r.data
print("interaction matches the explicit product:",
      np.allclose(rsa_interaction(x, rsa.w_r).data, explicit, rtol=0, atol=1e-12))
print("RSA output shape:", rsa_forward(x, rsa).shape)

# # Tokenwise multi-head self-attention
#
# In the tokenwise variant every token owns its query, key and value
# projections. Token i's query in head h is x_i q_(i,h), so the same input
# vector placed at two positions is projected differently.

tm = init_tmhsa(T, D, 2, rng)
same = Tensor(np.tile(rng.standard_normal(D), (T, 1)))
q = tn.tokenwise_matmul(same, tm.wq).data
print("identical tokens, distinct queries:", not np.allclose(q[0], q[1]))

# Head outputs are (Q_h K_hᵀ / sqrt(d_k)) V_h, concatenated over heads,
# then added back to the input and normalised.

out = tmhsa_forward(x, tm)
print("TMHSA output shape:", out.shape, " row means ~0:", np.allclose(out.data.mean(-1), 0, atol=1e-9))

# The attention is linear in the scores, so scaling the input by c scales
# the attention term by c^3.

a1 = tmhsa_attention(x, tm).data
a2 = tmhsa_attention(x * 2.0, tm).data
print("cubic homogeneity:", np.allclose(a2, 8 * a1))
