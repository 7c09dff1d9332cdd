# coding: utf-8
"""Autodiff core and the grouped matmul primitive.

Run with ``python3 demos/01_autodiff_and_grouped_matmul.py``.
"""

# # A tiny reverse-mode autodiff
#
# Every value in the models is a `Tensor` wrapping a float64 numpy array.
# Operations record how to push gradients back, and `backward` walks the
# graph once from a scalar loss.

import time

import numpy as np

from zenith import tensor as tn
from zenith.tensor import FlopCounter, Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)

loss = ((x @ w).sigmoid() * 2.0).sum()
grads = tn.backward(loss)
print("d loss / d w:\n", grads[w])

# The same gradient by central differences. `gradcheck` perturbs every
# entry of every parameter and compares.

ok, errors = tn.gradcheck(lambda: ((x @ w).sigmoid() * 2.0).sum(), [x, w])
print("gradcheck passed:", ok, " worst relative error:", f"{max(errors.values()):.1e}")

# # Grouped matmul
#
# Tokenwise layers multiply each token by its own weight matrix. Rather
# than looping over tokens, `grouped_matmul` packs all pairs into one
# padded batched product. The result matches the loop exactly.

lhs = [Tensor(rng.standard_normal((64, 64))) for _ in range(16)]
rhs = [Tensor(rng.standard_normal((64, 64))) for _ in range(16)]

t0 = time.perf_counter()
for _ in range(50):
    looped = [a @ b for a, b in zip(lhs, rhs)]
t_loop = (time.perf_counter() - t0) / 50

t0 = time.perf_counter()
for _ in range(50):
    grouped = tn.grouped_matmul(lhs, rhs)
t_group = (time.perf_counter() - t0) / 50

worst = max(np.abs(g.data - l.data).max() for g, l in zip(grouped, looped))
print(f"max |grouped - looped| = {worst:.1e}")
print(f"loop {t_loop * 1e3:.2f} ms, grouped {t_group * 1e3:.2f} ms (informational)")

# # FLOP accounting
#
# A `FlopCounter` records 2mnp for every m x n by n x p product issued
# while it is active. The cost model is checked against this counter.

with FlopCounter() as fc:
    tn.grouped_matmul(lhs, rhs)
print("recorded matmul FLOPs:", fc.matmul_flops, " expected:", 16 * 2 * 64 ** 3)
