"""
Lambda layers next to self-attention
====================================

A lambda layer summarises the whole context into one small [d_k, d_v]
matrix per position instead of an n x n attention map.  This script checks
that the local (convolutional) form matches the global form when the scope
covers the sequence.  It then times both layers over growing sequence
lengths.
"""

import numpy as np

from lambdakws import attention as A
from lambdakws import lambda_layer as L
from lambdakws import tensor as T

rng = np.random.default_rng(0)
n = 12

# local scope r = 2n - 1 sees every position, so it must equal global context
local = L.LambdaConfig(d_in=16, d_out=16, h=4, d_k=8, r=2 * n - 1, normalize=False)
glob = L.LambdaConfig(d_in=16, d_out=16, h=4, d_k=8, context="global", n=n, normalize=False)
p = L.init_params(local, rng)
p_glob = L.LambdaParams(p.wq, p.wk, p.wv, T.Tensor(L.materialize_global_embedding(p.e.data, n)))
x = T.Tensor(rng.normal(size=(1, 16, n)))
gap = np.max(np.abs(L.lambda_conv_forward(x, p, local).data - L.lambda_forward(x, p_glob, glob).data))
print(f"local vs global max difference: {gap:.2e}")

# closed-form multiplies: position term grows with r * n locally, n * n globally
for m in (64, 128, 256, 512):
    lc = L.multiplies(L.LambdaConfig(d_in=64, d_out=64), m)
    lg = L.multiplies(L.LambdaConfig(d_in=64, d_out=64, context="global", n=m), m)
    print(f"n={m:4d}  local position {lc['position']:>10d}  global position {lg['position']:>12d}")

# wall-clock scaling (a few repetitions keep this quick)
for layer in ("attention", "lambda_conv"):
    report = A.scaling_benchmark(layer, [64, 128, 256, 512], reps=10)
    times = ", ".join(f"{pt.median_ns / 1e6:.2f}" for pt in report.points)
    print(f"{layer:12s} ms: {times}   log-log slope {report.slope:.2f}")
