"""Independent reference implementations used by the tests.

Everything here is written with explicit Python loops over plain numpy
arrays, sharing no code with the library beyond the parameter containers.
"""
from __future__ import annotations

import math

import numpy as np


def softmax_loop(x, axis):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    moved = np.moveaxis(x, axis, -1)
    res = np.moveaxis(out, axis, -1)
    for idx in np.ndindex(moved.shape[:-1]):
        row = moved[idx]
        e = [math.exp(v - max(row)) for v in row]
        s = sum(e)
        res[idx] = [v / s for v in e]
    return out


def batchnorm_loop(x, gamma, beta, eps=1e-5):
    B, C, L = x.shape
    out = np.empty_like(x)
    for c in range(C):
        vals = [x[b, c, t] for b in range(B) for t in range(L)]
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        for b in range(B):
            for t in range(L):
                out[b, c, t] = gamma[c] * (x[b, c, t] - mu) / math.sqrt(var + eps) + beta[c]
    return out


def lambda_loop(x, wq, wk, wv, e_abs, h, bn=None):
    """Brute-force lambda layer for one sequence x [d_in, n].

    e_abs is the absolute embedding [n, n, d_k] (query position, context
    position, key dim).  ``bn`` optionally holds (gamma_q, beta_q, gamma_v,
    beta_v) for train-mode normalization of a batch of size 1.
    """
    d_in, n = x.shape
    d_k = wk.shape[1]
    d_v = wv.shape[1]
    q = np.zeros((h * d_k, n))
    k = np.zeros((d_k, n))
    v = np.zeros((d_v, n))
    for t in range(n):
        for c in range(d_in):
            for i in range(h * d_k):
                q[i, t] += wq[c, i] * x[c, t]
            for i in range(d_k):
                k[i, t] += wk[c, i] * x[c, t]
            for i in range(d_v):
                v[i, t] += wv[c, i] * x[c, t]
    if bn is not None:
        gq, bq, gv, bv = bn
        q = batchnorm_loop(q[None], gq, bq)[0]
        v = batchnorm_loop(v[None], gv, bv)[0]
    sk = softmax_loop(k, axis=1)
    content = np.zeros((d_k, d_v))
    for kk in range(d_k):
        for vv in range(d_v):
            content[kk, vv] = sum(sk[kk, m] * v[vv, m] for m in range(n))
    y = np.zeros((h * d_v, n))
    for t in range(n):
        position = np.zeros((d_k, d_v))
        for kk in range(d_k):
            for vv in range(d_v):
                position[kk, vv] = sum(e_abs[t, m, kk] * v[vv, m] for m in range(n))
        lam = content + position
        for j in range(h):
            for vv in range(d_v):
                y[j * d_v + vv, t] = sum(lam[kk, vv] * q[j * d_k + kk, t] for kk in range(d_k))
    return y


def relative_to_absolute(e_rel, n):
    r, d_k = e_rel.shape
    half = r // 2
    out = np.zeros((n, n, d_k))
    for t in range(n):
        for m in range(n):
            off = m - t + half
            if 0 <= off < r:
                out[t, m] = e_rel[off]
    return out


def attention_loop(x, wq, wk, wv):
    """Single-head scaled dot-product attention, x [n, d] -> [n, d_v]."""
    n = x.shape[0]
    d_k = wq.shape[1]
    q = [[sum(x[t, c] * wq[c, i] for c in range(x.shape[1])) for i in range(d_k)] for t in range(n)]
    k = [[sum(x[t, c] * wk[c, i] for c in range(x.shape[1])) for i in range(d_k)] for t in range(n)]
    v = [[sum(x[t, c] * wv[c, i] for c in range(x.shape[1])) for i in range(wv.shape[1])] for t in range(n)]
    out = np.zeros((n, wv.shape[1]))
    for t in range(n):
        s = [sum(q[t][i] * k[m][i] for i in range(d_k)) / math.sqrt(d_k) for m in range(n)]
        top = max(s)
        w = [math.exp(a - top) for a in s]
        z = sum(w)
        for m in range(n):
            for i in range(wv.shape[1]):
                out[t, i] += w[m] / z * v[m][i]
    return out


def conv1d_loop(x, w, stride):
    """'Same' zero-padded 1-D convolution (cross-correlation), x [C, L], w [O, C, k]."""
    C, L = x.shape
    O, _, k = w.shape
    out_len = -(-L // stride)
    total = max((out_len - 1) * stride + k - L, 0)
    left = total // 2
    y = np.zeros((O, out_len))
    for o in range(O):
        for t in range(out_len):
            acc = 0.0
            for c in range(C):
                for j in range(k):
                    src = t * stride + j - left
                    if 0 <= src < L:
                        acc += w[o, c, j] * x[c, src]
            y[o, t] = acc
    return y


def numerical_grad(f, arr, eps=1e-6):
    """Central differences of the scalar function f with respect to arr (in place)."""
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + eps
        up = f()
        arr[idx] = old - eps
        down = f()
        arr[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))
