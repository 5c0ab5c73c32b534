"""Temporal lambda layer.

A lambda layer summarises the context into small linear maps (lambdas) and
applies them to per-position queries instead of building an attention map::

    content lambda    softmax_n(K)^T V                   [d_k, d_v]
    position lambda   E_n^T V                            [d_k, d_v] per position
    output            y_n = concat_j (content + position_n)^T q_n^j

Queries come in ``h`` heads that share one lambda, so the output width is
``h * d_v``.  In local mode the position embedding is a table of ``r``
relative offsets and the position lambda becomes a convolution over the
values, which keeps the cost linear in sequence length.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import BatchNormState, Tensor


@dataclass(frozen=True)
class LambdaConfig:
    d_in: int
    d_out: int
    h: int = 4
    d_k: int = 16
    r: int = 23
    context: str = "local"
    n: int | None = None  # context length, required for global context
    normalize: bool = True

    def __post_init__(self):
        if min(self.d_in, self.d_out, self.h, self.d_k) < 1:
            raise ConfigurationError(f"lambda layer extents must be positive: {self}")
        if self.d_out % self.h:
            raise ConfigurationError(f"d_out={self.d_out} is not divisible by h={self.h}")
        if self.context == "local":
            if self.r < 1 or self.r % 2 == 0:
                raise ConfigurationError(f"local scope r must be odd and positive, got {self.r}")
        elif self.context == "global":
            if not self.n or self.n < 1:
                raise ConfigurationError("global context needs a positive context length n")
        else:
            raise ConfigurationError(f"unknown context {self.context!r}")

    @property
    def d_v(self):
        return self.d_out // self.h


@dataclass
class LambdaParams:
    """Weights of one lambda layer.

    ``e`` is [r, d_k] in local mode and [n, n, d_k] (query position, context
    position, key dim) in global mode.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    e: Tensor
    bnq_gamma: Tensor | None = None
    bnq_beta: Tensor | None = None
    bnv_gamma: Tensor | None = None
    bnv_beta: Tensor | None = None
    bnq_state: BatchNormState | None = None
    bnv_state: BatchNormState | None = None

    def named(self):
        out = {"wq": self.wq, "wk": self.wk, "wv": self.wv, "e": self.e}
        if self.bnq_gamma is not None:
            out.update(bnq_gamma=self.bnq_gamma, bnq_beta=self.bnq_beta,
                       bnv_gamma=self.bnv_gamma, bnv_beta=self.bnv_beta)
        return out


def init_params(config: LambdaConfig, rng: np.random.Generator, dtype=np.float64) -> LambdaParams:
    c = config
    bound = 1.0 / math.sqrt(c.d_in)

    def uniform(*shape):
        return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)

    wq = uniform(c.d_in, c.h * c.d_k)
    wk = uniform(c.d_in, c.d_k)
    wv = uniform(c.d_in, c.d_v)
    e_shape = (c.r, c.d_k) if c.context == "local" else (c.n, c.n, c.d_k)
    e = Tensor(rng.normal(0.0, 1.0 / math.sqrt(c.d_k), e_shape).astype(dtype), requires_grad=True)
    p = LambdaParams(wq, wk, wv, e)
    if c.normalize:
        p.bnq_gamma = Tensor(np.ones(c.h * c.d_k, dtype), requires_grad=True)
        p.bnq_beta = Tensor(np.zeros(c.h * c.d_k, dtype), requires_grad=True)
        p.bnv_gamma = Tensor(np.ones(c.d_v, dtype), requires_grad=True)
        p.bnv_beta = Tensor(np.zeros(c.d_v, dtype), requires_grad=True)
        p.bnq_state = BatchNormState.fresh(c.h * c.d_k, dtype)
        p.bnv_state = BatchNormState.fresh(c.d_v, dtype)
    return p


def materialize_global_embedding(e_rel, n):
    """Expand an [r, d_k] relative-offset table into the absolute [n, n, d_k] table.

    Entry (i, m) holds the embedding of offset m - i, or zero when the offset
    falls outside the local scope.
    """
    e_rel = np.asarray(e_rel)
    r, d_k = e_rel.shape
    half = r // 2
    out = np.zeros((n, n, d_k), dtype=e_rel.dtype)
    for i in range(n):
        for m in range(max(0, i - half), min(n, i + half + 1)):
            out[i, m] = e_rel[m - i + half]
    return out


def content_lambda(k, v):
    """softmax(K)^T V with the softmax taken over positions for each key dim.

    k is [n, d_k] and v is [n, d_v] (or batched [B, n, ...]).
    """
    k, v = T.as_tensor(k), T.as_tensor(v)
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"content_lambda: keys {k.shape} and values {v.shape} differ in context length")
    if k.shape[-2] == 0:
        raise DimensionError("content_lambda: empty context")
    sk = T.softmax(k, axis=-2)
    if k.ndim == 2:
        return T.einsum("nk,nv->kv", sk, v)
    return T.einsum("bnk,bnv->bkv", sk, v)


def position_lambda(e_n, v):
    """E_n^T V for one query position: e_n [n, d_k], v [n, d_v] -> [d_k, d_v]."""
    e_n, v = T.as_tensor(e_n), T.as_tensor(v)
    if e_n.ndim != 2 or v.ndim != 2 or e_n.shape[0] != v.shape[0]:
        raise DimensionError(f"position_lambda: embedding {e_n.shape} and values {v.shape} do not align")
    return T.einsum("nk,nv->kv", e_n, v)


def _project(x, params, config, mode):
    c = config
    q = T.einsum("ci,bcn->bin", params.wq, x)
    k = T.einsum("ck,bcn->bkn", params.wk, x)
    v = T.einsum("cv,bcn->bvn", params.wv, x)
    if c.normalize:
        q = T.batchnorm(q, params.bnq_gamma, params.bnq_beta, params.bnq_state, mode)
        v = T.batchnorm(v, params.bnv_gamma, params.bnv_beta, params.bnv_state, mode)
    return q, k, v


def _apply(x, params, config, mode, position):
    x = T.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1] != config.d_in:
        raise DimensionError(f"lambda layer expects [B, {config.d_in}, n], got {x.shape}")
    B, _, n = x.shape
    if n < 1:
        raise DimensionError("lambda layer: empty sequence")
    c = config
    with T.scope("proj"):
        q, k, v = _project(x, params, c, mode)
    q4 = T.reshape(q, (B, c.h, c.d_k, n))
    with T.scope("content"):
        lam_c = T.einsum("bkn,bvn->bkv", T.softmax(k, axis=2), v)
        y = T.einsum("bhkn,bkv->bhvn", q4, lam_c)
    with T.scope("position"):
        lam_p = position(v, n)
        y = y + T.einsum("bhkn,bnkv->bhvn", q4, lam_p)
    y = T.reshape(y, (B, c.h * c.d_v, n))
    return T.reshape(y, y.shape[1:]) if squeeze else y


def lambda_forward(x, params: LambdaParams, config: LambdaConfig, mode="train"):
    """Global-context lambda layer: [B, d_in, n] -> [B, d_out, n]."""
    if config.context != "global":
        raise ConfigurationError("lambda_forward needs a global-context config")

    def position(v, n):
        if params.e.shape[:2] != (n, n):
            raise DimensionError(f"global embedding {params.e.shape} does not cover n={n}")
        return T.einsum("nmk,bvm->bnkv", params.e, v)

    return _apply(x, params, config, mode, position)


def lambda_conv_forward(x, params: LambdaParams, config: LambdaConfig, mode="train"):
    """Local-context lambda layer (lambda convolution over r relative offsets)."""
    if config.context != "local":
        raise ConfigurationError("lambda_conv_forward needs a local-context config")

    def position(v, n):
        windows = T.unfold_time(v, config.r)  # [B, d_v, n, r]
        return T.einsum("rk,bvnr->bnkv", params.e, windows)

    return _apply(x, params, config, mode, position)


def forward(x, params, config, mode="train"):
    if config.context == "local":
        return lambda_conv_forward(x, params, config, mode)
    return lambda_forward(x, params, config, mode)


def multiplies(config: LambdaConfig, n: int) -> dict:
    """Closed-form multiply counts of one forward pass at batch size 1."""
    c = config
    span = c.r if c.context == "local" else n
    return {
        "proj": n * c.d_in * (c.h * c.d_k + c.d_k + c.d_v),
        "content": n * c.d_k * c.d_v + n * c.h * c.d_k * c.d_v,
        "position": n * span * c.d_k * c.d_v + n * c.h * c.d_k * c.d_v,
    }
