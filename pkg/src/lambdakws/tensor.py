"""Dense tensors with reverse-mode automatic differentiation.

Every op records a closure that maps the gradient of its output to the
gradients of its inputs.  ``backward`` walks the recorded graph in reverse
topological order and accumulates into leaf ``grad`` buffers.

Only the primitives the keyword-spotting models need are provided.  There is
no general broadcasting: shapes must agree exactly, except for the documented
cases (a 2-D weight against a batched operand in ``matmul``, bias rows in
``affine``).
"""
from __future__ import annotations

import contextlib
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, GraphError, NumericError

log = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# multiply counting
# ---------------------------------------------------------------------------


@dataclass
class MultiplyCounter:
    """Tally of multiplies (one per multiply-accumulate) grouped by scope."""

    counts: dict = field(default_factory=lambda: defaultdict(int))

    @property
    def total(self):
        return sum(self.counts.values())

    def prefixed(self, prefix):
        return sum(v for k, v in self.counts.items() if k.startswith(prefix))

    def suffixed(self, suffix):
        return sum(v for k, v in self.counts.items() if k.endswith(suffix))


_counters: list = []
_scopes: list = []


@contextlib.contextmanager
def count_multiplies():
    """Record the multiplies of every linear op executed inside the block."""
    counter = MultiplyCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


@contextlib.contextmanager
def scope(name):
    """Label the multiplies recorded inside the block (scopes nest with '/')."""
    _scopes.append(name)
    try:
        yield
    finally:
        _scopes.pop()


def _tally(n):
    if _counters:
        key = "/".join(_scopes) or "<root>"
        for c in _counters:
            c.counts[key] += int(n)


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def tsum(a):
    """Sum of all elements, as a scalar tensor."""
    a = as_tensor(a)
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a):
    a = as_tensor(a)
    return scale(tsum(a), 1.0 / a.data.size)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,), "relu")


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis``."""
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), back, "softmax")


# ---------------------------------------------------------------------------
# linear ops
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product over the last two axes.

    Both operands may carry the same leading batch axes, or one of them may
    be a plain 2-D matrix shared across the batch of the other.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    out = ad @ bd
    _tally(out.size * a.shape[-1])

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
            if a.ndim == 2 and ga.ndim > 2:
                ga = ga.reshape(-1, *ga.shape[-2:]).sum(axis=0)
        if b.requires_grad:
            gb = np.swapaxes(ad, -1, -2) @ g
            if b.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return _result(out, (a, b), back, "matmul")


_plans: dict = {}


def _plan(sa, sb, so, sizes):
    # batch: in a, b and out; contracted: in a and b only; free: one operand and out
    batch = [c for c in so if c in sa and c in sb]
    contr = [c for c in sa if c in sb and c not in so]
    a_free = [c for c in sa if c not in sb]
    b_free = [c for c in sb if c not in sa]
    perm_a = [sa.index(c) for c in batch + a_free + contr]
    perm_b = [sb.index(c) for c in batch + contr + b_free]

    def size(idx):
        return math.prod(sizes[c] for c in idx)

    shape_a = (size(batch), size(a_free), size(contr))
    shape_b = (size(batch), size(contr), size(b_free))
    inter = batch + a_free + b_free
    shape_mid = [sizes[c] for c in inter]
    perm_out = [inter.index(c) for c in so]
    return perm_a, shape_a, perm_b, shape_b, shape_mid, perm_out


def _contract(sa, sb, so, x, y):
    """Evaluate a two-operand contraction as one batched matmul."""
    key = (sa, sb, so, x.shape, y.shape)
    plan = _plans.get(key)
    if plan is None:
        sizes = dict(zip(sa, x.shape))
        sizes.update(zip(sb, y.shape))
        plan = _plans[key] = _plan(sa, sb, so, sizes)
    perm_a, shape_a, perm_b, shape_b, shape_mid, perm_out = plan
    xa = x.transpose(perm_a).reshape(shape_a)
    yb = y.transpose(perm_b).reshape(shape_b)
    return (xa @ yb).reshape(shape_mid).transpose(perm_out)


_checked: dict = {}


def _check_einsum(subscripts, sa_shape, sb_shape):
    lhs, out_s = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    if any(len(set(s)) != len(s) for s in (sa, sb, out_s)):
        raise ConfigurationError(f"einsum '{subscripts}': repeated index within one term")
    if len(sa) != len(sa_shape) or len(sb) != len(sb_shape):
        raise DimensionError(f"einsum '{subscripts}': operand ranks {sa_shape}, {sb_shape}")
    sizes = {}
    for s, shape in ((sa, sa_shape), (sb, sb_shape)):
        for ch, n in zip(s, shape):
            if sizes.setdefault(ch, n) != n:
                raise DimensionError(f"einsum '{subscripts}': index '{ch}' has extents {sizes[ch]} and {n}")
    for s, other in ((sa, sb), (sb, sa)):
        for ch in s:
            if ch not in other and ch not in out_s:
                raise ConfigurationError(f"einsum '{subscripts}': index '{ch}' is summed out of one operand only")
    return sa, sb, out_s, math.prod(sizes.values())


def einsum(subscripts, a, b):
    """Two-operand contraction.

    Every index of an operand must appear in the other operand or in the
    output, so each gradient is again a plain contraction.
    """
    a, b = as_tensor(a), as_tensor(b)
    key = (subscripts, a.shape, b.shape)
    checked = _checked.get(key)
    if checked is None:
        checked = _checked[key] = _check_einsum(subscripts, a.shape, b.shape)
    sa, sb, out_s, macs = checked
    ad, bd = a.data, b.data
    out = _contract(sa, sb, out_s, ad, bd)
    _tally(macs)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _contract(out_s, sb, sa, g, bd)
        if b.requires_grad:
            gb = _contract(out_s, sa, sb, g, ad)
        return ga, gb

    return _result(out, (a, b), back, "einsum")


def affine(x, w, b):
    """``x @ w + b`` for x [..., d_in], w [d_in, d_out], b [d_out]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"affine: x {x.shape}, w {w.shape}, b {b.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd + b.data
    _tally(out.size * w.shape[0])

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _result(out, (x, w, b), back, "affine")


def _same_padding(length, k, stride):
    out = -(-length // stride)
    total = max((out - 1) * stride + k - length, 0)
    return out, total // 2, total - total // 2


def conv1d(x, w, stride=1):
    """Cross-correlation with "same" zero padding.

    x is [C_in, L] or [B, C_in, L]; w is [C_out, C_in, k] with odd k.  The
    output length is ceil(L / stride); an odd padding total puts the extra
    zero on the right.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 3 or w.shape[2] % 2 == 0:
        raise ConfigurationError(f"conv1d: kernel must be [C_out, C_in, odd k], got {w.shape}")
    if stride not in (1, 2):
        raise ConfigurationError(f"conv1d: stride must be 1 or 2, got {stride}")
    if x.ndim == 2:
        return reshape(conv1d(reshape(x, (1,) + x.shape), w, stride), (w.shape[0], -1))
    if x.ndim != 3 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} does not match kernel {w.shape}")
    B, C, L = x.shape
    k = w.shape[2]
    L_out, left, right = _same_padding(L, k, stride)
    xp = np.zeros((B, C, L + left + right), dtype=x.dtype)
    xp[:, :, left : left + L] = x.data
    cols = sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :L_out]  # [B, C, L_out, k]
    wd = w.data
    out = np.tensordot(cols, wd, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    out = np.ascontiguousarray(out)
    _tally(out.size * C * k)

    def back(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2]))
        if x.requires_grad:
            gcols = np.tensordot(g, wd, axes=([1], [0]))  # [B, L_out, C, k]
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            span = stride * (L_out - 1) + 1
            for j in range(k):
                gxp[:, :, j : j + span : stride] += gcols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, left : left + L]
        return gx, gw

    return _result(out, (x, w), back, "conv1d")


def unfold_time(x, r):
    """Zero-padded sliding windows of odd width r along the last axis.

    [..., n] -> [..., n, r] with out[..., i, j] = x[..., i + j - r // 2].
    """
    x = as_tensor(x)
    if r < 1 or r % 2 == 0:
        raise ConfigurationError(f"unfold_time: window must be odd and positive, got {r}")
    n = x.shape[-1]
    half = r // 2
    xp = np.zeros(x.shape[:-1] + (n + 2 * half,), dtype=x.dtype)
    xp[..., half : half + n] = x.data
    out = np.ascontiguousarray(sliding_window_view(xp, r, axis=-1))

    def back(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for j in range(r):
            gxp[..., j : j + n] += g[..., j]
        return (gxp[..., half : half + n],)

    return _result(out, (x,), back, "unfold_time")


# ---------------------------------------------------------------------------
# normalization, pooling, loss
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    updated: bool = False
    warned: bool = field(default=False, compare=False, repr=False)

    @classmethod
    def fresh(cls, channels, dtype=DEFAULT_DTYPE):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(x, gamma, beta, state, mode="train"):
    """Per-channel normalization of x [B, C, L] over batch and time jointly."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 3 or gamma.shape != (x.shape[1],) or beta.shape != gamma.shape:
        raise DimensionError(f"batchnorm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    B, C, L = x.shape
    m = B * L
    xd = x.data
    gd = gamma.data[None, :, None]
    if mode == "train":
        if m < 2:
            raise DimensionError("batchnorm: train mode needs more than one value per channel")
        mu = xd.mean(axis=(0, 2))
        var = xd.var(axis=(0, 2))
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mu).astype(state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * var * m / (m - 1)).astype(state.running_var.dtype)
        state.updated = True
    elif mode == "eval":
        if not state.updated and not state.warned:
            state.warned = True
            log.warning("batchnorm: eval before any train-mode update, using initial statistics")
        mu, var = state.running_mean, state.running_var
    else:
        raise ConfigurationError(f"batchnorm: unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mu[None, :, None]) * inv[None, :, None]
    out = (xhat * gd + beta.data[None, :, None]).astype(xd.dtype, copy=False)

    def back(g):
        gg = (g * xhat).sum(axis=(0, 2)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gd
            if mode == "train":
                gx = (inv[None, :, None] / m) * (
                    m * gxhat
                    - gxhat.sum(axis=(0, 2), keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2), keepdims=True)
                )
            else:
                gx = gxhat * inv[None, :, None]
        return gx, gg, gb

    return _result(out, (x, gamma, beta), back, "batchnorm")


def avgpool_time(x):
    """Mean over the last (temporal) axis."""
    x = as_tensor(x)
    L = x.shape[-1]
    shape = x.shape
    return _result(x.data.mean(axis=-1), (x,), lambda g: (np.broadcast_to(g[..., None] / L, shape).copy(),), "avgpool_time")


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    z = logits.data
    if not np.all(np.isfinite(z)):
        raise NumericError("cross_entropy: non-finite logits")
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = z.shape[0]
    idx = np.arange(B)
    loss = -logp[idx, labels].mean()

    def back(g):
        p = np.exp(logp)
        p[idx, labels] -= 1.0
        return (p * (g / B),)

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), back, "cross_entropy")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every leaf that requires grad.

    The graph is released afterwards, so calling this twice on the same
    forward pass raises ``GraphError``.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward: graph already consumed; run the forward pass again")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not depend on any tensor requiring grad")
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._consumed = True
    loss._consumed = True


def subsample_time(x, stride):
    """Keep every ``stride``-th frame of x [B, C, L] (ceil(L / stride) frames)."""
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[..., ::stride] = g
        return (gx,)

    return _result(np.ascontiguousarray(x.data[..., ::stride]), (x,), back, "subsample_time")


def pad_channels(x, channels):
    """Zero-extend the channel axis of x [B, C, L] to ``channels``."""
    x = as_tensor(x)
    B, C, L = x.shape
    if channels < C:
        raise DimensionError(f"pad_channels: cannot shrink {C} channels to {channels}")
    out = np.zeros((B, channels, L), dtype=x.dtype)
    out[:, :C] = x.data
    return _result(out, (x,), lambda g: (g[:, :C],), "pad_channels")
