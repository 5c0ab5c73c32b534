"""Scaled dot-product and multi-head self-attention, plus a scaling benchmark.

The attention code is a reference point for the lambda layer: same
projections, but an explicit n x n weight map per head.
"""
from __future__ import annotations

import csv
import math
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import lambda_layer as lam
from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class AttentionConfig:
    n: int
    d: int
    h: int
    d_k: int
    d_v: int

    def __post_init__(self):
        if min(self.n, self.d, self.h, self.d_k, self.d_v) < 1:
            raise ConfigurationError(f"attention extents must be positive: {self}")
        if self.h * self.d_v != self.d:
            raise ConfigurationError(f"h*d_v = {self.h * self.d_v} must equal d = {self.d}")


@dataclass
class AttentionParams:
    wq: list  # h tensors [d, d_k]
    wk: list  # h tensors [d, d_k]
    wv: list  # h tensors [d, d_v]
    wa: Tensor  # [h*d_v, d]

    @classmethod
    def init(cls, config: AttentionConfig, rng, dtype=np.float64, requires_grad=True):
        c = config
        s = 1.0 / math.sqrt(c.d)

        def mat(*shape, std=s):
            return Tensor(rng.normal(0.0, std, shape).astype(dtype), requires_grad=requires_grad)

        return cls(
            wq=[mat(c.d, c.d_k) for _ in range(c.h)],
            wk=[mat(c.d, c.d_k) for _ in range(c.h)],
            wv=[mat(c.d, c.d_v) for _ in range(c.h)],
            wa=mat(c.h * c.d_v, c.d, std=1.0 / math.sqrt(c.h * c.d_v)),
        )

    def tensors(self):
        return [*self.wq, *self.wk, *self.wv, self.wa]


def attention_weights(x, wq, wk):
    """softmax(Q K^T / sqrt(d_k)) with the softmax over keys."""
    x, wq, wk = T.as_tensor(x), T.as_tensor(wq), T.as_tensor(wk)
    d_k = wq.shape[-1]
    if d_k == 0:
        raise ConfigurationError("attention: d_k must be positive")
    q = T.matmul(x, wq)
    k = T.matmul(x, wk)
    scores = T.matmul(q, T.transpose(k, (1, 0)))
    return T.softmax(T.scale(scores, 1.0 / math.sqrt(d_k)), axis=-1)


def attend(x, wq, wk, wv):
    """Single-head attention: x [n, d] -> [n, d_v]."""
    x = T.as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"attend expects [n, d], got {x.shape}")
    a = attention_weights(x, wq, wk)
    return T.matmul(a, T.matmul(x, wv))


def _concat_columns(parts):
    # [n, d_v] x h -> [n, h*d_v] via stack on a new leading axis
    n, d_v = parts[0].shape
    stacked = _stack(parts)  # [h, n, d_v]
    return T.reshape(T.transpose(stacked, (1, 0, 2)), (n, len(parts) * d_v))


def _stack(parts):
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mismatched shapes {shapes}")
    data = np.stack([p.data for p in parts])

    def back(g):
        return tuple(g[i] for i in range(len(parts)))

    return T._result(data, tuple(parts), back, "stack")


def multi_head_attend(x, params: AttentionParams):
    """concat(A_1 .. A_h) W_A for x [n, d]."""
    x = T.as_tensor(x)
    h = len(params.wq)
    if not (len(params.wk) == len(params.wv) == h) or h == 0:
        raise ConfigurationError("multi_head_attend: inconsistent head count")
    d_v = params.wv[0].shape[1]
    if params.wa.shape != (h * d_v, x.shape[1]):
        raise ConfigurationError(
            f"multi_head_attend: W_A {params.wa.shape} does not match h*d_v={h * d_v}, d={x.shape[1]}"
        )
    heads = [attend(x, params.wq[i], params.wk[i], params.wv[i]) for i in range(h)]
    return T.matmul(_concat_columns(heads), params.wa)


# ---------------------------------------------------------------------------
# scaling benchmark
# ---------------------------------------------------------------------------

LAYERS = ("attention", "lambda_global", "lambda_conv")


@dataclass
class ScalingPoint:
    n: int
    mean_ns: float
    stderr_ns: float
    peak_bytes: int
    median_ns: float


@dataclass
class ScalingReport:
    layer: str
    points: list = field(default_factory=list)
    slope: float = float("nan")
    slope_stderr: float = float("nan")
    memory_slope: float = float("nan")
    unreliable: bool = False

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "mean_ns", "stderr_ns", "peak_bytes"])
            for p in self.points:
                w.writerow([p.n, f"{p.mean_ns:.1f}", f"{p.stderr_ns:.1f}", p.peak_bytes])


def _make_layer(layer, n, d, h, d_k, r, rng):
    if layer == "attention":
        cfg = AttentionConfig(n=n, d=d, h=h, d_k=d_k, d_v=d // h)
        params = AttentionParams.init(cfg, rng, requires_grad=False)
        x = Tensor(rng.normal(size=(n, d)))
        return lambda: multi_head_attend(x, params)
    context = "global" if layer == "lambda_global" else "local"
    cfg = lam.LambdaConfig(d_in=d, d_out=d, h=h, d_k=d_k, r=r, context=context, n=n, normalize=False)
    params = lam.init_params(cfg, rng)
    x = Tensor(rng.normal(size=(1, d, n)))
    return lambda: lam.forward(x, params, cfg, "eval")


def scaling_benchmark(layer, n_sweep, reps, *, d=64, h=4, d_k=16, r=23, warmup=3,
                      seed=0, cv_threshold=0.5) -> ScalingReport:
    """Time one forward pass (batch 1) over a sweep of sequence lengths.

    The slope of log(median time) against log(n) estimates the polynomial
    order of the layer.  A point whose coefficient of variation exceeds
    ``cv_threshold`` marks the report unreliable.
    """
    if layer not in LAYERS:
        raise ConfigurationError(f"unknown layer {layer!r}; choose from {LAYERS}")
    report = ScalingReport(layer)
    if reps <= 0:
        return report
    n_sweep = [int(n) for n in n_sweep]
    if len(n_sweep) < 4 or any(b <= a for a, b in zip(n_sweep, n_sweep[1:])) or n_sweep[-1] < 8 * n_sweep[0]:
        raise ConfigurationError("n_sweep must be strictly increasing, with at least 4 points spanning 8x")
    rng = np.random.default_rng(seed)
    with T.no_grad():
        layers = [_make_layer(layer, n, d, h, d_k, r, rng) for n in n_sweep]
        for fn in layers:
            for _ in range(warmup):
                fn()
        # round-robin over lengths so slow drift in machine load hits every n alike
        times = [[] for _ in n_sweep]
        for _ in range(reps):
            for i, fn in enumerate(layers):
                t0 = time.perf_counter_ns()
                fn()
                times[i].append(time.perf_counter_ns() - t0)
        for n, fn, ts in zip(n_sweep, layers, times):
            tracemalloc.start()
            fn()
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            mean = statistics.fmean(ts)
            sd = statistics.stdev(ts) if reps > 1 else 0.0
            if mean > 0 and sd / mean > cv_threshold:
                report.unreliable = True
            report.points.append(ScalingPoint(n, mean, sd / math.sqrt(reps), peak, statistics.median(ts)))
    logn = np.log([p.n for p in report.points])
    fit = stats.linregress(logn, np.log([p.median_ns for p in report.points]))
    report.slope, report.slope_stderr = float(fit.slope), float(fit.stderr)
    report.memory_slope = float(stats.linregress(logn, np.log([max(p.peak_bytes, 1) for p in report.points])).slope)
    return report
