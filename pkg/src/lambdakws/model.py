"""LambdaResNet18 family: declarative spec, construction, forward pass, cost.

Layout for width multiplier k::

    conv3 40 -> 16k, BN, ReLU
    4 stages x 2 residual lambda blocks, widths (24, 36, 48, 60) * k,
        first block of every stage strided by 2
    temporal average pool -> fully connected -> class logits

A residual lambda block is conv3(stride s) -> BN -> ReLU -> lambda -> BN,
plus the shortcut, then ReLU.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import lambda_layer as lam
from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import BatchNormState, Tensor

SHORTCUTS = ("projection", "identity")


@dataclass(frozen=True)
class ModelSpec:
    width: int = 1
    stem_channels: int = 16
    stage_channels: tuple = (24, 36, 48, 60)
    blocks_per_stage: int = 2
    kernel: int = 3
    heads: int = 4
    d_k: int = 16
    r: int = 23
    num_classes: int = 12
    n_mels: int = 40
    input_length: int = 100
    shortcut: str = "projection"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if self.width < 1 or self.num_classes < 2 or self.blocks_per_stage < 1:
            raise ConfigurationError(f"invalid model spec: {self}")
        if self.kernel % 2 == 0:
            raise ConfigurationError(f"kernel length must be odd, got {self.kernel}")
        if self.shortcut not in SHORTCUTS:
            raise ConfigurationError(f"shortcut must be one of {SHORTCUTS}")
        for c in self.channels[1:]:
            if c % self.heads:
                raise ConfigurationError(f"stage width {c} is not divisible by {self.heads} heads")

    @property
    def channels(self):
        """Stem width followed by every stage width, multiplier applied."""
        return (self.stem_channels * self.width, *(c * self.width for c in self.stage_channels))

    @property
    def input_shape(self):
        return (self.n_mels, self.input_length)

    def blocks(self):
        """Yield (prefix, c_in, c_out, stride) for every residual block."""
        c_in = self.channels[0]
        for i, c in enumerate(self.channels[1:]):
            for j in range(self.blocks_per_stage):
                yield f"stage{i + 1}.block{j + 1}", c_in, c, 2 if j == 0 else 1
                c_in = c

    def needs_projection(self, c_in, c_out, stride):
        return self.shortcut == "projection" and (c_in != c_out or stride != 1)

    def lambda_config(self, c):
        return lam.LambdaConfig(d_in=c, d_out=c, h=self.heads, d_k=self.d_k, r=self.r, context="local")

    def to_dict(self):
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


MODEL_NAMES = {"lambda-resnet18": 1, "lambda-resnet18-2": 2}


def named_spec(name, num_classes=12, **overrides):
    """``lambda-resnet18`` (k=1) or ``lambda-resnet18-2`` (k=2)."""
    if name not in MODEL_NAMES:
        raise ConfigurationError(f"unknown model {name!r}; choose from {sorted(MODEL_NAMES)}")
    return ModelSpec(width=MODEL_NAMES[name], num_classes=num_classes, **overrides)


def layer_count(spec: ModelSpec) -> int:
    """Stem conv + (conv, lambda) per block + classifier."""
    return 1 + 2 * spec.blocks_per_stage * len(spec.stage_channels) + 1


@dataclass
class ModelParams:
    spec: ModelSpec
    params: dict = field(default_factory=dict)  # name -> Tensor, canonical order
    state: dict = field(default_factory=dict)  # batch-norm name -> BatchNormState

    def tensors(self):
        return list(self.params.values())

    def astype(self, dtype):
        out = ModelParams(self.spec)
        for k, t in self.params.items():
            out.params[k] = Tensor(t.data.astype(dtype), requires_grad=True)
        for k, s in self.state.items():
            out.state[k] = BatchNormState(s.running_mean.astype(dtype), s.running_var.astype(dtype),
                                          s.momentum, s.eps, s.updated)
        return out

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()


def _lambda_params(mp: ModelParams, prefix, cfg):
    p = mp.params
    return lam.LambdaParams(
        wq=p[f"{prefix}.wq"], wk=p[f"{prefix}.wk"], wv=p[f"{prefix}.wv"], e=p[f"{prefix}.e"],
        bnq_gamma=p[f"{prefix}.bnq.gamma"], bnq_beta=p[f"{prefix}.bnq.beta"],
        bnv_gamma=p[f"{prefix}.bnv.gamma"], bnv_beta=p[f"{prefix}.bnv.beta"],
        bnq_state=mp.state[f"{prefix}.bnq"], bnv_state=mp.state[f"{prefix}.bnv"],
    )


def build(spec: ModelSpec, seed: int = 0, dtype=np.float64) -> ModelParams:
    """Initialise every parameter of ``spec`` deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    mp = ModelParams(spec)
    P = mp.params

    def conv(name, c_out, c_in, k):
        std = math.sqrt(2.0 / (c_in * k))
        P[name] = Tensor(rng.normal(0.0, std, (c_out, c_in, k)).astype(dtype), requires_grad=True)

    def bn(name, c):
        P[f"{name}.gamma"] = Tensor(np.ones(c, dtype), requires_grad=True)
        P[f"{name}.beta"] = Tensor(np.zeros(c, dtype), requires_grad=True)
        mp.state[name] = BatchNormState.fresh(c, dtype)

    stem = spec.channels[0]
    conv("stem.conv.w", stem, spec.n_mels, spec.kernel)
    bn("stem.bn", stem)
    for prefix, c_in, c, stride in spec.blocks():
        conv(f"{prefix}.conv.w", c, c_in, spec.kernel)
        bn(f"{prefix}.bn1", c)
        lp = lam.init_params(spec.lambda_config(c), rng, dtype)
        for k in ("wq", "wk", "wv", "e"):
            P[f"{prefix}.lambda.{k}"] = getattr(lp, k)
        bn(f"{prefix}.lambda.bnq", spec.heads * spec.d_k)
        bn(f"{prefix}.lambda.bnv", c // spec.heads)
        bn(f"{prefix}.bn2", c)
        if spec.needs_projection(c_in, c, stride):
            conv(f"{prefix}.shortcut.w", c, c_in, 1)
            bn(f"{prefix}.shortcut.bn", c)
    c_last = spec.channels[-1]
    bound = 1.0 / math.sqrt(c_last)
    P["fc.w"] = Tensor(rng.uniform(-bound, bound, (c_last, spec.num_classes)).astype(dtype), requires_grad=True)
    P["fc.b"] = Tensor(np.zeros(spec.num_classes, dtype), requires_grad=True)
    return mp


def _bn(mp, name, x, mode):
    return T.batchnorm(x, mp.params[f"{name}.gamma"], mp.params[f"{name}.beta"], mp.state[name], mode)


def block_forward(mp: ModelParams, prefix, c_in, c, stride, x, mode):
    spec = mp.spec
    with T.scope(f"{prefix}/conv"):
        y = T.conv1d(x, mp.params[f"{prefix}.conv.w"], stride)
    y = T.relu(_bn(mp, f"{prefix}.bn1", y, mode))
    cfg = spec.lambda_config(c)
    with T.scope(f"{prefix}/lambda"):
        y = lam.lambda_conv_forward(y, _lambda_params(mp, f"{prefix}.lambda", cfg), cfg, mode)
    y = _bn(mp, f"{prefix}.bn2", y, mode)
    if spec.needs_projection(c_in, c, stride):
        with T.scope(f"{prefix}/shortcut"):
            s = T.conv1d(x, mp.params[f"{prefix}.shortcut.w"], stride)
        s = _bn(mp, f"{prefix}.shortcut.bn", s, mode)
    else:
        s = T.subsample_time(x, stride) if stride != 1 else x
        if c != c_in:
            s = T.pad_channels(s, c)
    return T.relu(y + s)


def forward(mp: ModelParams, x, mode="eval"):
    """Class logits for mel features x [n_mels, L] or [B, n_mels, L]."""
    spec = mp.spec
    x = T.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1:] != spec.input_shape:
        raise DimensionError(f"model expects input [B, {spec.n_mels}, {spec.input_length}], got {x.shape}")
    with T.scope("stem/conv"):
        y = T.conv1d(x, mp.params["stem.conv.w"], 1)
    y = T.relu(_bn(mp, "stem.bn", y, mode))
    for prefix, c_in, c, stride in spec.blocks():
        y = block_forward(mp, prefix, c_in, c, stride, y, mode)
    y = T.avgpool_time(y)
    with T.scope("fc"):
        logits = T.affine(y, mp.params["fc.w"], mp.params["fc.b"])
    return T.reshape(logits, logits.shape[1:]) if squeeze else logits


def temporal_trace(spec: ModelSpec, length=None):
    """Sequence length after the stem and after every stage."""
    n = length or spec.input_length
    trace = [n]
    for i in range(len(spec.stage_channels)):
        n = -(-n // 2)
        trace.append(n)
    return trace


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------


def param_breakdown(spec: ModelSpec) -> dict:
    """Trainable scalars by component, in closed form."""
    k, h, d_k = spec.kernel, spec.heads, spec.d_k
    stem = spec.channels[0]
    out = {"conv": spec.n_mels * stem * k, "batchnorm": 2 * stem, "lambda": 0, "shortcut": 0}
    for _, c_in, c, stride in spec.blocks():
        d_v = c // h
        out["conv"] += c_in * c * k
        out["batchnorm"] += 4 * c
        out["lambda"] += c * (h * d_k + d_k + d_v) + spec.r * d_k + 2 * (h * d_k + d_v)
        if spec.needs_projection(c_in, c, stride):
            out["shortcut"] += c_in * c + 2 * c
    out["classifier"] = spec.channels[-1] * spec.num_classes + spec.num_classes
    return out


def count_params(spec: ModelSpec) -> int:
    return sum(param_breakdown(spec).values())


def flop_breakdown(spec: ModelSpec, input_shape=None) -> dict:
    """Multiplies of one forward pass by component (one per multiply-accumulate).

    Batch norm, ReLU, softmax, pooling and additions are not counted.
    """
    n_mels, n = input_shape or spec.input_shape
    k, h, d_k, r = spec.kernel, spec.heads, spec.d_k, spec.r
    stem = spec.channels[0]
    out = {"conv": n_mels * stem * k * n, "lambda_proj": 0, "lambda_content": 0,
           "lambda_position": 0, "shortcut": 0}
    for _, c_in, c, stride in spec.blocks():
        n = -(-n // stride)
        out["conv"] += c_in * c * k * n
        terms = lam.multiplies(spec.lambda_config(c), n)
        out["lambda_proj"] += terms["proj"]
        out["lambda_content"] += terms["content"]
        out["lambda_position"] += terms["position"]
        if spec.needs_projection(c_in, c, stride):
            out["shortcut"] += c_in * c * n
    out["classifier"] = spec.channels[-1] * spec.num_classes
    return out


def count_flops(spec: ModelSpec, input_shape=None) -> int:
    return sum(flop_breakdown(spec, input_shape).values())


def measured_flops(mp: ModelParams, length=None) -> T.MultiplyCounter:
    """Run one instrumented forward pass at batch size 1 and tally multiplies."""
    spec = mp.spec
    if length is not None and length != spec.input_length:
        mp = ModelParams(replace(spec, input_length=length), mp.params, mp.state)
        spec = mp.spec
    x = np.zeros((1,) + spec.input_shape)
    with T.no_grad(), T.count_multiplies() as counter:
        forward(mp, x, "eval")
    return counter
