"""Parametered layers and the architectural building blocks of the classifier.

The three constructs that matter here: the integer stride rule that matches a
source feature map's resolution to a target's, partial attention over
same-or-higher-resolution feature maps, and the residual inception block
(plus its factorized variant).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Graph, Parameter, Tensor


class ParamStore:
    """Named parameters and buffers for one model, with seeded initialization."""

    def __init__(self, seed: int = 0):
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.rng = np.random.default_rng(seed)

    def param(self, name: str, shape, init: str = "he", fan_in: int | None = None) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if init == "he":
            std = np.sqrt(2.0 / fan_in)
            data = self.rng.normal(0.0, std, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Parameter(name, data)
        self.params[name] = p
        return p

    def buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        arr = np.ascontiguousarray(data, dtype=np.float32)
        self.buffers[name] = arr
        return arr

    def named_tensors(self) -> dict[str, np.ndarray]:
        """All persistent state (trainable params + buffers) by name."""
        out = {name: p.data for name, p in self.params.items()}
        out.update(self.buffers)
        return out

    def trainable_count(self) -> int:
        return sum(p.data.size for p in self.params.values() if p.trainable)


# ---------------------------------------------------------------------------
# primitive layers


class Conv:
    """Plain convolution layer (no norm, no activation)."""

    def __init__(self, store, name, in_ch, out_ch, kh, kw, stride=1, padding="same"):
        self.stride = stride
        self.padding = padding
        self.weight = store.param(f"{name}.weight", (out_ch, in_ch, kh, kw),
                                  "he", fan_in=in_ch * kh * kw)
        self.bias = store.param(f"{name}.bias", (out_ch,), "zeros")

    def forward(self, g: Graph, x: Tensor) -> Tensor:
        return T.conv2d(x, g.stage(self.weight), g.stage(self.bias),
                        self.stride, self.padding)


class Dense:
    """Fully connected layer: (N,D) -> (N,K)."""

    def __init__(self, store, name, in_dim, out_dim):
        self.weight = store.param(f"{name}.weight", (in_dim, out_dim), "he", fan_in=in_dim)
        self.bias = store.param(f"{name}.bias", (out_dim,), "zeros")

    def forward(self, g: Graph, x: Tensor) -> Tensor:
        return T.dense(x, g.stage(self.weight), g.stage(self.bias))


class BatchNorm:
    """Per-channel batch normalization state and its forward pass."""

    def __init__(self, store, name, channels, momentum=0.9, epsilon=1e-5):
        if not (0.0 < momentum < 1.0):
            raise ValueError(f"momentum must be in (0, 1), got {momentum}")
        if epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {epsilon}")
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = store.param(f"{name}.gamma", (channels,), "ones")
        self.beta = store.param(f"{name}.beta", (channels,), "zeros")
        self.running_mean = store.buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = store.buffer(f"{name}.running_var", np.ones(channels))

    def forward(self, g: Graph, x: Tensor, mode: str) -> Tensor:
        return T.batch_norm(x, g.stage(self.gamma), g.stage(self.beta),
                            self.running_mean, self.running_var, mode,
                            self.momentum, self.epsilon)


class ConvBnRelu:
    """Conv -> batch norm -> relu, the standard body unit."""

    def __init__(self, store, name, in_ch, out_ch, kh, kw, stride=1, padding="same"):
        self.conv = Conv(store, f"{name}.conv", in_ch, out_ch, kh, kw, stride, padding)
        self.bn = BatchNorm(store, f"{name}.bn", out_ch)

    def forward(self, g, x, mode):
        return T.relu(self.bn.forward(g, self.conv.forward(g, x), mode))


class FactorizedConv:
    """A k x k convolution split into 1 x k followed by k x 1."""

    def __init__(self, store, name, in_ch, out_ch, k, stride=1, padding="same"):
        self.row = Conv(store, f"{name}.row", in_ch, out_ch, 1, k, stride, padding)
        self.col = Conv(store, f"{name}.col", out_ch, out_ch, k, 1, 1, padding)

    def forward(self, g, x):
        return self.col.forward(g, self.row.forward(g, x))


def _conv_unit(store, name, in_ch, out_ch, k, factorized, stride=1):
    if factorized and k > 1:
        return FactorizedConv(store, name, in_ch, out_ch, k, stride)
    return Conv(store, name, in_ch, out_ch, k, k, stride)


# ---------------------------------------------------------------------------
# stride rule


def compute_stride(source_shape, target_shape) -> int:
    """Integer stride matching a source resolution down to a target resolution.

    The ratio min(source dims) / min(target dims) must be an exact integer;
    a fractional ratio is a configuration error, and a source smaller than
    the target violates the precondition.
    """
    mi = min(int(source_shape[0]), int(source_shape[1]))
    mj = min(int(target_shape[0]), int(target_shape[1]))
    if mj <= 0:
        raise ValueError(f"target shape must be positive, got {target_shape}")
    if mi < mj:
        raise ValueError(
            f"source resolution {source_shape} is smaller than target {target_shape}"
        )
    if mi % mj != 0:
        raise ValueError(
            f"non-integer stride: min{tuple(source_shape)} / min{tuple(target_shape)} "
            f"= {mi}/{mj}"
        )
    return mi // mj


# ---------------------------------------------------------------------------
# partial attention


class PartialAttention:
    """Attention over source feature maps with resolution >= the target's.

    Each source is projected to the target's resolution and channel count by
    a strided convolution.  Per-channel attention weights are computed from a
    shared affine map over globally pooled projections and normalized across
    sources, the weighted sum is concatenated with the target, and a trailing
    3x3 convolution reduces aliasing and restores the target channel count.
    """

    def __init__(self, store, name, source_channels, source_shapes,
                 target_channels, target_shape):
        if not source_channels:
            raise ValueError("partial attention requires at least one source")
        self.strides = [compute_stride(s, target_shape) for s in source_shapes]
        self.projections = [
            ConvBnRelu(store, f"{name}.src{i}.proj", c, target_channels, 3, 3,
                       stride=s)
            for i, (c, s) in enumerate(zip(source_channels, self.strides))
        ]
        # shared per-channel affine map producing attention scores
        self.attn_w = store.param(f"{name}.attn.w", (target_channels,), "zeros")
        self.attn_b = store.param(f"{name}.attn.b", (target_channels,), "zeros")
        self.post = ConvBnRelu(store, f"{name}.post", 2 * target_channels,
                               target_channels, 3, 3)

    def forward(self, g: Graph, sources, target: Tensor, mode: str,
                parts: dict | None = None) -> Tensor:
        if len(sources) != len(self.projections):
            raise ValueError(
                f"expected {len(self.projections)} sources, got {len(sources)}"
            )
        w = g.stage(self.attn_w)
        b = g.stage(self.attn_b)
        projected = [p.forward(g, s, mode) for p, s in zip(self.projections, sources)]
        for p in projected:
            if p.shape[2:] != target.shape[2:]:
                raise ValueError(
                    f"projected source {p.shape} does not match target {target.shape}"
                )
        # per-source, per-channel scores from globally pooled projections
        scores = []
        for p in projected:
            pooled = T.reduce(p, "mean", axes=(2, 3))
            scores.append(T.channel_affine(pooled, w, b))
        # softmax across sources, independently per (sample, channel)
        m = scores[0]
        for s in scores[1:]:
            m = T.maximum(m, s)
        exps = [T.exp(T.sub(s, m)) for s in scores]
        denom = exps[0]
        for e in exps[1:]:
            denom = T.add(denom, e)
        weights = [T.div(e, denom) for e in exps]
        attended = T.scale_channels(projected[0], weights[0])
        for p, a in zip(projected[1:], weights[1:]):
            attended = T.add(attended, T.scale_channels(p, a))
        out = self.post.forward(g, T.concat_channels([attended, target]), mode)
        if parts is not None:
            parts["projected"] = projected
            parts["weights"] = weights
            parts["attended"] = attended
        return out


# ---------------------------------------------------------------------------
# residual inception


@dataclass
class InceptionBlockConfig:
    """Branch widths of one residual inception block."""

    in_channels: int
    b1x1: int
    b3x3_reduce: int
    b3x3: int
    b5x5_reduce: int
    b5x5: int
    bpool: int
    out_channels: int
    factorized: bool = False

    def validate(self):
        widths = (self.b1x1, self.b3x3_reduce, self.b3x3, self.b5x5_reduce,
                  self.b5x5, self.bpool)
        if min(widths) < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"all channel widths must be >= 1, got {self}")
        # the inner residual adds the reduce output to the branch output
        if self.b3x3_reduce != self.b3x3:
            raise ValueError(
                f"inner residual requires b3x3_reduce == b3x3, got "
                f"{self.b3x3_reduce} vs {self.b3x3}"
            )
        if self.b5x5_reduce != self.b5x5:
            raise ValueError(
                f"inner residual requires b5x5_reduce == b5x5, got "
                f"{self.b5x5_reduce} vs {self.b5x5}"
            )

    @property
    def concat_channels(self) -> int:
        return self.b1x1 + self.b3x3 + self.b5x5 + self.bpool


class ResidualInception:
    """Four-branch inception block with inner and primary residual connections.

    Branches: 1x1; 1x1 -> 3x3 (+ residual from the reduce); 1x1 -> 5x5
    (+ residual); 3x3 avg-pool -> 1x1.  The concatenated branches pass
    through a 3x3 anti-alias convolution, and a 1x1-projected copy of the
    block input is added on top.  Spatial dimensions are preserved.
    """

    def __init__(self, store, name, cfg: InceptionBlockConfig):
        cfg.validate()
        self.cfg = cfg
        c = cfg.in_channels
        self.b1 = ConvBnRelu(store, f"{name}.b1", c, cfg.b1x1, 1, 1)
        self.b3_reduce = ConvBnRelu(store, f"{name}.b3.reduce", c, cfg.b3x3_reduce, 1, 1)
        self.b3_conv = _conv_unit(store, f"{name}.b3.conv", cfg.b3x3_reduce,
                                  cfg.b3x3, 3, cfg.factorized)
        self.b3_bn = BatchNorm(store, f"{name}.b3.bn", cfg.b3x3)
        self.b5_reduce = ConvBnRelu(store, f"{name}.b5.reduce", c, cfg.b5x5_reduce, 1, 1)
        self.b5_conv = _conv_unit(store, f"{name}.b5.conv", cfg.b5x5_reduce,
                                  cfg.b5x5, 5, cfg.factorized)
        self.b5_bn = BatchNorm(store, f"{name}.b5.bn", cfg.b5x5)
        self.bpool = ConvBnRelu(store, f"{name}.bpool", c, cfg.bpool, 1, 1)
        self.anti_alias_conv = _conv_unit(store, f"{name}.aa.conv",
                                          cfg.concat_channels, cfg.out_channels,
                                          3, cfg.factorized)
        self.anti_alias_bn = BatchNorm(store, f"{name}.aa.bn", cfg.out_channels)
        self.project = Conv(store, f"{name}.res", c, cfg.out_channels, 1, 1)

    def forward(self, g: Graph, x: Tensor, mode: str) -> Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"block expects {self.cfg.in_channels} input channels, got {x.shape[1]}"
            )
        y1 = self.b1.forward(g, x, mode)

        r3 = self.b3_reduce.forward(g, x, mode)
        y3 = self.b3_bn.forward(g, self.b3_conv.forward(g, r3), mode)
        y3 = T.relu(T.add(y3, r3))

        r5 = self.b5_reduce.forward(g, x, mode)
        y5 = self.b5_bn.forward(g, self.b5_conv.forward(g, r5), mode)
        y5 = T.relu(T.add(y5, r5))

        pooled = T.pool2d(T.pad2d(x, 1, 1, 1, 1), "avg", 3, 1)
        yp = self.bpool.forward(g, pooled, mode)

        cat = T.concat_channels([y1, y3, y5, yp])
        aa = T.relu(self.anti_alias_bn.forward(g, self.anti_alias_conv.forward(g, cat), mode))
        return T.add(aa, self.project.forward(g, x))
