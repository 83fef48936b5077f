"""Composable layers built on :mod:`scanet.tensor`.

Layers hold :class:`Parameter` objects (shape known at construction, data
allocated by :meth:`Layer.init_params`) so that counting parameters and FLOPs
never needs to allocate a network.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import RunningStats, ShapeError, Tensor


@dataclass(eq=False)
class Parameter:
    name: str
    shape: tuple
    init: str = "he"  # he | ones | zeros
    fan_in: int = 1
    data: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def initialize(self, rng: np.random.Generator, dtype=np.float32) -> None:
        if self.init == "he":
            self.data = T.he_normal(rng, self.shape, self.fan_in, dtype)
        elif self.init == "ones":
            self.data = np.ones(self.shape, dtype=dtype)
        else:
            self.data = np.zeros(self.shape, dtype=dtype)


class Context:
    """Per-forward-pass settings: tape, train/infer mode and parameter overrides."""

    def __init__(self, tape: Optional[T.Tape] = None, train: bool = False,
                 bindings: Optional[dict] = None):
        self.tape = tape
        self.train = train
        self.bindings = bindings or {}

    def p(self, param: Parameter) -> Tensor:
        bound = self.bindings.get(id(param))
        if bound is not None:
            return bound
        if param.data is None:
            raise RuntimeError(f"parameter {param.name} is not initialized")
        if self.tape is not None:
            return self.tape.param(param)
        return Tensor(param.data)


class Layer:
    name: str = ""

    def children(self) -> list:
        return []

    def own_params(self) -> list:
        return []

    def params(self) -> list:
        out = list(self.own_params())
        for ch in self.children():
            out.extend(ch.params())
        return out

    def buffers(self) -> list:
        """``(name, array)`` pairs of non-learnable state."""
        out = []
        for ch in self.children():
            out.extend(ch.buffers())
        return out

    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> None:
        for p in self.params():
            p.initialize(rng, dtype)

    def output_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def macs(self, in_shape: tuple) -> int:
        raise NotImplementedError

    def forward(self, x: Tensor, ctx: Context) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, ctx: Optional[Context] = None) -> Tensor:
        return self.forward(x, ctx or Context())


def _check_channels(layer: Layer, expected: int, got: int) -> None:
    if expected != got:
        raise ShapeError(f"{type(layer).__name__} {layer.name or ''}: expected {expected} "
                         f"input channels, got {got}".replace("  ", " "))


class ConvUnit(Layer):
    """conv -> optional BN -> optional relu.

    The conv carries a bias only when explicitly requested or when BN is
    absent and ``bias`` is left at its default.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel=3, stride=1, padding=None,
                 groups: int = 1, has_bn: bool = True, activation: str = "relu",
                 bias: Optional[bool] = None, name: str = ""):
        kh, kw = T._pair(kernel)
        if min(in_ch, out_ch, groups, kh, kw) < 1:
            raise ValueError(f"{name}: channels, kernel and groups must be positive")
        if in_ch % groups or out_ch % groups:
            raise ValueError(f"{name}: groups={groups} must divide in_ch={in_ch} and out_ch={out_ch}")
        if activation not in ("relu", "none"):
            raise ValueError(f"{name}: activation must be relu or none")
        if bias is None:
            bias = not has_bn
        if bias and has_bn:
            raise ValueError(f"{name}: conv bias is folded into BN beta")
        self.name = name
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel = (kh, kw)
        self.stride = T._pair(stride)
        self.padding = T._pair((kh // 2, kw // 2) if padding is None else padding)
        self.groups = groups
        self.has_bn = has_bn
        self.activation = activation
        fan_in = (in_ch // groups) * kh * kw
        self.weight = Parameter(f"{name}.weight", (out_ch, in_ch // groups, kh, kw), "he", fan_in)
        self.bias = Parameter(f"{name}.bias", (out_ch,), "zeros") if bias else None
        if has_bn:
            self.gamma = Parameter(f"{name}.bn.gamma", (out_ch,), "ones")
            self.beta = Parameter(f"{name}.bn.beta", (out_ch,), "zeros")
            self.stats = RunningStats.create(out_ch)

    def own_params(self):
        ps = [self.weight]
        if self.bias is not None:
            ps.append(self.bias)
        if self.has_bn:
            ps += [self.gamma, self.beta]
        return ps

    def buffers(self):
        if not self.has_bn:
            return []
        return [(f"{self.name}.bn.running_mean", self.stats.mean),
                (f"{self.name}.bn.running_var", self.stats.var)]

    def output_shape(self, in_shape):
        c, h, w = in_shape
        _check_channels(self, self.in_ch, c)
        ho = T.conv_output_size(h, self.kernel[0], self.stride[0], self.padding[0])
        wo = T.conv_output_size(w, self.kernel[1], self.stride[1], self.padding[1])
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: spatial size {h}x{w} too small for kernel {self.kernel}")
        return (self.out_ch, ho, wo)

    def macs(self, in_shape):
        _, ho, wo = self.output_shape(in_shape)
        kh, kw = self.kernel
        return kh * kw * (self.in_ch // self.groups) * self.out_ch * ho * wo

    def forward(self, x, ctx):
        y = T.conv2d(x, ctx.p(self.weight), ctx.p(self.bias) if self.bias is not None else None,
                     self.stride, self.padding, self.groups)
        if self.has_bn:
            y = T.batchnorm(y, ctx.p(self.gamma), ctx.p(self.beta), self.stats, train=ctx.train)
        if self.activation == "relu":
            y = T.relu(y)
        return y


class _Sequence(Layer):
    units: list

    def children(self):
        return list(self.units)

    def _chain_shapes(self, units, in_shape):
        shape = in_shape
        for u in units:
            shape = u.output_shape(shape)
        return shape

    def _chain_macs(self, units, in_shape):
        total, shape = 0, in_shape
        for u in units:
            total += u.macs(shape)
            shape = u.output_shape(shape)
        return total


class ResidualBlock(_Sequence):
    """Bottleneck residual block: 1x1 -> 3x3 -> 1x1 plus shortcut, relu after the sum.

    ``stride_on`` places the block's stride on the 3x3 conv (default) or on
    the first 1x1 conv as in the original bottleneck design.
    """

    def __init__(self, in_ch: int, mid_ch: int, out_ch: int, stride: int = 1,
                 stride_on: str = "3x3", name: str = ""):
        if stride_on not in ("3x3", "1x1"):
            raise ValueError(f"{name}: stride_on must be 3x3 or 1x1")
        self.name = name
        self.in_ch, self.mid_ch, self.out_ch = in_ch, mid_ch, out_ch
        self.stride = int(stride)
        self.stride_on = stride_on
        s1 = self.stride if stride_on == "1x1" else 1
        s3 = self.stride if stride_on == "3x3" else 1
        self.reduce = ConvUnit(in_ch, mid_ch, 1, s1, name=f"{name}.conv1")
        self.spatial = ConvUnit(mid_ch, mid_ch, 3, s3, 1, name=f"{name}.conv2")
        self.expand = ConvUnit(mid_ch, out_ch, 1, activation="none", name=f"{name}.conv3")
        self.units = [self.reduce, self.spatial, self.expand]
        self.projection_shortcut = not (in_ch == out_ch and self.stride == 1)
        self.shortcut = (ConvUnit(in_ch, out_ch, 1, self.stride, activation="none",
                                  name=f"{name}.shortcut")
                         if self.projection_shortcut else None)

    def children(self):
        return self.units + ([self.shortcut] if self.shortcut is not None else [])

    def output_shape(self, in_shape):
        _check_channels(self, self.in_ch, in_shape[0])
        out = self._chain_shapes(self.units, in_shape)
        if self.shortcut is not None and self.shortcut.output_shape(in_shape) != out:
            raise ShapeError(f"{self.name}: shortcut and branch shapes differ")
        return out

    def macs(self, in_shape):
        total = self._chain_macs(self.units, in_shape)
        if self.shortcut is not None:
            total += self.shortcut.macs(in_shape)
        return total

    def forward(self, x, ctx):
        _check_channels(self, self.in_ch, x.shape[1])
        y = x
        for u in self.units:
            y = u.forward(y, ctx)
        sc = self.shortcut.forward(x, ctx) if self.shortcut is not None else x
        return T.relu(T.add(y, sc))


class PEPEBlock(_Sequence):
    """Projection-expansion-projection-expansion block.

    1x1 projection, 1x1 expansion, depthwise conv (carries the stride),
    1x1 projection, 1x1 expansion. BN+relu after each stage except the last,
    which is BN only. Identity shortcut when input and output shapes agree.
    """

    def __init__(self, in_ch: int, proj1_ch: int, exp1_ch: int, proj2_ch: int, out_ch: int,
                 dw_kernel=3, stride: int = 1, name: str = ""):
        if not proj1_ch < in_ch:
            raise ValueError(f"{name}: first projection must reduce channels ({proj1_ch} >= {in_ch})")
        if not proj2_ch < exp1_ch:
            raise ValueError(f"{name}: second projection must reduce channels "
                             f"({proj2_ch} >= {exp1_ch})")
        self.name = name
        self.in_ch, self.proj1_ch, self.exp1_ch = in_ch, proj1_ch, exp1_ch
        self.proj2_ch, self.out_ch = proj2_ch, out_ch
        self.dw_kernel = T._pair(dw_kernel)
        self.stride = int(stride)
        self.units = [
            ConvUnit(in_ch, proj1_ch, 1, name=f"{name}.proj1"),
            ConvUnit(proj1_ch, exp1_ch, 1, name=f"{name}.exp1"),
            ConvUnit(exp1_ch, exp1_ch, self.dw_kernel, self.stride, groups=exp1_ch,
                     name=f"{name}.dw"),
            ConvUnit(exp1_ch, proj2_ch, 1, name=f"{name}.proj2"),
            ConvUnit(proj2_ch, out_ch, 1, activation="none", name=f"{name}.exp2"),
        ]
        self.shortcut = in_ch == out_ch and self.stride == 1

    @property
    def depthwise(self) -> ConvUnit:
        return self.units[2]

    def output_shape(self, in_shape):
        _check_channels(self, self.in_ch, in_shape[0])
        return self._chain_shapes(self.units, in_shape)

    def macs(self, in_shape):
        return self._chain_macs(self.units, in_shape)

    def forward(self, x, ctx):
        _check_channels(self, self.in_ch, x.shape[1])
        y = x
        for u in self.units:
            y = u.forward(y, ctx)
        return T.add(y, x) if self.shortcut else y


class VisualAttentionCondenser(_Sequence):
    """Self-attention through a condensed embedding.

    ``A = sigmoid(upmix(upsample(embed(maxpool(downmix(x))))))`` and
    ``y = x * A * s + x`` with a per-channel scale ``s`` starting at 1.
    """

    def __init__(self, in_ch: int, down_ch: int, embed_ch: int, up_ch: Optional[int] = None,
                 pool_window=2, name: str = ""):
        up_ch = in_ch if up_ch is None else up_ch
        if up_ch != in_ch:
            raise ShapeError(f"{name}: up-mixing channels {up_ch} must equal input channels {in_ch}")
        self.name = name
        self.in_ch, self.down_ch, self.embed_ch, self.up_ch = in_ch, down_ch, embed_ch, up_ch
        self.pool_window = T._pair(pool_window)
        self.down = ConvUnit(in_ch, down_ch, 1, has_bn=False, activation="none", bias=False,
                             name=f"{name}.down")
        self.embed = ConvUnit(down_ch, embed_ch, 3, 1, 1, name=f"{name}.embed")
        self.up = ConvUnit(embed_ch, up_ch, 1, has_bn=False, activation="none", bias=False,
                           name=f"{name}.up")
        self.units = [self.down, self.embed, self.up]
        self.scale = Parameter(f"{name}.scale", (in_ch,), "ones")

    def own_params(self):
        return [self.scale]

    def _pooled(self, h, w):
        kh, kw = self.pool_window
        if h < kh or w < kw:
            raise ShapeError(f"{self.name}: spatial size {h}x{w} below pool window {kh}x{kw}")
        return (T.pool_output_size(h, kh, kh, 0, True), T.pool_output_size(w, kw, kw, 0, True))

    def output_shape(self, in_shape):
        c, h, w = in_shape
        _check_channels(self, self.in_ch, c)
        self._pooled(h, w)
        return (c, h, w)

    def macs(self, in_shape):
        c, h, w = in_shape
        ph, pw = self._pooled(h, w)
        return (self.down.macs(in_shape) + self.embed.macs((self.down_ch, ph, pw))
                + self.up.macs((self.embed_ch, h, w)))

    def forward(self, x, ctx):
        _check_channels(self, self.in_ch, x.shape[1])
        h, w = x.shape[2:]
        d = self.down.forward(x, ctx)
        p = T.pool2d(d, "max", self.pool_window, self.pool_window, 0, ceil_mode=True)
        e = self.embed.forward(p, ctx)
        u = T.upsample_nearest(e, (h, w))
        a = T.sigmoid(self.up.forward(u, ctx))
        return T.add(T.channel_scale(T.mul(x, a), ctx.p(self.scale)), x)


class PoolLayer(Layer):
    def __init__(self, kind: str = "max", window=2, stride=None, padding=0,
                 ceil_mode: bool = False, name: str = ""):
        if kind not in ("max", "avg", "global_avg"):
            raise ValueError(f"{name}: unknown pool kind {kind!r}")
        self.name = name
        self.kind = kind
        self.window = T._pair(window)
        self.stride = T._pair(stride if stride is not None else window)
        self.padding = T._pair(padding)
        self.ceil_mode = ceil_mode

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if self.kind == "global_avg":
            return (c, 1, 1)
        (kh, kw), (sh, sw), (ph, pw) = self.window, self.stride, self.padding
        if not self.ceil_mode and (kh > h + 2 * ph or kw > w + 2 * pw):
            raise ShapeError(f"{self.name}: window {kh}x{kw} larger than input {h}x{w}")
        ho = T.pool_output_size(h, kh, sh, ph, self.ceil_mode)
        wo = T.pool_output_size(w, kw, sw, pw, self.ceil_mode)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: window {kh}x{kw} larger than input {h}x{w}")
        return (c, ho, wo)

    def macs(self, in_shape):
        self.output_shape(in_shape)
        return 0

    def forward(self, x, ctx):
        return T.pool2d(x, self.kind, self.window, self.stride, self.padding, self.ceil_mode)


class ClassifierHead(Layer):
    """Global average pooling followed by a dense layer with bias."""

    def __init__(self, in_ch: int, num_classes: int = 2, name: str = "head"):
        if in_ch < 1 or num_classes < 1:
            raise ValueError("head: channels and classes must be positive")
        self.name = name
        self.in_ch, self.num_classes = in_ch, num_classes
        self.weight = Parameter(f"{name}.weight", (in_ch, num_classes), "he", in_ch)
        self.bias = Parameter(f"{name}.bias", (num_classes,), "zeros")

    def own_params(self):
        return [self.weight, self.bias]

    def output_shape(self, in_shape):
        _check_channels(self, self.in_ch, in_shape[0])
        return (self.num_classes,)

    def macs(self, in_shape):
        self.output_shape(in_shape)
        return self.in_ch * self.num_classes

    def forward(self, x, ctx):
        _check_channels(self, self.in_ch, x.shape[1])
        g = T.flatten(T.pool2d(x, "global_avg"))
        return T.dense(g, ctx.p(self.weight), ctx.p(self.bias))


def layer_param_count(layer: Layer) -> int:
    """Learnable scalars of ``layer`` (BN running statistics excluded)."""
    return sum(p.size for p in layer.params())


def layer_grad_check(layer: Layer, x: np.ndarray, seed: int = 0, train: bool = True,
                     epsilon: float = 1e-5) -> T.GradCheckReport:
    """Finite-difference check of ``layer`` w.r.t. its input and every parameter.

    The objective is ``sum(layer(x) * r)`` for a fixed random ``r`` so that
    gradients are O(1) everywhere. Parameters initialised to constants (BN
    gamma/beta, scales) are jittered for the check: with beta exactly 0 a dead
    channel puts ReLU inputs exactly on the kink, where the finite difference
    sees half the slope.
    """
    rng = np.random.default_rng(seed)
    params = layer.params()
    if any(p.data is None for p in params):
        layer.init_params(rng, np.float64)
    values = [np.asarray(x, dtype=np.float64)]
    for p in params:
        v = p.data.astype(np.float64)
        if p.init in ("ones", "zeros"):
            v = v + 0.1 * rng.standard_normal(v.shape)
        values.append(v)
    out_shape = layer.forward(Tensor(values[0]), Context(
        train=train, bindings={id(p): Tensor(v) for p, v in zip(params, values[1:])})).shape
    r = rng.standard_normal(out_shape)

    def builder(xt, *pts):
        ctx = Context(train=train, bindings={id(p): t for p, t in zip(params, pts)})
        y = layer.forward(xt, ctx)
        return T.sum_all(T.mul(y, Tensor(r)))

    return T.grad_check(builder, values, epsilon, op_name=type(layer).__name__, seed=seed)
