"""Dense tensors with an explicit reverse-mode tape.

A :class:`Tape` is created per forward pass. Leaves are registered with
:meth:`Tape.watch` (or :meth:`Tape.param` for layer parameters); every op
applied to a taped tensor appends a node holding the closure that maps the
output gradient to input gradients. :func:`backward` walks the nodes once in
reverse append order. Ops on untaped tensors record nothing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible with an op."""


class TapeError(RuntimeError):
    """Misuse of the tape (foreign tensor, non-scalar loss)."""


class Tensor:
    """N-dimensional float array, optionally linked to a tape."""

    __slots__ = ("data", "tape", "grad_id")

    def __init__(self, data, dtype=None, tape: Optional["Tape"] = None,
                 grad_id: Optional[int] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.tape = tape
        self.grad_id = grad_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        taped = f", grad_id={self.grad_id}" if self.grad_id is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{taped})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


@dataclass
class Node:
    op: str
    inputs: tuple
    out_id: int
    backward_fn: Callable


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    _next_id: int = 0
    _params: dict = field(default_factory=dict)
    _leaves: list = field(default_factory=list)

    def _new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def watch(self, value) -> Tensor:
        """Register ``value`` as a differentiable leaf and return its taped tensor."""
        data = value.data if isinstance(value, Tensor) else value
        t = Tensor(data, tape=self, grad_id=self._new_id())
        self._leaves.append(t)
        return t

    def param(self, p) -> Tensor:
        """Taped leaf for a :class:`scanet.layers.Parameter`, one per tape."""
        t = self._params.get(id(p))
        if t is None:
            t = self.watch(p.data)
            self._params[id(p)] = t
        return t

    def grad_id_of(self, p) -> Optional[int]:
        t = self._params.get(id(p))
        return None if t is None else t.grad_id

    @property
    def leaves(self) -> list:
        return list(self._leaves)

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray,
               backward_fn: Callable) -> Tensor:
        t = Tensor(out, tape=self, grad_id=self._new_id())
        self.nodes.append(Node(op, tuple(inputs), t.grad_id, backward_fn))
        return t


class Gradients(dict):
    """``grad_id -> ndarray`` map that also accepts tensors as keys."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.grad_id
        return dict.__getitem__(self, key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.grad_id
        return dict.__contains__(self, key)


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError("operands belong to different tapes")
            tape = t.tape
    return tape


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(op, inputs, out, backward_fn)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor, tape: Tape) -> Gradients:
    """Reverse-mode accumulation from a scalar ``loss``.

    Returns gradients for every leaf watched on ``tape``; leaves the loss
    does not depend on get exact zeros.
    """
    if loss.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.tape is not tape or loss.grad_id is None:
        raise TapeError("loss is not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.grad_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or t.grad_id is None or t.tape is not tape:
                continue
            if t.grad_id in grads:
                grads[t.grad_id] = grads[t.grad_id] + gi
            else:
                grads[t.grad_id] = gi
    out = Gradients()
    for leaf in tape.leaves:
        g = grads.get(leaf.grad_id)
        out[leaf.grad_id] = np.zeros_like(leaf.data) if g is None else g.reshape(leaf.shape)
    return out


# --------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, k: float) -> Tensor:
    a = _as_tensor(a)
    k = float(k)
    return _emit("scale", (a,), a.data * a.data.dtype.type(k), lambda g: (g * k,))


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """``x[n, c, ...] * s[c]``."""
    if s.ndim != 1 or x.ndim < 2 or x.shape[1] != s.shape[0]:
        raise ShapeError(f"channel_scale: channels {x.shape} vs scale {s.shape}")
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    sd = s.data.reshape(bshape)
    xd = x.data
    axes = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        return g * sd, (g * xd).sum(axis=axes)

    return _emit("channel_scale", (x, s), xd * sd, bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, x.data.dtype.type(0))
    return _emit("relu", (x,), out, lambda g: (g * (out > 0),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1 - y),))


def elementwise(kind: str, *operands, k: float = 1.0) -> Tensor:
    """Dispatch by name: ``relu``, ``sigmoid``, ``add``, ``mul``, ``scale``."""
    if kind == "relu":
        return relu(*operands)
    if kind == "sigmoid":
        return sigmoid(*operands)
    if kind == "add":
        return add(*operands)
    if kind == "mul":
        return mul(*operands)
    if kind == "scale":
        return scale(operands[0], k)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# --------------------------------------------------------------------------
# reductions and reshapes


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype).reshape(1),
                 lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# --------------------------------------------------------------------------
# dense and convolution


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` with ``x: [N, F]``, ``w: [F, O]``, ``b: [O]``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} does not match outputs {w.shape[1]}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def bw(g):
        gx, gw = g @ wd.T, xd.T @ g
        return (gx, gw) if b is None else (gx, gw, g.sum(axis=0))

    return _emit("dense", (x, w) if b is None else (x, w, b), out, bw)


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0,
           groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding and channel groups."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be [N,C,H,W], got {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weight must be [Cout,Cin/groups,Kh,Kw], got {w.shape}")
    if sh < 1 or sw < 1 or ph < 0 or pw < 0 or groups < 1:
        raise ValueError("conv2d: stride and groups must be positive, padding nonnegative")
    n, cin, h, wd_ = x.shape
    cout, cg, kh, kw = w.shape
    if cin % groups:
        raise ShapeError(f"conv2d: input channels {cin} not divisible by groups={groups}")
    if cout % groups:
        raise ShapeError(f"conv2d: output channels {cout} not divisible by groups={groups}")
    if cg != cin // groups:
        raise ShapeError(f"conv2d: input channels {cin} (groups={groups}) need weight dim 1 "
                         f"= {cin // groups}, got {cg}")
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(wd_, kw, sw, pw)
    if ho < 1:
        raise ShapeError(f"conv2d: height {h} too small for kernel {kh} with padding {ph}")
    if wo < 1:
        raise ShapeError(f"conv2d: width {wd_} too small for kernel {kw} with padding {pw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match Cout={cout}")
    dtype = np.result_type(x.dtype, w.dtype)
    xp = np.pad(x.data.astype(dtype, copy=False), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    xp = np.ascontiguousarray(xp)
    wdat = np.ascontiguousarray(w.data.astype(dtype, copy=False))
    out = kernels.active.conv_forward(xp, wdat, sh, sw, groups, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    hp, wp = xp.shape[2:]

    def bw(g):
        g = np.ascontiguousarray(g, dtype=dtype)
        dxp = kernels.active.conv_backward_input(g, wdat, sh, sw, groups, hp, wp)
        dx = dxp[:, :, ph:ph + h, pw:pw + wd_]
        dw = kernels.active.conv_backward_weight(xp, g, cg, kh, kw, sh, sw, groups)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if bias is None else (x, w, bias)
    return _emit("conv2d", inputs, out, bw)


# --------------------------------------------------------------------------
# pooling and resampling


def pool_output_size(size: int, window: int, stride: int, pad: int, ceil_mode: bool) -> int:
    span = size + 2 * pad - window
    if span < 0:
        return 0
    if not ceil_mode:
        return span // stride + 1
    out = -(-span // stride) + 1
    # last window has to start inside the input or left padding
    if (out - 1) * stride >= size + pad:
        out -= 1
    return out


def pool2d(x: Tensor, kind: str = "max", window=2, stride=None, padding=0,
           ceil_mode: bool = False) -> Tensor:
    """Max, average or global-average pooling over ``[N, C, H, W]``.

    Max pooling ignores padded cells; average pooling divides by the number
    of in-bounds cells of each window.
    """
    if x.ndim != 4:
        raise ShapeError(f"pool2d: input must be [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if kind == "global_avg":
        area = h * w
        return _emit("global_avg_pool", (x,), x.data.mean(axis=(2, 3), keepdims=True),
                     lambda g: (np.broadcast_to(g / area, x.shape).copy(),))
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pool kind {kind!r}")
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else (kh, kw))
    ph, pw = _pair(padding)
    if not ceil_mode and (kh > h + 2 * ph or kw > w + 2 * pw):
        raise ShapeError(f"pool2d: window {(kh, kw)} larger than input {(h, w)}")
    ho = pool_output_size(h, kh, sh, ph, ceil_mode)
    wo = pool_output_size(w, kw, sw, pw, ceil_mode)
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool2d: window {(kh, kw)} larger than input {(h, w)}")
    hp = max((ho - 1) * sh + kh, h + 2 * ph)
    wp = max((wo - 1) * sw + kw, w + 2 * pw)
    fill = -np.inf if kind == "max" else 0.0
    xp = np.full((n, c, hp, wp), fill, dtype=x.dtype)
    xp[:, :, ph:ph + h, pw:pw + w] = x.data
    if kind == "max":
        out, arg = kernels.active.maxpool_forward(xp, kh, kw, sh, sw, ho, wo)

        def bw(g):
            dxp = kernels.active.maxpool_backward(np.ascontiguousarray(g), arg, hp, wp)
            return (dxp[:, :, ph:ph + h, pw:pw + w],)
    else:
        valid = np.zeros((1, 1, hp, wp), dtype=np.float64)
        valid[:, :, ph:ph + h, pw:pw + w] = 1.0
        counts = kernels.numpy_.avgpool_forward(valid, kh, kw, sh, sw, ho, wo, 1.0)[0, 0]
        counts = np.ascontiguousarray(counts.astype(x.dtype))
        out = kernels.active.avgpool_forward(xp, kh, kw, sh, sw, ho, wo, counts)

        def bw(g):
            dxp = kernels.active.avgpool_backward(np.ascontiguousarray(g), kh, kw, sh, sw,
                                                  hp, wp, counts)
            return (dxp[:, :, ph:ph + h, pw:pw + w],)

    return _emit(f"{kind}_pool", (x,), out, bw)


def nearest_indices(src: int, dst: int) -> np.ndarray:
    return np.minimum((np.arange(dst) * src) // dst, src - 1)


def upsample_nearest(x: Tensor, target) -> Tensor:
    """Nearest-neighbour resize of ``[N, C, h, w]`` up to ``target``."""
    th, tw = _pair(target)
    n, c, h, w = x.shape
    if th < h or tw < w:
        raise ShapeError(f"upsample_nearest: target {(th, tw)} smaller than input {(h, w)}")
    if (th, tw) == (h, w):
        return _emit("upsample_nearest", (x,), x.data.copy(), lambda g: (g,))
    iy = nearest_indices(h, th)
    ix = nearest_indices(w, tw)
    out = x.data[:, :, iy][:, :, :, ix]

    def bw(g):
        rows = np.zeros((n, c, h, tw), dtype=g.dtype)
        np.add.at(rows, (slice(None), slice(None), iy), g)
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(dx, (slice(None), slice(None), slice(None), ix), rows)
        return (dx,)

    return _emit("upsample_nearest", (x,), out, bw)


# --------------------------------------------------------------------------
# normalization and loss


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.1) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
              train: bool = True, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization of ``[N, C, H, W]``.

    In training mode the batch statistics normalize the input and the running
    statistics move by ``stats.momentum`` towards them (biased variance).
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    xd = x.data
    gd = gamma.data.reshape(1, -1, 1, 1)
    bd = beta.data.reshape(1, -1, 1, 1)
    axes = (0, 2, 3)
    if train:
        mu = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        m = stats.momentum
        stats.mean[...] = (1 - m) * stats.mean + m * mu.reshape(-1)
        stats.var[...] = (1 - m) * stats.var + m * var.reshape(-1)
    else:
        mu = stats.mean.reshape(1, -1, 1, 1).astype(xd.dtype)
        var = stats.var.reshape(1, -1, 1, 1).astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype, copy=False)
    xhat = (xd - mu) * inv
    out = xhat * gd
    out += bd
    count = xd.size // xd.shape[1]

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        if train:
            # dgamma and dbeta already hold the two reductions needed here
            gs = (gd * inv / count).reshape(1, -1, 1, 1)
            dx = g * count
            dx -= dbeta.reshape(1, -1, 1, 1)
            dx -= xhat * dgamma.reshape(1, -1, 1, 1)
            dx *= gs
        else:
            dx = g * gd * inv
        return dx, dgamma, dbeta

    return _emit("batchnorm", (x, gamma, beta), out, bw)


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [N,K], got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    probs = np.exp(logp)
    loss = -logp[np.arange(n), labels].mean()
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1

    def bw(g):
        return (g.reshape(()) * (probs - onehot) / n,)

    out = _emit("softmax_cross_entropy", (logits,),
                np.asarray(loss, dtype=z.dtype).reshape(1), bw)
    return out, probs


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    per_input_errors: list
    epsilon: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def rel_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(builder: Callable, inputs: Sequence, epsilon: float = 1e-5,
               op_name: str = "", samples: int = 64, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``builder`` with central differences.

    ``builder(*tensors)`` must return a scalar tensor. It is called once with
    tensors watched on a fresh tape for the analytic pass, then repeatedly with
    untaped perturbed copies. Up to ``samples`` coordinates per input are
    checked (all of them for smaller inputs).
    """
    arrays = []
    for x in inputs:
        a = np.array(x.data if isinstance(x, Tensor) else x)
        if a.dtype != np.float64:
            raise TypeError(f"grad_check requires 64-bit inputs, got {a.dtype}")
        arrays.append(a)
    tape = Tape()
    leaves = [tape.watch(a) for a in arrays]
    out = builder(*leaves)
    if out.size != 1:
        raise TapeError(f"grad_check: objective must be scalar, got shape {out.shape}")
    grads = backward(out, tape)

    def f(vals):
        r = builder(*[Tensor(v) for v in vals])
        return float(r.data.reshape(-1)[0])

    rng = np.random.default_rng(seed)
    errors = []
    for i, a in enumerate(arrays):
        analytic = grads[leaves[i]].reshape(-1)
        if a.size <= samples:
            coords = np.arange(a.size)
        else:
            coords = rng.choice(a.size, size=samples, replace=False)
        worst = 0.0
        for idx in coords:
            vals = [v.copy() for v in arrays]
            flat = vals[i].reshape(-1)
            flat[idx] = a.reshape(-1)[idx] + epsilon
            fp = f(vals)
            flat[idx] = a.reshape(-1)[idx] - epsilon
            fm = f(vals)
            num = (fp - fm) / (2 * epsilon)
            worst = max(worst, float(rel_error(analytic[idx], num)))
        errors.append(worst)
    return GradCheckReport(op_name, max(errors) if errors else 0.0, errors, epsilon)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
