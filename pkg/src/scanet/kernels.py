"""Hot inner loops: convolution and window pooling.

Every kernel exists twice, a numba version (``*_jit``) and a pure-numpy
version (``*_np``). Both operate on already-padded inputs so that padding,
ceil-mode and shape bookkeeping live in one place (:mod:`scanet.tensor`).
``BACKEND`` names the set the tensor ops dispatch to.

Layouts: activations are ``(N, C, H, W)``, conv weights
``(Cout, Cin // groups, Kh, Kw)``. Pool argmax indices are flat offsets into
one padded ``(Hp, Wp)`` plane.
"""
from types import SimpleNamespace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._jit import JIT_ENABLED, njit

# --------------------------------------------------------------------------
# numba


@njit
def _im2col_jit(xp, b, c0, cg, kh, kw, sh, sw, ho, wo, col):
    r = 0
    for ci in range(cg):
        plane = xp[b, c0 + ci]
        for i in range(kh):
            for j in range(kw):
                for y in range(ho):
                    row = plane[y * sh + i]
                    base = y * wo
                    for x in range(wo):
                        col[r, base + x] = row[x * sw + j]
                r += 1


@njit
def _dw_forward_jit(xp, w, sh, sw, ho, wo):
    n, c = xp.shape[:2]
    kh, kw = w.shape[2:]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    wv = w[ch, 0, i, j]
                    for y in range(ho):
                        for x in range(wo):
                            out[b, ch, y, x] += wv * xp[b, ch, y * sh + i, x * sw + j]
    return out


@njit
def conv_forward_jit(xp, w, sh, sw, groups, ho, wo):
    n = xp.shape[0]
    cout, cg, kh, kw = w.shape
    og = cout // groups
    if cg == 1 and og == 1:
        return _dw_forward_jit(xp, w, sh, sw, ho, wo)
    k = cg * kh * kw
    out = np.empty((n, cout, ho, wo), dtype=xp.dtype)
    col = np.empty((k, ho * wo), dtype=xp.dtype)
    for g in range(groups):
        wg = np.ascontiguousarray(w[g * og:(g + 1) * og]).reshape(og, k)
        for b in range(n):
            _im2col_jit(xp, b, g * cg, cg, kh, kw, sh, sw, ho, wo, col)
            res = np.dot(wg, col)
            out[b, g * og:(g + 1) * og] = res.reshape(og, ho, wo)
    return out


@njit
def conv_backward_input_jit(dout, w, sh, sw, groups, hp, wp):
    n, cout, ho, wo = dout.shape
    _, cg, kh, kw = w.shape
    og = cout // groups
    k = cg * kh * kw
    dxp = np.zeros((n, cg * groups, hp, wp), dtype=dout.dtype)
    if cg == 1 and og == 1:
        for b in range(n):
            for ch in range(cout):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[ch, 0, i, j]
                        for y in range(ho):
                            for x in range(wo):
                                dxp[b, ch, y * sh + i, x * sw + j] += wv * dout[b, ch, y, x]
        return dxp
    for g in range(groups):
        wgt = np.ascontiguousarray(
            np.ascontiguousarray(w[g * og:(g + 1) * og]).reshape(og, k).T)
        for b in range(n):
            d = np.ascontiguousarray(dout[b, g * og:(g + 1) * og]).reshape(og, ho * wo)
            dcol = np.dot(wgt, d)
            r = 0
            for ci in range(cg):
                c = g * cg + ci
                for i in range(kh):
                    for j in range(kw):
                        for y in range(ho):
                            yy = y * sh + i
                            base = y * wo
                            for x in range(wo):
                                dxp[b, c, yy, x * sw + j] += dcol[r, base + x]
                        r += 1
    return dxp


@njit
def conv_backward_weight_jit(xp, dout, cg, kh, kw, sh, sw, groups):
    n, cout, ho, wo = dout.shape
    og = cout // groups
    k = cg * kh * kw
    dw = np.empty((cout, cg, kh, kw), dtype=dout.dtype)
    if cg == 1 and og == 1:
        for ch in range(cout):
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    for b in range(n):
                        for y in range(ho):
                            for x in range(wo):
                                acc += dout[b, ch, y, x] * xp[b, ch, y * sh + i, x * sw + j]
                    dw[ch, 0, i, j] = acc
        return dw
    col = np.empty((k, ho * wo), dtype=xp.dtype)
    for g in range(groups):
        acc = np.zeros((og, k), dtype=dout.dtype)
        for b in range(n):
            _im2col_jit(xp, b, g * cg, cg, kh, kw, sh, sw, ho, wo, col)
            d = np.ascontiguousarray(dout[b, g * og:(g + 1) * og]).reshape(og, ho * wo)
            acc += np.dot(d, np.ascontiguousarray(col.T))
        dw[g * og:(g + 1) * og] = acc.reshape(og, cg, kh, kw)
    return dw


@njit
def maxpool_forward_jit(xp, kh, kw, sh, sw, ho, wo):
    n, c, hp, wp = xp.shape
    out = np.empty((n, c, ho, wo), dtype=xp.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                for x in range(wo):
                    y0 = y * sh
                    x0 = x * sw
                    best = xp[b, ch, y0, x0]
                    bi = y0 * wp + x0
                    for i in range(kh):
                        for j in range(kw):
                            v = xp[b, ch, y0 + i, x0 + j]
                            if v > best:
                                best = v
                                bi = (y0 + i) * wp + x0 + j
                    out[b, ch, y, x] = best
                    arg[b, ch, y, x] = bi
    return out, arg


@njit
def maxpool_backward_jit(dout, arg, hp, wp):
    n, c, ho, wo = dout.shape
    dxp = np.zeros((n, c, hp * wp), dtype=dout.dtype)
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                for x in range(wo):
                    dxp[b, ch, arg[b, ch, y, x]] += dout[b, ch, y, x]
    return dxp.reshape(n, c, hp, wp)


@njit
def avgpool_forward_jit(xp, kh, kw, sh, sw, ho, wo, counts):
    n, c, hp, wp = xp.shape
    out = np.empty((n, c, ho, wo), dtype=xp.dtype)
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                for x in range(wo):
                    s = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            s += xp[b, ch, y * sh + i, x * sw + j]
                    out[b, ch, y, x] = s / counts[y, x]
    return out


@njit
def avgpool_backward_jit(dout, kh, kw, sh, sw, hp, wp, counts):
    n, c, ho, wo = dout.shape
    dxp = np.zeros((n, c, hp, wp), dtype=dout.dtype)
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                for x in range(wo):
                    g = dout[b, ch, y, x] / counts[y, x]
                    for i in range(kh):
                        for j in range(kw):
                            dxp[b, ch, y * sh + i, x * sw + j] += g
    return dxp


# --------------------------------------------------------------------------
# numpy


def _windows(xp, kh, kw, sh, sw, ho, wo):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def conv_forward_np(xp, w, sh, sw, groups, ho, wo):
    n, c = xp.shape[:2]
    cout, cg, kh, kw = w.shape
    og = cout // groups
    win = _windows(xp, kh, kw, sh, sw, ho, wo)  # (N, C, Ho, Wo, Kh, Kw)
    if groups == 1:
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if cg == 1 and og == 1:
        return np.einsum("nchwij,cij->nchw", win, w[:, 0])
    out = np.empty((n, cout, ho, wo), dtype=np.result_type(xp, w))
    for g in range(groups):
        part = np.tensordot(win[:, g * cg:(g + 1) * cg], w[g * og:(g + 1) * og],
                            axes=([1, 4, 5], [1, 2, 3]))
        out[:, g * og:(g + 1) * og] = part.transpose(0, 3, 1, 2)
    return out


def conv_backward_input_np(dout, w, sh, sw, groups, hp, wp):
    n, cout, ho, wo = dout.shape
    _, cg, kh, kw = w.shape
    og = cout // groups
    dxp = np.zeros((n, cg * groups, hp, wp), dtype=dout.dtype)
    if groups == 1:
        dcol = np.tensordot(dout, w, axes=([1], [0]))  # (N, Ho, Wo, Cin, Kh, Kw)
        dcol = dcol.transpose(0, 3, 1, 2, 4, 5)
    elif cg == 1 and og == 1:
        dcol = np.einsum("nchw,cij->nchwij", dout, w[:, 0])
    else:
        dcol = np.empty((n, cg * groups, ho, wo, kh, kw), dtype=dout.dtype)
        for g in range(groups):
            part = np.tensordot(dout[:, g * og:(g + 1) * og], w[g * og:(g + 1) * og],
                                axes=([1], [0]))
            dcol[:, g * cg:(g + 1) * cg] = part.transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + (ho - 1) * sh + 1:sh, j:j + (wo - 1) * sw + 1:sw] += dcol[..., i, j]
    return dxp


def conv_backward_weight_np(xp, dout, cg, kh, kw, sh, sw, groups):
    n, cout, ho, wo = dout.shape
    og = cout // groups
    win = _windows(xp, kh, kw, sh, sw, ho, wo)
    if groups == 1:
        return np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    if cg == 1 and og == 1:
        return np.einsum("nchw,nchwij->cij", dout, win)[:, None]
    dw = np.empty((cout, cg, kh, kw), dtype=dout.dtype)
    for g in range(groups):
        dw[g * og:(g + 1) * og] = np.tensordot(
            dout[:, g * og:(g + 1) * og], win[:, g * cg:(g + 1) * cg],
            axes=([0, 2, 3], [0, 2, 3]))
    return dw


def maxpool_forward_np(xp, kh, kw, sh, sw, ho, wo):
    n, c, hp, wp = xp.shape
    win = _windows(xp, kh, kw, sh, sw, ho, wo).reshape(n, c, ho, wo, kh * kw)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    oy = (np.arange(ho) * sh)[:, None]
    ox = (np.arange(wo) * sw)[None, :]
    arg = (oy + local // kw) * wp + ox + local % kw
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool_backward_np(dout, arg, hp, wp):
    n, c = dout.shape[:2]
    dxp = np.zeros((n * c, hp * wp), dtype=dout.dtype)
    rows = np.repeat(np.arange(n * c), arg[0, 0].size)
    np.add.at(dxp, (rows, arg.reshape(-1)), dout.reshape(-1))
    return dxp.reshape(n, c, hp, wp)


def avgpool_forward_np(xp, kh, kw, sh, sw, ho, wo, counts):
    win = _windows(xp, kh, kw, sh, sw, ho, wo)
    return win.sum(axis=(-2, -1)) / counts


def avgpool_backward_np(dout, kh, kw, sh, sw, hp, wp, counts):
    n, c, ho, wo = dout.shape
    g = dout / counts
    dxp = np.zeros((n, c, hp, wp), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + (ho - 1) * sh + 1:sh, j:j + (wo - 1) * sw + 1:sw] += g
    return dxp


jit = SimpleNamespace(
    conv_forward=conv_forward_jit,
    conv_backward_input=conv_backward_input_jit,
    conv_backward_weight=conv_backward_weight_jit,
    maxpool_forward=maxpool_forward_jit,
    maxpool_backward=maxpool_backward_jit,
    avgpool_forward=avgpool_forward_jit,
    avgpool_backward=avgpool_backward_jit,
)

numpy_ = SimpleNamespace(
    conv_forward=conv_forward_np,
    conv_backward_input=conv_backward_input_np,
    conv_backward_weight=conv_backward_weight_np,
    maxpool_forward=maxpool_forward_np,
    maxpool_backward=maxpool_backward_np,
    avgpool_forward=avgpool_forward_np,
    avgpool_backward=avgpool_backward_np,
)

BACKEND = "numba" if JIT_ENABLED else "numpy"
active = jit if JIT_ENABLED else numpy_
