"""Differentiable ops over arrays and :class:`~superscan.autodiff.Variable`.

Each op computes its forward value with numpy (see :mod:`superscan.tensor`)
and, when some input requires a gradient, records a closure mapping the
output gradient to input gradients. With no tracked inputs the plain array
is returned.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from . import tensor as T
from .autodiff import make, needs_grad, value, straight_through  # noqa: F401  (re-export)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _shape(x):
    return np.shape(value(x))


# -- arithmetic ----------------------------------------------------------------

def add(a, b):
    av, bv = value(a), value(b)
    sa, sb = _shape(a), _shape(b)
    return make("add", av + bv, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = value(a), value(b)
    sa, sb = _shape(a), _shape(b)
    return make("sub", av - bv, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    av, bv = value(a), value(b)
    sa, sb = _shape(a), _shape(b)
    na, nb = needs_grad(a), needs_grad(b)
    return make("mul", av * bv, (a, b),
                lambda g: (_unbroadcast(g * bv, sa) if na else None,
                           _unbroadcast(g * av, sb) if nb else None))


def div(a, b):
    av, bv = value(a), value(b)
    sa, sb = _shape(a), _shape(b)
    out = av / bv
    na, nb = needs_grad(a), needs_grad(b)
    return make("div", out, (a, b),
                lambda g: (_unbroadcast(g / bv, sa) if na else None,
                           _unbroadcast(-g * out / bv, sb) if nb else None))


def neg(a):
    return make("neg", -value(a), (a,), lambda g: (-g,))


def square(a):
    av = value(a)
    return make("square", av * av, (a,), lambda g: (2 * g * av,))


def exp(a):
    out = np.exp(value(a))
    return make("exp", out, (a,), lambda g: (g * out,))


def expm1(a):
    av = value(a)
    out = np.expm1(av)
    return make("expm1", out, (a,), lambda g: (g * np.exp(av),))


def log(a):
    av = value(a)
    return make("log", np.log(av), (a,), lambda g: (g / av,))


def abs(a):  # noqa: A001
    av = value(a)
    return make("abs", np.abs(av), (a,), lambda g: (g * np.sign(av),))


def clamp_min(a, lo: float):
    av = value(a)
    keep = av >= lo
    return make("clamp_min", np.where(keep, av, lo).astype(av.dtype), (a,),
                lambda g: (g * keep,))


def where(cond, a, b):
    cond = np.asarray(cond)
    av, bv = value(a), value(b)
    sa, sb = _shape(a), _shape(b)
    out = np.where(cond, av, bv)
    return make("where", out, (a, b),
                lambda g: (_unbroadcast(np.where(cond, g, 0), sa),
                           _unbroadcast(np.where(cond, 0, g), sb)))


# -- activations -----------------------------------------------------------------

def sigmoid(a):
    out = T.sigmoid(value(a))
    return make("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def silu(a):
    av = value(a)
    s = T.sigmoid(av)
    return make("silu", av * s, (a,), lambda g: (g * (s + av * s * (1 - s)),))


def softplus(a):
    av = value(a)
    return make("softplus", T.softplus(av), (a,), lambda g: (g * T.sigmoid(av),))


def relu(a):
    av = value(a)
    pos = av > 0
    return make("relu", np.where(pos, av, 0).astype(av.dtype), (a,), lambda g: (g * pos,))


def activation(kind: str, a):
    fn = {"silu": silu, "sigmoid": sigmoid, "softplus": softplus, "relu": relu}.get(kind)
    if fn is None:
        raise ValueError(f"unknown activation {kind!r}")
    return fn(a)


def softmax(a, axis=-1):
    out = T.softmax(value(a), axis)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return make("softmax", out, (a,), bw)


def layer_norm(x, gamma, beta, eps=1e-6):
    xv, gv, bv = value(x), value(gamma), value(beta)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gv + bv

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gv
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return make("layer_norm", out, (x, gamma, beta), bw)


# -- reductions and shapes ---------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001
    av = value(a)
    shape = av.shape
    out = np.asarray(av.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)
    return make("sum", out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    av = value(a)
    n = av.size if axis is None else int(np.prod([av.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis, keepdims), np.asarray(1.0 / n, dtype=av.dtype))


def reshape(a, shape):
    av = value(a)
    old = av.shape
    return make("reshape", av.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    av = value(a)
    axes = tuple(range(av.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make("transpose", av.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None
               for p in parts)


def getitem(a, idx):
    av = value(a)
    out = av[idx]
    basic = _basic_index(idx)

    def bw(g):
        full = np.zeros_like(av)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return make("getitem", np.array(out, copy=True), (a,), bw)


def split(a, sections: int, axis: int):
    n = _shape(a)[axis]
    if n % sections:
        raise ValueError(f"axis {axis} ({n}) not divisible into {sections} parts")
    step = n // sections
    outs = []
    for k in range(sections):
        sl = [slice(None)] * len(_shape(a))
        sl[axis] = slice(k * step, (k + 1) * step)
        outs.append(getitem(a, tuple(sl)))
    return outs


def concat(xs, axis=0):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return make("concat", out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(a, idx):
    """Gather rows: ``out[...] = a[idx[...]]`` along axis 0."""
    av = value(a)
    idx = np.asarray(idx)
    out = av[idx]

    def bw(g):
        full = np.zeros_like(av)
        np.add.at(full, idx.reshape(-1), g.reshape((-1,) + av.shape[1:]))
        return (full,)
    return make("take", out, (a,), bw)


def index_add(n: int, idx, vals):
    """``out[idx[k]] += vals[k]`` into ``n`` zero rows (fixed accumulation order)."""
    vv = value(vals)
    idx = np.asarray(idx).reshape(-1)
    out = np.zeros((n,) + vv.shape[1:], dtype=vv.dtype)
    np.add.at(out, idx, vv)
    return make("index_add", out, (vals,), lambda g: (g[idx],))


def roll2d(a, sh: int, sw: int):
    av = value(a)
    out = np.roll(av, (sh, sw), axis=(-2, -1))
    return make("roll", out, (a,), lambda g: (np.roll(g, (-sh, -sw), axis=(-2, -1)),))


def pad_reflect(a, ph: tuple[int, int], pw: tuple[int, int]):
    """Reflect-pad the last two axes by (before, after) amounts."""
    av = value(a)
    H, W = av.shape[-2:]
    ri = T.reflect_index(H, *ph)
    ci = T.reflect_index(W, *pw)
    out = av[..., ri, :][..., ci]

    def bw(g):
        gr = np.zeros((H,) + g.shape[:-2] + (g.shape[-1],), dtype=g.dtype)
        np.add.at(gr, ri, np.moveaxis(g, -2, 0))
        gr = np.moveaxis(gr, 0, -2)
        gx = np.zeros((W,) + gr.shape[:-1], dtype=g.dtype)
        np.add.at(gx, ci, np.moveaxis(gr, -1, 0))
        return (np.moveaxis(gx, 0, -1),)
    return make("pad_reflect", out, (a,), bw)


def crop2d(a, H: int, W: int):
    return getitem(a, (..., slice(0, H), slice(0, W)))


# -- linear algebra ----------------------------------------------------------------

def matmul(a, b):
    av, bv = value(a), value(b)
    sa, sb = av.shape, bv.shape
    out = av @ bv

    na, nb = needs_grad(a), needs_grad(b)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), sa) if na else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, sb) if nb else None
        return ga, gb
    return make("matmul", out, (a, b), bw)


def linear(x, w, b=None):
    """Affine map along the last axis, ``x @ w.T + b`` with ``w`` shaped [out, in]."""
    xv, wv = value(x), value(w)
    if xv.shape[-1] != wv.shape[1]:
        raise ValueError(f"linear: input last axis {xv.shape[-1]} != weight axis 1 {wv.shape[1]}")
    x2 = xv.reshape(-1, xv.shape[-1])
    out = (x2 @ wv.T).reshape(xv.shape[:-1] + (wv.shape[0],))
    if b is not None:
        out = out + value(b)

    nx, nw = needs_grad(x), needs_grad(w)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wv).reshape(xv.shape) if nx else None
        gw = g2.T @ x2 if nw else None
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb
    return make("linear", out, (x, w, b), bw)


# -- image ops ---------------------------------------------------------------------

def conv2d(x, w, b=None, padding="same", groups=1):
    xv, wv = value(x), value(w)
    T._check_conv(xv, wv, groups)
    O, Cg, kh, kw = wv.shape
    C = xv.shape[1]
    if groups != 1 and not (groups == C and O == C):
        Og = O // groups
        parts = [conv2d(getitem(x, (slice(None), slice(g * Cg, (g + 1) * Cg))),
                        getitem(w, slice(g * Og, (g + 1) * Og)), None, padding)
                 for g in range(groups)]
        out = concat(parts, axis=1)
        return out if b is None else add(out, reshape(b, (1, O, 1, 1)))
    ph, pw = T.conv_padding(wv.shape, padding)
    xp = np.pad(xv, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xv
    B, _, Hp, Wp = xp.shape
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    if groups == 1:
        cols = T.im2col(xp, kh, kw).reshape(-1, C * kh * kw)
        w2 = wv.reshape(O, -1)
        out = (cols @ w2.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    else:
        cols = None
        out = np.zeros((B, C, Ho, Wo), dtype=np.result_type(xv, wv))
        for i in range(kh):
            for j in range(kw):
                out += xp[:, :, i:i + Ho, j:j + Wo] * wv[None, :, 0, i, j, None, None]
    if b is not None:
        out = out + value(b)[None, :, None, None]
    out = np.ascontiguousarray(out)
    nx = needs_grad(x)

    def bw(g):
        if groups == 1:
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
            gw = (g2.T @ cols).reshape(wv.shape)
            if not nx:
                return None, gw, (g.sum(axis=(0, 2, 3)) if b is not None else None)
            gxp = T.col2im((g2 @ w2).reshape(B, Ho, Wo, C * kh * kw), C, Hp, Wp, kh, kw)
        else:
            gw = np.empty_like(wv)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    win = xp[:, :, i:i + Ho, j:j + Wo]
                    gw[:, 0, i, j] = (g * win).sum(axis=(0, 2, 3))
                    gxp[:, :, i:i + Ho, j:j + Wo] += g * wv[None, :, 0, i, j, None, None]
        gx = gxp[:, :, ph:ph + xv.shape[2], pw:pw + xv.shape[3]]
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb
    return make("conv2d", out, (x, w, b), bw)


def avg_pool2d(x, s: int):
    xv = value(x)
    out = T.avg_pool2d(xv, s)
    return make("avg_pool2d", out, (x,), lambda g: (T.upsample_nearest(g, s) / (s * s),))


def upsample_nearest(x, s: int):
    xv = value(x)
    out = T.upsample_nearest(xv, s)
    return make("upsample_nearest", out, (x,), lambda g: (T.avg_pool2d(g, s) * (s * s),))


def pixel_shuffle(x, r: int):
    out = T.pixel_shuffle(value(x), r)
    return make("pixel_shuffle", out, (x,), lambda g: (T.pixel_unshuffle(g, r),))


def pixel_unshuffle(x, r: int):
    out = T.pixel_unshuffle(value(x), r)
    return make("pixel_unshuffle", out, (x,), lambda g: (T.pixel_shuffle(g, r),))


def dft2(x):
    """Forward 2-D DFT as ``(real, imag)``; the gradient uses the adjoint transform."""
    re, im = T.dft2(value(x))
    both = np.stack([re, im])
    z = make("dft2", both, (x,), lambda g: (T.dft2_adjoint(g[0], g[1]),))
    return getitem(z, 0), getitem(z, 1)


# -- scan ------------------------------------------------------------------------

def affine_scan(a, b, method: str = "recurrent", backend: str | None = None):
    """States of ``h[t] = a[t] * h[t-1] + b[t]`` along axis 0, ``h[-1] = 0``."""
    from .ssm import parallel_affine_scan

    av, bv = value(a), value(b)
    if method == "recurrent":
        h = kernels.affine_scan_forward(av, bv, backend)
    elif method == "parallel":
        h = parallel_affine_scan(av, bv)
    else:
        raise ValueError(f"unknown scan method {method!r}")

    def bw(g):
        if method == "recurrent":
            return kernels.affine_scan_backward(av, h, g, backend)
        # reverse-time scan with decays shifted by one step
        a_rev = np.concatenate([np.zeros_like(av[:1]), av[:0:-1]])
        gb = parallel_affine_scan(a_rev, g[::-1])[::-1]
        ga = np.zeros_like(av)
        ga[1:] = gb[1:] * h[:-1]
        return ga, gb
    return make("affine_scan", h, (a, b), bw)
