"""Dense numpy primitives shared by every layer.

Tensors are plain row-major ``numpy.ndarray`` values. The working element
type is process-wide (``float32`` unless ``SUPERSCAN_DTYPE=float64``) and can
be switched temporarily with :func:`precision`. Ops keep the dtype of their
inputs.

Convolution follows the cross-correlation convention: the kernel is not
flipped.
"""
from __future__ import annotations

import contextlib
import math
import os

import numpy as np

_DTYPE = np.dtype(os.environ.get("SUPERSCAN_DTYPE", "float32"))
if _DTYPE not in (np.float32, np.float64):
    raise ValueError(f"SUPERSCAN_DTYPE must be float32 or float64, got {_DTYPE}")


def get_dtype() -> np.dtype:
    return _DTYPE


def set_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported element type {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the working element type."""
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


def asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=_DTYPE)


def _check_nchw(x, name="x"):
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-D [B,C,H,W], got shape {x.shape}")


# -- convolution ---------------------------------------------------------------

def conv_padding(w_shape, padding: str) -> tuple[int, int]:
    kh, kw = w_shape[-2:]
    if padding == "valid":
        return 0, 0
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"same padding needs odd kernel extents, got {kh}x{kw}")
        return kh // 2, kw // 2
    raise ValueError(f"unknown padding {padding!r}")


def _check_conv(x, w, groups):
    _check_nchw(x)
    if w.ndim != 4:
        raise ValueError(f"weight must be 4-D [O,C/groups,kh,kw], got shape {w.shape}")
    C = x.shape[1]
    if groups < 1 or C % groups:
        raise ValueError(f"input channels (axis 1, {C}) not divisible by groups={groups}")
    if w.shape[1] * groups != C:
        raise ValueError(
            f"weight axis 1 ({w.shape[1]}) times groups ({groups}) != input channels ({C})")
    if w.shape[0] % groups:
        raise ValueError(f"output channels (weight axis 0, {w.shape[0]}) not divisible by groups")


def im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """[B,C,Hp,Wp] -> [B,Ho,Wo,C*kh*kw] patches, channel-major inside a patch."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    B, C, Ho, Wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho, Wo, C * kh * kw)


def col2im(cols: np.ndarray, C: int, Hp: int, Wp: int, kh: int, kw: int) -> np.ndarray:
    """Adjoint of :func:`im2col`."""
    B, Ho, Wo, _ = cols.shape
    c = cols.reshape(B, Ho, Wo, C, kh, kw)
    out = np.zeros((B, C, Hp, Wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + Ho, j:j + Wo] += c[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def conv2d(x, w, b=None, padding="same", groups=1) -> np.ndarray:
    """Direct 2-D cross-correlation with zero fill for ``same`` padding."""
    _check_conv(x, w, groups)
    ph, pw = conv_padding(w.shape, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    O, Cg, kh, kw = w.shape
    B, C, Hp, Wp = xp.shape
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    if groups == 1:
        cols = im2col(xp, kh, kw)
        out = (cols.reshape(-1, C * kh * kw) @ w.reshape(O, -1).T).reshape(B, Ho, Wo, O)
        out = out.transpose(0, 3, 1, 2)
    elif groups == C and O == C:
        out = np.zeros((B, C, Ho, Wo), dtype=np.result_type(x, w))
        for i in range(kh):
            for j in range(kw):
                out += xp[:, :, i:i + Ho, j:j + Wo] * w[None, :, 0, i, j, None, None]
    else:
        Og = O // groups
        out = np.concatenate(
            [conv2d(xp[:, g * Cg:(g + 1) * Cg], w[g * Og:(g + 1) * Og], None, "valid")
             for g in range(groups)], axis=1)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out)


# -- resampling ----------------------------------------------------------------

def avg_pool2d(x, s: int) -> np.ndarray:
    _check_nchw(x)
    if s < 1:
        raise ValueError(f"pool factor must be >= 1, got {s}")
    B, C, H, W = x.shape
    if H % s or W % s:
        raise ValueError(f"extents {H}x{W} not divisible by pool factor {s}")
    if s == 1:
        return x.copy()
    blocks = x.reshape(B, C, H // s, s, W // s, s)
    # anchoring on one block entry keeps constant blocks exact for every s
    ref = blocks[:, :, :, :1, :, :1]
    return np.ascontiguousarray((ref + (blocks - ref).mean(axis=(3, 5), keepdims=True))[:, :, :, 0, :, 0])


def upsample_nearest(x, s: int) -> np.ndarray:
    _check_nchw(x)
    if s < 1:
        raise ValueError(f"upsample factor must be >= 1, got {s}")
    if s == 1:
        return x.copy()
    return np.repeat(np.repeat(x, s, axis=2), s, axis=3)


def pixel_shuffle(x, r: int) -> np.ndarray:
    """out[b, c, h*r+i, w*r+j] = x[b, c*r*r + i*r + j, h, w]."""
    _check_nchw(x)
    B, Cr, H, W = x.shape
    if r < 1 or Cr % (r * r):
        raise ValueError(f"channels ({Cr}) not divisible by r^2 = {r * r}")
    C = Cr // (r * r)
    return x.reshape(B, C, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, C, H * r, W * r)


def pixel_unshuffle(x, r: int) -> np.ndarray:
    _check_nchw(x)
    B, C, Hr, Wr = x.shape
    if r < 1 or Hr % r or Wr % r:
        raise ValueError(f"extents {Hr}x{Wr} not divisible by r = {r}")
    H, W = Hr // r, Wr // r
    return x.reshape(B, C, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, C * r * r, H, W)


# -- pointwise -----------------------------------------------------------------

def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(x):
    x = np.asarray(x)
    big = x > 20
    out = np.log1p(np.exp(np.where(big, 0, x)))
    return np.where(big, x, out).astype(np.result_type(x, np.float32), copy=False)


def activation(kind: str, x):
    if kind == "silu":
        return x * sigmoid(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softplus":
        return softplus(x)
    if kind == "relu":
        return np.maximum(x, 0)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x, axis: int = -1):
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x, gamma, beta, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def linear(x, w, b=None):
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear: input last axis {x.shape[-1]} != weight axis 1 {w.shape[1]}")
    y = x @ w.T
    return y + b if b is not None else y


# -- Fourier -------------------------------------------------------------------

_DFT_CACHE: dict[int, np.ndarray] = {}


def dft_matrix(n: int) -> np.ndarray:
    """Complex DFT matrix exp(-2*pi*i*j*k/n) with exact integer angle reduction."""
    m = _DFT_CACHE.get(n)
    if m is None:
        jk = np.outer(np.arange(n), np.arange(n)) % n
        ang = -2.0 * math.pi * jk / n
        m = np.cos(ang) + 1j * np.sin(ang)
        _DFT_CACHE[n] = m
    return m


def dft2(x) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalised forward 2-D DFT over the last two axes, as (real, imag)."""
    H, W = x.shape[-2:]
    z = dft_matrix(H) @ x.astype(np.complex128) @ dft_matrix(W)
    return z.real.astype(x.dtype), z.imag.astype(x.dtype)


def dft2_adjoint(g_re, g_im) -> np.ndarray:
    H, W = g_re.shape[-2:]
    g = g_re.astype(np.complex128) + 1j * g_im
    z = dft_matrix(H).conj() @ g @ dft_matrix(W).conj()
    return z.real.astype(g_re.dtype)


# -- padding -------------------------------------------------------------------

def reflect_index(n: int, before: int, after: int) -> np.ndarray:
    """Source indices for reflect padding (edge sample not repeated)."""
    idx = np.arange(-before, n + after)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


# -- dihedral group ------------------------------------------------------------------

def dihedral(x, k: int):
    """Element ``k`` (0..7) of the dihedral group on the last two axes.

    ``k & 3`` counts quarter turns, ``k & 4`` adds a horizontal flip first.
    """
    if not 0 <= k < 8:
        raise ValueError(f"dihedral index must lie in [0, 8), got {k}")
    if k & 4:
        x = x[..., ::-1]
    return np.rot90(x, k & 3, axes=(-2, -1))


def dihedral_inverse(x, k: int):
    x = np.rot90(x, -(k & 3), axes=(-2, -1))
    if k & 4:
        x = x[..., ::-1]
    return x
