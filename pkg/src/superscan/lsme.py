"""Local expert: channel attention followed by shifted-window self-attention."""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .autodiff import value
from .layers import (gated_ffn, gated_ffn_param_count, init_gated_ffn, init_linear, init_norm,
                     layer_norm2d, prefixed, to_nchw, to_nhwc)
from .rng import Rng
from .tensor import get_dtype
from .weights import as_scope

MASK_NEG = -1e9


@dataclass
class WindowSpec:
    window: int = 8
    shift: int = 0
    heads: int = 4

    def __post_init__(self):
        if not 0 <= self.shift < self.window:
            raise ValueError(f"shift {self.shift} must lie in [0, window={self.window})")


@dataclass
class LsmeConfig:
    channels: int
    window: WindowSpec
    ca_reduction: int = 4
    ffn_ratio: int = 2
    ca_first: bool = True

    def __post_init__(self):
        if self.channels % self.window.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.window.heads}")
        if self.channels % self.ca_reduction:
            raise ValueError(f"channels {self.channels} not divisible by reduction {self.ca_reduction}")


# -- windows -------------------------------------------------------------------------

def window_partition(x, window: int, shift: int = 0):
    """[B, C, H, W] -> [B * nw, window^2, C] after a cyclic roll by ``-shift``."""
    B, C, H, W = value(x).shape
    if H % window or W % window:
        raise ValueError(f"extents {H}x{W} not divisible by window {window}")
    if shift:
        x = F.roll2d(x, -shift, -shift)
    t = F.reshape(to_nhwc(x), (B, H // window, window, W // window, window, C))
    t = F.transpose(t, (0, 1, 3, 2, 4, 5))
    return F.reshape(t, (B * (H // window) * (W // window), window * window, C))


def window_reverse(windows, window: int, B: int, H: int, W: int, shift: int = 0):
    """Inverse of :func:`window_partition`."""
    C = value(windows).shape[-1]
    t = F.reshape(windows, (B, H // window, W // window, window, window, C))
    t = F.reshape(F.transpose(t, (0, 1, 3, 2, 4, 5)), (B, H, W, C))
    x = to_nchw(t)
    if shift:
        x = F.roll2d(x, shift, shift)
    return x


@functools.lru_cache(maxsize=32)
def relative_position_index(window: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    idx = rel[0] * (2 * window - 1) + rel[1]
    idx.setflags(write=False)
    return idx


@functools.lru_cache(maxsize=32)
def shift_mask(H: int, W: int, window: int, shift: int) -> np.ndarray:
    """Additive [nw, n, n] mask keeping attention inside regions contiguous before the roll."""
    labels = np.zeros((H, W))
    cnt = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            labels[hs, ws] = cnt
            cnt += 1
    lw = labels.reshape(H // window, window, W // window, window).transpose(0, 2, 1, 3)
    lw = lw.reshape(-1, window * window)
    mask = np.where(lw[:, :, None] != lw[:, None, :], MASK_NEG, 0.0)
    mask.setflags(write=False)
    return mask


# -- attention -------------------------------------------------------------------------

def init_window_attention(rng: Rng, C: int, spec: WindowSpec) -> dict:
    w = prefixed("qkv", init_linear(rng, 3 * C, C))
    w.update(prefixed("proj", init_linear(rng, C, C)))
    w["rel_bias"] = rng.truncated_normal(((2 * spec.window - 1) ** 2, spec.heads), std=0.02,
                                         dtype=get_dtype())
    return w


def window_attention_param_count(C: int, spec: WindowSpec) -> int:
    return (3 * C * C + 3 * C) + (C * C + C) + (2 * spec.window - 1) ** 2 * spec.heads


def window_mhsa(windows, spec: WindowSpec, w, mask=None, return_attn: bool = False):
    """Multi-head attention inside each window, with relative-position bias and optional mask.

    ``mask`` is [nw, n, n] and is tiled over the batch (windows are ordered
    batch-major).
    """
    w = as_scope(w)
    Bn, n, C = value(windows).shape
    heads = spec.heads
    dh = C // heads
    qkv = F.linear(windows, w["qkv.weight"], w["qkv.bias"])
    qkv = F.transpose(F.reshape(qkv, (Bn, n, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = (F.getitem(qkv, i) for i in range(3))
    logits = F.mul(F.matmul(q, F.transpose(k, (0, 1, 3, 2))), dh ** -0.5)
    if n == spec.window ** 2:
        bias = F.take(w["rel_bias"], relative_position_index(spec.window))
        logits = F.add(logits, F.transpose(bias, (2, 0, 1)))
    if mask is not None:
        nw = mask.shape[0]
        logits = F.reshape(logits, (Bn // nw, nw, heads, n, n))
        logits = F.add(logits, mask[None, :, None].astype(value(logits).dtype))
        logits = F.reshape(logits, (Bn, heads, n, n))
    attn = F.softmax(logits, axis=-1)
    out = F.reshape(F.transpose(F.matmul(attn, v), (0, 2, 1, 3)), (Bn, n, C))
    out = F.linear(out, w["proj.weight"], w["proj.bias"])
    return (out, attn) if return_attn else out


def window_attention(x, spec: WindowSpec, w):
    """Shifted-window MHSA on an NCHW map (extents must be window multiples)."""
    B, C, H, W = value(x).shape
    win = window_partition(x, spec.window, spec.shift)
    mask = shift_mask(H, W, spec.window, spec.shift) if spec.shift else None
    out = window_mhsa(win, spec, w, mask)
    return window_reverse(out, spec.window, B, H, W, spec.shift)


def init_channel_attention(rng: Rng, C: int, reduction: int = 4) -> dict:
    w = prefixed("fc1", init_linear(rng, C // reduction, C))
    w.update(prefixed("fc2", init_linear(rng, C, C // reduction)))
    return w


def channel_attention_param_count(C: int, reduction: int = 4) -> int:
    r = C // reduction
    return (C * r + r) + (r * C + C)


def channel_attention(x, w):
    """Global average pool -> bottleneck MLP -> sigmoid channel scales."""
    w = as_scope(w)
    B, C = value(x).shape[:2]
    pooled = F.mean(x, axis=(2, 3))
    hidden = F.relu(F.linear(pooled, w["fc1.weight"], w["fc1.bias"]))
    scale = F.sigmoid(F.linear(hidden, w["fc2.weight"], w["fc2.bias"]))
    return F.mul(x, F.reshape(scale, (B, C, 1, 1)))


def lma(x, cfg: LsmeConfig, w):
    """Channel attention then window attention (reversed when ``ca_first`` is off)."""
    w = as_scope(w)
    if cfg.ca_first:
        return window_attention(channel_attention(x, w.sub("ca")), cfg.window, w.sub("attn"))
    return channel_attention(window_attention(x, cfg.window, w.sub("attn")), w.sub("ca"))


# -- block -----------------------------------------------------------------------------

def init_lsme(rng: Rng, cfg: LsmeConfig) -> dict:
    C = cfg.channels
    w = prefixed("norm1", init_norm(C))
    w.update(prefixed("lma.ca", init_channel_attention(rng, C, cfg.ca_reduction)))
    w.update(prefixed("lma.attn", init_window_attention(rng, C, cfg.window)))
    w.update(prefixed("norm2", init_norm(C)))
    w.update(prefixed("ffn", init_gated_ffn(rng, C, cfg.ffn_ratio)))
    return w


def lsme_param_count(cfg: LsmeConfig) -> int:
    C = cfg.channels
    return (4 * C + channel_attention_param_count(C, cfg.ca_reduction)
            + window_attention_param_count(C, cfg.window)
            + gated_ffn_param_count(C, cfg.ffn_ratio))


def lsme_forward(x, cfg: LsmeConfig, w):
    """LN -> LMA -> residual, then LN -> GatedFFN -> residual."""
    w = as_scope(w)
    h = layer_norm2d(x, w["norm1.weight"], w["norm1.bias"])
    x = F.add(x, lma(h, cfg, w.sub("lma")))
    h = layer_norm2d(x, w["norm2.weight"], w["norm2.bias"])
    return F.add(x, gated_ffn(h, w.sub("ffn")))
