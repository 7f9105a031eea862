"""Small building blocks on NCHW feature maps shared by both expert types."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .autodiff import value
from .rng import Rng
from .tensor import get_dtype


def to_nhwc(x):
    return F.transpose(x, (0, 2, 3, 1))


def to_nchw(x):
    return F.transpose(x, (0, 3, 1, 2))


def layer_norm2d(x, gamma, beta, eps=1e-6):
    """Per-pixel normalisation over channels of an NCHW map."""
    return to_nchw(F.layer_norm(to_nhwc(x), gamma, beta, eps))


def linear2d(x, w, b=None):
    """Channel-mixing linear map on an NCHW map."""
    return to_nchw(F.linear(to_nhwc(x), w, b))


def init_linear(rng: Rng, n_out: int, n_in: int, std=0.02, bias=True) -> dict:
    dtype = get_dtype()
    out = {"weight": rng.truncated_normal((n_out, n_in), std=min(std, 1.0 / np.sqrt(n_in)), dtype=dtype)}
    if bias:
        out["bias"] = np.zeros(n_out, dtype=dtype)
    return out


def init_conv(rng: Rng, n_out: int, n_in: int, k: int = 3, groups: int = 1, std=0.02) -> dict:
    dtype = get_dtype()
    fan_in = n_in // groups * k * k
    return {
        "weight": rng.truncated_normal((n_out, n_in // groups, k, k),
                                       std=min(std, 1.0 / np.sqrt(fan_in)), dtype=dtype),
        "bias": np.zeros(n_out, dtype=dtype),
    }


def init_norm(C: int) -> dict:
    dtype = get_dtype()
    return {"weight": np.ones(C, dtype=dtype), "bias": np.zeros(C, dtype=dtype)}


def prefixed(prefix: str, d: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in d.items()}


# -- gated feed-forward ------------------------------------------------------------

def init_gated_ffn(rng: Rng, C: int, ratio: int = 2) -> dict:
    hidden = ratio * C
    w = {}
    w.update(prefixed("fc1", init_linear(rng, 2 * hidden, C)))
    w.update(prefixed("dw", init_conv(rng, hidden, hidden, 3, groups=hidden)))
    w.update(prefixed("fc2", init_linear(rng, C, hidden)))
    return w


def gated_ffn_param_count(C: int, ratio: int = 2) -> int:
    hidden = ratio * C
    return (C * 2 * hidden + 2 * hidden) + (hidden * 9 + hidden) + (hidden * C + C)


def gated_ffn(x, w):
    """fc1 -> split(gate, value) -> depthwise 3x3 on value -> SiLU(gate) * value -> fc2."""
    hidden = value(w["fc2.weight"]).shape[1]
    y = F.linear(to_nhwc(x), w["fc1.weight"], w["fc1.bias"])
    gate, val = F.split(y, 2, axis=-1)
    val = to_nhwc(F.conv2d(to_nchw(val), w["dw.weight"], w["dw.bias"], "same", groups=hidden))
    out = F.linear(F.mul(F.silu(gate), val), w["fc2.weight"], w["fc2.bias"])
    return to_nchw(out)
