"""Superpixel-token SSM block.

Pipeline for input ``x_in`` [B, C, H, W] at scale ``s``::

    x'   = SiLU(conv3x3(x_in))
    x_d  = avgpool_s(x')
    s, assoc = superpixel sample(x_d)          (M tokens)
    s'   = SSM(s)
    A    = sigmoid(scatter(one_hot(assoc), s'))
    out  = upsample_s(A * x_d) + x_in

With ``attend_full_res`` the attention map is upsampled first and applied
to the full-resolution ``x'`` instead.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .autodiff import value
from .context import RunContext
from .rng import Rng
from .ssm import SsmParams, init_ssm, recurrent_flops, ssm_block, ssm_param_count
from .superpixel import SuperpixelGrid, gumbel_one_hot, sample, scatter
from .tensor import get_dtype
from .weights import as_scope


@dataclass
class SpSsmConfig:
    channels: int
    scale: int = 1
    M: int = 64
    T: int = 5
    d_state: int = 16
    tau: float = 1.0
    conv_groups: int | None = None    # None: depthwise
    direction: str = "forward"
    scan_method: str = "recurrent"
    attend_full_res: bool = False

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.M < 1:
            raise ValueError(f"superpixel count must be >= 1, got {self.M}")

    @property
    def groups(self) -> int:
        return self.channels if self.conv_groups is None else self.conv_groups


def init_spssm(rng: Rng, cfg: SpSsmConfig, std: float = 0.02) -> dict:
    C, g = cfg.channels, cfg.groups
    dtype = get_dtype()
    w = {
        "conv.weight": rng.truncated_normal((C, C // g, 3, 3), std=std, dtype=dtype),
        "conv.bias": np.zeros(C, dtype=dtype),
    }
    w.update({f"ssm.{k}": v for k, v in init_ssm(rng, C, cfg.d_state, std=std).items()})
    return w


def spssm_param_count(cfg: SpSsmConfig) -> int:
    C = cfg.channels
    return C * (C // cfg.groups) * 9 + C + ssm_param_count(C, cfg.d_state)


def sp_ssm_forward(x_in, cfg: SpSsmConfig, w, ctx: RunContext | None = None):
    ctx = ctx or RunContext()
    w = as_scope(w)
    xv = value(x_in)
    if xv.ndim != 4 or xv.shape[1] != cfg.channels:
        raise ValueError(f"expected [B, {cfg.channels}, H, W], got {xv.shape}")
    B, C, H, W = xv.shape
    s = cfg.scale
    if H % s or W % s:
        raise ValueError(f"extents {H}x{W} not divisible by scale {s}")
    ctx.spssm_calls += 1
    xp = F.silu(F.conv2d(x_in, w["conv.weight"], w["conv.bias"], "same", cfg.groups))
    xd = F.avg_pool2d(xp, s)
    h, wd = H // s, W // s
    grid = SuperpixelGrid.for_shape(h, wd, cfg.M)
    _, valid = grid.neighbors()
    params = SsmParams.from_weights(w.sub("ssm"))
    maps = []
    for b in range(B):
        feat = F.transpose(F.reshape(F.getitem(xd, b), (C, h * wd)), (1, 0))
        dec = sample(F.reshape(feat, (h, wd, C)), cfg.M, cfg.T, grid)
        tokens = ssm_block(dec.s, params, cfg.direction, cfg.scan_method)
        if ctx.training:
            mask = gumbel_one_hot(dec.assoc, cfg.tau, "train", ctx.rng, valid)
            pix = scatter(mask, tokens, grid)
        else:
            pix = scatter(dec.mask, tokens, grid)
        att = F.sigmoid(pix)
        maps.append(F.reshape(F.transpose(att, (1, 0)), (1, C, h, wd)))
    A = maps[0] if B == 1 else F.concat(maps, axis=0)
    if cfg.attend_full_res:
        return F.add(F.mul(F.upsample_nearest(A, s), xp), x_in)
    return F.add(F.upsample_nearest(F.mul(A, xd), s), x_in)


def flops(cfg: SpSsmConfig, H: int, W: int) -> dict:
    """Scan length and FLOPs of the superpixel path against a dense pixel scan."""
    if H % cfg.scale or W % cfg.scale:
        raise ValueError(f"extents {H}x{W} not divisible by scale {cfg.scale}")
    dense_len = (H // cfg.scale) * (W // cfg.scale)
    sp = recurrent_flops(cfg.M, cfg.channels, cfg.d_state)
    dense = recurrent_flops(dense_len, cfg.channels, cfg.d_state)
    return {
        "scan_tokens": cfg.M,
        "dense_equivalent": dense_len,
        "scan_flops": sp,
        "dense_flops": dense,
        "ratio": dense / sp,
    }
