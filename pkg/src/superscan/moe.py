"""Global expert: multi-scale mixture of superpixel SSM experts plus GatedFFN.

Routing is per sample: the router sees the spatial mean of the gating
branch. Training runs every expert and mixes them with the full softmax
weights; inference runs only each sample's top-k experts, with their
weights renormalised to sum to one.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .autodiff import value
from .context import RunContext
from .layers import (gated_ffn, gated_ffn_param_count, init_gated_ffn, init_linear, init_norm,
                     layer_norm2d, linear2d, prefixed)
from .rng import Rng
from .spssm import SpSsmConfig, init_spssm, sp_ssm_forward, spssm_param_count
from .weights import as_scope


@dataclass
class SgmeConfig:
    channels: int
    scales: list[int] = field(default_factory=lambda: [1, 2, 4])
    superpixels: list[int] = field(default_factory=lambda: [64, 64, 64])
    k: int = 1
    expand: int = 2
    ffn_ratio: int = 2
    T: int = 5
    d_state: int = 16
    tau: float = 1.0
    conv_groups: int | None = None
    direction: str = "forward"
    scan_method: str = "recurrent"

    def __post_init__(self):
        if len(self.scales) != len(self.superpixels):
            raise ValueError("scales and superpixels must have one entry per expert")
        if not 1 <= self.k <= self.n:
            raise ValueError(f"k must lie in [1, {self.n}], got {self.k}")
        if self.expand != 2:
            raise ValueError("only expand=2 (x1 and x2 each C wide) is supported")

    @property
    def n(self) -> int:
        return len(self.scales)

    def expert(self, i: int) -> SpSsmConfig:
        return SpSsmConfig(self.channels, self.scales[i], self.superpixels[i], self.T,
                           self.d_state, self.tau, self.conv_groups, self.direction,
                           self.scan_method)


# -- parameters ------------------------------------------------------------------

def init_moe(rng: Rng, cfg: SgmeConfig) -> dict:
    C = cfg.channels
    w = prefixed("in", init_linear(rng, 2 * C, C))
    w["router.weight"] = init_linear(rng, cfg.n, C, bias=False)["weight"]
    for i in range(cfg.n):
        w.update(prefixed(f"expert{i}", init_spssm(rng, cfg.expert(i))))
    w.update(prefixed("out", init_linear(rng, C, C)))
    return w


def moe_param_count(cfg: SgmeConfig) -> int:
    C = cfg.channels
    experts = sum(spssm_param_count(cfg.expert(i)) for i in range(cfg.n))
    return (C * 2 * C + 2 * C) + cfg.n * C + experts + (C * C + C)


def init_sgme(rng: Rng, cfg: SgmeConfig) -> dict:
    C = cfg.channels
    w = prefixed("norm1", init_norm(C))
    w.update(prefixed("moe", init_moe(rng, cfg)))
    w.update(prefixed("norm2", init_norm(C)))
    w.update(prefixed("ffn", init_gated_ffn(rng, C, cfg.ffn_ratio)))
    return w


def sgme_param_count(cfg: SgmeConfig) -> int:
    C = cfg.channels
    return 4 * C + moe_param_count(cfg) + gated_ffn_param_count(C, cfg.ffn_ratio)


# -- forward ---------------------------------------------------------------------

def expert_forward(x1, x2, cfg: SpSsmConfig, w, ctx: RunContext | None = None):
    """SP-SSM(x1) gated by SiLU(x2)."""
    if value(x1).shape != value(x2).shape:
        raise ValueError(f"x1 {value(x1).shape} and x2 {value(x2).shape} differ")
    return F.mul(sp_ssm_forward(x1, cfg, w, ctx), F.silu(x2))


def route(x2, router_weight):
    """Per-sample expert weights softmax(W @ spatial_mean(x2)) -> [B, n]."""
    pooled = F.mean(x2, axis=(2, 3))
    return F.softmax(F.linear(pooled, router_weight), axis=-1)


def top_k(weights: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the k largest weights (ties -> lower index), returned in ascending index order."""
    order = np.argsort(-weights, kind="stable")[:k]
    return np.sort(order), order


def mss_moe_forward(x, cfg: SgmeConfig, w, mode: str | None = None,
                    ctx: RunContext | None = None, name: str = ""):
    """Routing ``mode`` (dense ``train`` / top-k ``infer``) defaults to ``ctx.mode``.

    ``ctx.mode`` separately decides whether the experts draw Gumbel noise.
    """
    ctx = ctx or RunContext()
    mode = mode or ctx.mode
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown routing mode {mode!r}")
    w = as_scope(w)
    y = linear2d(x, w["in.weight"], w["in.bias"])
    x1, x2 = F.split(y, 2, axis=1)
    g = route(x2, w["router.weight"])
    gv = value(g)
    B = gv.shape[0]
    for b in range(B):
        ctx.expert_calls[(name, "top1", int(np.argmax(gv[b])))] += 1
    if mode == "train":
        out = None
        for i in range(cfg.n):
            e = expert_forward(x1, x2, cfg.expert(i), w.sub(f"expert{i}"), ctx)
            ctx.expert_calls[(name, "run", i)] += B
            term = F.mul(F.reshape(F.getitem(g, (slice(None), i)), (B, 1, 1, 1)), e)
            out = term if out is None else F.add(out, term)
    else:
        rows = []
        for b in range(B):
            sel, _ = top_k(gv[b], cfg.k)
            gs = F.getitem(g, (b, sel))
            gs = F.div(gs, F.sum(gs))
            xb1, xb2 = F.getitem(x1, slice(b, b + 1)), F.getitem(x2, slice(b, b + 1))
            acc = None
            for j, i in enumerate(sel):
                e = expert_forward(xb1, xb2, cfg.expert(int(i)), w.sub(f"expert{i}"), ctx)
                ctx.expert_calls[(name, "run", int(i))] += 1
                term = F.mul(F.getitem(gs, j), e)
                acc = term if acc is None else F.add(acc, term)
            rows.append(acc)
        out = rows[0] if B == 1 else F.concat(rows, axis=0)
    return linear2d(out, w["out.weight"], w["out.bias"])


def sgme_forward(x, cfg: SgmeConfig, w, ctx: RunContext | None = None, name: str = ""):
    """LN -> MSS-MoE -> residual, then LN -> GatedFFN -> residual."""
    w = as_scope(w)
    h = layer_norm2d(x, w["norm1.weight"], w["norm1.bias"])
    x = F.add(x, mss_moe_forward(h, cfg, w.sub("moe"), None, ctx, name))
    h = layer_norm2d(x, w["norm2.weight"], w["norm2.bias"])
    return F.add(x, gated_ffn(h, w.sub("ffn")))
