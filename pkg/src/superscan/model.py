"""Network assembly, parameter accounting and self-ensemble inference.

Layout: shallow 3x3 conv -> ``n_loe`` layers of experts -> 3x3 conv ->
3x3 conv to ``3 r^2`` channels -> pixel shuffle. A layer of experts chains
``m_pairs`` (global expert -> local expert) pairs ``P`` and applies::

    y   = x + beta * P(x)
    out = x + gamma * conv3x3(y)

Inputs are reflect-padded (bottom/right) to a multiple that every window
and superpixel grid divides, and the output is cropped back.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from . import tensor as T
from .autodiff import value
from .context import RunContext
from .layers import init_conv
from .lsme import LsmeConfig, WindowSpec, init_lsme, lsme_forward, lsme_param_count
from .moe import SgmeConfig, init_sgme, sgme_forward, sgme_param_count
from .rng import Rng
from .ssm import ssm_param_count
from .tensor import get_dtype
from .weights import WeightTree, as_scope


@dataclass
class ModelConfig:
    n_loe: int = 3
    m_pairs: int = 2
    channels: int = 36
    upscale: int = 4
    scales: list[int] = field(default_factory=lambda: [1, 2, 4])
    superpixels: list[int] = field(default_factory=lambda: [64, 64, 64])
    k: int = 1
    T: int = 5
    d_state: int = 16
    tau: float = 1.0
    window: int = 8
    heads: int = 4
    ca_reduction: int = 4
    ffn_ratio: int = 2
    ca_first: bool = True
    spssm_conv_groups: int | None = None
    scan_method: str = "recurrent"
    direction: str = "forward"

    def __post_init__(self):
        if self.upscale < 1:
            raise ValueError(f"upscale must be >= 1, got {self.upscale}")
        if self.n_loe < 1 or self.m_pairs < 1:
            raise ValueError("n_loe and m_pairs must be >= 1")
        self.sgme  # validates expert settings

    @property
    def sgme(self) -> SgmeConfig:
        return SgmeConfig(self.channels, list(self.scales), list(self.superpixels), self.k,
                          2, self.ffn_ratio, self.T, self.d_state, self.tau,
                          self.spssm_conv_groups, self.direction, self.scan_method)

    def lsme(self, index: int) -> LsmeConfig:
        shift = 0 if index % 2 == 0 else self.window // 2
        return LsmeConfig(self.channels, WindowSpec(self.window, shift, self.heads),
                          self.ca_reduction, self.ffn_ratio, self.ca_first)

    def pad_multiple(self) -> int:
        m = self.window
        for s, M in zip(self.scales, self.superpixels):
            gh = max(d for d in range(1, int(math.isqrt(M)) + 1) if M % d == 0)
            m = math.lcm(m, s * gh, s * (M // gh))
        return m

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


PRESETS = {
    "T": dict(n_loe=3, m_pairs=2, channels=36),
    "B": dict(n_loe=4, m_pairs=2, channels=48),
    "T-mini": dict(n_loe=3, m_pairs=2, channels=16),
}


def preset(name: str, upscale: int = 4, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(upscale=upscale, **{**PRESETS[name], **overrides})


@dataclass
class Model:
    config: ModelConfig
    weights: WeightTree


# -- construction ------------------------------------------------------------------

def build(config: ModelConfig, rng: Rng | int = 0) -> tuple[Model, WeightTree]:
    """Initialise all weights deterministically from ``rng`` (or an integer seed)."""
    rng = Rng(rng) if isinstance(rng, int) else rng
    C, r = config.channels, config.upscale
    dtype = get_dtype()
    w = WeightTree()
    w.update_prefixed("shallow", init_conv(rng, C, 3))
    for i in range(config.n_loe):
        for j in range(config.m_pairs):
            w.update_prefixed(f"loe{i}.pair{j}.sgme", init_sgme(rng, config.sgme))
            w.update_prefixed(f"loe{i}.pair{j}.lsme",
                              init_lsme(rng, config.lsme(i * config.m_pairs + j)))
        w.update_prefixed(f"loe{i}.conv", init_conv(rng, C, C))
        w[f"loe{i}.beta"] = np.ones((), dtype=dtype)
        w[f"loe{i}.gamma"] = np.ones((), dtype=dtype)
    w.update_prefixed("body", init_conv(rng, C, C))
    w.update_prefixed("recon", init_conv(rng, 3 * r * r, C))
    return Model(config, w), w


def param_count(model: Model | WeightTree) -> int:
    tree = model.weights if isinstance(model, Model) else model
    return tree.num_params()


def param_count_formula(config: ModelConfig) -> int:
    """Closed-form parameter count, summed layer by layer."""
    C, r = config.channels, config.upscale
    conv = lambda cin, cout: cin * cout * 9 + cout  # noqa: E731
    pairs = sum(sgme_param_count(config.sgme) + lsme_param_count(config.lsme(j))
                for j in range(config.m_pairs))
    loe = pairs + conv(C, C) + 2
    return conv(3, C) + config.n_loe * loe + conv(C, C) + conv(C, 3 * r * r)


# -- forward -------------------------------------------------------------------------

def loe_forward(x, config: ModelConfig, w, ctx: RunContext | None = None, index: int = 0):
    w = as_scope(w)
    y = x
    for j in range(config.m_pairs):
        name = f"loe{index}.pair{j}"
        y = sgme_forward(y, config.sgme, w.sub(f"pair{j}.sgme"), ctx, name)
        y = lsme_forward(y, config.lsme(index * config.m_pairs + j), w.sub(f"pair{j}.lsme"))
    y = F.add(x, F.mul(w["beta"], y))
    conv = F.conv2d(y, w["conv.weight"], w["conv.bias"])
    return F.add(x, F.mul(w["gamma"], conv))


def _pad_amount(n: int, m: int) -> int:
    return (-n) % m


def forward(lr, model: Model, mode: str = "infer", ctx: RunContext | None = None,
            weights=None):
    """Super-resolve ``lr`` [B, 3, H, W] -> [B, 3, rH, rW].

    ``weights`` overrides ``model.weights`` (e.g. Variables during training).
    """
    cfg = model.config
    ctx = ctx or RunContext(mode)
    w = as_scope(weights if weights is not None else model.weights)
    lv = value(lr)
    if lv.ndim != 4 or lv.shape[1] != 3:
        raise ValueError(f"expected [B, 3, H, W] input, got {lv.shape}")
    B, _, H, W = lv.shape
    m = cfg.pad_multiple()
    ph, pw = _pad_amount(H, m), _pad_amount(W, m)
    x = F.pad_reflect(lr, (0, ph), (0, pw)) if ph or pw else lr
    x = F.conv2d(x, w["shallow.weight"], w["shallow.bias"])
    for i in range(cfg.n_loe):
        x = loe_forward(x, cfg, w.sub(f"loe{i}"), ctx, i)
    x = F.conv2d(x, w["body.weight"], w["body.bias"])
    x = F.conv2d(x, w["recon.weight"], w["recon.bias"])
    x = F.pixel_shuffle(x, cfg.upscale)
    r = cfg.upscale
    if ph or pw:
        x = F.crop2d(x, H * r, W * r)
    return x


def self_ensemble(lr, model: Model, transforms=range(8)):
    """Average of forwards over dihedral transforms, each mapped back."""
    lv = np.asarray(value(lr))
    outs = []
    for k in transforms:
        y = forward(np.ascontiguousarray(T.dihedral(lv, k)), model, "infer")
        outs.append(T.dihedral_inverse(y, k))
    if len(outs) == 1:
        return np.ascontiguousarray(outs[0])
    return np.mean(outs, axis=0).astype(lv.dtype)


# -- cost accounting -------------------------------------------------------------------

def _conv_macs(h, w, cin, cout, k=3, groups=1):
    return h * w * cout * (cin // groups) * k * k


def gmacs(config: ModelConfig, H_out: int = 720, W_out: int = 1280) -> float:
    """Multiply-accumulates (in units of 1e9) to produce an ``H_out x W_out`` output.

    Inference routing runs ``k`` experts per global expert; their cost is
    taken as ``k`` times the mean expert cost.
    """
    C, r = config.channels, config.upscale
    h, w = H_out // r, W_out // r
    N = h * w
    sg = config.sgme
    groups = sg.channels if sg.conv_groups is None else sg.conv_groups
    d = config.d_state

    def expert(i):
        s, M = sg.scales[i], sg.superpixels[i]
        n = N // (s * s)
        macs = _conv_macs(h, w, C, C, 3, groups)
        macs += config.T * n * 9 * C * 2            # distances and centroid sums
        macs += M * (2 * d * C + C * C)             # token projections
        macs += M * C * d * 3                       # recurrence and readout
        macs += n * C * 2 + N * C                   # scatter, attention product, gate
        return macs

    ffn = 2 * N * C * (2 * config.ffn_ratio * C) // 2 + N * config.ffn_ratio * C * 9 \
        + N * config.ffn_ratio * C * C
    moe = N * C * 2 * C + N * C * C + config.k * sum(expert(i) for i in range(sg.n)) / sg.n
    n_win = config.window ** 2
    attn = N * C * 3 * C + N * C * C + 2 * N * n_win * C
    ca = 2 * C * (C // config.ca_reduction)
    pair = moe + ffn + attn + ca + ffn
    loe = config.m_pairs * pair + _conv_macs(h, w, C, C)
    total = (_conv_macs(h, w, 3, C) + config.n_loe * loe + _conv_macs(h, w, C, C)
             + _conv_macs(h, w, C, 3 * r * r))
    return total / 1e9


__all__ = [
    "ModelConfig", "Model", "PRESETS", "preset", "build", "forward", "loe_forward",
    "self_ensemble", "param_count", "param_count_formula", "gmacs", "ssm_param_count",
]
