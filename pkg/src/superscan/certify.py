"""Finite-difference certification of every differentiable op and block.

Each check reduces the op output to a scalar with a fixed random projection
and compares reverse-mode gradients against central differences in float64.
Composite blocks run in train mode with Gumbel noise drawn from a fixed seed
and the straight-through estimator relaxed to its soft path, so the checked
function is smooth.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from .autodiff import GradCheckReport, grad_check, relaxed
from .context import RunContext
from .layers import gated_ffn, init_gated_ffn
from .lsme import LsmeConfig, WindowSpec, init_lsme, lma
from .model import build, forward, preset
from .moe import SgmeConfig, init_moe, mss_moe_forward
from .rng import Rng
from .spssm import SpSsmConfig, init_spssm, sp_ssm_forward
from .ssm import SsmParams, init_ssm, selective_scan
from .tensor import precision
from .train import loss

TOL = 1e-4
EPS = 1e-5
NOISE_SEED = 7


@dataclass
class CheckResult:
    name: str
    group: str
    report: GradCheckReport

    @property
    def ok(self) -> bool:
        return self.report.ok(TOL)


def _project(out, R):
    return F.sum(F.mul(out, R))


def _coords(rng: Rng, size: int, n: int | None):
    if n is None or n >= size:
        return None
    return sorted({int(i) for i in rng.integers(size, n)})


def _param_check(make_f: Callable, w: dict, name: str, rng: Rng, n: int | None):
    """Check gradients with respect to weight ``name`` of a weight-dict function."""
    def f(p):
        ww = dict(w)
        ww[name] = p
        return make_f(ww)
    return grad_check(f, w[name], EPS, _coords(rng, w[name].size, n))


def _primitive_checks(rng: Rng):
    R = lambda *shape: rng.normal(shape)  # noqa: E731
    x4 = rng.normal((2, 4, 6, 6))
    wc = rng.normal((3, 4, 3, 3)) * 0.5
    bc = rng.normal(3)
    Rc = R(2, 3, 6, 6)
    yield "conv2d.input", lambda: grad_check(lambda v: _project(F.conv2d(v, wc, bc), Rc), x4)
    yield "conv2d.weight", lambda: grad_check(lambda v: _project(F.conv2d(x4, v, bc), Rc), wc)
    yield "conv2d.bias", lambda: grad_check(lambda v: _project(F.conv2d(x4, wc, v), Rc), bc)
    wd = rng.normal((4, 1, 3, 3))
    Rd = R(2, 4, 6, 6)
    yield "conv2d.depthwise", lambda: grad_check(
        lambda v: _project(F.conv2d(v, wd, None, "same", 4), Rd), x4)
    yield "conv2d.depthwise_weight", lambda: grad_check(
        lambda v: _project(F.conv2d(x4, v, None, "same", 4), Rd), wd)
    wg = rng.normal((4, 2, 3, 3))
    yield "conv2d.grouped", lambda: grad_check(
        lambda v: _project(F.conv2d(v, wg, None, "same", 2), Rd), x4)
    xl, wl, bl, Rl = rng.normal((5, 7)), rng.normal((3, 7)), rng.normal(3), R(5, 3)
    yield "linear.input", lambda: grad_check(lambda v: _project(F.linear(v, wl, bl), Rl), xl)
    yield "linear.weight", lambda: grad_check(lambda v: _project(F.linear(xl, v, bl), Rl), wl)
    Rs = R(5, 7)
    yield "softmax", lambda: grad_check(lambda v: _project(F.softmax(v, axis=-1), Rs), xl)
    g, b = rng.normal(7), rng.normal(7)
    yield "layer_norm.input", lambda: grad_check(lambda v: _project(F.layer_norm(v, g, b), Rs), xl)
    yield "layer_norm.scale", lambda: grad_check(lambda v: _project(F.layer_norm(xl, v, b), Rs), g)
    for kind in ("silu", "sigmoid", "softplus"):
        yield f"activation.{kind}", (lambda k=kind: grad_check(
            lambda v: _project(F.activation(k, v), Rs), xl))
    Rp = R(2, 4, 3, 3)
    yield "avg_pool", lambda: grad_check(lambda v: _project(F.avg_pool2d(v, 2), Rp), x4)
    xu, Ru = rng.normal((1, 2, 3, 3)), R(1, 2, 6, 6)
    yield "upsample", lambda: grad_check(lambda v: _project(F.upsample_nearest(v, 2), Ru), xu)
    xs, Rps = rng.normal((1, 8, 3, 3)), R(1, 2, 6, 6)
    yield "pixel_shuffle", lambda: grad_check(lambda v: _project(F.pixel_shuffle(v, 2), Rps), xs)
    xf, Rre, Rim = rng.normal((1, 2, 5, 4)), R(1, 2, 5, 4), R(1, 2, 5, 4)

    def dft_f(v):
        re, im = F.dft2(v)
        return F.add(_project(re, Rre), _project(im, Rim))
    yield "dft2", lambda: grad_check(dft_f, xf)


def _scan_checks(rng: Rng):
    L = 13
    a = rng.uniform((L, 3, 2), 0.2, 0.95)
    b = rng.normal((L, 3, 2))
    R = rng.normal((L, 3, 2))
    for method in ("recurrent", "parallel"):
        yield f"scan.{method}.decay", (lambda m=method: grad_check(
            lambda v: _project(F.affine_scan(v, b, m), R), a))
        yield f"scan.{method}.input", (lambda m=method: grad_check(
            lambda v: _project(F.affine_scan(a, v, m), R), b))
    w = init_ssm(rng, 4, 3, std=0.3)
    x = rng.normal((9, 4))
    Ry = rng.normal((9, 4))
    for method in ("recurrent", "parallel"):
        yield f"selective_scan.{method}", (lambda m=method: grad_check(
            lambda v: _project(selective_scan(SsmParams.from_weights(w), v, m), Ry), x))
    yield "selective_scan.A", lambda: _param_check(
        lambda ww: _project(selective_scan(SsmParams.from_weights(ww), x), Ry), w, "A", rng, None)
    yield "selective_scan.w_dt", lambda: _param_check(
        lambda ww: _project(selective_scan(SsmParams.from_weights(ww), x), Ry), w, "w_dt", rng, None)


def _train_ctx():
    return RunContext("train", rng=Rng(NOISE_SEED))


def _spssm_checks(rng: Rng):
    for s in (1, 2):
        cfg = SpSsmConfig(4, scale=s, M=4, T=3, d_state=3)
        w = init_spssm(rng, cfg, std=0.3)
        x = rng.normal((1, 4, 8, 8))
        R = rng.normal((1, 4, 8, 8))
        f = lambda ww, v=x, c=cfg, R=R: _project(sp_ssm_forward(v, c, ww, _train_ctx()), R)  # noqa: E731
        yield f"spssm.s{s}.input", (lambda c=cfg, w=w, R=R, x=x: grad_check(
            lambda v: _project(sp_ssm_forward(v, c, w, _train_ctx()), R), x, EPS,
            _coords(rng, x.size, 48)))
        yield f"spssm.s{s}.conv", (lambda f=f, w=w: _param_check(f, w, "conv.weight", rng, 24))
        yield f"spssm.s{s}.ssm", (lambda f=f, w=w: _param_check(f, w, "ssm.w_b", rng, 24))


def _moe_checks(rng: Rng):
    cfg = SgmeConfig(4, scales=[1, 2], superpixels=[4, 4], k=1, T=2, d_state=3)
    w = init_moe(rng, cfg)
    w = {k: (v * 10 if k.endswith("weight") and v.ndim == 2 else v) for k, v in w.items()}
    x = rng.normal((2, 4, 8, 8))
    R = rng.normal((2, 4, 8, 8))
    for mode in ("train", "infer"):
        f = lambda ww, m=mode: _project(mss_moe_forward(x, cfg, ww, m, _train_ctx()), R)  # noqa: E731
        yield f"moe.{mode}.input", (lambda m=mode: grad_check(
            lambda v: _project(mss_moe_forward(v, cfg, w, m, _train_ctx()), R), x, EPS,
            _coords(rng, x.size, 48)))
        yield f"moe.{mode}.router", (lambda f=f: _param_check(f, w, "router.weight", rng, None))


def _lma_checks(rng: Rng):
    for shift in (0, 2):
        cfg = LsmeConfig(8, WindowSpec(4, shift, 2), ca_reduction=4)
        w = {k[len("lma."):]: v for k, v in init_lsme(rng, cfg).items() if k.startswith("lma.")}
        w = {k: v * 20 if v.ndim >= 2 else v for k, v in w.items()}
        x = rng.normal((1, 8, 8, 8))
        R = rng.normal((1, 8, 8, 8))
        f = lambda ww, c=cfg, x=x, R=R: _project(lma(x, c, ww), R)  # noqa: E731
        yield f"lma.shift{shift}.input", (lambda c=cfg, w=w, x=x, R=R: grad_check(
            lambda v: _project(lma(v, c, w), R), x, EPS, _coords(rng, x.size, 64)))
        yield f"lma.shift{shift}.rel_bias", (lambda f=f, w=w: _param_check(
            f, w, "attn.rel_bias", rng, 24))
        yield f"lma.shift{shift}.qkv", (lambda f=f, w=w: _param_check(
            f, w, "attn.qkv.weight", rng, 24))


def _ffn_checks(rng: Rng):
    w = {k: v * 10 if v.ndim >= 2 else v for k, v in init_gated_ffn(rng, 4).items()}
    x = rng.normal((1, 4, 5, 5))
    R = rng.normal((1, 4, 5, 5))
    yield "ffn.input", lambda: grad_check(lambda v: _project(gated_ffn(v, w), R), x)
    f = lambda ww: _project(gated_ffn(x, ww), R)  # noqa: E731
    yield "ffn.dw", lambda: _param_check(f, w, "dw.weight", rng, None)
    yield "ffn.fc1", lambda: _param_check(f, w, "fc1.weight", rng, 24)


def _model_checks(rng: Rng):
    model, w = build(preset("T-mini", 2), rng.spawn())
    w = dict(w)
    lr = rng.uniform((1, 3, 8, 8))
    hr = rng.uniform((1, 3, 16, 16))

    def f_weights(ww):
        return loss(forward(lr, model, "train", _train_ctx(), weights=ww), hr)
    yield "model.input", lambda: grad_check(
        lambda v: loss(forward(v, model, "train", _train_ctx(), weights=w), hr), lr, EPS,
        _coords(rng, lr.size, 12))
    for name in ("shallow.weight", "loe0.beta", "loe1.pair0.sgme.moe.router.weight",
                 "loe2.pair1.lsme.lma.attn.rel_bias", "recon.bias"):
        yield f"model.{name}", (lambda n=name: _param_check(f_weights, w, n, rng, 6))


GROUPS = {
    "primitives": _primitive_checks,
    "scan": _scan_checks,
    "spssm": _spssm_checks,
    "moe": _moe_checks,
    "lma": _lma_checks,
    "ffn": _ffn_checks,
    "model": _model_checks,
}


def run(groups=None, seed: int = 0, on_result: Callable | None = None) -> list[CheckResult]:
    """Run the named check groups (all by default) and return their results."""
    groups = list(GROUPS) if groups is None else list(groups)
    unknown = [g for g in groups if g not in GROUPS]
    if unknown:
        raise ValueError(f"unknown check group(s) {unknown}; choose from {sorted(GROUPS)}")
    results = []
    with precision(np.float64), relaxed():
        for i, group in enumerate(groups):
            rng = Rng(seed * 1000 + i)
            for name, check in GROUPS[group](rng):
                res = CheckResult(name, group, check())
                results.append(res)
                if on_result:
                    on_result(res)
    return results


__all__ = ["CheckResult", "GROUPS", "TOL", "run"]
