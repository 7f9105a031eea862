"""Dual-domain L1 loss, Adam, the step schedule, augmentation and a toy overfit loop."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .autodiff import Tape, Variable, backward, value
from .context import RunContext
from .model import Model, forward
from .rng import Rng
from .tensor import dihedral, dihedral_inverse, get_dtype

LAMBDA_FREQ = 0.05
MILESTONES = (250_000, 400_000, 450_000, 475_000)


# -- loss ----------------------------------------------------------------------------

def loss(sr, hr, lam_freq: float = LAMBDA_FREQ):
    """mean|sr - hr| + lam * mean(|Re dF| + |Im dF|), dF the DFT of the difference."""
    if value(sr).shape != value(hr).shape:
        raise ValueError(f"shape mismatch: sr {value(sr).shape} vs hr {value(hr).shape}")
    if lam_freq < 0:
        raise ValueError(f"lam_freq must be >= 0, got {lam_freq}")
    diff = F.sub(sr, hr)
    pix = F.mean(F.abs(diff))
    if lam_freq == 0:
        return pix
    # the DFT is linear, so dft2(sr) - dft2(hr) == dft2(sr - hr)
    re, im = F.dft2(diff)
    freq = F.mean(F.add(F.abs(re), F.abs(im)))
    return F.add(pix, F.mul(freq, lam_freq))


# -- optimiser -----------------------------------------------------------------------

@dataclass
class OptState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(opt: OptState, params, grads: dict):
    """Bias-corrected Adam update of ``params`` (a mutable name -> array map) in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    opt.t += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1 - b1 ** opt.t
    c2 = 1 - b2 ** opt.t
    for name, g in grads.items():
        p = params[name]
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        v = opt.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        params[name] = (p - step).astype(p.dtype, copy=False)
    return params


@dataclass
class Schedule:
    base_lr: float = 2e-4
    milestones: tuple = MILESTONES
    factor: float = 0.5

    def __post_init__(self):
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")

    def lr(self, iteration: int) -> float:
        passed = sum(1 for m in self.milestones if iteration >= m)
        return self.base_lr * self.factor ** passed


# -- augmentation -----------------------------------------------------------------------

def augment(patch, rng: Rng, crop: int = 64, transform: int | None = None):
    """Random ``crop x crop`` window of a [C, H, W] patch, then a random dihedral transform."""
    patch = np.asarray(patch)
    H, W = patch.shape[-2:]
    if H < crop or W < crop:
        raise ValueError(f"patch {H}x{W} smaller than crop {crop}")
    top = int(rng.integers(H - crop + 1))
    left = int(rng.integers(W - crop + 1))
    k = int(rng.integers(8)) if transform is None else transform
    out = patch[..., top:top + crop, left:left + crop]
    return np.ascontiguousarray(dihedral(out, k))


def unaugment(patch, k: int):
    return np.ascontiguousarray(dihedral_inverse(patch, k))


# -- toy overfit ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    trace: list[float]
    usage: list[dict]


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, trace: list[float]):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.trace = trace


def train_step(model: Model, opt: OptState, lr_img, hr_img, rng: Rng,
               lam_freq: float = LAMBDA_FREQ) -> tuple[float, RunContext, dict]:
    """One train-mode forward, backward and Adam update. Returns (loss, context, grads)."""
    ctx = RunContext("train", rng=rng)
    with Tape():
        leaves = {k: Variable(v) for k, v in model.weights.items()}
        sr = forward(lr_img, model, "train", ctx, weights=leaves)
        l = loss(sr, hr_img, lam_freq)
        lv = float(value(l))
        if not math.isfinite(lv):
            return lv, ctx, {}
        backward(l)
    grads = {k: v.grad for k, v in leaves.items()}
    adam_step(opt, model.weights, grads)
    return lv, ctx, grads


def train_toy(model: Model, pair, steps: int, lr: float = 2e-3, seed: int = 0,
              lam_freq: float = LAMBDA_FREQ) -> TrainResult:
    """Overfit a single (lr, hr) pair of [3, h, w] / [3, rh, rw] images.

    Gumbel noise for step ``i`` comes from the ``i``-th child stream of ``Rng(seed)``.
    """
    if not 0 <= steps <= 1000:
        raise ValueError(f"steps must lie in [0, 1000], got {steps}")
    dtype = get_dtype()
    lr_img = np.asarray(pair[0], dtype=dtype)[None]
    hr_img = np.asarray(pair[1], dtype=dtype)[None]
    r = model.config.upscale
    if hr_img.shape[-2:] != (lr_img.shape[-2] * r, lr_img.shape[-1] * r):
        raise ValueError(f"hr {hr_img.shape[-2:]} is not x{r} of lr {lr_img.shape[-2:]}")
    opt = OptState(lr=lr)
    root = Rng(seed)
    trace, usage = [], []
    for step in range(steps):
        lv, ctx, _ = train_step(model, opt, lr_img, hr_img, root.spawn(), lam_freq)
        trace.append(lv)
        if not math.isfinite(lv):
            raise NonFiniteLoss(step, trace)
        usage.append(dict(ctx.expert_calls))
    return TrainResult(trace, usage)


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "loss"])
        for i, v in enumerate(trace):
            wr.writerow([i, repr(float(v))])


def write_usage(path, usage: list[dict]) -> None:
    """Per-step histogram of which expert won routing (``top1``) in each block."""
    rows = []
    for step, counts in enumerate(usage):
        for (block, kind, expert), n in sorted(counts.items()):
            if kind == "top1":
                rows.append((step, block, expert, n))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "block", "expert", "count"])
        wr.writerows(rows)
