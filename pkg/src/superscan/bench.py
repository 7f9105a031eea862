"""Timing harness for the selective scan and the superpixel SSM block.

Wall times are machine-local; FLOP columns come from the instrumented
counters in :mod:`superscan.ssm` and are platform independent.
"""
from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .context import RunContext
from .rng import Rng
from .spssm import SpSsmConfig, init_spssm, sp_ssm_forward
from .ssm import (SsmParams, count_flops, discretize, init_ssm, parallel_affine_scan,
                  recurrent_flops, scan_parallel, scan_recurrent, token_params)
from .tensor import get_dtype

HEADER = ("label", "length", "time_ns_median", "flops", "ratio")


@dataclass
class BenchReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, label, length, time_ns, flops, ratio=1.0):
        self.rows.append({"label": label, "length": int(length), "time_ns_median": int(time_ns),
                          "flops": int(flops), "ratio": float(ratio)})

    def select(self, label: str) -> list[dict]:
        return [r for r in self.rows if r["label"] == label]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.DictWriter(buf, HEADER, lineterminator="\n")
        wr.writeheader()
        wr.writerows(self.rows)
        return buf.getvalue()

    def plot(self, path) -> None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(5, 4))
        for label in dict.fromkeys(r["label"] for r in self.rows):
            rows = self.select(label)
            ax.loglog([r["length"] for r in rows], [r["time_ns_median"] for r in rows], "o-",
                      label=label)
        ax.set_xlabel("sequence length")
        ax.set_ylabel("median time (ns)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def median_time_ns(fn, trials: int = 9, warmup: int = 3) -> int:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(trials):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return max(1, int(statistics.median(times)))


def loglog_fit(x, y) -> tuple[float, float]:
    """Least-squares slope and R^2 of log(y) against log(x)."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    slope, icpt = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + icpt)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def _random_case(rng: Rng, L: int, C: int, d: int):
    params = SsmParams.from_weights(init_ssm(rng, C, d))
    x = rng.normal((L, C), dtype=get_dtype())
    return params, x


def bench_scan(lengths, d_state: int = 16, C: int = 16, trials: int = 9, warmup: int = 3,
               seed: int = 0, backends=None, parallel: bool = True, threads: int = 1) -> BenchReport:
    """Median wall time and counted FLOPs of both scan evaluations per length.

    One ``recurrent[<backend>]`` row per available kernel backend, one
    ``parallel`` row, and with ``threads > 1`` a ``parallel-threads<n>`` row
    timing the bare Blelloch kernel with channels split across threads.
    """
    rng = Rng(seed)
    backends = backends or kernels.available_backends()
    report = BenchReport()
    for L in lengths:
        params, x = _random_case(rng, L, C, d_state)
        for be in backends:
            with count_flops() as fc:
                scan_recurrent(params, x, backend=be)
            t = median_time_ns(lambda: scan_recurrent(params, x, backend=be), trials, warmup)
            report.add(f"recurrent[{be}]", L, t, fc.total)
        if parallel:
            with count_flops() as fc:
                scan_parallel(params, x)
            t = median_time_ns(lambda: scan_parallel(params, x), trials, warmup)
            report.add("parallel", L, t, fc.total)
        if threads > 1:
            dt, B, _ = token_params(params, x)
            a, bb = discretize(dt, params.A, B)
            u = bb * x[:, :, None]
            t = median_time_ns(lambda: parallel_affine_scan(a, u, threads), trials, warmup)
            report.add(f"parallel-threads{threads}", L, t, 0)
    return report


def bench_spssm(H: int, W: int, s: int, M: int, trials: int = 9, warmup: int = 3,
                C: int = 16, d_state: int = 16, T: int = 5, seed: int = 0) -> BenchReport:
    """Superpixel scan (length M) against the dense pixel scan it replaces.

    The ``superpixel`` row times one block forward and reports the counted
    scan FLOPs; the ``dense`` row reports what a scan over all ``H W / s^2``
    pixels would count. ``ratio`` is dense over superpixel FLOPs.
    """
    cfg = SpSsmConfig(C, s, M, T, d_state)
    rng = Rng(seed)
    w = init_spssm(rng, cfg)
    x = rng.uniform((1, C, H, W), dtype=get_dtype())
    with count_flops() as fc:
        sp_ssm_forward(x, cfg, w, RunContext("infer"))
    dense_len = (H // s) * (W // s)
    dense = recurrent_flops(dense_len, C, d_state)
    t = median_time_ns(lambda: sp_ssm_forward(x, cfg, w, RunContext("infer")), trials, warmup)
    report = BenchReport()
    report.add("superpixel", M, t, fc.total, dense / fc.total)
    report.add("dense", dense_len, 0, dense, 1.0)
    return report


__all__ = ["BenchReport", "HEADER", "bench_scan", "bench_spssm", "loglog_fit", "median_time_ns"]
