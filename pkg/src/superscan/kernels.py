"""Hot kernels with a compiled backend and a pure-Python fallback.

The compiled extension (``superscan._kernels``) is used when it imports
cleanly; setting ``SUPERSCAN_PURE=1`` in the environment forces the
fallback. Both backends are bit-identical, so the choice only affects speed.
"""
from __future__ import annotations

import os

import numpy as np

_MASK64 = (1 << 64) - 1

try:
    if os.environ.get("SUPERSCAN_PURE", "") not in ("", "0"):
        raise ImportError("pure backend forced")
    from . import _kernels as _ext
except ImportError:
    _ext = None

BACKEND = "compiled" if _ext is not None else "python"


def available_backends() -> list[str]:
    return ["compiled", "python"] if _ext is not None else ["python"]


# -- pure-Python twins -------------------------------------------------------

def _py_affine_scan_forward(a, b, h):
    if a.shape[0] == 0:
        return
    h[0] = b[0]
    for t in range(1, a.shape[0]):
        np.multiply(a[t], h[t - 1], out=h[t])
        h[t] += b[t]


def _py_affine_scan_backward(a, h, gh, ga, gb):
    L = a.shape[0]
    if L == 0:
        return
    gb[L - 1] = gh[L - 1]
    for t in range(L - 2, -1, -1):
        np.multiply(a[t + 1], gb[t + 1], out=gb[t])
        gb[t] += gh[t]
    ga[0] = 0
    np.multiply(gb[1:], h[:-1], out=ga[1:])


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def _py_xoshiro_fill(state, out):
    s0, s1, s2, s3 = (int(v) for v in state)
    for i in range(out.shape[0]):
        result = (_rotl((s0 + s3) & _MASK64, 23) + s0) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        out[i] = result
    state[:] = (s0, s1, s2, s3)


_PY = {
    "affine_scan_forward": _py_affine_scan_forward,
    "affine_scan_backward": _py_affine_scan_backward,
    "xoshiro_fill": _py_xoshiro_fill,
}


def _impl(name: str, backend: str | None):
    backend = backend or BACKEND
    if backend == "compiled":
        if _ext is None:
            raise RuntimeError("compiled kernels are not built")
        return getattr(_ext, name)
    if backend == "python":
        return _PY[name]
    raise ValueError(f"unknown backend {backend!r}")


def affine_scan_forward(a: np.ndarray, b: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Sequential scan of ``h[t] = a[t] * h[t-1] + b[t]`` along axis 0 (h[-1] = 0)."""
    a2 = np.ascontiguousarray(a).reshape(a.shape[0], -1)
    b2 = np.ascontiguousarray(b, dtype=a2.dtype).reshape(a2.shape)
    h = np.empty_like(a2)
    _impl("affine_scan_forward", backend)(a2, b2, h)
    return h.reshape(a.shape)


def affine_scan_backward(a: np.ndarray, h: np.ndarray, gh: np.ndarray,
                         backend: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the scan with respect to ``a`` and ``b`` given ``dL/dh``."""
    shape = a.shape
    a2 = np.ascontiguousarray(a).reshape(shape[0], -1)
    h2 = np.ascontiguousarray(h, dtype=a2.dtype).reshape(a2.shape)
    g2 = np.ascontiguousarray(gh, dtype=a2.dtype).reshape(a2.shape)
    ga = np.empty_like(a2)
    gb = np.empty_like(a2)
    _impl("affine_scan_backward", backend)(a2, h2, g2, ga, gb)
    return ga.reshape(shape), gb.reshape(shape)


def xoshiro_fill(state: np.ndarray, n: int, backend: str | None = None) -> np.ndarray:
    out = np.empty(n, dtype=np.uint64)
    _impl("xoshiro_fill", backend)(state, out)
    return out
