"""Soft k-means superpixel sampling restricted to neighbouring grid cells.

Superpixels start as block means over a regular ``gh x gw`` grid. Each
iteration scores every pixel against the (at most) nine superpixels whose
cells surround its home cell with ``exp(-||x_i - s_j||^2)`` (feature
channels only, no positional term), then moves each superpixel to the
similarity-weighted mean of its pixels. Scores are stored as ``[N, 9]``
slots ordered by ascending superpixel index; slots that fall outside the
grid are marked invalid and hold zero.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .autodiff import straight_through, value

Z_FLOOR = 1e-12
LOG_EPS = 1e-12


@dataclass(frozen=True)
class SuperpixelGrid:
    gh: int
    gw: int
    cell_h: int
    cell_w: int

    @property
    def M(self) -> int:
        return self.gh * self.gw

    @property
    def H(self) -> int:
        return self.gh * self.cell_h

    @property
    def W(self) -> int:
        return self.gw * self.cell_w

    @property
    def N(self) -> int:
        return self.H * self.W

    @classmethod
    def for_shape(cls, h: int, w: int, M: int) -> "SuperpixelGrid":
        """Grid with ``M`` cells tiling an ``h x w`` map, aspect ratio closest to the map's."""
        if M < 1:
            raise ValueError(f"superpixel count must be >= 1, got {M}")
        best = None
        for gh in range(1, M + 1):
            if M % gh:
                continue
            gw = M // gh
            if h % gh or w % gw:
                continue
            score = abs(np.log((h / gh) / (w / gw)))
            if best is None or score < best[0] - 1e-12:
                best = (score, gh, gw)
        if best is None:
            raise ValueError(f"{M} superpixels cannot tile a {h}x{w} map with whole cells")
        _, gh, gw = best
        return cls(gh, gw, h // gh, w // gw)

    def neighbors(self) -> tuple[np.ndarray, np.ndarray]:
        """(indices [N, 9], valid [N, 9]); invalid slots carry index -1."""
        return _neighbors(self)


@functools.lru_cache(maxsize=64)
def _neighbors(grid: SuperpixelGrid):
    rows = np.arange(grid.H) // grid.cell_h
    cols = np.arange(grid.W) // grid.cell_w
    R = np.repeat(rows, grid.W)
    Cc = np.tile(cols, grid.H)
    nbr = np.full((grid.N, 9), -1, dtype=np.int64)
    k = 0
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r, c = R + dr, Cc + dc
            ok = (r >= 0) & (r < grid.gh) & (c >= 0) & (c < grid.gw)
            nbr[ok, k] = r[ok] * grid.gw + c[ok]
            k += 1
    valid = nbr >= 0
    nbr.setflags(write=False)
    valid.setflags(write=False)
    return nbr, valid


@dataclass
class SuperpixelDecomposition:
    grid: SuperpixelGrid
    s: object            # [M, C] superpixel features
    sim: object          # [N, 9] similarities, zero on invalid slots
    assoc: object        # [N, 9] row-normalised association
    mask: np.ndarray     # [N] hard assignment (superpixel index)
    slot: np.ndarray     # [N] slot of the hard assignment


def _check_grid(x, grid: SuperpixelGrid):
    h, w = value(x).shape[:2]
    if (h, w) != (grid.H, grid.W):
        raise ValueError(f"feature map {h}x{w} does not match grid extents {grid.H}x{grid.W}")


def init_superpixels(x, grid: SuperpixelGrid):
    """Block means of ``x`` [h, w, C] over the grid cells -> [M, C]."""
    _check_grid(x, grid)
    C = value(x).shape[2]
    blocks = F.reshape(x, (grid.gh, grid.cell_h, grid.gw, grid.cell_w, C))
    return F.reshape(F.mean(blocks, axis=(1, 3)), (grid.M, C))


def neighbor_sqdist(x, s, grid: SuperpixelGrid):
    """Squared feature distances [N, 9] from each pixel to its candidate superpixels."""
    nbr, valid = grid.neighbors()
    N, C = value(x).shape
    cand = F.take(s, np.where(valid, nbr, 0))
    diff = F.sub(F.reshape(x, (N, 1, C)), cand)
    return F.sum(F.square(diff), axis=2)


def similarity_step(x, s, grid: SuperpixelGrid):
    """exp(-||x(i) - s(j)||^2) for the 3x3 neighbouring cells of pixel i's home cell."""
    _, valid = grid.neighbors()
    return F.where(valid, F.exp(F.neg(neighbor_sqdist(x, s, grid))), 0.0)


def update_superpixels(x, sim, grid: SuperpixelGrid, s_prev=None):
    """Similarity-weighted pixel means; a superpixel with zero total weight keeps ``s_prev``."""
    nbr, valid = grid.neighbors()
    N, C = value(x).shape
    flat = np.flatnonzero(valid.reshape(-1))
    pix = flat // 9
    dest = nbr.reshape(-1)[flat]
    wts = F.take(F.reshape(sim, (N * 9,)), flat)
    num = F.index_add(grid.M, dest, F.mul(F.reshape(wts, (-1, 1)), F.take(x, pix)))
    z = F.index_add(grid.M, dest, wts)
    s = F.div(num, F.reshape(F.clamp_min(z, Z_FLOOR), (grid.M, 1)))
    empty = value(z) == 0
    if s_prev is not None and empty.any():
        s = F.where(empty[:, None], s_prev, s)
    return s


def association(d2, grid: SuperpixelGrid):
    """Row-normalised similarities, computed as a masked softmax of -d2 (underflow-safe)."""
    _, valid = grid.neighbors()
    return F.softmax(F.where(valid, F.neg(d2), -np.inf), axis=1)


def hard_slots(scores, valid) -> np.ndarray:
    """Per-row argmax over valid slots; ties go to the lowest slot (lowest superpixel index)."""
    sc = np.where(valid, value(scores), -np.inf)
    return np.argmax(sc, axis=1)


def sample(x, M: int, T: int = 5, grid: SuperpixelGrid | None = None) -> SuperpixelDecomposition:
    """Run ``T`` similarity/update alternations on features ``x`` [h, w, C]."""
    if T < 1:
        raise ValueError(f"iteration count must be >= 1, got {T}")
    h, w, C = value(x).shape
    grid = grid or SuperpixelGrid.for_shape(h, w, M)
    if grid.M != M:
        raise ValueError(f"grid has {grid.M} cells, expected {M}")
    nbr, valid = grid.neighbors()
    xf = F.reshape(x, (h * w, C))
    s = init_superpixels(x, grid)
    for _ in range(T):
        d2 = neighbor_sqdist(xf, s, grid)
        sim = F.where(valid, F.exp(F.neg(d2)), 0.0)
        s = update_superpixels(xf, sim, grid, s)
    assoc = association(d2, grid)
    slot = hard_slots(F.neg(d2), valid)
    mask = nbr[np.arange(h * w), slot]
    return SuperpixelDecomposition(grid, s, sim, assoc, mask, slot)


def one_hot(idx: np.ndarray, n: int, dtype) -> np.ndarray:
    out = np.zeros((idx.shape[0], n), dtype=dtype)
    out[np.arange(idx.shape[0]), idx] = 1
    return out


def gumbel_one_hot(assoc, tau: float = 1.0, mode: str = "infer", rng=None, valid=None):
    """Hard one-hot rows from an association matrix.

    ``train``: Gumbel-max sample on ``log(assoc + 1e-12)`` with a
    straight-through gradient through ``softmax(logits / tau)``.
    ``infer``: plain argmax, no noise.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    av = value(assoc)
    valid = np.ones(av.shape, dtype=bool) if valid is None else valid
    if mode == "infer":
        return one_hot(hard_slots(av, valid), av.shape[1], av.dtype)
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValueError("train mode needs an rng for Gumbel noise")
    noise = rng.gumbel(av.shape, dtype=av.dtype)
    logits = F.where(valid, F.add(F.log(F.add(assoc, LOG_EPS)), noise), -np.inf)
    soft = F.softmax(F.div(logits, tau), axis=1)
    hard = one_hot(hard_slots(logits, valid), av.shape[1], av.dtype)
    return straight_through(hard, soft)


def scatter(mask, tokens, grid: SuperpixelGrid):
    """Broadcast superpixel tokens [M, C] back to pixels [N, C].

    ``mask`` is either a hard assignment vector [N] of superpixel indices or
    slot weights [N, 9] (one-hot or soft) over each pixel's candidates.
    """
    mv = np.asarray(value(mask))
    M = value(tokens).shape[0]
    if mv.ndim == 1:
        if not np.issubdtype(mv.dtype, np.integer):
            raise TypeError("hard masks must hold integer superpixel indices")
        if mv.size and (mv.min() < 0 or mv.max() >= M):
            raise IndexError(f"mask index out of range for {M} superpixels")
        return F.take(tokens, mv)
    nbr, valid = grid.neighbors()
    if mv.shape != nbr.shape:
        raise ValueError(f"slot mask shape {mv.shape} != {nbr.shape}")
    cand = F.take(tokens, np.where(valid, nbr, 0))
    return F.sum(F.mul(F.reshape(mask, mv.shape + (1,)), cand), axis=1)


def assignment_distance(x: np.ndarray, s: np.ndarray, mask: np.ndarray) -> float:
    """Total within-assignment squared distance sum_i ||x(i) - s(mask[i])||^2."""
    d = np.asarray(x) - np.asarray(s)[mask]
    return float((d * d).sum())


def label_map(decomp: SuperpixelDecomposition) -> np.ndarray:
    return decomp.mask.reshape(decomp.grid.H, decomp.grid.W)
