"""Discretisation, both scan evaluations and the FLOP counters."""
import math

import mpmath
import numpy as np
import pytest

from superscan import functional as F
from superscan import kernels
from superscan.ssm import (SsmParams, count_flops, discretize, init_ssm, parallel_affine_scan,
                           parallel_flops, recurrent_flops, scan_parallel, scan_recurrent,
                           ssm_block, token_params)
from superscan.rng import Rng


def random_params(rng, C=4, d=3, std=0.5):
    return SsmParams.from_weights(init_ssm(rng, C, d, std=std))


def unrolled(params, x):
    """h_t = sum_k (prod_{j>k} Abar_j) Bbar_k x_k, evaluated term by term."""
    dt, B, Cm = (np.asarray(v) for v in token_params(params, x))
    Abar, Bbar = (np.asarray(v) for v in discretize(dt, params.A, B))
    L = x.shape[0]
    y = np.zeros_like(x)
    for t in range(L):
        h = np.zeros(Abar.shape[1:])
        for k in range(t + 1):
            term = Bbar[k] * x[k][:, None]
            for j in range(k + 1, t + 1):
                term = term * Abar[j]
            h = h + term
        y[t] = h @ Cm[t] + params.D * x[t]
    return y


class TestDiscretize:
    def test_small_step_limit(self):
        dt = np.full((1, 1), 1e-12)
        Abar, Bbar = discretize(dt, np.array([[-1.0]]), np.array([[2.0]]))
        assert Abar[0, 0, 0] == pytest.approx(1.0, abs=1e-11)
        assert abs(Bbar[0, 0, 0]) < 1e-11

    def test_ln2_case(self):
        Abar, Bbar = discretize(np.full((1, 1), math.log(2)), np.array([[1.0]]), np.array([[0.7]]))
        assert Abar[0, 0, 0] == pytest.approx(2.0, abs=1e-15)
        assert Bbar[0, 0, 0] == pytest.approx(0.7, abs=1e-15)

    def test_series_branch_uses_dt_times_b(self):
        dt = np.array([[1e-9]])
        _, Bbar = discretize(dt, np.array([[-1.0]]), np.array([[3.0]]))
        assert Bbar[0, 0, 0] == pytest.approx(3e-9, rel=1e-12)

    def test_against_extended_precision(self, f64, nprng):
        mpmath.mp.dps = 50
        dt = nprng.uniform(1e-3, 2.0, size=(5, 3))
        A = -nprng.uniform(0.1, 8.0, size=(3, 4))
        B = nprng.normal(size=(5, 4))
        Abar, Bbar = discretize(dt, A, B)
        worst = 0.0
        for l in range(5):
            for c in range(3):
                for i in range(4):
                    da = mpmath.mpf(dt[l, c]) * mpmath.mpf(A[c, i])
                    ra = mpmath.exp(da)
                    rb = mpmath.expm1(da) / mpmath.mpf(A[c, i]) * mpmath.mpf(B[l, i])
                    worst = max(worst, abs((Abar[l, c, i] - ra) / ra), abs((Bbar[l, c, i] - rb) / rb))
        assert worst <= 1e-10

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            discretize(np.zeros((1, 1)), np.array([[-1.0]]), np.array([[1.0]]))


class TestRecurrent:
    def test_skip_only(self, f64):
        p = random_params(Rng(0))
        p = SsmParams(p.A, np.ones(4), p.w_b, np.zeros_like(p.w_c), p.w_dt, p.b_dt)
        x = Rng(1).normal((7, 4))
        np.testing.assert_array_equal(scan_recurrent(p, x), x)

    def test_geometric_recurrence(self, f64):
        h = F.affine_scan(np.full((3, 1), 0.5), np.ones((3, 1)))
        np.testing.assert_array_equal(h[:, 0], [1.0, 1.5, 1.75])
        np.testing.assert_array_equal(F.affine_scan(np.full((3, 1), 0.5), np.ones((3, 1)), "parallel")[:, 0],
                                      [1.0, 1.5, 1.75])

    def test_unrolled_oracle(self, f64):
        rng = Rng(2)
        p = random_params(rng)
        x = rng.normal((16, 4))
        np.testing.assert_allclose(scan_recurrent(p, x), unrolled(p, x), atol=1e-12, rtol=0)

    @pytest.mark.parametrize("backend", kernels.available_backends())
    def test_backends_bitwise(self, backend):
        rng = Rng(3)
        p = random_params(rng)
        x = rng.normal((33, 4), dtype=np.float32)
        ref = scan_recurrent(p, x, backend="python")
        np.testing.assert_array_equal(scan_recurrent(p, x, backend=backend), ref)

    def test_empty_and_bad_shapes(self):
        p = random_params(Rng(0))
        with pytest.raises(ValueError):
            scan_recurrent(p, np.zeros((0, 4)))
        with pytest.raises(ValueError):
            scan_recurrent(p, np.zeros((3, 5)))


class TestParallel:
    def test_length_one_exact(self, f64):
        rng = Rng(4)
        p = random_params(rng)
        x = rng.normal((1, 4))
        np.testing.assert_array_equal(scan_parallel(p, x), scan_recurrent(p, x))

    def test_prefix_count(self):
        h = parallel_affine_scan(np.ones((11, 2)), np.ones((11, 2)))
        np.testing.assert_array_equal(h[:, 0], np.arange(1, 12))

    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-10)])
    def test_random_lengths(self, dtype, tol):
        rng = Rng(5)
        for L in list(range(2, 40)) + [63, 64, 65, 255, 256]:
            p = random_params(rng)
            p = SsmParams(*(np.asarray(v, dtype=dtype) for v in p.as_dict().values()))
            x = rng.normal((L, 4), dtype=dtype)
            assert np.abs(scan_parallel(p, x) - scan_recurrent(p, x)).max() <= tol

    def test_threaded_matches_serial(self, nprng):
        a = nprng.uniform(0.5, 1.0, size=(100, 6, 5))
        b = nprng.normal(size=(100, 6, 5))
        np.testing.assert_array_equal(parallel_affine_scan(a, b, threads=3), parallel_affine_scan(a, b))


class TestBlock:
    def test_single_token_hand(self, f64):
        rng = Rng(6)
        p = random_params(rng)
        x = rng.normal((1, 4))
        dt = np.log1p(np.exp(x @ p.w_dt.T + p.b_dt))
        B, Cm = x @ p.w_b.T, x @ p.w_c.T
        Bbar = np.expm1(dt[0][:, None] * p.A) / p.A * B[0]
        y = (Bbar * x[0][:, None]) @ Cm[0] + p.D * x[0]
        np.testing.assert_allclose(ssm_block(x, p)[0], y, atol=1e-12)

    def test_constant_sequence_still_varies(self, f64):
        rng = Rng(7)
        p = random_params(rng)
        x = np.tile(rng.normal((1, 4)), (6, 1))
        y = ssm_block(x, p)
        assert not np.allclose(y[0], y[-1])

    def test_zero_in_zero_out(self, f64):
        p = random_params(Rng(8))
        for direction in ("forward", "bidirectional"):
            np.testing.assert_array_equal(ssm_block(np.zeros((5, 4)), p, direction), 0.0)

    def test_bidirectional_is_average(self, f64):
        rng = Rng(9)
        p = random_params(rng)
        x = rng.normal((6, 4))
        fwd = scan_recurrent(p, x)
        back = scan_recurrent(p, x[::-1].copy())[::-1]
        np.testing.assert_allclose(ssm_block(x, p, "bidirectional"), (fwd + back) / 2, atol=1e-14)

    def test_unknown_direction(self):
        with pytest.raises(ValueError):
            ssm_block(np.zeros((2, 4)), random_params(Rng(0)), "sideways")


class TestInit:
    def test_negative_a_and_positive_step(self):
        w = init_ssm(Rng(0), 8, 16)
        assert np.all(w["A"] < 0)
        np.testing.assert_array_equal(w["A"][0], -np.arange(1, 17))
        dt = np.log1p(np.exp(w["b_dt"]))
        assert np.all((dt > 9e-3) & (dt < 0.11))


class TestFlops:
    def test_linear_in_length(self):
        rng = Rng(10)
        p = random_params(rng)
        counts = []
        for L in (8, 16):
            with count_flops() as fc:
                scan_recurrent(p, rng.normal((L, 4)))
            counts.append(fc.total)
        assert counts[1] == 2 * counts[0]
        assert counts[0] == recurrent_flops(8, 4, 3)

    def test_parallel_counter(self):
        rng = Rng(11)
        p = random_params(rng)
        with count_flops() as fc:
            scan_parallel(p, rng.normal((10, 4)))
        assert fc.total == parallel_flops(10, 4, 3)


def test_state_stays_bounded():
    rng = np.random.default_rng(0)
    trials, L = 10_000, 50
    a = rng.uniform(0.0, 0.99, size=(L, trials))
    u = rng.uniform(-1, 1, size=(L, trials))
    h = kernels.affine_scan_forward(a, u)
    bound = np.abs(u).max(axis=0) / (1 - a.max(axis=0))
    assert np.all(np.abs(h).max(axis=0) <= bound + 1e-12)
