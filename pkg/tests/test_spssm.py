import numpy as np
import pytest

from superscan import functional as F
from superscan.autodiff import grad_check, relaxed
from superscan.context import RunContext
from superscan.rng import Rng
from superscan.spssm import SpSsmConfig, flops, init_spssm, sp_ssm_forward, spssm_param_count
from superscan.ssm import count_flops, recurrent_flops

from _oracles import conv2d_same, sigmoid, silu


def test_zero_conv_passes_input_through():
    cfg = SpSsmConfig(4, scale=2, M=4, T=2, d_state=3)
    w = init_spssm(Rng(0), cfg)
    w["conv.weight"][:] = 0
    x = Rng(1).normal((2, 4, 8, 8), dtype=np.float32)
    np.testing.assert_array_equal(sp_ssm_forward(x, cfg, w), x)
    np.testing.assert_array_equal(sp_ssm_forward(x, cfg, w, RunContext("train", Rng(2))), x)


def test_straight_line_oracle(f64):
    C, d = 3, 2
    cfg = SpSsmConfig(C, scale=1, M=1, T=3, d_state=d, conv_groups=1)
    w = init_spssm(Rng(3), cfg, std=0.4)
    x = Rng(4).normal((1, C, 2, 2))
    xp = silu(conv2d_same(x, w["conv.weight"], w["conv.bias"]))
    pix = xp[0].reshape(C, 4).T
    s = pix.mean(0)
    for _ in range(3):
        k = np.exp(-((pix - s) ** 2).sum(1))
        s = (k[:, None] * pix).sum(0) / k.sum()
    dt = np.log1p(np.exp(w["ssm.w_dt"] @ s + w["ssm.b_dt"]))
    Bv, Cv = w["ssm.w_b"] @ s, w["ssm.w_c"] @ s
    A = w["ssm.A"]
    Bbar = np.expm1(dt[:, None] * A) / A * Bv
    token = (Bbar * s[:, None]) @ Cv + w["ssm.D"] * s
    att = sigmoid(token)
    ref = att[None, :, None, None] * xp + x
    assert np.abs(sp_ssm_forward(x, cfg, w) - ref).max() <= 1e-6


@pytest.mark.parametrize("H,W", [(8, 8), (16, 8), (32, 32)])
@pytest.mark.parametrize("s", [1, 2, 4])
def test_shape_preserved(H, W, s):
    cfg = SpSsmConfig(4, scale=s, M=2, T=1, d_state=2)
    x = Rng(5).normal((1, 4, H, W), dtype=np.float32)
    assert sp_ssm_forward(x, cfg, init_spssm(Rng(6), cfg)).shape == x.shape


def test_indivisible_extent():
    cfg = SpSsmConfig(4, scale=4, M=1)
    with pytest.raises(ValueError):
        sp_ssm_forward(np.zeros((1, 4, 6, 8)), cfg, init_spssm(Rng(0), cfg))


def test_bad_config():
    with pytest.raises(ValueError):
        SpSsmConfig(4, scale=0)
    with pytest.raises(ValueError):
        SpSsmConfig(4, M=0)


def test_flops_report():
    rep = flops(SpSsmConfig(16, 1, 64), 64, 64)
    assert rep["dense_equivalent"] == 4096 and rep["ratio"] == 64.0
    assert flops(SpSsmConfig(16, 2, 64), 64, 64)["dense_equivalent"] == 1024


def test_counter_matches_closed_form():
    rng = np.random.default_rng(8)
    for _ in range(20):
        s = int(rng.choice([1, 2, 4]))
        M = int(rng.choice([1, 2, 4, 8]))
        h, w = 4 * int(rng.integers(1, 4)), 4 * int(rng.integers(1, 4))
        C = int(rng.choice([2, 4]))
        cfg = SpSsmConfig(C, s, M, T=1, d_state=3)
        x = Rng(int(rng.integers(1000))).normal((1, C, h * s, w * s), dtype=np.float32)
        with count_flops() as fc:
            sp_ssm_forward(x, cfg, init_spssm(Rng(0), cfg))
        assert fc.total == recurrent_flops(M, C, 3)
        assert recurrent_flops(h * w, C, 3) / fc.total == h * w / M


def test_scan_work_independent_of_resolution():
    cfg = SpSsmConfig(4, 1, 4, T=1, d_state=3)
    w = init_spssm(Rng(0), cfg)
    totals = []
    for n in (8, 32):
        with count_flops() as fc:
            sp_ssm_forward(Rng(1).normal((1, 4, n, n)), cfg, w)
        totals.append(fc.total)
    assert totals[0] == totals[1]


def test_param_count_matches_tree():
    for groups in (None, 1, 2):
        cfg = SpSsmConfig(8, conv_groups=groups, d_state=4)
        assert spssm_param_count(cfg) == sum(v.size for v in init_spssm(Rng(0), cfg).values())


def test_full_resolution_variant_shape():
    cfg = SpSsmConfig(4, scale=2, M=4, T=1, d_state=2, attend_full_res=True)
    x = Rng(2).normal((1, 4, 8, 8))
    assert sp_ssm_forward(x, cfg, init_spssm(Rng(3), cfg)).shape == x.shape


def test_gradient_train_mode(f64):
    cfg = SpSsmConfig(3, scale=2, M=4, T=2, d_state=2)
    w = init_spssm(Rng(9), cfg, std=0.3)
    x = Rng(10).normal((1, 3, 8, 8))
    R = Rng(11).normal((1, 3, 8, 8))
    f = lambda v: F.sum(F.mul(sp_ssm_forward(v, cfg, w, RunContext("train", Rng(7))), R))  # noqa: E731
    with relaxed():
        assert grad_check(f, x, coords=list(range(0, 192, 7))).max_rel_error <= 1e-4
