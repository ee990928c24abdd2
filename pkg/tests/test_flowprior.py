import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psep import diffcore as dc
from psep.diffcore import Tensor
from psep.errors import ShapeError
from psep.flowprior import (ActNorm, Coupling, FlowConfig, FlowModel, flow_forward,
                            flow_inverse, flow_sample, grad_log_density,
                            initialize_actnorm, log_density)
from psep.signals import Frame

TINY = FlowConfig(n_blocks=2, n_flows=2, cond_layers=2, width=6)


def random_model(seed, cfg=TINY, scale=0.5):
    m = FlowModel(cfg)
    m.randomize(np.random.default_rng(seed), scale=scale)
    return m


# ----------------------------------------------------------------------
# identity behaviour of a fresh model
# ----------------------------------------------------------------------

def test_fresh_model_is_identity_flow():
    m = FlowModel(TINY)
    x = np.random.default_rng(0).normal(size=32)
    z, log_det = flow_forward(m, x)
    assert log_det == 0.0
    assert np.array_equal(np.sort(z.reshape(-1)), np.sort(x))  # squeeze permutes only
    assert np.array_equal(flow_inverse(m, z), x)


def test_identity_model_inverse_is_identity():
    m = FlowModel(TINY)
    z = np.random.default_rng(1).normal(size=(4, 8))
    assert np.array_equal(flow_inverse(m, z), dc.unsqueeze(dc.unsqueeze(Tensor(z))).data.reshape(-1))


def test_forced_coupling_affine_closed_form():
    # single coupling on a length-2 squeezed input with s = 2, t = 1 forced:
    # z_odd = (x_odd - 1) / 2 and log_det = -ln 2
    cfg = FlowConfig(n_blocks=1, n_flows=1, cond_layers=1, width=4)
    coupling = Coupling(half_channels=1, cfg=cfg, rng=None)
    clamp = cfg.log_scale_clamp
    coupling.cond.head_s_b.data[...] = clamp * math.atanh(math.log(2.0) / clamp)
    coupling.cond.head_t_b.data[...] = 1.0
    x = Tensor(np.array([[3.0], [5.0]]))  # even channel 3.0, odd channel 5.0
    y, log_det = coupling.forward_t(x)
    assert y.data[0, 0] == 3.0
    assert y.data[1, 0] == pytest.approx((5.0 - 1.0) / 2.0, rel=1e-12)
    assert float(log_det.data) == pytest.approx(-math.log(2.0), rel=1e-12)
    back, inv_ld = coupling.inverse_np(y.data)
    assert np.allclose(back, x.data, atol=1e-12)
    assert inv_ld == pytest.approx(math.log(2.0), rel=1e-12)


def test_mode_frame_from_zero_latent_is_deterministic():
    m = random_model(7)
    z = np.zeros((4, 8))
    a = flow_inverse(m, z)
    b = flow_inverse(m, z)
    assert np.array_equal(a, b)


# ----------------------------------------------------------------------
# bijectivity and log-det
# ----------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(12))
def test_inverse_of_forward_is_identity(seed):
    rng = np.random.default_rng(seed)
    m = random_model(seed)
    x = rng.normal(size=32)
    z, _ = flow_forward(m, x)
    assert np.max(np.abs(flow_inverse(m, z) - x)) < 1e-5


@settings(deadline=None, max_examples=15)
@given(seed=st.integers(0, 9999), blocks=st.integers(1, 3), scale=st.floats(0.1, 0.8))
def test_bijectivity_property(seed, blocks, scale):
    cfg = FlowConfig(n_blocks=blocks, n_flows=2, cond_layers=2, width=4)
    m = random_model(seed, cfg, scale)
    x = np.random.default_rng(seed + 1).normal(size=8 * 2 ** blocks)
    z, _ = flow_forward(m, x)
    assert np.max(np.abs(flow_inverse(m, z) - x)) < 1e-5


def test_forward_log_det_negates_inverse_log_det():
    m = random_model(3)
    x = np.random.default_rng(4).normal(size=32)
    z, ld_fwd = flow_forward(m, x)
    _, ld_inv = flow_inverse(m, z, return_log_det=True)
    assert ld_fwd == pytest.approx(-ld_inv, rel=1e-9, abs=1e-9)


def test_log_det_matches_brute_force_jacobian():
    cfg = FlowConfig(n_blocks=3, n_flows=2, cond_layers=2, width=6)
    m = random_model(11, cfg, scale=0.6)
    x = np.random.default_rng(12).normal(size=8)
    eps = 1e-6
    jac = np.zeros((8, 8))
    for i in range(8):
        hi, lo = x.copy(), x.copy()
        hi[i] += eps
        lo[i] -= eps
        jac[:, i] = (flow_forward(m, hi)[0].reshape(-1) - flow_forward(m, lo)[0].reshape(-1)) / (2 * eps)
    _, ld_ref = np.linalg.slogdet(jac)
    _, ld_model = flow_forward(m, x)
    assert abs(ld_model - ld_ref) / max(abs(ld_ref), 1.0) < 1e-3


def test_forward_rejects_bad_length():
    m = FlowModel(TINY)  # needs multiples of 4
    with pytest.raises(ShapeError):
        flow_forward(m, np.ones(30))


# ----------------------------------------------------------------------
# densities
# ----------------------------------------------------------------------

def test_identity_flow_density_zero_frame():
    m = FlowModel(TINY)
    got = log_density(m, np.zeros(32))
    assert got == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)


def test_identity_flow_density_ones_frame():
    m = FlowModel(TINY)
    got = log_density(m, np.ones(32))
    assert got == pytest.approx(-0.5 * (1 + math.log(2 * math.pi)), abs=1e-12)


def test_density_normalizes_on_two_sample_grid():
    # tiny 2-sample flow: integrate exp(total log-density) over [-3, 3]^2
    cfg = FlowConfig(n_blocks=1, n_flows=2, cond_layers=1, width=4)
    m = random_model(22, cfg, scale=0.3)
    h = 0.06
    axis = np.arange(-3.0, 3.0 + h / 2, h)
    rows = []
    for a in axis:
        rows.append(np.trapezoid(
            [math.exp(2.0 * log_density(m, np.array([a, b]))) for b in axis], dx=h))
    mass = np.trapezoid(rows, dx=h)
    assert mass == pytest.approx(1.0, abs=0.05)


def test_per_sample_density_independent_of_other_frames():
    m = random_model(5)
    x = np.random.default_rng(6).normal(size=32)
    alone = log_density(m, x)
    for other_seed in range(3):
        _ = log_density(m, np.random.default_rng(other_seed).normal(size=32))
        assert log_density(m, x) == alone


# ----------------------------------------------------------------------
# gradients
# ----------------------------------------------------------------------

def test_identity_flow_score_is_negative_input():
    m = FlowModel(TINY)
    x = np.random.default_rng(7).normal(size=32)
    assert np.allclose(grad_log_density(m, x), -x, atol=1e-12)


def test_grad_matches_finite_differences():
    m = random_model(8)
    x = np.random.default_rng(9).normal(size=16)
    g = grad_log_density(m, x)
    num = np.zeros(16)
    for i in range(16):
        hi, lo = x.copy(), x.copy()
        hi[i] += 1e-5
        lo[i] -= 1e-5
        num[i] = (log_density(m, hi) * 16 - log_density(m, lo) * 16) / 2e-5
    rel = np.abs(g - num) / np.maximum.reduce([np.abs(g), np.abs(num), np.ones(16)])
    assert rel.max() < 1e-4


def test_grad_finite_at_model_mode():
    m = random_model(10)
    mode = flow_inverse(m, np.zeros((4, 8)))
    g = grad_log_density(m, mode)
    assert np.all(np.isfinite(g))


# ----------------------------------------------------------------------
# sampling
# ----------------------------------------------------------------------

def test_sampling_deterministic_per_seed():
    m = random_model(13)
    a = flow_sample(m, np.random.default_rng(99), 2, frame_len=32)
    b = flow_sample(m, np.random.default_rng(99), 2, frame_len=32)
    for fa, fb in zip(a, b):
        assert np.array_equal(fa.samples, fb.samples)


def test_identity_flow_samples_are_standard_normal():
    m = FlowModel(TINY)
    frames = flow_sample(m, np.random.default_rng(0), 40, frame_len=64)
    pooled = np.concatenate([f.samples for f in frames])
    assert pooled.std() == pytest.approx(1.0, rel=0.05)
    assert abs(pooled.mean()) < 0.05


# ----------------------------------------------------------------------
# activation normalization
# ----------------------------------------------------------------------

def test_actnorm_init_standardizes_first_batch():
    rng = np.random.default_rng(30)
    an = ActNorm(channels=3)
    data = 2.5 + 1.7 * rng.normal(size=(3, 200))
    an.init_from(data)
    y, _ = an.forward_t(Tensor(data))
    assert np.allclose(y.data.mean(axis=1), 0.0, atol=1e-9)
    assert np.allclose(y.data.std(axis=1), 1.0, atol=1e-3)


def test_actnorm_contributes_log_det():
    an = ActNorm(channels=2)
    an.log_scale.data[...] = np.array([[0.5], [-0.25]])
    x = Tensor(np.ones((2, 10)))
    _, ld = an.forward_t(x)
    assert float(ld.data) == pytest.approx(-10 * (0.5 - 0.25), rel=1e-12)


def test_initialize_actnorm_walks_all_layers():
    m = FlowModel(TINY, rng=np.random.default_rng(31))
    assert not m.actnorm_initialized
    frames = [np.random.default_rng(i).normal(size=32) for i in range(4)]
    initialize_actnorm(m, frames)
    assert m.actnorm_initialized


def test_trained_style_init_has_zero_heads():
    m = FlowModel(TINY, rng=np.random.default_rng(32))
    x = np.random.default_rng(33).normal(size=32)
    z, log_det = flow_forward(m, x)  # couplings are identity at init
    assert log_det == 0.0
    assert np.array_equal(flow_inverse(m, z), x)
