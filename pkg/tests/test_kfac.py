import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedrco.errors import DegenerateTrace, InversesNotReady, ShapeMismatch
from fedrco.kfac import (KfacConfig, KfacLayerState, accumulate_factors, damping_ridges, pi_correction,
                         precondition_gradient, preconditioner_spectrum, refresh_inverses_if_due)
from fedrco.model import LayerCapture
from fedrco.numerics import kronecker_precondition_oracle

from conftest import random_spd


def capture_for(m_a, m_g):
    """A capture whose batch estimates are exactly m_a and m_g (via square roots, B_eff = d)."""
    n = m_a.shape[0]
    a = np.linalg.cholesky(m_a) * math.sqrt(n)
    g = np.linalg.cholesky(m_g) * math.sqrt(n)
    if g.shape[1] != n:  # pad G with zero columns to share B_eff
        g = np.hstack([g, np.zeros((g.shape[0], n - g.shape[1]))])
    return LayerCapture(a=a, g=g, batch_size=n)


def ready_state(omega_inv, gamma_inv):
    return KfacLayerState(d_in=omega_inv.shape[0], d_out=gamma_inv.shape[0], omega=np.eye(omega_inv.shape[0]),
                          gamma=np.eye(gamma_inv.shape[0]), omega_inv=omega_inv, gamma_inv=gamma_inv,
                          initialized=True)


def test_first_batch_seeds_and_alpha_one_is_batch_estimate(rng):
    m = random_spd(rng, 3)
    s = accumulate_factors(KfacLayerState.empty(3, 3), capture_for(m, m), 0.95)
    np.testing.assert_allclose(s.omega, m, atol=1e-12)
    m2 = random_spd(rng, 3)
    s2 = accumulate_factors(s, capture_for(m2, m2), 1.0)
    np.testing.assert_allclose(s2.omega, m2, atol=1e-12)


def test_ema_converges_geometrically(rng):
    m0, m = random_spd(rng, 3), random_spd(rng, 3)
    s = accumulate_factors(KfacLayerState.empty(3, 3), capture_for(m0, m0), 0.95)
    cap = capture_for(m, m)
    for k in range(1, 5):
        s = accumulate_factors(s, cap, 0.95)
        np.testing.assert_allclose(np.abs(s.omega - m), 0.05 ** k * np.abs(m0 - m), atol=1e-10)


def test_zero_activations_decay_factor(rng):
    m = random_spd(rng, 2)
    s = accumulate_factors(KfacLayerState.empty(2, 2), capture_for(m, m), 0.95)
    zero = LayerCapture(a=np.zeros((2, 4)), g=np.zeros((2, 4)), batch_size=4)
    s2 = accumulate_factors(s, zero, 0.95)
    np.testing.assert_allclose(s2.omega, 0.05 * s.omega)


def test_accumulate_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        accumulate_factors(KfacLayerState.empty(3, 2), LayerCapture(np.zeros((2, 4)), np.zeros((2, 4)), 4), 0.9)


def test_gamma_normalization_modes():
    a = np.ones((2, 6))
    g = np.ones((1, 6))
    cap = LayerCapture(a, g, batch_size=2)  # 3 positions per sample
    pos = accumulate_factors(KfacLayerState.empty(2, 1), cap, 1.0, "positions")
    bat = accumulate_factors(KfacLayerState.empty(2, 1), cap, 1.0, "batch")
    assert pos.gamma[0, 0] == pytest.approx(1.0)
    assert bat.gamma[0, 0] == pytest.approx(3.0)
    np.testing.assert_allclose(pos.omega, bat.omega)


def test_identity_factors_give_pi_one():
    eps = 0.03
    s = replace(KfacLayerState.empty(3, 3), omega=np.eye(3), gamma=np.eye(3), initialized=True)
    s = refresh_inverses_if_due(s, KfacConfig(damping_eps=eps))
    assert pi_correction(np.eye(3), np.eye(3)) == 1.0
    np.testing.assert_allclose(s.omega_inv, np.eye(3) / (1 + math.sqrt(eps)))
    np.testing.assert_allclose(s.gamma_inv, np.eye(3) / (1 + math.sqrt(eps)))


def test_pi_example_four_identity():
    eps = 0.03
    assert pi_correction(4 * np.eye(2), np.eye(2)) == pytest.approx(2.0)
    ro, rg = damping_ridges(4 * np.eye(2), np.eye(2), eps)
    assert ro == pytest.approx(2 * math.sqrt(eps))
    assert rg == pytest.approx(math.sqrt(eps) / 2)


def test_pi_modes_differ_only_by_dimension(rng):
    o, g = random_spd(rng, 4), random_spd(rng, 2)
    lit = pi_correction(o, g, "literal")
    norm = pi_correction(o, g, "normalized")
    assert lit == pytest.approx(norm * math.sqrt(4 / 2))


def test_degenerate_trace():
    with pytest.raises(DegenerateTrace):
        pi_correction(np.eye(2), np.zeros((2, 2)))
    with pytest.raises(DegenerateTrace):
        pi_correction(np.eye(2), np.full((2, 2), np.nan))


@settings(max_examples=50, deadline=None)
@given(c=st.floats(1e-3, 1e3), seed=st.integers(0, 10**6), eps=st.floats(1e-4, 1.0))
def test_ridge_product_is_eps_and_scale_invariant(c, seed, eps):
    rng = np.random.default_rng(seed)
    o, g = random_spd(rng, 3), random_spd(rng, 2)
    ro, rg = damping_ridges(o, g, eps)
    assert ro * rg == pytest.approx(eps, rel=1e-10)
    ro2, rg2 = damping_ridges(c * o, g / c, eps)
    assert ro2 * rg2 == pytest.approx(eps, rel=1e-10)


def test_identity_factor_direction_invariant_under_rescaling(rng):
    grad = rng.normal(size=(2, 3))
    cfg = KfacConfig(damping_eps=0.03)
    outs = []
    for c in (1.0, 7.0, 0.01):
        s = replace(KfacLayerState.empty(3, 2), omega=c * np.eye(3), gamma=np.eye(2) / c, initialized=True)
        u = precondition_gradient(grad, refresh_inverses_if_due(s, cfg))
        outs.append(u / np.linalg.norm(u))
    for u in outs[1:]:
        np.testing.assert_allclose(u, outs[0], atol=1e-12)


def test_lazy_clock_skips_and_counts():
    cfg = KfacConfig(t_inv=200)
    s = replace(KfacLayerState.empty(2, 2), omega=np.eye(2), gamma=np.eye(2), initialized=True)
    s = refresh_inverses_if_due(s, cfg)  # no inverse yet -> invert
    assert s.inversions == 1 and s.steps_since_inversion == 1
    s = replace(s, steps_since_inversion=5)
    s2 = refresh_inverses_if_due(s, cfg)
    assert s2.steps_since_inversion == 6 and s2.inversions == 1
    assert s2.omega_inv is s.omega_inv


def test_inversion_schedule_is_every_t_inv_steps():
    cfg = KfacConfig(t_inv=4)
    s = replace(KfacLayerState.empty(2, 2), omega=np.eye(2), gamma=np.eye(2), initialized=True)
    steps = []
    for k in range(13):
        before = s.inversions
        s = refresh_inverses_if_due(s, cfg)
        if s.inversions > before:
            steps.append(k)
    assert steps == [0, 4, 8, 12]
    assert s.inversions == math.ceil(13 / 4)


def test_force_and_not_initialized():
    with pytest.raises(InversesNotReady):
        refresh_inverses_if_due(KfacLayerState.empty(2, 2), KfacConfig())
    s = replace(KfacLayerState.empty(2, 2), omega=np.eye(2), gamma=np.eye(2), initialized=True)
    s = refresh_inverses_if_due(s, KfacConfig())
    assert refresh_inverses_if_due(s, KfacConfig(), force=True).inversions == 2


def test_precondition_identity_and_diagonal(rng):
    grad = rng.normal(size=(2, 3))
    np.testing.assert_array_equal(precondition_gradient(grad, ready_state(np.eye(3), np.eye(2))), grad)
    a, b = np.array([1.0, 2.0, 3.0]), np.array([0.5, 4.0])
    out = precondition_gradient(grad, ready_state(np.diag(a), np.diag(b)))
    np.testing.assert_allclose(out, grad * np.outer(b, a))


def test_precondition_errors(rng):
    with pytest.raises(InversesNotReady):
        precondition_gradient(np.zeros((2, 3)), KfacLayerState.empty(3, 2))
    with pytest.raises(ShapeMismatch):
        precondition_gradient(np.zeros((3, 2)), ready_state(np.eye(3), np.eye(2)))


def test_precondition_matches_kronecker_oracle_small(rng):
    omega, gamma = random_spd(rng, 3), random_spd(rng, 2)
    grad = rng.normal(size=(2, 3))
    out = precondition_gradient(grad, ready_state(np.linalg.inv(omega), np.linalg.inv(gamma)))
    assert np.max(np.abs(out - kronecker_precondition_oracle(omega, gamma, grad))) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_preconditioner_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    st_ = ready_state(np.linalg.inv(random_spd(rng, 4)), np.linalg.inv(random_spd(rng, 3)))
    g1, g2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    lhs = precondition_gradient(a * g1 + b * g2, st_)
    rhs = a * precondition_gradient(g1, st_) + b * precondition_gradient(g2, st_)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * (1 + np.abs(lhs).max()))


def test_damping_monotonicity(rng):
    for _ in range(100):
        o = random_spd(rng, 4, floor=0.0)
        g = random_spd(rng, 3, floor=0.0)
        s = replace(KfacLayerState.empty(4, 3), omega=o, gamma=g, initialized=True)
        grad = rng.normal(size=(3, 4))
        norms = [np.linalg.norm(precondition_gradient(grad, refresh_inverses_if_due(s, KfacConfig(damping_eps=e))))
                 for e in (1e-3, 1e-2, 1e-1, 1.0)]
        assert all(x >= y - 1e-12 * x for x, y in zip(norms, norms[1:]))


def test_spectrum_is_product_of_factor_extremes():
    st_ = ready_state(np.diag([1.0, 4.0]), np.diag([0.5, 3.0]))
    assert preconditioner_spectrum(st_) == (0.5, 12.0)
    with pytest.raises(InversesNotReady):
        preconditioner_spectrum(KfacLayerState.empty(2, 2))


def test_config_validation():
    with pytest.raises(ValueError):
        KfacConfig(ema_alpha=0.0)
    with pytest.raises(ValueError):
        KfacConfig(damping_eps=0.0)
    with pytest.raises(ValueError):
        KfacConfig(t_inv=0)
    with pytest.raises(ValueError):
        KfacConfig(pi_mode="x")


def test_for_params_shapes():
    states = KfacLayerState.for_params([np.zeros((4, 3)), np.zeros((2, 5))])
    assert [(s.d_in, s.d_out) for s in states] == [(3, 4), (5, 2)]
    assert not any(s.initialized or s.ready for s in states)
