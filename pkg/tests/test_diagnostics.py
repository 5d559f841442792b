import json
import math

import numpy as np
import pytest

from fedrco.config import ExperimentConfig
from fedrco.diagnostics import (AuditOutcome, AuditReport, NoisyQuadratic, Preconditioner,
                                QuadraticProblem, condition_number_trial, descent_check, drift_audit,
                                drift_bound, quadratic_descent_audit, rank_deficiency_demo,
                                run_suite, safe_step_size, singular_inverse_fault)

GRID = np.geomspace(1e-1, 1e-4, 7)


def test_rank_demo_generic_probe_slope_is_minus_one(rng):
    rep = rank_deficiency_demo(20, 5, GRID, rng, trials=30)
    assert rep.passed and rep.violations == 0
    assert all(r <= 5 for r in rep.details["ranks"])
    assert all(-1.1 <= s <= -0.9 for s in rep.details["slopes"])


def test_rank_demo_range_probe_stays_bounded(rng):
    rep = rank_deficiency_demo(20, 5, GRID, rng, trials=10, null_component=False)
    assert not rep.passed
    assert all(abs(s) < 0.1 for s in rep.details["slopes"])


def test_rank_demo_validation(rng):
    with pytest.raises(ValueError):
        rank_deficiency_demo(5, 5, GRID, rng)
    with pytest.raises(ValueError):
        rank_deficiency_demo(10, 5, [0.1], rng)


@pytest.mark.parametrize("kappa", [1.0, 10.0, 100.0, 1000.0])
def test_condition_trial_matches_theory(kappa):
    rep = condition_number_trial(QuadraticProblem.diagonal(kappa))
    assert rep.passed
    assert rep.details["newton_steps"] == 1
    assert abs(rep.details["measured_contraction"] - (kappa - 1) / (kappa + 1)) <= 1e-3


def test_condition_trial_rotated_hessian(rng):
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    h = q @ np.diag([1.0, 3.0, 7.0, 50.0]) @ q.T
    rep = condition_number_trial(QuadraticProblem((h + h.T) / 2, rng.normal(size=4)))
    assert rep.passed


def test_quadratic_problem_validation():
    with pytest.raises(ValueError):
        QuadraticProblem(np.diag([1.0, -1.0]), np.zeros(2))
    with pytest.raises(ValueError):
        QuadraticProblem(np.array([[1.0, 0.5], [0.0, 1.0]]), np.zeros(2))


def test_safe_step_size_formula():
    p = Preconditioner.from_matrix(np.diag([0.5, 2.0]))
    assert p.lam_min == pytest.approx(0.5) and p.lam_max == pytest.approx(2.0)
    assert safe_step_size(p, 4.0) == pytest.approx(0.5 / (4.0 * 4.0))


def test_descent_noiseless_quadratic_passes_and_control_fails(rng):
    prob = QuadraticProblem.diagonal(100.0, d=8, rng=rng)
    ok = quadratic_descent_audit(prob, np.eye(8), rng, trials=20)
    assert ok.passed and ok.violations == 0
    bad = quadratic_descent_audit(prob, np.eye(8), rng, trials=20, sigma_sq=0.1, eta_scale=10.0)
    assert not bad.passed


def test_descent_check_exact_on_deterministic_quadratic():
    # one coordinate, no noise: change = -eta g^2 + eta^2 h g^2 / 2 in closed form
    prob = QuadraticProblem(np.array([[2.0]]), np.zeros(1))
    obj = NoisyQuadratic(prob, 0.0)
    p = Preconditioner.from_matrix(np.eye(1))
    rep = descent_check(obj, p, [np.array([1.0])], 0.25, 2.0, 0.0, np.random.default_rng(0), samples=1)
    g = 2.0
    assert rep.details["mean_change"] == pytest.approx(-0.25 * g * g + 0.25 ** 2 * 2.0 * g * g / 2)


def test_drift_bound_formula():
    assert drift_bound(3, 0.1, 2.0, 0.5, 1.5) == pytest.approx(2 * 9 * 0.01 * 4 * 2.0)


def test_drift_audit_holds_and_fault_breaks_it():
    cfg = ExperimentConfig(rounds=3, num_clients=5, seed=1)
    assert drift_audit(cfg).passed
    off = cfg.replace_path("stability.enabled", False)
    broken = drift_audit(off, faults=singular_inverse_fault())
    assert not broken.passed and broken.violations > 0


def test_report_serialises_non_finite():
    rep = AuditReport("x", 2, 1, -math.inf, False, {"v": [np.float64(1.0), math.nan]})
    text = json.dumps(AuditOutcome("x", rep, False).to_dict())
    assert "-inf" in text and "nan" in text
    with pytest.raises(ValueError):
        AuditReport("x", 1, 2, 0.0, False)


def test_outcome_expectations():
    passing = AuditReport("x", 1, 0, 0.5, True)
    failing = AuditReport("x", 1, 1, -0.5, False)
    assert AuditOutcome("a", passing, True).ok and not AuditOutcome("a", passing, False).ok
    assert AuditOutcome("a", failing, False).ok and AuditOutcome("a", failing, None).ok


def test_suites_behave_as_expected():
    for name in ("rank", "condition"):
        assert all(o.ok for o in run_suite(name, seed=3))
    with pytest.raises(ValueError):
        run_suite("nope")
