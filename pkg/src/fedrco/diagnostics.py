"""Numerical audits of the curvature and convergence claims FedRCO relies on.

Each audit returns an :class:`AuditReport` with a pass flag and the worst
relative margin seen (positive means the checked inequality held with room to
spare). Everything is deterministic given the generator passed in.

* ``rank_deficiency_demo``: a batch-sized empirical Fisher is rank deficient,
  and a damped solve against a gradient with a null-space component grows as
  ``1/eps``.
* ``condition_number_trial``: gradient descent on a diagonal quadratic
  contracts by ``(kappa-1)/(kappa+1)`` while exact preconditioning converges
  in one step.
* ``descent_inequality_audit``: one preconditioned stochastic step decreases
  the expected loss by at least ``eta*lam_min/2*|grad|^2`` minus a noise term
  ``eta^2*L*sigma^2*lam_max^2/2``.
* ``drift_audit``: client drift after ``K`` local steps stays below
  ``2 K^2 eta^2 lam_max^2 (sigma^2 + M^2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .data import Dataset
from .federation import Faults, StepContext
from .kfac import (KfacConfig, KfacLayerState, accumulate_factors, precondition_gradient,
                   preconditioner_spectrum, refresh_inverses_if_due)
from .model import Network, flatten_params, forward_backward, loss, unflatten_params
from .numerics import spectral_rank

SLACK = 0.2
PASS_FRACTION = 0.95


@dataclass
class AuditReport:
    name: str
    trials: int
    violations: int
    worst_margin: float
    passed: bool
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.violations <= self.trials:
            raise ValueError("violations must lie in [0, trials]")

    def to_dict(self) -> dict:
        return {"name": self.name, "trials": self.trials, "violations": self.violations,
                "worst_margin": _jsonable(self.worst_margin), "passed": self.passed,
                "details": {k: _jsonable(v) for k, v in self.details.items()}}


def _jsonable(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


# ---------------------------------------------------------------- rank deficiency

def _loglog_slope(eps_grid: Sequence[float], norms: Sequence[float]) -> float:
    return float(np.polyfit(np.log(eps_grid), np.log(norms), 1)[0])


def rank_deficiency_demo(d: int, batch: int, eps_grid: Sequence[float], rng: np.random.Generator,
                         trials: int = 1, null_component: bool = True) -> AuditReport:
    """Empirical Fisher from ``batch`` rank-one terms in ``R^d`` with ``batch < d``.

    For each trial: checks ``rank(F) <= batch`` and fits the log-log slope of
    ``|(F + eps I)^{-1} g|`` against ``eps``. With ``null_component`` the probe
    ``g`` is a generic vector, so the slope should be -1; without it ``g`` is
    projected onto the range of ``F`` and the norm stays bounded (slope near 0).
    A trial passes when the rank bound holds and the slope lies in [-1.1, -0.9].
    """
    if not batch < d:
        raise ValueError("the demo needs batch < d")
    eps = np.asarray(eps_grid, dtype=np.float64)
    if eps.size < 2 or np.any(eps <= 0):
        raise ValueError("eps_grid needs at least two positive values")
    violations, slopes, ranks = 0, [], []
    worst = math.inf
    for _ in range(trials):
        g_samples = rng.normal(size=(batch, d))
        fisher = g_samples.T @ g_samples / batch
        rank = spectral_rank(fisher)
        probe = rng.normal(size=d)
        if not null_component:
            q, _ = np.linalg.qr(g_samples.T)
            probe = q @ (q.T @ probe)
        norms = [float(np.linalg.norm(np.linalg.solve(fisher + e * np.eye(d), probe))) for e in eps]
        slope = _loglog_slope(eps, norms)
        margin = 0.1 - abs(slope + 1.0)
        ok = rank <= batch and margin >= 0
        violations += not ok
        worst = min(worst, margin)
        slopes.append(slope)
        ranks.append(rank)
    return AuditReport("rank", trials, violations, worst, violations == 0,
                       {"d": d, "batch": batch, "ranks": ranks, "slopes": slopes,
                        "eps_grid": [float(e) for e in eps]})


# ---------------------------------------------------------------- conditioning

@dataclass
class QuadraticProblem:
    """``f(theta) = 1/2 (theta - opt)^T H (theta - opt)``."""

    hessian: np.ndarray
    optimum: np.ndarray

    def __post_init__(self):
        self.hessian = np.asarray(self.hessian, dtype=np.float64)
        self.optimum = np.asarray(self.optimum, dtype=np.float64)
        eig = np.linalg.eigvalsh(self.hessian)
        if eig[0] <= 0:
            raise ValueError("Hessian must be positive definite")
        if not np.allclose(self.hessian, self.hessian.T):
            raise ValueError("Hessian must be symmetric")

    @classmethod
    def diagonal(cls, kappa: float, d: int = 2, rng: Optional[np.random.Generator] = None
                 ) -> "QuadraticProblem":
        """Eigenvalues spread geometrically over [1, kappa]."""
        if kappa < 1:
            raise ValueError("kappa must be >= 1")
        eig = np.geomspace(1.0, kappa, d) if d > 1 else np.array([1.0])
        opt = rng.normal(size=d) if rng is not None else np.ones(d)
        return cls(np.diag(eig), opt)

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.hessian)

    @property
    def kappa(self) -> float:
        e = self.eigenvalues
        return float(e[-1] / e[0])

    def value(self, theta: np.ndarray) -> float:
        r = theta - self.optimum
        return 0.5 * float(r @ self.hessian @ r)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.hessian @ (theta - self.optimum)


def condition_number_trial(prob: QuadraticProblem, steps: int = 50,
                           start: Optional[np.ndarray] = None, tol: float = 1e-3,
                           newton_tol: float = 1e-10) -> AuditReport:
    """Gradient descent at ``2/(lam_max+lam_min)`` versus Newton steps on ``prob``.

    The measured contraction is the largest per-coordinate error ratio (in the
    Hessian eigenbasis) over the run; it must match ``(kappa-1)/(kappa+1)``
    within ``tol``. The Newton run must get within ``newton_tol`` in <= 2 steps.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    eig, vecs = np.linalg.eigh(prob.hessian)
    lo, hi = eig[0], eig[-1]
    kappa = hi / lo
    theta0 = prob.optimum + (np.ones(len(eig)) @ vecs.T if start is None else start - prob.optimum)
    eta = 2.0 / (hi + lo)
    theta = theta0.copy()
    ratio = 0.0
    for _ in range(steps):
        before = vecs.T @ (theta - prob.optimum)
        theta = theta - eta * prob.grad(theta)
        after = vecs.T @ (theta - prob.optimum)
        mask = np.abs(before) > 1e-150
        if not mask.any():
            break
        ratio = max(ratio, float(np.max(np.abs(after[mask]) / np.abs(before[mask]))))
    predicted = (kappa - 1.0) / (kappa + 1.0)
    sgd_gap = abs(ratio - predicted)

    theta = theta0.copy()
    newton_steps = None
    for k in range(1, 3):
        theta = theta - np.linalg.solve(prob.hessian, prob.grad(theta))
        if np.linalg.norm(theta - prob.optimum) <= newton_tol:
            newton_steps = k
            break
    violations = int(sgd_gap > tol) + int(newton_steps is None)
    margin = tol - sgd_gap if newton_steps is not None else -1.0
    return AuditReport("condition", 2, violations, margin, violations == 0,
                       {"kappa": kappa, "predicted_contraction": predicted,
                        "measured_contraction": ratio, "newton_steps": newton_steps,
                        "newton_error": float(np.linalg.norm(theta - prob.optimum))})


# ---------------------------------------------------------------- descent inequality

class Objective(Protocol):
    """Flat-parameter view of a stochastic objective."""

    def value(self, theta: np.ndarray) -> float: ...
    def grad(self, theta: np.ndarray) -> np.ndarray: ...
    def sample_grad(self, theta: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


class NetworkObjective:
    """Mean cross-entropy of ``net`` on ``data`` with mini-batch gradients."""

    def __init__(self, net: Network, data: Dataset, batch_size: int = 32):
        self.net = net.copy()
        self.x, self.y = data.features, data.labels
        self.batch_size = min(batch_size, len(data))

    def _with(self, theta: np.ndarray) -> Network:
        self.net.params = unflatten_params(theta, self.net.params)
        return self.net

    def value(self, theta):
        return loss(self._with(theta), self.x, self.y)

    def grad(self, theta):
        return flatten_params(forward_backward(self._with(theta), self.x, self.y)[1])

    def sample_grad(self, theta, rng):
        idx = rng.choice(len(self.y), size=self.batch_size, replace=False)
        return flatten_params(forward_backward(self._with(theta), self.x[idx], self.y[idx])[1])

    def batch_capture(self, theta, rng):
        idx = rng.choice(len(self.y), size=self.batch_size, replace=False)
        return forward_backward(self._with(theta), self.x[idx], self.y[idx])[2]


class NoisyQuadratic:
    """Quadratic with additive Gaussian gradient noise of total variance ``sigma_sq``."""

    def __init__(self, prob: QuadraticProblem, sigma_sq: float = 0.0):
        self.prob = prob
        self.sigma_sq = sigma_sq

    def value(self, theta):
        return self.prob.value(theta)

    def grad(self, theta):
        return self.prob.grad(theta)

    def sample_grad(self, theta, rng):
        g = self.prob.grad(theta)
        if self.sigma_sq == 0:
            return g
        return g + rng.normal(scale=math.sqrt(self.sigma_sq / len(g)), size=len(g))


@dataclass
class Preconditioner:
    """A fixed SPD map with known extreme eigenvalues."""

    apply: Callable[[np.ndarray], np.ndarray]
    lam_min: float
    lam_max: float

    @classmethod
    def from_matrix(cls, p: np.ndarray) -> "Preconditioner":
        eig = np.linalg.eigvalsh(p)
        return cls(lambda v: p @ v, float(eig[0]), float(eig[-1]))

    @classmethod
    def from_kfac(cls, states: Sequence[KfacLayerState], like: Sequence[np.ndarray]) -> "Preconditioner":
        spectra = [preconditioner_spectrum(s) for s in states]

        def apply(v):
            blocks = unflatten_params(v, like)
            return flatten_params([precondition_gradient(b, s) for b, s in zip(blocks, states)])

        return cls(apply, min(lo for lo, _ in spectra), max(hi for _, hi in spectra))


def estimate_smoothness(obj: Objective, theta: np.ndarray, rng: np.random.Generator,
                        iters: int = 30, h: float = 1e-4) -> float:
    """Largest |eigenvalue| of the Hessian at ``theta`` by power iteration on
    central finite-difference Hessian-vector products."""
    v = rng.normal(size=theta.shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        hv = (obj.grad(theta + h * v) - obj.grad(theta - h * v)) / (2 * h)
        lam = float(np.linalg.norm(hv))
        if lam == 0.0:
            return 0.0
        v = hv / lam
    return lam


def estimate_gradient_variance(obj: Objective, theta: np.ndarray, rng: np.random.Generator,
                               probes: int = 64) -> float:
    """Mean of ``|g_B - grad|^2`` over ``probes`` sampled mini-batch gradients."""
    full = obj.grad(theta)
    return float(np.mean([np.sum((obj.sample_grad(theta, rng) - full) ** 2) for _ in range(probes)]))


def descent_check(obj: Objective, precond: Preconditioner, points: Sequence[np.ndarray], eta: float,
                  smoothness: float, sigma_sq: float, rng: np.random.Generator,
                  samples: int = 16, slack: float = SLACK,
                  pass_fraction: float = PASS_FRACTION) -> AuditReport:
    """Check the expected one-step decrease at every point in ``points``.

    At each point the left side is ``mean_s L(theta - eta P g_s) - L(theta)``
    over ``samples`` mini-batch gradients. The bound, with ``slack`` applied
    against the claim, is
    ``-(1-slack) eta lam_min/2 |grad|^2 + (1+slack) eta^2 L sigma^2 lam_max^2 / 2``.
    The margin is ``(bound - change)`` divided by the sum of both bound terms.
    """
    lo, hi = precond.lam_min, precond.lam_max
    violations = 0
    worst = math.inf
    changes, bounds = [], []
    for theta in points:
        base = obj.value(theta)
        g = obj.grad(theta)
        g_sq = float(g @ g)
        after = [obj.value(theta - eta * precond.apply(obj.sample_grad(theta, rng)))
                 for _ in range(samples)]
        change = float(np.mean(after)) - base
        descent = eta * lo / 2.0 * g_sq
        noise = eta * eta * smoothness * sigma_sq * hi * hi / 2.0
        bound = -(1.0 - slack) * descent + (1.0 + slack) * noise
        scale = max(descent + noise, 1e-300)
        margin = (bound - change) / scale if math.isfinite(change) else -math.inf
        violations += margin < 0
        worst = min(worst, margin)
        changes.append(change)
        bounds.append(bound)
    n = len(points)
    passed = n > 0 and (n - violations) >= pass_fraction * n
    return AuditReport("descent", n, violations, worst, passed,
                       {"eta": eta, "lam_min": lo, "lam_max": hi, "smoothness": smoothness,
                        "sigma_sq": sigma_sq, "mean_change": float(np.mean(changes)),
                        "mean_bound": float(np.mean(bounds))})


def safe_step_size(precond: Preconditioner, smoothness: float) -> float:
    """Largest step for which the bound's first-order terms are guaranteed to net a decrease."""
    return precond.lam_min / (smoothness * precond.lam_max ** 2)


def kfac_preconditioner(obj: NetworkObjective, theta: np.ndarray, cfg: KfacConfig,
                        rng: np.random.Generator, batches: int = 20) -> Preconditioner:
    """Damped K-FAC preconditioner from ``batches`` EMA updates at ``theta``."""
    like = obj.net.params
    states = KfacLayerState.for_params(unflatten_params(theta, like))
    for _ in range(batches):
        cap = obj.batch_capture(theta, rng)
        states = [accumulate_factors(s, c, cfg.ema_alpha, cfg.gamma_norm) for s, c in zip(states, cap)]
    states = [refresh_inverses_if_due(s, cfg, force=True) for s in states]
    return Preconditioner.from_kfac(states, like)


def descent_inequality_audit(net: Network, data: Dataset, rng: np.random.Generator, *,
                             trials: int = 40, eta_scale: float = 1.0,
                             eta: Optional[float] = None, kfac: KfacConfig = KfacConfig(),
                             batch_size: int = 32, samples: int = 16, probes: int = 64,
                             warm_steps: int = 100, warm_lr: float = 0.05,
                             slack: float = SLACK) -> AuditReport:
    """Audit the one-step descent inequality for K-FAC preconditioned steps on ``net``.

    The network is first trained for ``warm_steps`` SGD steps so the trial
    points sit on a realistic trajectory; the K-FAC preconditioner is then
    frozen. ``L`` is the largest power-iteration curvature estimate over the
    trial points and ``sigma^2`` the largest mini-batch gradient variance.
    Unless ``eta`` is given, the step is ``eta_scale`` times
    ``lam_min / (L lam_max^2)``.
    """
    obj = NetworkObjective(net, data, batch_size)
    theta = flatten_params(net.params)
    for _ in range(warm_steps):
        theta = theta - warm_lr * obj.sample_grad(theta, rng)
    precond = kfac_preconditioner(obj, theta, kfac, rng)
    points = []
    for _ in range(trials):
        points.append(theta.copy())
        theta = theta - warm_lr * obj.sample_grad(theta, rng)
    smooth = max(estimate_smoothness(obj, p, rng) for p in points[:: max(1, trials // 8)])
    sigma_sq = max(estimate_gradient_variance(obj, p, rng, probes) for p in points[:: max(1, trials // 4)])
    step = eta if eta is not None else eta_scale * safe_step_size(precond, smooth)
    report = descent_check(obj, precond, points, step, smooth, sigma_sq, rng, samples, slack)
    report.details["eta_scale"] = eta_scale if eta is None else None
    return report


def quadratic_descent_audit(prob: QuadraticProblem, precond_matrix: np.ndarray, rng: np.random.Generator,
                            *, trials: int = 20, eta_scale: float = 1.0, sigma_sq: float = 0.0,
                            samples: int = 16, slack: float = SLACK) -> AuditReport:
    """Same inequality on a quadratic where ``L`` is exact."""
    obj = NoisyQuadratic(prob, sigma_sq)
    precond = Preconditioner.from_matrix(precond_matrix)
    smooth = float(prob.eigenvalues[-1])
    step = eta_scale * safe_step_size(precond, smooth)
    points = [prob.optimum + rng.normal(size=len(prob.optimum)) for _ in range(trials)]
    return descent_check(obj, precond, points, step, smooth, sigma_sq, rng, samples, slack)


# ---------------------------------------------------------------- client drift

def drift_bound(k: int, eta: float, lam_max: float, sigma_sq: float, grad_sq: float) -> float:
    return 2.0 * k * k * eta * eta * lam_max * lam_max * (sigma_sq + grad_sq)


def singular_inverse_fault(scale: float = 1e8, layer: int = -1) -> Faults:
    """Replace one layer's Gamma inverse with an undamped near-singular one.

    Models a factor inverted without damping: the inverse gains an eigenvalue of
    ``scale`` along the first output direction.
    """

    def hook(ctx: StepContext, states: list[KfacLayerState]) -> list[KfacLayerState]:
        out = list(states)
        s = out[layer]
        bad = s.gamma_inv.copy()
        bad[0, 0] += scale
        out[layer] = replace(s, gamma_inv=bad)
        return out

    return Faults(curvature_hook=hook)


def drift_audit(cfg, rng_seed: Optional[int] = None, *, faults: Optional[Faults] = None,
                slack: float = SLACK) -> AuditReport:
    """Run ``cfg`` with drift tracking and check every participant in every round.

    The bound uses the client's mean mini-batch gradient variance and mean
    squared full local gradient over its ``K`` steps, and ``lam_max`` from the
    damped inverses produced by the regular refresh (the spectrum damping is
    meant to guarantee). Aggregation is forced to plain averaging so that each
    client starts the round exactly at the global model.
    """
    from .experiment import run_experiment

    if rng_seed is not None:
        cfg = cfg.replace_path("seed", rng_seed)
    cfg = cfg.replace_path("aggregation.strategy", "plain")
    # a broken negative-control run may overflow on purpose
    with np.errstate(all="ignore"):
        res = run_experiment(cfg, faults=faults, keep_reports=True, track_drift=True)
    k, eta = cfg.local_epochs, cfg.lr
    trials = violations = 0
    worst = math.inf
    ratios = []
    for rep in res.reports:
        for c in rep.clients:
            trials += 1
            bound = drift_bound(k, eta, c.spectrum_max, c.sigma_sq, c.grad_sq) * (1.0 + slack)
            drift = c.drift_sq
            if not math.isfinite(drift) or not math.isfinite(bound):
                margin = -math.inf
            else:
                margin = (bound - drift) / bound if bound > 0 else (0.0 if drift == 0 else -math.inf)
            violations += margin < 0
            worst = min(worst, margin)
            if math.isfinite(drift) and bound > 0:
                ratios.append(drift / bound)
    return AuditReport("drift", trials, violations, worst if trials else 0.0,
                       trials > 0 and violations == 0,
                       {"rounds": cfg.rounds, "local_epochs": k, "lr": eta,
                        "max_ratio": max(ratios) if ratios else math.nan,
                        "hard_resets": sum(r.hard_resets for r in res.records)})


# ---------------------------------------------------------------- suites

SUITES = ("rank", "condition", "descent", "drift")


@dataclass
class AuditOutcome:
    """A report plus what it was expected to do: ``True`` pass, ``False`` fail
    (negative control), ``None`` recorded for information only."""

    label: str
    report: AuditReport
    expected: Optional[bool]

    @property
    def ok(self) -> bool:
        return self.expected is None or self.report.passed == self.expected

    def to_dict(self) -> dict:
        return {"label": self.label, "expected": self.expected, "ok": self.ok,
                **self.report.to_dict()}


def _descent_network(seed: int) -> tuple[Network, Dataset]:
    from .data import make_synthetic_classification
    from .model import build_mlp

    rng = np.random.default_rng(seed)
    data = make_synthetic_classification(32, 10, 1000, 6.0, rng)
    return build_mlp([32, 64, 10], rng), data


def run_suite(name: str, seed: int = 0) -> list[AuditOutcome]:
    """Run one named suite (or ``all``) with its negative controls."""
    if name == "all":
        return [o for s in SUITES for o in run_suite(s, seed)]
    if name not in SUITES:
        raise ValueError(f"unknown audit suite {name!r}")
    rng = np.random.default_rng(seed)
    if name == "rank":
        grid = np.geomspace(1e-1, 1e-4, 7)
        return [
            AuditOutcome("rank: generic probe", rank_deficiency_demo(20, 5, grid, rng, trials=100), True),
            AuditOutcome("rank: probe inside the range (control)",
                         rank_deficiency_demo(20, 5, grid, rng, trials=10, null_component=False), False),
        ]
    if name == "condition":
        return [AuditOutcome(f"condition: kappa={k:g}", condition_number_trial(QuadraticProblem.diagonal(k)), True)
                for k in (1.0, 100.0)]
    if name == "descent":
        net, data = _descent_network(seed)
        prob = QuadraticProblem.diagonal(100.0, d=8, rng=rng)
        ident = np.eye(8)
        return [
            AuditOutcome("descent: network, eta*",
                         descent_inequality_audit(net, data, np.random.default_rng(seed + 1)), True),
            AuditOutcome("descent: quadratic, eta*",
                         quadratic_descent_audit(prob, ident, rng, trials=40, sigma_sq=0.1), True),
            AuditOutcome("descent: quadratic, 10 eta* (control)",
                         quadratic_descent_audit(prob, ident, rng, trials=40, sigma_sq=0.1, eta_scale=10.0),
                         False),
            AuditOutcome("descent: network, 10 eta* (observation)",
                         descent_inequality_audit(net, data, np.random.default_rng(seed + 1), eta_scale=10.0),
                         None),
        ]
    from .config import ExperimentConfig

    cfg = ExperimentConfig(seed=seed, rounds=10, num_clients=10)
    off = cfg.replace_path("stability.enabled", False)
    return [
        AuditOutcome("drift: monitor on", drift_audit(cfg), True),
        AuditOutcome("drift: monitor off + singular inverse (control)",
                     drift_audit(off, faults=singular_inverse_fault()), False),
    ]
