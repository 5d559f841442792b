"""Kronecker-factored curvature for one client.

Each parameterized layer keeps EMA estimates of ``Omega = E[A A^T]`` (input
side) and ``Gamma = E[G G^T]`` (pre-activation gradient side) together with
cached damped inverses that are refreshed lazily every ``t_inv`` steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateTrace, InversesNotReady, ShapeMismatch
from .model import LayerCapture
from .numerics import damped_symmetric_inverse, extreme_eigenvalues, symmetrize

TRACE_FLOOR = 1e-30


@dataclass(frozen=True)
class KfacConfig:
    ema_alpha: float = 0.95
    damping_eps: float = 0.03
    t_inv: int = 200
    # "normalized": pi = sqrt((tr(Omega)/d_in) / (tr(Gamma)/d_out)); "literal": sqrt(tr(Omega)/tr(Gamma))
    pi_mode: str = "normalized"
    # conv layers: divide G G^T by batch*positions ("positions") or by batch only ("batch")
    gamma_norm: str = "positions"

    def __post_init__(self):
        if not 0.0 < self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must lie in (0, 1]")
        if not self.damping_eps > 0:
            raise ValueError("damping_eps must be positive")
        if self.t_inv < 1:
            raise ValueError("t_inv must be >= 1")
        if self.pi_mode not in ("normalized", "literal"):
            raise ValueError(f"unknown pi_mode {self.pi_mode!r}")
        if self.gamma_norm not in ("positions", "batch"):
            raise ValueError(f"unknown gamma_norm {self.gamma_norm!r}")


@dataclass(frozen=True)
class KfacLayerState:
    d_in: int
    d_out: int
    omega: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None
    omega_inv: Optional[np.ndarray] = None
    gamma_inv: Optional[np.ndarray] = None
    steps_since_inversion: int = 0
    initialized: bool = False
    inversions: int = 0

    @classmethod
    def empty(cls, d_in: int, d_out: int) -> "KfacLayerState":
        return cls(d_in=d_in, d_out=d_out)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray]) -> list["KfacLayerState"]:
        return [cls.empty(p.shape[1], p.shape[0]) for p in params]

    @property
    def ready(self) -> bool:
        return self.omega_inv is not None and self.gamma_inv is not None


def accumulate_factors(state: KfacLayerState, capture: LayerCapture, alpha: float,
                       gamma_norm: str = "positions") -> KfacLayerState:
    """EMA update of both factors from one batch; the first batch seeds the EMA."""
    a, g = capture.a, capture.g
    if a.shape[0] != state.d_in or g.shape[0] != state.d_out or a.shape[1] != g.shape[1]:
        raise ShapeMismatch(
            f"capture A{a.shape}/G{g.shape} does not match state ({state.d_in}, {state.d_out})")
    n = capture.n_eff
    omega_batch = a @ a.T / n
    g_div = capture.batch_size if gamma_norm == "batch" else n
    gamma_batch = g @ g.T / g_div
    if not state.initialized:
        omega, gamma = omega_batch, gamma_batch
    else:
        omega = alpha * omega_batch + (1.0 - alpha) * state.omega
        gamma = alpha * gamma_batch + (1.0 - alpha) * state.gamma
    return replace(state, omega=symmetrize(omega), gamma=symmetrize(gamma), initialized=True)


def pi_correction(omega: np.ndarray, gamma: np.ndarray, mode: str = "normalized") -> float:
    tr_o = float(np.trace(omega))
    tr_g = float(np.trace(gamma))
    if tr_g <= TRACE_FLOOR or not math.isfinite(tr_g) or not math.isfinite(tr_o):
        raise DegenerateTrace(f"tr(Gamma) = {tr_g:g}")
    if mode == "normalized":
        ratio = (tr_o / omega.shape[0]) / (tr_g / gamma.shape[0])
    else:
        ratio = tr_o / tr_g
    # Omega always carries the homogeneous bias row, so tr(Omega) >= 1 > 0.
    return math.sqrt(ratio)


def damping_ridges(omega: np.ndarray, gamma: np.ndarray, eps: float,
                   mode: str = "normalized") -> tuple[float, float]:
    """(ridge on Omega, ridge on Gamma); their product is always ``eps``."""
    pi = pi_correction(omega, gamma, mode)
    root = math.sqrt(eps)
    return pi * root, root / pi


def refresh_inverses_if_due(state: KfacLayerState, cfg: KfacConfig,
                            force: bool = False) -> KfacLayerState:
    """Invert the damped factors when the clock reaches ``t_inv`` (or no inverse exists).

    The clock counts steps served by the current inverses, so with no forced
    refreshes inversions happen at steps 0, t_inv, 2*t_inv, ...
    """
    if not state.initialized:
        raise InversesNotReady("factors must be accumulated before inversion")
    due = force or not state.ready or state.steps_since_inversion >= cfg.t_inv
    if not due:
        return replace(state, steps_since_inversion=state.steps_since_inversion + 1)
    ridge_o, ridge_g = damping_ridges(state.omega, state.gamma, cfg.damping_eps, cfg.pi_mode)
    return replace(
        state,
        omega_inv=damped_symmetric_inverse(state.omega, ridge_o),
        gamma_inv=damped_symmetric_inverse(state.gamma, ridge_g),
        steps_since_inversion=1,
        inversions=state.inversions + 1,
    )


def precondition_gradient(grad: np.ndarray, state: KfacLayerState) -> np.ndarray:
    """``Gamma_inv @ grad @ Omega_inv``, i.e. ``(Omega kron Gamma)^{-1} vec(grad)``."""
    if not state.ready:
        raise InversesNotReady("no cached inverses; call refresh_inverses_if_due first")
    if grad.shape != (state.d_out, state.d_in):
        raise ShapeMismatch(f"grad shape {grad.shape} != ({state.d_out}, {state.d_in})")
    return state.gamma_inv @ grad @ state.omega_inv


def preconditioner_spectrum(state: KfacLayerState) -> tuple[float, float]:
    """(lambda_min, lambda_max) of ``Omega_inv kron Gamma_inv`` for one layer."""
    if not state.ready:
        raise InversesNotReady("no cached inverses")
    o_lo, o_hi = extreme_eigenvalues(state.omega_inv)
    g_lo, g_hi = extreme_eigenvalues(state.gamma_inv)
    return o_lo * g_lo, o_hi * g_hi
