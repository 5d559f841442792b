"""Dense float64 linear-algebra helpers for the curvature code."""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import AsymmetricInput, FactorizationFailure, NonSquare

SYMMETRY_RTOL = 1e-10
RANK_TOL = 1e-8


def _as_square(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NonSquare(f"expected a square matrix, got shape {m.shape}")
    return m


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def is_symmetric(m: np.ndarray, rtol: float = SYMMETRY_RTOL) -> bool:
    scale = max(np.linalg.norm(m), np.finfo(np.float64).tiny)
    return np.linalg.norm(m - m.T) <= rtol * scale


def damped_symmetric_inverse(m, rho: float) -> np.ndarray:
    """Return ``(m + rho*I)^{-1}`` via a Cholesky factorization.

    ``m`` must be symmetric (to 1e-10 relative Frobenius error) and PSD; the
    asymmetric round-off left by EMA accumulation is removed before factoring.
    """
    m = _as_square(m)
    if not rho > 0:
        raise ValueError(f"damping must be positive, got {rho}")
    if not is_symmetric(m):
        raise AsymmetricInput("matrix is not symmetric within 1e-10 relative tolerance")
    n = m.shape[0]
    eye = np.eye(n)
    shifted = symmetrize(m) + rho * eye
    try:
        factor = cho_factor(shifted, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise FactorizationFailure(f"M + {rho:g} I is not positive definite") from exc
    inv = symmetrize(cho_solve(factor, eye))
    if not np.all(np.isfinite(inv)):
        raise FactorizationFailure("inverse has non-finite entries")
    return inv


def spectral_rank(m, tol: float = RANK_TOL) -> int:
    """Count eigenvalues above ``tol * lambda_max`` of a symmetric PSD matrix."""
    m = _as_square(m)
    eig = np.linalg.eigvalsh(symmetrize(m))
    top = eig[-1]
    if top <= 0:
        return 0
    return int(np.count_nonzero(eig > tol * top))


def extreme_eigenvalues(m) -> tuple[float, float]:
    """(lambda_min, lambda_max) of a symmetric matrix."""
    eig = np.linalg.eigvalsh(symmetrize(_as_square(m)))
    return float(eig[0]), float(eig[-1])


def kronecker_precondition_oracle(omega, gamma, grad) -> np.ndarray:
    """Brute-force ``(omega kron gamma)^{-1} vec(grad)``, returned un-vec'd.

    ``vec`` stacks columns, so for a ``d_out x d_in`` gradient
    ``vec(Gamma^-1 G Omega^-1) == (Omega kron Gamma)^-1 vec(G)``. Builds the full
    ``d_in*d_out`` square matrix; meant for tests and small checks only.
    """
    omega = _as_square(omega)
    gamma = _as_square(gamma)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (gamma.shape[0], omega.shape[0]):
        raise ValueError(f"grad shape {grad.shape} does not match factors")
    big = np.kron(omega, gamma)
    vec = grad.reshape(-1, order="F")
    out = np.linalg.solve(big, vec)
    return out.reshape(grad.shape, order="F")
