"""Stiefel manifold primitives: feasibility, tangent constraint, prox, retraction."""

from __future__ import annotations

import numpy as np
from scipy.linalg import expm

from .errors import DimensionError, NotOrthonormal, NotSymmetric, TangentViolation

FEASIBILITY_TOL = 1e-8
REPAIR_TOL = 1e-6
TANGENT_TOL = 1e-6


def qr_positive(X: np.ndarray):
    """Thin QR with ``diag(R) >= 0``, which makes the factorization unique."""
    Q, R = np.linalg.qr(X)
    s = np.where(np.diag(R) < 0.0, -1.0, 1.0)
    return Q * s, R * s[:, None]


def orthonormality_error(U: np.ndarray) -> float:
    d = U.shape[1]
    return float(np.linalg.norm(U.T @ U - np.eye(d)))


def check_stiefel(U, repair_tol: float = REPAIR_TOL) -> np.ndarray:
    """Validate a point on the Stiefel manifold ``V_{p,d}``.

    Drift up to ``repair_tol`` in ``||U^T U - I||_F`` is repaired by a
    sign-fixed thin QR; anything larger raises ``NotOrthonormal``.
    """
    U = np.array(U, dtype=float)
    if U.ndim != 2 or not 1 <= U.shape[1] <= U.shape[0]:
        raise DimensionError(f"Stiefel point must be p x d with p >= d >= 1, got {U.shape}")
    err = orthonormality_error(U)
    if err <= FEASIBILITY_TOL:
        return U
    if err > repair_tol or not np.isfinite(err):
        raise NotOrthonormal(f"||U^T U - I||_F = {err:.3e} exceeds repair tolerance {repair_tol:g}")
    return qr_positive(U)[0]


def random_stiefel(rng: np.random.Generator, p: int, d: int) -> np.ndarray:
    return qr_positive(rng.standard_normal((p, d)))[0]


def _check_shapes(U, D):
    if U.shape != D.shape:
        raise DimensionError(f"shape mismatch: U is {U.shape}, D is {D.shape}")


def constraint_op(U: np.ndarray, D: np.ndarray) -> np.ndarray:
    """The tangent-space constraint map ``D -> D^T U + U^T D``."""
    U, D = np.asarray(U, float), np.asarray(D, float)
    _check_shapes(U, D)
    M = D.T @ U
    return M + M.T


def constraint_adjoint(U: np.ndarray, L: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`constraint_op`: ``L -> U (L + L^T)``."""
    U, L = np.asarray(U, float), np.asarray(L, float)
    d = U.shape[1]
    if L.shape != (d, d):
        raise DimensionError(f"multiplier must be {d} x {d}, got {L.shape}")
    scale = max(1.0, float(np.abs(L).max(initial=0.0)))
    if np.abs(L - L.T).max(initial=0.0) > 1e-10 * scale:
        raise NotSymmetric("Lagrange multiplier must be symmetric")
    return U @ (L + L.T)


def project_tangent(U: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Orthogonal projection of ``X`` onto the tangent space at ``U``."""
    M = U.T @ X
    return X - U @ (0.5 * (M + M.T))


def prox_l1(B, tau: float) -> np.ndarray:
    """Soft thresholding, the proximal map of ``tau * ||.||_1``."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    B = np.asarray(B, dtype=float)
    return np.sign(B) * np.maximum(np.abs(B) - tau, 0.0)


def skew_block(U: np.ndarray, D: np.ndarray):
    """The ``2d x 2d`` skew generator and the ``Q`` factor used by the retraction."""
    A = U.T @ D
    A = 0.5 * (A - A.T)
    Q, R = qr_positive(D - U @ (U.T @ D))
    d = U.shape[1]
    block = np.zeros((2 * d, 2 * d))
    block[:d, :d] = A
    block[:d, d:] = -R.T
    block[d:, :d] = R
    return block, Q


def retract_step(U: np.ndarray, D: np.ndarray, alpha: float = 1.0):
    """``(V, V - U)`` for ``V = Retr_U(alpha D)``, the difference without cancellation.

    ``expm(X) - I = X phi_1(X)`` is read off the exponential of the block
    matrix ``[[X, I], [0, 0]]``, so the step stays accurate when it is tiny
    relative to ``U``.
    """
    U, D = np.asarray(U, float), np.asarray(D, float)
    _check_shapes(U, D)
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    resid = np.linalg.norm(constraint_op(U, D))
    if resid > TANGENT_TOL * max(1.0, np.linalg.norm(D)):
        raise TangentViolation(f"D is not tangent at U (||D^T U + U^T D||_F = {resid:.3e})")
    if alpha == 0.0 or not D.any():
        return U.copy(), np.zeros_like(U)
    d = U.shape[1]
    block, Q = skew_block(U, D)
    n = 2 * d
    aug = np.zeros((2 * n, 2 * n))
    aug[:n, :n] = alpha * block
    aug[:n, n:] = np.eye(n)
    phi = expm(aug)[:n, n:]
    Em1 = (alpha * block) @ phi
    dV = U @ Em1[:d, :d] + Q @ Em1[d:, :d]
    V = check_stiefel(U + dV)
    if not np.array_equal(V, U + dV):
        dV = V - U
    return V, dV


def retract_exp(U: np.ndarray, D: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    """QR-based exponential retraction ``Retr_U(alpha D)``.

    ``[U Q] expm(alpha [[A, -R^T], [R, 0]]) [I; 0]`` with ``A = U^T D`` and
    ``Q R = (I - U U^T) D``. Agrees with ``U + alpha D`` to first order.
    """
    return retract_step(U, D, alpha)[0]
