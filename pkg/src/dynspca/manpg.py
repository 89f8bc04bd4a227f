"""Manifold proximal gradient for l1-penalized PCA on the Stiefel manifold.

Solves ``min -Tr(U^T S U) + rho ||U||_1`` subject to ``U^T U = I_d``. Each
outer iteration computes a tangent descent direction from a proximal
subproblem, whose Lagrange multiplier is found with a semi-smooth Newton
method, and then backtracks along the exponential retraction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .errors import DimensionError, SubproblemFail
from .stiefel import check_stiefel, retract_step

logger = logging.getLogger(__name__)


class SolveStatus(str, Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    LINE_SEARCH_STALL = "line_search_stall"


@dataclass(frozen=True)
class SSNParams:
    max_newton: int = 50
    tol_E: float = 1e-10
    max_fixed_point: int = 5000
    max_line_search: int = 30


@dataclass(frozen=True)
class ManPGParams:
    """Algorithm constants for :func:`manpg_solve`.

    ``step=None`` means ``1/L`` with ``L`` from :func:`lipschitz_estimate`;
    ``tol_D=None`` means ``tol_rel * sqrt(p d)``.
    """

    delta: float = 1e-4
    gamma_shrink: float = 0.5
    step: float = None
    max_outer: int = 1000
    tol_D: float = None
    tol_rel: float = 1e-6
    max_backtrack: int = 60
    ssn: SSNParams = field(default_factory=SSNParams)

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if not 0.0 < self.gamma_shrink < 1.0:
            raise ValueError("gamma_shrink must lie in (0, 1)")
        if self.step is not None and not self.step > 0:
            raise ValueError("step must be positive")
        if self.tol_D is not None and not self.tol_D > 0:
            raise ValueError("tol_D must be positive")
        if not self.tol_rel > 0:
            raise ValueError("tol_rel must be positive")
        if self.max_outer < 0:
            raise ValueError("max_outer must be nonnegative")
        if not self.ssn.tol_E > 0:
            raise ValueError("tol_E must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ManPGParams":
        d = dict(d)
        ssn = SSNParams(**d.pop("ssn", {}))
        return cls(ssn=ssn, **d)


@dataclass
class IterRecord:
    objective: float
    d_norm: float
    alpha: float
    backtracks: int
    ssn_iters: int
    decrease: float


@dataclass
class SolveTrace:
    """Per-iteration log of a ManPG run.

    ``records[k].decrease`` is ``F(U_{k+1}) - F(U_k)`` evaluated in a
    cancellation-free form; accepted steps satisfy
    ``decrease <= -delta * alpha * d_norm**2``.
    """

    records: list = field(default_factory=list)
    status: SolveStatus = SolveStatus.MAX_ITER
    final_objective: float = float("nan")
    final_d_norm: float = float("nan")
    step: float = float("nan")
    delta: float = float("nan")
    message: str = ""

    @property
    def n_iter(self) -> int:
        return len(self.records)

    def to_dict(self, records: bool = False) -> dict:
        out = {
            "status": self.status.value,
            "n_iter": self.n_iter,
            "final_objective": self.final_objective,
            "final_d_norm": self.final_d_norm,
            "step": self.step,
        }
        if self.message:
            out["message"] = self.message
        if records:
            out["records"] = [asdict(r) for r in self.records]
        return out


def _check_problem(S, U):
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"S must be square, got {S.shape}")
    if U is not None and U.shape[0] != S.shape[0]:
        raise DimensionError(f"U has {U.shape[0]} rows but S is {S.shape[0]} x {S.shape[0]}")
    return S


def objective(S, rho: float, U) -> float:
    """``F(U) = -Tr(U^T S U) + rho * ||U||_1``."""
    U = np.asarray(U, dtype=float)
    S = _check_problem(S, U)
    return float(-np.sum(U * (S @ U)) + rho * np.abs(U).sum())


def smooth_grad(S, U) -> np.ndarray:
    """Euclidean gradient ``-2 S U`` of ``-Tr(U^T S U)``."""
    U = np.asarray(U, dtype=float)
    S = _check_problem(S, U)
    return -2.0 * (S @ U)


def lipschitz_estimate(S, tol: float = 1e-8, max_iter: int = 1000, safeguard: float = 1.01) -> float:
    """``2 * spectral_radius(S)`` by power iteration, inflated by ``safeguard``.

    Uses a deterministic start vector; returns at least ``1e-12``.
    """
    S = _check_problem(S, None)
    p = S.shape[0]
    v = 1.0 + np.arange(p) / (p + 1.0)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = S @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            break
        # ||S v|| never exceeds the spectral radius
        converged = abs(nw - est) <= tol * nw
        est = max(est, nw)
        v = w / nw
        if converged:
            break
    return max(2.0 * est * safeguard, 1e-12)


def _inner(A, B) -> float:
    # plain dot product; np.sum(A * B) costs a temporary and a reduction wrapper
    return float(np.dot(A.ravel(), B.ravel()))


def _norm(A) -> float:
    return math.sqrt(_inner(A, A))


def _subproblem_residual(U, grad, t, tau, Lam, base=None, U2t=None):
    # base = U - t grad and U2t = 2t U may be passed in once per subproblem
    base = U - t * grad if base is None else base
    U2t = 2.0 * t * U if U2t is None else U2t
    B = base + U2t @ Lam
    X = np.abs(B) - tau
    np.maximum(X, 0.0, out=X)
    D = np.copysign(X, B, out=X)
    D -= U
    M = D.T @ U
    return B, D, M + M.T


_BASIS_CACHE = {}


def _sym_basis(d: int) -> np.ndarray:
    """Orthonormal basis of symmetric ``d x d`` matrices, one flattened matrix per row."""
    if d not in _BASIS_CACHE:
        rows = []
        for a, b in zip(*np.triu_indices(d)):
            X = np.zeros((d, d))
            if a == b:
                X[a, a] = 1.0
            else:
                X[a, b] = X[b, a] = np.sqrt(0.5)
            rows.append(X.ravel())
        _BASIS_CACHE[d] = np.array(rows)
    return _BASIS_CACHE[d]


def _dual_merit(U, t, rho, B, D):
    # negated Lagrangian dual of the subproblem; its gradient in Lam is E(Lam).
    # The multiplier enters only through B = U - t (grad - 2 U Lam).
    return -((_inner(U - B, D) + 0.5 * _inner(D, D)) / t + rho * np.abs(U + D).sum())


def solve_subproblem(U, grad, t: float, rho: float, ssn: SSNParams = None, Lam0=None):
    """Tangent-space proximal subproblem of one ManPG iteration.

    Finds symmetric ``Lam`` with ``E(Lam) = A(D(Lam)) = 0`` where
    ``D(Lam) = prox_{t rho}(U - t (grad - A^*(Lam))) - U`` and
    ``A(D) = D^T U + U^T D``. ``D`` then minimizes
    ``<grad, D> + ||D||_F^2 / (2t) + rho ||U + D||_1`` over the tangent space.

    ``E`` is the gradient of the convex, piecewise quadratic negated dual
    function; each semi-smooth Newton direction is followed by a line search
    for the zero of that function's slope along the direction.

    Returns
    -------
    D : ndarray (p, d)
    Lam : ndarray (d, d)
    iters : int
        Newton plus fixed-point iterations used.

    Raises
    ------
    SubproblemFail
        If neither semi-smooth Newton nor the fixed-point fallback reaches
        ``||E||_F <= tol_E``.
    """
    ssn = ssn or SSNParams()
    U = np.asarray(U, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise SubproblemFail("non-finite gradient")
    p, d = U.shape
    tau = t * rho
    nfree = d * (d + 1) // 2
    # scale-aware floor: ||E|| cannot be resolved below round-off in B
    tol = max(ssn.tol_E, 1e-13 * (1.0 + t * np.linalg.norm(grad)))
    Lam = np.zeros((d, d)) if Lam0 is None else 0.5 * (Lam0 + Lam0.T)

    base = U - t * grad
    U2t = 2.0 * t * U

    def residual(L):
        return _subproblem_residual(U, grad, t, tau, L, base, U2t)

    B, D, E = residual(Lam)
    nE = _norm(E)
    iters = 0
    Bflat = _sym_basis(d)
    # rows: U X_c flattened, for the orthonormal symmetric basis X_c
    W = np.matmul(U, Bflat.reshape(-1, d, d)).reshape(nfree, -1)

    def coords(M):
        return Bflat @ M.ravel()

    def mat(v):
        return (v @ Bflat).reshape(d, d)

    def merit(Bl, Dl):
        return _dual_merit(U, t, rho, Bl, Dl)

    def slope_root(L, direction, g0):
        # The merit function is convex and piecewise quadratic along a ray,
        # so its slope is monotone and piecewise linear: bracket the root by
        # expansion and refine with safeguarded secant steps.
        def at(s):
            cand = L + s * direction
            Bc, Dc, Ec = residual(cand)
            return cand, Bc, Dc, Ec, _inner(Ec, direction)

        lo, glo = 0.0, g0
        hi = 1.0
        res = at(hi)
        for _ in range(ssn.max_line_search):
            if res[4] >= 0.0:
                break
            lo, glo = hi, res[4]
            hi *= 4.0
            res = at(hi)
        ghi = res[4]
        best = res
        side = 0
        # Illinois variant of regula falsi; stops once the slope has dropped
        # by many orders of magnitude or the residual is resolved
        for _ in range(ssn.max_line_search):
            if ghi - glo <= 0.0 or abs(best[4]) <= 1e-10 * abs(g0) or hi - lo <= 1e-12 * hi:
                break
            if _norm(best[3]) <= tol:
                break
            mid = lo - glo * (hi - lo) / (ghi - glo)
            if not lo < mid < hi:
                mid = 0.5 * (lo + hi)
            best = at(mid)
            if best[4] < 0.0:
                lo, glo = mid, best[4]
                if side == -1:
                    ghi *= 0.5
                side = -1
            else:
                hi, ghi = mid, best[4]
                if side == 1:
                    glo *= 0.5
                side = 1
        return best

    for _ in range(ssn.max_newton):
        if nE <= tol:
            return D, Lam, iters
        iters += 1
        mask = np.abs(B) > tau
        # generalized Hessian of the merit function in the orthonormal basis:
        # <X, J(Y)> = 4t <U X, mask * (U Y)>
        Wm = W * mask.ravel()
        H = 4.0 * t * (Wm @ W.T)
        sig, V = np.linalg.eigh(H)
        g = coords(E)
        rng = sig > 1e-9 * 4.0 * t
        progressed = False
        if rng.any():
            Vr = V[:, rng]
            dLam = mat(-Vr @ ((Vr.T @ g) / sig[rng]))
            slope = _inner(E, dLam)
            f0 = merit(B, D)
            s = 1.0
            for _ in range(ssn.max_line_search):
                cand = Lam + s * dLam
                Bc, Dc, Ec = residual(cand)
                if merit(Bc, Dc) <= f0 + 1e-4 * s * slope:
                    Lam, B, D, E = cand, Bc, Dc, Ec
                    progressed = True
                    break
                s *= 0.5
        if (~rng).any():
            # flat directions: the slope stays constant until an inactive
            # entry crosses the threshold
            Vn = V[:, ~rng]
            g = coords(E)
            gn = Vn.T @ g
            if np.linalg.norm(gn) > 1e-3 * tol:
                direction = mat(-Vn @ gn)
                g0 = _inner(E, direction)
                if g0 < 0.0:
                    Lam, B, D, E, _ = slope_root(Lam, direction, g0)
                    progressed = True
        nEn = _norm(E)
        if not progressed:
            break
        nE = nEn

    # gradient steps on the merit function: its Hessian is bounded by 4t
    eta = 1.0 / (4.0 * t)
    for _ in range(ssn.max_fixed_point):
        if nE <= tol:
            return D, Lam, iters
        iters += 1
        Lam = Lam - eta * E
        B, D, E = residual(Lam)
        nE = _norm(E)
    if nE <= tol:
        return D, Lam, iters
    raise SubproblemFail(f"subproblem residual {nE:.3e} above tolerance {tol:.1e}")


def _decrease(rho, U, SU, V, SV, dV):
    # F(V) - F(U) from the accurate step dV = V - U; no large terms cancel
    smooth = -_inner(dV, SV + SU)
    if rho == 0.0:
        return float(smooth)
    same = (np.sign(V) == np.sign(U)) & (U != 0.0)
    l1 = np.where(same, np.sign(U) * dV, np.abs(V) - np.abs(U))
    return float(smooth + rho * np.sum(l1))


def manpg_solve(S, rho: float, d: int, U0=None, params: ManPGParams = None, callback=None):
    """Run ManPG from ``U0`` (default: top-``d`` eigenvectors of ``S``).

    The step is accepted once
    ``F(Retr(alpha D)) <= F(U) - delta * alpha * ||D||_F^2``, shrinking
    ``alpha`` by ``gamma_shrink`` from 1. Iteration stops when
    ``||D||_F <= tol_D``.

    ``callback(k, U)``, if given, is called with every iterate, starting
    with ``k = 0`` for the start point.

    Returns
    -------
    U : ndarray (p, d)
    trace : SolveTrace
        Never raises on solver trouble; a failed subproblem or exhausted line
        search ends the run with status ``LINE_SEARCH_STALL`` and the current
        iterate is returned.
    """
    params = params or ManPGParams()
    S = _check_problem(S, None)
    p = S.shape[0]
    if not 1 <= d <= p:
        raise DimensionError(f"need 1 <= d <= p, got d={d}, p={p}")
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    if U0 is None:
        U = np.linalg.eigh(S)[1][:, ::-1][:, :d].copy()
    else:
        U = check_stiefel(U0)
        if U.shape != (p, d):
            raise DimensionError(f"U0 must be {p} x {d}, got {U.shape}")
    t = params.step if params.step is not None else 1.0 / lipschitz_estimate(S)
    tol_D = params.tol_D if params.tol_D is not None else params.tol_rel * np.sqrt(p * d)
    trace = SolveTrace(step=t, delta=params.delta)

    SU = S @ U
    F = -_inner(U, SU) + rho * float(np.abs(U).sum())
    Lam = None
    status = SolveStatus.MAX_ITER
    if callback is not None:
        callback(0, U)
    nD = float("nan")
    for _ in range(params.max_outer):
        grad = -2.0 * SU
        try:
            D, Lam, ssn_iters = solve_subproblem(U, grad, t, rho, params.ssn, Lam)
        except SubproblemFail as exc:
            status = SolveStatus.LINE_SEARCH_STALL
            trace.message = str(exc)
            break
        nD = _norm(D)
        if nD <= tol_D:
            status = SolveStatus.CONVERGED
            break
        alpha = 1.0
        target = params.delta * nD * nD
        for nb in range(params.max_backtrack + 1):
            V, dV = retract_step(U, D, alpha)
            SV = S @ V
            dF = _decrease(rho, U, SU, V, SV, dV)
            if dF <= -target * alpha:
                break
            alpha *= params.gamma_shrink
        else:
            status = SolveStatus.LINE_SEARCH_STALL
            trace.message = "backtracking exhausted"
            break
        trace.records.append(IterRecord(F, nD, alpha, nb, ssn_iters, dF))
        U, SU = V, SV
        F = -_inner(U, SU) + rho * float(np.abs(U).sum())
        if callback is not None:
            callback(trace.n_iter, U)
    trace.status = status
    trace.final_objective = F
    trace.final_d_norm = nD
    if status is not SolveStatus.CONVERGED:
        logger.debug("ManPG stopped with status %s after %d iterations", status.value, trace.n_iter)
    return U, trace
