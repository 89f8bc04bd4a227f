"""Two-step dynamic sparse principal subspace estimation over a time grid.

For every evaluation time the pipeline smooths the covariance, solves the
l1-penalized Stiefel problem for an initial basis, keeps the variables whose
projection diagonal reaches the threshold ``gamma``, and re-solves on the
retained variables with zero padding elsewhere.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import (
    DegenerateSpectrum,
    DegenerateWindow,
    DimensionError,
    EmptySupport,
    NotProjection,
    SupportTooSmall,
)
from .kernel import KernelFamily, KernelSpec
from .manpg import ManPGParams, SolveStatus, SolveTrace, manpg_solve, objective
from .panel import PanelDataset
from .smooth_cov import CovarianceSmoother, SmoothedCovariance
from .stiefel import qr_positive

logger = logging.getLogger(__name__)

# Entries of a projection diagonal above this are reported as nonzero.
NONZERO_TOL = 1e-6


def default_grid(size: int = 100) -> np.ndarray:
    return np.linspace(0.0, 1.0, size)


@dataclass(frozen=True)
class FveRule:
    """Choose ``d`` per time as the smallest dimension explaining ``threshold``."""

    threshold: float

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("FVE threshold must lie in (0, 1)")


@dataclass
class DpcaConfig:
    """Settings for :func:`fit_trajectory`.

    ``rho`` and ``gamma`` may be scalars or one value per grid point.
    ``warm_start`` starts each initial solve from the previous grid point's
    initial estimate whenever that start has a lower objective than the
    eigenvector start.
    """

    d: Union[int, FveRule] = 3
    bandwidth: float = 0.1
    kernel: KernelFamily = KernelFamily.EPANECHNIKOV
    rho: Union[float, Sequence[float]] = 0.0
    gamma: Union[float, Sequence[float]] = 0.0
    grid: np.ndarray = field(default_factory=default_grid)
    center: bool = True
    covariance: str = "auto"
    solver: ManPGParams = field(default_factory=ManPGParams)
    warm_start: bool = True
    refine_warm_start: bool = True

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float).ravel()
        if self.grid.size == 0:
            raise ValueError("evaluation grid is empty")
        if np.any(np.diff(self.grid) < 0) or self.grid.min() < 0 or self.grid.max() > 1:
            raise ValueError("evaluation grid must be sorted within [0, 1]")
        if isinstance(self.d, (int, np.integer)):
            if self.d < 1:
                raise ValueError("d must be at least 1")
            self.d = int(self.d)
        elif not isinstance(self.d, FveRule):
            raise TypeError("d must be an int or an FveRule")
        if not 0.0 < float(self.bandwidth) <= 1.0:
            raise ValueError("bandwidth must lie in (0, 1]")
        self.rho = self._per_point(self.rho, "rho")
        self.gamma = self._per_point(self.gamma, "gamma")
        self.kernel = KernelFamily(self.kernel)

    def _per_point(self, value, name):
        arr = np.asarray(value, dtype=float)
        if arr.ndim == 0:
            arr = np.full(self.grid.size, float(arr))
        if arr.shape != self.grid.shape:
            raise ValueError(f"{name} must be a scalar or have one value per grid point")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} must be finite and nonnegative")
        return arr

    @property
    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(self.bandwidth, self.kernel)


@dataclass
class PointFit:
    """Estimate at one grid time. ``status`` is ``'ok'`` or ``'skipped'``."""

    t: float
    status: str
    d: int = 0
    rho: float = 0.0
    gamma: float = 0.0
    U0: np.ndarray = None
    support: np.ndarray = None
    U: np.ndarray = None
    eigengap: float = float("nan")
    trace0: SolveTrace = None
    trace: SolveTrace = None
    reason: str = ""
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def projection(self) -> np.ndarray:
        return self.U @ self.U.T

    @property
    def projection0(self) -> np.ndarray:
        return self.U0 @ self.U0.T

    @property
    def projection_diag(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.U, self.U)


@dataclass
class SubspaceFit:
    points: list
    config: DpcaConfig = None
    metadata: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return np.array([pt.t for pt in self.points])

    @property
    def ok(self) -> np.ndarray:
        return np.array([pt.ok for pt in self.points])

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def stacked(self, attr: str = "U") -> np.ndarray:
        """Stack per-point bases into ``(T, p, d)``; skipped points are NaN."""
        ref = next((pt for pt in self.points if pt.ok), None)
        if ref is None:
            raise ValueError("no successfully fitted grid point")
        shape = getattr(ref, attr).shape
        out = np.full((len(self.points),) + shape, np.nan)
        for k, pt in enumerate(self.points):
            if pt.ok:
                arr = getattr(pt, attr)
                if arr.shape != shape:
                    raise DimensionError("subspace dimension varies over the grid")
                out[k] = arr
        return out


def top_eigenvectors(S: np.ndarray, d: int) -> np.ndarray:
    w, V = np.linalg.eigh(S)
    return V[:, ::-1][:, :d].copy()


def initial_estimate(S, d: int, rho: float, params: ManPGParams = None, U0=None):
    """Solve the penalized problem at one time, starting from the top eigenvectors.

    Returns ``(U0_hat, trace)``. A start ``U0`` may be supplied instead.
    """
    mat = S.S if isinstance(S, SmoothedCovariance) else np.asarray(S, dtype=float)
    if isinstance(S, SmoothedCovariance) and S.d == d and S.eigengap < 1e-8:
        warnings.warn(f"eigengap {S.eigengap:.2e} at t={S.t:.4f}; subspace is poorly determined")
    start = top_eigenvectors(mat, d) if U0 is None else U0
    return manpg_solve(mat, rho, d, start, params)


def threshold_support(U0_hat: np.ndarray, gamma: float) -> np.ndarray:
    """Indices ``j`` with ``(U U^T)_jj >= gamma``, from row norms of ``U``.

    Raises
    ------
    EmptySupport
        No variable reaches ``gamma``.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    diag = np.einsum("ij,ij->i", U0_hat, U0_hat)
    J = np.flatnonzero(diag >= gamma)
    if J.size == 0:
        raise EmptySupport(f"no variable has projection diagonal >= {gamma:g}")
    return J


def refine(S, J, d: int, rho: float, params: ManPGParams = None, U_start=None):
    """Re-solve on the principal submatrix ``S[J, J]`` and zero-pad to ``p`` rows.

    ``U_start`` (if given) is a ``p x d`` basis whose rows in ``J`` are
    re-orthonormalized to start the solve; otherwise the top eigenvectors of
    the submatrix are used.

    Returns ``(U_hat, trace)``.
    """
    mat = S.S if isinstance(S, SmoothedCovariance) else np.asarray(S, dtype=float)
    J = np.asarray(J, dtype=int)
    if J.size < d:
        raise SupportTooSmall(f"support has {J.size} variables, need at least d={d}")
    sub = mat[np.ix_(J, J)]
    start = None
    if U_start is not None:
        Q, R = qr_positive(U_start[J])
        if np.min(np.abs(np.diag(R))) > 1e-8:
            start = Q
    if start is None:
        start = top_eigenvectors(sub, d)
    U_J, trace = manpg_solve(sub, rho, d, start, params)
    U = np.zeros((mat.shape[0], d))
    U[J] = U_J
    return U, trace


def subspace_distance(E_proj, F_proj) -> float:
    """``sqrt(||E - F||_F^2 / 2)`` between two projection matrices of equal rank."""
    E = np.asarray(E_proj, dtype=float)
    F = np.asarray(F_proj, dtype=float)
    if E.shape != F.shape or E.ndim != 2 or E.shape[0] != E.shape[1]:
        raise DimensionError("projection matrices must be square and of equal shape")
    for P in (E, F):
        tr = np.trace(P)
        if np.linalg.norm(P @ P - P) > 1e-6 or abs(tr - round(tr)) > 1e-6:
            raise NotProjection("input is not an orthogonal projection matrix")
    if abs(np.trace(E) - np.trace(F)) > 1e-6:
        raise NotProjection("projections have different ranks")
    return float(np.sqrt(0.5 * np.sum((E - F) ** 2)))


def basis_distance(U: np.ndarray, V: np.ndarray) -> float:
    """Subspace distance between the spans of two orthonormal bases.

    Equals :func:`subspace_distance` of their projections, computed as
    ``||(I - U U^T) V||_F`` in ``O(p d^2)``.
    """
    if U.shape != V.shape:
        raise DimensionError("bases must have the same shape")
    R = V - U @ (U.T @ V)
    return float(np.linalg.norm(R))


def select_d_by_fve(S, threshold: float) -> int:
    """Smallest ``d`` whose leading positive eigenvalues explain ``threshold``."""
    mat = S.S if isinstance(S, SmoothedCovariance) else np.asarray(S, dtype=float)
    if not 0.0 < threshold < 1.0 + 1e-12:
        raise ValueError("threshold must lie in (0, 1)")
    ev = np.clip(np.linalg.eigvalsh(mat)[::-1], 0.0, None)
    total = ev.sum()
    if total <= 0:
        raise DegenerateSpectrum("no positive eigenvalue")
    frac = np.cumsum(ev) / total
    return int(np.searchsorted(frac, threshold - 1e-12) + 1)


def align_bases(bases: list) -> list:
    """Greedy column order and sign alignment between consecutive bases.

    At each step the pair of columns with the largest ``|<u_k, v_l>|`` is
    matched first; the matched column is flipped to a nonnegative inner
    product. ``None`` entries (skipped points) pass through and break the
    chain. Column spans are never changed.
    """
    out = []
    prev = None
    for V in bases:
        if V is None:
            out.append(None)
            continue
        if prev is None or prev.shape != V.shape:
            out.append(V)
            prev = V
            continue
        d = V.shape[1]
        C = prev.T @ V
        order = np.empty(d, dtype=int)
        A = np.abs(C)
        free_rows, free_cols = set(range(d)), set(range(d))
        for _ in range(d):
            sub = [(A[r, c], -r, -c) for r in free_rows for c in free_cols]
            _, r, c = max(sub)
            r, c = -r, -c
            order[r] = c
            free_rows.discard(r)
            free_cols.discard(c)
        W = V[:, order]
        signs = np.where(np.einsum("ij,ij->j", prev, W) < 0, -1.0, 1.0)
        W = W * signs
        out.append(W)
        prev = W
    return out


def _choose_start(mat, rho, d, previous):
    eig = top_eigenvectors(mat, d)
    if previous is None or previous.shape != eig.shape:
        return eig
    if objective(mat, rho, previous) < objective(mat, rho, eig):
        return previous
    return eig


def fit_point(smoother: CovarianceSmoother, t: float, d, rho: float, gamma: float,
              params: ManPGParams = None, previous=None, refine_warm_start: bool = True) -> PointFit:
    """Run the two-step procedure at one time. Never raises on numerical trouble."""
    try:
        cov = smoother.covariance(t)
    except DegenerateWindow as exc:
        return PointFit(float(t), "skipped", rho=rho, gamma=gamma, reason=str(exc))
    p = cov.S.shape[0]
    notes = []
    if isinstance(d, FveRule):
        try:
            dd = select_d_by_fve(cov, d.threshold)
        except DegenerateSpectrum as exc:
            return PointFit(float(t), "skipped", rho=rho, gamma=gamma, reason=str(exc))
        if dd >= p:
            notes.append(f"FVE rule chose d={dd}; capped at p-1")
            dd = p - 1
    else:
        dd = d
    if not 1 <= dd < p:
        raise DimensionError(f"need 1 <= d < p, got d={dd}, p={p}")
    cov.d = dd
    gap = cov.eigengap
    if gap < 1e-8:
        notes.append(f"eigengap {gap:.2e} below 1e-8")
    start = _choose_start(cov.S, rho, dd, previous)
    U0, tr0 = manpg_solve(cov.S, rho, dd, start, params)
    try:
        J = threshold_support(U0, gamma)
        if J.size < dd:
            raise SupportTooSmall(f"support has {J.size} < d={dd} variables")
    except (EmptySupport, SupportTooSmall) as exc:
        notes.append(f"{exc}; refit with gamma=0")
        J = np.arange(p)
    if J.size == p:
        # refine problem coincides with the initial problem
        U, tr = U0.copy(), tr0
    else:
        U, tr = refine(cov.S, J, dd, rho, params, U0 if refine_warm_start else None)
    for msg in notes:
        logger.warning("t=%.4f: %s", t, msg)
    return PointFit(float(t), "ok", dd, rho, gamma, U0, J, U, gap, tr0, tr, warnings=notes)


def fit_trajectory(data: PanelDataset, config: DpcaConfig, smoother: CovarianceSmoother = None) -> SubspaceFit:
    """Fit the two-step estimator at every grid time of ``config``.

    Points whose local window is degenerate are recorded as skipped. Exported
    bases are sign/order aligned along the grid; projections are unaffected.

    Raises
    ------
    DegenerateWindow
        If every grid point was skipped.
    """
    if smoother is None:
        smoother = CovarianceSmoother(data, config.kernel_spec, config.covariance, config.center)
    points = []
    previous = None
    for k, t in enumerate(config.grid):
        pt = fit_point(smoother, t, config.d, float(config.rho[k]), float(config.gamma[k]),
                       config.solver, previous if config.warm_start else None,
                       config.refine_warm_start)
        points.append(pt)
        previous = pt.U if pt.ok else None
    if not any(pt.ok for pt in points):
        raise DegenerateWindow("every grid point has a degenerate window")
    aligned = align_bases([pt.U if pt.ok else None for pt in points])
    for pt, U in zip(points, aligned):
        if U is not None:
            pt.U = U
    meta = {"covariance": smoother.method, "center": smoother.center, "n": data.n, "p": data.p}
    return SubspaceFit(points, config, meta)
