"""Sequential data-driven choice of bandwidth, sparsity and threshold.

The bandwidth is chosen first by leave-one-curve-out prediction error of the
unpenalized fit. Given it, the sparsity level maximizes a k-fold
cross-validated inner product, and the threshold trades that inner product
against the number of retained variables.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import eigh

from .errors import AllCandidatesFailed, DegenerateWindow, DimensionError, EmptySupport, SupportTooSmall
from .estimator import NONZERO_TOL, DpcaConfig, FveRule, refine, threshold_support, top_eigenvectors
from .kernel import KernelSpec
from .manpg import manpg_solve
from .panel import Design, PanelDataset
from .smooth_cov import CovarianceSmoother

logger = logging.getLogger(__name__)

# relative tolerance under which two criterion values count as tied
TIE_RTOL = 1e-9


@dataclass
class TuningGrids:
    """Candidate sets and cross-validation settings.

    ``None`` candidate sets are replaced by data-driven defaults (see
    :func:`default_bandwidths`, :func:`default_rhos`, :func:`default_gammas`).

    Parameters
    ----------
    validation_subsample : int
        Number of validation points for the bandwidth stage: grid times under
        a common design, observation points otherwise.
    cv_points : int
        Number of evaluation-grid times at which the sparsity and threshold
        criteria are averaged.
    rho_mode, gamma_mode : {'shared', 'per_point'}
        ``'shared'`` selects one value from the criterion averaged over the
        validation times; ``'per_point'`` selects per validation time and
        assigns every grid point the value of its nearest validation time.
    max_outer : int
        Cap on ManPG iterations inside the cross-validation solves. Weakly
        penalized problems creep along nearly flat directions long after
        the held-out inner product has settled.
    tol_rel : float
        Relative stopping tolerance of those solves (``||D|| <= tol_rel *
        sqrt(p d)``); never tighter than the fit's own setting.
    """

    A1: Optional[Sequence[float]] = None
    A2: Optional[Sequence[float]] = None
    A3: Optional[Sequence[float]] = None
    k: int = 5
    epsilon_gamma: float = 0.005
    validation_subsample: Optional[int] = 25
    cv_points: Optional[int] = 10
    rho_mode: str = "shared"
    gamma_mode: str = "shared"
    n_bandwidths: int = 8
    n_rhos: int = 8
    max_outer: int = 200
    tol_rel: float = 1e-6

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("need at least 2 folds")
        if self.max_outer < 1:
            raise ValueError("max_outer must be positive")
        if not self.tol_rel > 0:
            raise ValueError("tol_rel must be positive")
        if not 0.0 <= self.epsilon_gamma <= 0.5:
            raise ValueError("epsilon_gamma must lie in [0, 0.5]")
        for name in ("rho_mode", "gamma_mode"):
            if getattr(self, name) not in ("shared", "per_point"):
                raise ValueError(f"{name} must be 'shared' or 'per_point'")
        if self.A1 is not None:
            self.A1 = sorted(float(h) for h in self.A1)
            if not self.A1 or any(not 0.0 < h <= 1.0 for h in self.A1):
                raise ValueError("bandwidth candidates must lie in (0, 1]")
        if self.A2 is not None:
            self.A2 = sorted(float(r) for r in self.A2)
            if not self.A2 or any(r < 0 for r in self.A2):
                raise ValueError("rho candidates must be nonnegative")
        if self.A3 is not None:
            self.A3 = sorted(float(g) for g in self.A3)
            if not self.A3 or any(g < 0 for g in self.A3):
                raise ValueError("gamma candidates must be nonnegative")
        for name in ("validation_subsample", "cv_points"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class TuningReport:
    h_star: float
    rho_star: np.ndarray
    gamma_star: np.ndarray
    bandwidth_curve: dict
    rho_curve: dict
    gamma_curve: dict
    seed: int
    grid: np.ndarray
    folds: list = field(default_factory=list)

    def apply(self, config: DpcaConfig) -> DpcaConfig:
        """A copy of ``config`` with the selected parameters filled in."""
        return replace(config, bandwidth=self.h_star, rho=self.rho_star.copy(), gamma=self.gamma_star.copy())

    def to_dict(self) -> dict:
        def clean(curve):
            return {k: (np.asarray(v).tolist() if isinstance(v, (np.ndarray, list, tuple)) else v)
                    for k, v in curve.items()}

        return {
            "h_star": self.h_star,
            "rho_star": self.rho_star.tolist(),
            "gamma_star": self.gamma_star.tolist(),
            "grid": self.grid.tolist(),
            "seed": self.seed,
            "folds": [list(map(int, f)) for f in self.folds],
            "bandwidth_curve": clean(self.bandwidth_curve),
            "rho_curve": clean(self.rho_curve),
            "gamma_curve": clean(self.gamma_curve),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TuningReport":
        return cls(
            float(d["h_star"]), np.asarray(d["rho_star"], float), np.asarray(d["gamma_star"], float),
            d["bandwidth_curve"], d["rho_curve"], d["gamma_curve"], int(d["seed"]),
            np.asarray(d["grid"], float), [list(f) for f in d.get("folds", [])],
        )


def _rng(seed: int, stage: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 7919, stage])))


def _argbest(values, maximize: bool) -> int:
    """Index of the best value; ties (within TIE_RTOL) go to the last index."""
    v = np.asarray(values, dtype=float)
    if maximize:
        v = -v
    finite = np.isfinite(v)
    if not finite.any():
        return -1
    best = v[finite].min()
    tol = TIE_RTOL * max(abs(best), 1e-300)
    idx = np.flatnonzero(finite & (v <= best + tol))
    return int(idx[-1])


def _fixed_d(d) -> int:
    if isinstance(d, FveRule):
        raise TypeError("tuning needs a fixed subspace dimension")
    return int(d)


def make_folds(n: int, k: int, seed: int) -> list:
    """Seeded split of subjects ``0..n-1`` into ``k`` nonempty folds."""
    if not 2 <= k <= n:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    perm = _rng(seed, 0).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, k)]


def _subsample(items: np.ndarray, size, rng) -> np.ndarray:
    if size is None or size >= len(items):
        return np.arange(len(items))
    return np.sort(rng.choice(len(items), size=size, replace=False))


def _distinct_gap(times: np.ndarray, at: np.ndarray) -> float:
    """Largest over ``at`` of the distance to the second-nearest distinct time."""
    u = np.unique(times)
    if u.size < 2:
        raise DegenerateWindow("fewer than two distinct observation times")
    worst = 0.0
    for t in np.atleast_1d(at):
        dist = np.sort(np.abs(u - t))
        worst = max(worst, dist[1])
    return float(worst)


def default_bandwidths(data: PanelDataset, grid, count: int = 8) -> np.ndarray:
    """``count`` log-spaced bandwidths in ``[max(1/mbar, h_min), 0.5]``.

    ``h_min`` is slightly above the smallest bandwidth that keeps two distinct
    observation times strictly inside every window on ``grid``.
    """
    lo = max(1.0 / data.mbar, 1.05 * _distinct_gap(data.flat_times, grid))
    hi = 0.5
    if lo >= hi:
        return np.array([min(1.0, lo)])
    return np.geomspace(lo, hi, count)


def default_rhos(S_norm_inf: float, count: int = 8) -> np.ndarray:
    """``{0}`` plus ``count`` log-spaced values up to ``||S||_inf``."""
    scale = max(float(S_norm_inf), 1e-12)
    return np.concatenate([[0.0], scale * np.logspace(-3, 0, count)])


def default_gammas(diag: np.ndarray) -> np.ndarray:
    """``{0}`` plus deciles 0.1..0.9 of the nonzero initial projection diagonal."""
    diag = np.asarray(diag, dtype=float).ravel()
    nz = diag[diag > NONZERO_TOL]
    if nz.size == 0:
        return np.array([0.0])
    q = np.quantile(nz, np.linspace(0.1, 0.9, 9))
    return np.unique(np.concatenate([[0.0], q]))


def _solver(config: DpcaConfig, grids: TuningGrids):
    return replace(config.solver, max_outer=min(config.solver.max_outer, grids.max_outer),
                   tol_rel=max(config.solver.tol_rel, grids.tol_rel))


def _top_subspace(S: np.ndarray, d: int) -> np.ndarray:
    p = S.shape[0]
    w, V = eigh(S, subset_by_index=[p - d, p - 1], check_finite=False)
    return V


def _smoother(data, config: DpcaConfig, h: float) -> CovarianceSmoother:
    return CovarianceSmoother(data, KernelSpec(h, config.kernel), config.covariance, config.center)


def bandwidth_cv_score(data: PanelDataset, smoother: CovarianceSmoother, d: int,
                       points, mean_fn) -> float:
    """Mean squared leave-one-curve-out residual over validation ``points``.

    ``points`` is a list of ``(t, [(subject, row), ...])`` where ``row``
    indexes the subject's observations at time ``t``. Returns ``inf`` when a
    window degenerates for any held-out curve.
    """
    total = 0.0
    count = 0
    for t, members in points:
        subjects = [i for i, _ in members]
        rows = dict(members)
        mu = mean_fn(t)
        try:
            for i, S in smoother.leave_one_out(t, subjects):
                if S is None:
                    return float("inf")
                U = _top_subspace(S, d)
                r = data.values[i][rows[i]] - mu
                res = r - U @ (U.T @ r)
                total += float(res @ res)
                count += 1
        except DegenerateWindow:
            return float("inf")
    return total / max(count, 1)


def _validation_points(data: PanelDataset, grids: TuningGrids, seed: int):
    rng = _rng(seed, 1)
    if data.design is Design.COMMON:
        grid = data.grid
        pick = _subsample(grid, grids.validation_subsample, rng)
        return [(float(grid[l]), [(i, int(l)) for i in range(data.n)]) for l in pick]
    flat_t, flat_s = data.flat_times, data.flat_subject
    offsets = np.concatenate([[0], np.cumsum(data.counts)])
    pick = _subsample(flat_t, grids.validation_subsample, rng)
    return [(float(flat_t[j]), [(int(flat_s[j]), int(j - offsets[flat_s[j]]))]) for j in pick]


def select_bandwidth(data: PanelDataset, grids: TuningGrids, d, config: DpcaConfig = None, seed: int = 0):
    """Leave-one-curve-out choice of ``h`` with ``rho = gamma = 0``.

    The mean is the cross-sectional mean under a common design and the local
    linear mean otherwise (zero for an uncentered pooled fit).

    Returns
    -------
    h_star : float
    curve : dict with ``candidates``, ``cv`` and the validation ``times``

    Raises
    ------
    AllCandidatesFailed
        If every candidate scores ``inf``.
    """
    d = _fixed_d(d)
    if data.n < 3:
        raise DimensionError("bandwidth cross-validation needs at least 3 subjects")
    config = config or DpcaConfig(d=d)
    A1 = np.asarray(grids.A1 if grids.A1 is not None
                    else default_bandwidths(data, config.grid, grids.n_bandwidths), dtype=float)
    points = _validation_points(data, grids, seed)
    scores = []
    for h in A1:
        sm = _smoother(data, config, h)
        if sm.method == "common":
            ybar = sm.grid_mean()
            index = {float(t): l for l, t in enumerate(data.grid)}
            mean_fn = lambda t, ybar=ybar, index=index: ybar[index[t]]
        elif sm.center:
            def mean_fn(t, sm=sm):
                return sm.mean(t)
        else:
            zero = np.zeros(data.p)
            mean_fn = lambda t, zero=zero: zero
        try:
            scores.append(bandwidth_cv_score(data, sm, d, points, mean_fn))
        except DegenerateWindow:
            scores.append(float("inf"))
        logger.debug("bandwidth %.4f: cv=%.6g", h, scores[-1])
    best = _argbest(scores, maximize=False)
    if best < 0:
        raise AllCandidatesFailed("no bandwidth candidate gives nondegenerate windows")
    curve = {"candidates": A1.tolist(), "cv": scores, "times": [t for t, _ in points]}
    return float(A1[best]), curve


class _FoldSet:
    """Training smoothers and held-out covariances for k-fold criteria."""

    def __init__(self, data, config, h, folds, times):
        self.folds = folds
        self.times = np.asarray(times)
        n = data.n
        self.train, self.held = [], []
        for fold in folds:
            rest = np.setdiff1d(np.arange(n), fold)
            self.train.append(_smoother(data.subset(rest), config, h))
            self.held.append(_smoother(data.subset(fold), config, h))
        self.full = _smoother(data, config, h)
        self._cache = {}
        self._starts = {}

    def matrices(self, v, j):
        key = (v, j)
        if key not in self._cache:
            t = self.times[j]
            try:
                S_tr = self.train[v].matrix(t)[0]
                S_ho = self.held[v].matrix(t)[0]
            except DegenerateWindow:
                S_tr = S_ho = None
            self._cache[key] = (S_tr, S_ho)
        return self._cache[key]

    def start(self, v, j, d):
        """Top-``d`` eigenvectors of the training matrix, shared by all candidates."""
        key = (v, j, d)
        if key not in self._starts:
            self._starts[key] = top_eigenvectors(self.matrices(v, j)[0], d)
        return self._starts[key]


def _reduce(scores: np.ndarray, mode: str):
    """Aggregate a ``(candidates, times)`` score table per selection mode."""
    with np.errstate(invalid="ignore"):
        if mode == "shared":
            return np.where(np.all(np.isfinite(scores), axis=1), scores.mean(axis=1), -np.inf)
        return scores


def _cv_points(grid: np.ndarray, count, seed: int) -> np.ndarray:
    if count is None or count >= grid.size:
        return np.arange(grid.size)
    # evenly spread, seeded jitter-free choice keeps the criterion deterministic
    return np.unique(np.round(np.linspace(0, grid.size - 1, count)).astype(int))


def _spread(values_at_points: np.ndarray, point_times: np.ndarray, grid: np.ndarray) -> np.ndarray:
    nearest = np.abs(grid[:, None] - point_times[None, :]).argmin(axis=1)
    return np.asarray(values_at_points, dtype=float)[nearest]


def select_rho(data: PanelDataset, h_star: float, grids: TuningGrids, d, config: DpcaConfig = None,
               seed: int = 0, folds=None, times=None, _foldset=None):
    """Choose ``rho`` by the k-fold cross-validated inner product with ``gamma = 0``.

    Returns ``(rho_star, curve)``; ``rho_star`` has one entry per grid point of
    ``config``. The curve holds, per candidate, the criterion averaged over the
    validation times and the mean ``||U_hat||_1`` of the full-data fit.
    """
    d = _fixed_d(d)
    config = config or DpcaConfig(d=d)
    grid = config.grid
    if times is None:
        times = grid[_cv_points(grid, grids.cv_points, seed)]
    times = np.asarray(times, dtype=float)
    folds = make_folds(data.n, grids.k, seed) if folds is None else folds
    fs = _foldset or _FoldSet(data, config, h_star, folds, times)
    full = [fs.full.matrix(t)[0] for t in times]
    full_start = [top_eigenvectors(S, d) for S in full]
    if grids.A2 is not None:
        A2 = np.asarray(grids.A2, dtype=float)
    else:
        A2 = default_rhos(np.median([np.abs(S).max() for S in full]), grids.n_rhos)
    params = _solver(config, grids)
    scores = np.full((A2.size, times.size), -np.inf)
    l1 = np.full((A2.size, times.size), np.nan)
    for c, rho in enumerate(A2):
        for j in range(times.size):
            vals = []
            for v in range(len(folds)):
                S_tr, S_ho = fs.matrices(v, j)
                if S_tr is None:
                    vals = None
                    break
                U, _ = manpg_solve(S_tr, rho, d, fs.start(v, j, d), params)
                vals.append(float(np.sum(U * (S_ho @ U))))
            if vals is not None:
                scores[c, j] = float(np.mean(vals))
            U, _ = manpg_solve(full[j], rho, d, full_start[j], params)
            l1[c, j] = float(np.abs(U).sum())
    agg = _reduce(scores, grids.rho_mode)
    if grids.rho_mode == "shared":
        best = _argbest(agg, maximize=True)
        if best < 0:
            raise AllCandidatesFailed("every rho candidate failed")
        rho_star = np.full(grid.size, A2[best])
    else:
        picks = []
        for j in range(times.size):
            b = _argbest(agg[:, j], maximize=True)
            picks.append(A2[b] if b >= 0 else A2[0])
        rho_star = _spread(np.array(picks), times, grid)
    curve = {
        "candidates": A2.tolist(),
        "ip": np.nanmean(np.where(np.isfinite(scores), scores, np.nan), axis=1).tolist(),
        "l1_norm": np.nanmean(l1, axis=1).tolist(),
        "times": times.tolist(),
        "per_time_ip": scores.tolist(),
    }
    return rho_star, curve


def select_gamma(data: PanelDataset, h_star: float, rho_star, grids: TuningGrids, d,
                 config: DpcaConfig = None, seed: int = 0, folds=None, times=None, _foldset=None):
    """Choose ``gamma`` by the explained-variance / support-size trade-off.

    ``Ip(gamma)`` is the k-fold cross-validated inner product of the refined
    fit using ``h_star`` and ``rho_star``. The selected value is the largest
    candidate whose ``Ip`` is at least ``(1 - epsilon_gamma)`` times the
    ``Ip`` of the smallest candidate and no smaller candidate falls below that
    bound.

    Returns ``(gamma_star, curve)`` where the curve holds ``ip`` and the
    full-data retained-variable count ``support_size`` per candidate.
    """
    d = _fixed_d(d)
    config = config or DpcaConfig(d=d)
    grid = config.grid
    if times is None:
        times = grid[_cv_points(grid, grids.cv_points, seed)]
    times = np.asarray(times, dtype=float)
    rho_star = np.broadcast_to(np.asarray(rho_star, dtype=float), grid.shape)
    rho_t = _spread(rho_star, grid, times) if times.size else np.array([])
    folds = make_folds(data.n, grids.k, seed) if folds is None else folds
    fs = _foldset or _FoldSet(data, config, h_star, folds, times)
    params = _solver(config, grids)
    full_U0 = []
    for j, t in enumerate(times):
        S = fs.full.matrix(t)[0]
        full_U0.append(manpg_solve(S, rho_t[j], d, top_eigenvectors(S, d), params)[0])
    diag0 = np.array([np.einsum("ij,ij->i", U, U) for U in full_U0])
    A3 = np.asarray(grids.A3 if grids.A3 is not None else default_gammas(diag0), dtype=float)

    scores = np.full((A3.size, times.size), -np.inf)
    for j in range(times.size):
        rho = rho_t[j]
        per_fold = []
        for v in range(len(folds)):
            S_tr, S_ho = fs.matrices(v, j)
            if S_tr is None:
                per_fold = None
                break
            U0, _ = manpg_solve(S_tr, rho, d, fs.start(v, j, d), params)
            row = []
            for g in A3:
                try:
                    J = threshold_support(U0, g)
                    if J.size == S_tr.shape[0]:
                        U = U0
                    else:
                        U, _ = refine(S_tr, J, d, rho, params,
                                      U0 if config.refine_warm_start else None)
                    row.append(float(np.sum(U * (S_ho @ U))))
                except (EmptySupport, SupportTooSmall):
                    row.append(-np.inf)
            per_fold.append(row)
        if per_fold is not None:
            scores[:, j] = np.mean(np.array(per_fold), axis=0)
    # retained variables that are nonzero in the full-data initial fit
    support = np.array([[int(np.sum((diag0[j] >= g) & (diag0[j] > NONZERO_TOL))) for j in range(times.size)]
                        for g in A3])

    def pick(ip):
        # walk up from the smallest candidate and stop at the first one that
        # loses more than epsilon of the baseline inner product
        finite = np.flatnonzero(np.isfinite(ip))
        if finite.size == 0:
            return -1
        first = int(finite[0])
        base = ip[first]
        bound = (1.0 - grids.epsilon_gamma) * base - TIE_RTOL * abs(base)
        chosen = first
        for c in range(first + 1, ip.size):
            if not (np.isfinite(ip[c]) and ip[c] >= bound):
                break
            chosen = c
        return chosen

    agg = _reduce(scores, grids.gamma_mode)
    if grids.gamma_mode == "shared":
        best = pick(agg)
        if best < 0:
            raise AllCandidatesFailed("every gamma candidate failed")
        gamma_star = np.full(grid.size, A3[best])
    else:
        vals = []
        for j in range(times.size):
            b = pick(agg[:, j])
            vals.append(A3[b] if b >= 0 else 0.0)
        gamma_star = _spread(np.array(vals), times, grid)
    curve = {
        "candidates": A3.tolist(),
        "ip": np.nanmean(np.where(np.isfinite(scores), scores, np.nan), axis=1).tolist(),
        "support_size": support.mean(axis=1).tolist(),
        "times": times.tolist(),
        "per_time_ip": scores.tolist(),
    }
    return gamma_star, curve


def tune(data: PanelDataset, config: DpcaConfig, grids: TuningGrids = None, seed: int = 0) -> TuningReport:
    """Run the three stages in order: ``h``, then ``rho`` given ``h``, then ``gamma``."""
    grids = grids or TuningGrids()
    d = _fixed_d(config.d)
    h_star, bcurve = select_bandwidth(data, grids, d, config, seed)
    times = config.grid[_cv_points(config.grid, grids.cv_points, seed)]
    folds = make_folds(data.n, grids.k, seed)
    fs = _FoldSet(data, config, h_star, folds, times)
    rho_star, rcurve = select_rho(data, h_star, grids, d, config, seed, folds, times, fs)
    gamma_star, gcurve = select_gamma(data, h_star, rho_star, grids, d, config, seed, folds, times, fs)
    logger.info("tuned h=%.4g rho=%.4g gamma=%.4g", h_star, rho_star[0], gamma_star[0])
    return TuningReport(h_star, rho_star, gamma_star, bcurve, rcurve, gcurve, int(seed),
                        config.grid.copy(), [f.tolist() for f in folds])
