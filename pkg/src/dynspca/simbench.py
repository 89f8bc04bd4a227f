"""Synthetic panels with sparse time-varying eigenvectors, metrics and replication studies.

Observations follow ``y_i(t) = sum_k xi_ik u_k(t) + eps`` with ten components
whose eigenvectors live on disjoint blocks of five variables and rotate with
Fourier basis functions of ``t``. Scores are constant over time.
"""

from __future__ import annotations

import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import DimensionError, DynspcaError, GridMismatch
from .estimator import NONZERO_TOL, DpcaConfig, SubspaceFit, basis_distance, fit_trajectory
from .panel import Design, PanelDataset
from .stiefel import qr_positive

logger = logging.getLogger(__name__)

LAMBDA = (30.0, 25.0, 20.0, 5.0, 3.0, 2.0, 1.0, 0.5, 0.2, 0.1)
BLOCK = 5

# discrete uniform sets of per-subject sampling counts for the irregular settings
IRREGULAR_SETTINGS = {
    1: (100, (95, 100, 105)),
    2: (100, (45, 50, 55)),
    3: (100, (15, 20, 25)),
    4: (500, (19, 20, 21)),
    5: (500, (9, 10, 11)),
    6: (500, (3, 4, 5)),
}


def make_rng(seed: int, replication: int = 0) -> np.random.Generator:
    """Counter-based Philox stream keyed by ``(seed, replication)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(replication)])))


def fourier_basis(t) -> np.ndarray:
    """``phi_r(t)`` for ``r = 1..5`` as an ``(len(t), 5)`` array.

    ``phi_r = sqrt(2) sin(pi (r+1) t)`` for odd ``r`` and
    ``sqrt(2) cos(pi r t)`` for even ``r``.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty((t.size, BLOCK))
    for r in range(1, BLOCK + 1):
        if r % 2:
            out[:, r - 1] = np.sqrt(2.0) * np.sin(np.pi * (r + 1) * t)
        else:
            out[:, r - 1] = np.sqrt(2.0) * np.cos(np.pi * r * t)
    return out


def raw_vectors(t: float, p: int, K: int = 10) -> np.ndarray:
    """Unnormalized ``[v_1 ... v_K]`` with ``v_k`` supported on rows ``5(k-1) .. 5k-1``."""
    if p < BLOCK * K:
        raise DimensionError(f"need p >= {BLOCK * K} for {K} disjoint blocks, got p={p}")
    phi = fourier_basis(t)[0]
    V = np.zeros((p, K))
    for k in range(K):
        V[k * BLOCK:(k + 1) * BLOCK, k] = phi
    return V


def true_eigenvectors(t: float, p: int, K: int = 10) -> np.ndarray:
    """Orthonormalized ``[v_1 ... v_K]`` (Gram-Schmidt in column order)."""
    return qr_positive(raw_vectors(t, p, K))[0]


def _normalized_phi(t) -> np.ndarray:
    phi = fourier_basis(t)
    return phi / np.linalg.norm(phi, axis=1, keepdims=True)


@dataclass(frozen=True)
class SimDesign:
    """One simulation cell.

    ``design='common'`` samples every subject at ``2l/(2m+1)``, ``l = 1..m``.
    ``design='irregular'`` draws ``m_i`` uniformly from ``m_support`` and
    times i.i.d. uniform on ``[0, 1]``.
    """

    p: int = 100
    n: int = 100
    design: str = "common"
    m: int = 100
    m_support: tuple = ()
    sigma2: float = 0.1
    lam: tuple = LAMBDA
    seed: int = 0
    replications: int = 1

    def __post_init__(self):
        K = len(self.lam)
        if self.p < BLOCK * K:
            raise DimensionError(f"need p >= {BLOCK * K}, got p={self.p}")
        if self.n < 2:
            raise DimensionError("need n >= 2")
        lam = np.asarray(self.lam, dtype=float)
        if np.any(lam <= 0) or np.any(np.diff(lam) >= 0):
            raise ValueError("lambda must be strictly positive and strictly descending")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be nonnegative")
        if self.design == "common":
            if self.m < 1:
                raise ValueError("m must be positive")
        elif self.design == "irregular":
            if not self.m_support or min(self.m_support) < 1:
                raise ValueError("irregular design needs a nonempty set of positive m_i values")
            object.__setattr__(self, "m_support", tuple(int(v) for v in self.m_support))
        else:
            raise ValueError(f"unknown design {self.design!r}")
        if self.replications < 1:
            raise ValueError("replications must be positive")
        object.__setattr__(self, "lam", tuple(float(v) for v in self.lam))

    @property
    def K(self) -> int:
        return len(self.lam)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lam"] = list(self.lam)
        out["m_support"] = list(self.m_support)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SimDesign":
        d = dict(d)
        d["lam"] = tuple(d.get("lam", LAMBDA))
        d["m_support"] = tuple(d.get("m_support", ()))
        return cls(**d)


def setting(k: int, p: int = 100, **kw) -> SimDesign:
    """Irregular setting ``k`` in 1..6."""
    if k not in IRREGULAR_SETTINGS:
        raise ValueError(f"irregular settings are numbered 1..6, got {k}")
    n, support = IRREGULAR_SETTINGS[k]
    return SimDesign(p=p, n=n, design="irregular", m_support=support, **kw)


def common_setting(m: int, p: int = 100, n: int = 100, **kw) -> SimDesign:
    return SimDesign(p=p, n=n, design="common", m=m, **kw)


@dataclass(frozen=True)
class GroundTruth:
    """True subspace, support and covariance of a :class:`SimDesign` at any ``t``."""

    p: int
    lam: tuple = LAMBDA

    def U(self, t: float, d: int) -> np.ndarray:
        return true_eigenvectors(t, self.p, len(self.lam))[:, :d]

    def projection_diag(self, t: float, d: int) -> np.ndarray:
        U = self.U(t, d)
        return np.einsum("ij,ij->i", U, U)

    def support(self, t: float, d: int, nz_threshold: float = NONZERO_TOL) -> np.ndarray:
        return np.flatnonzero(self.projection_diag(t, d) > nz_threshold)

    def sigma(self, t: float) -> np.ndarray:
        """Signal covariance ``sum_k lambda_k u_k(t) u_k(t)^T`` (noise excluded)."""
        U = true_eigenvectors(t, self.p, len(self.lam))
        return (U * np.asarray(self.lam)) @ U.T

    def to_dict(self) -> dict:
        return {"p": self.p, "lam": list(self.lam)}


def generate_panel(design: SimDesign, replication: int = 0):
    """Draw one panel. Returns ``(PanelDataset, GroundTruth)``.

    Draw order per replication: sampling counts, times, scores, noise.
    """
    rng = make_rng(design.seed, replication)
    n, p, K = design.n, design.p, design.K
    if design.design == "common":
        m = design.m
        grid = 2.0 * np.arange(1, m + 1) / (2 * m + 1)
        counts = np.full(n, m)
        times = [grid.copy() for _ in range(n)]
    else:
        counts = rng.choice(np.asarray(design.m_support), size=n)
        times = [np.sort(rng.uniform(0.0, 1.0, size=c)) for c in counts]
    xi = rng.standard_normal((n, K)) * np.sqrt(np.asarray(design.lam))
    flat_t = np.concatenate(times)
    subj = np.repeat(np.arange(n), counts)
    phin = _normalized_phi(flat_t)
    Y = np.zeros((flat_t.size, p))
    for k in range(K):
        Y[:, k * BLOCK:(k + 1) * BLOCK] = xi[subj, k][:, None] * phin
    if design.sigma2 > 0:
        Y += np.sqrt(design.sigma2) * rng.standard_normal(Y.shape)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    values = [Y[offsets[i]:offsets[i + 1]] for i in range(n)]
    kind = Design.COMMON if design.design == "common" else Design.IRREGULAR
    data = PanelDataset(times, values, design=kind,
                        metadata={"simulation": design.to_dict(), "replication": int(replication)})
    return data, GroundTruth(p, design.lam)


def _check_grid(fit: SubspaceFit, grid):
    grid = fit.times if grid is None else np.asarray(grid, dtype=float)
    if grid.shape != fit.times.shape or not np.allclose(grid, fit.times, rtol=0, atol=1e-12):
        raise GridMismatch("fit grid does not match the evaluation grid")
    return grid


def squared_distances(fit: SubspaceFit, truth: GroundTruth, grid=None, which: str = "U") -> np.ndarray:
    """``d^2`` between true and fitted subspaces per grid point (NaN if skipped)."""
    grid = _check_grid(fit, grid)
    out = np.full(grid.size, np.nan)
    for k, pt in enumerate(fit.points):
        if pt.ok:
            Uhat = getattr(pt, which)
            out[k] = basis_distance(truth.U(pt.t, Uhat.shape[1]), Uhat) ** 2
    return out


def integrated_error(times, sq) -> float:
    """Trapezoid integral of ``sq`` over ``times``, ignoring NaN entries."""
    times = np.asarray(times, dtype=float)
    sq = np.asarray(sq, dtype=float)
    keep = np.isfinite(sq)
    if keep.sum() == 0:
        return float("nan")
    if keep.sum() == 1:
        return float(sq[keep][0] * (times.max() - times.min()))
    return float(np.trapezoid(sq[keep], times[keep]))


def mise(fit: SubspaceFit, truth: GroundTruth, grid=None, which: str = "U") -> float:
    """Integrated squared subspace distance of one fit (trapezoid over the grid).

    ``which='U0'`` scores the initial estimate instead of the refined one.
    """
    grid = _check_grid(fit, grid)
    return integrated_error(grid, squared_distances(fit, truth, grid, which))


def tpr_tnr(fit: SubspaceFit, truth: GroundTruth, grid=None, nz_threshold: float = NONZERO_TOL,
            which: str = "U"):
    """Per-time TPR and TNR of ``diag(Pi_hat) > nz_threshold`` against the true support.

    Returns ``(tpr, tnr)`` arrays; entries are NaN at skipped points or when
    the class is empty.
    """
    grid = _check_grid(fit, grid)
    tpr = np.full(grid.size, np.nan)
    tnr = np.full(grid.size, np.nan)
    for k, pt in enumerate(fit.points):
        if not pt.ok:
            continue
        U = getattr(pt, which)
        est = np.einsum("ij,ij->i", U, U) > nz_threshold
        true = truth.projection_diag(pt.t, U.shape[1]) > nz_threshold
        pos, neg = true.sum(), (~true).sum()
        if pos:
            tpr[k] = (est & true).sum() / pos
        if neg:
            tnr[k] = (~est & ~true).sum() / neg
    return tpr, tnr


@dataclass
class ReplicationResult:
    """Outcome of a replication study.

    ``ise0`` and ``ise`` hold per-replication integrated squared errors of the
    initial and refined fits (NaN for failed replications).
    """

    design: SimDesign
    grid: np.ndarray
    ise0: np.ndarray
    ise: np.ndarray
    tpr: np.ndarray
    tnr: np.ndarray
    tpr0: np.ndarray
    tnr0: np.ndarray
    failures: dict = field(default_factory=dict)
    tuned: list = field(default_factory=list)
    seconds: np.ndarray = None

    @staticmethod
    def _stat(x, fn):
        x = x[np.isfinite(x)]
        return float(fn(x)) if x.size else float("nan")

    @property
    def mise0(self) -> float:
        return self._stat(self.ise0, np.mean)

    @property
    def mise(self) -> float:
        return self._stat(self.ise, np.mean)

    @property
    def sd0(self) -> float:
        return self._stat(self.ise0, lambda x: np.std(x, ddof=1) if x.size > 1 else 0.0)

    @property
    def sd(self) -> float:
        return self._stat(self.ise, lambda x: np.std(x, ddof=1) if x.size > 1 else 0.0)

    def table_row(self) -> dict:
        d = self.design
        return {
            "design": d.design,
            "p": d.p,
            "n": d.n,
            "m": d.m if d.design == "common" else float(np.mean(d.m_support)),
            "sigma2": d.sigma2,
            "replications": d.replications,
            "failed": len(self.failures),
            "mise0_mean": self.mise0,
            "mise0_sd": self.sd0,
            "mise_mean": self.mise,
            "mise_sd": self.sd,
            "tpr_median": float(np.nanmedian(self.tpr)) if np.isfinite(self.tpr).any() else float("nan"),
            "tnr_median": float(np.nanmedian(self.tnr)) if np.isfinite(self.tnr).any() else float("nan"),
        }

    def curves(self) -> dict:
        """Replication-averaged TPR/TNR over the grid for refined and initial fits."""
        with np.errstate(all="ignore"):
            import warnings as _w
            with _w.catch_warnings():
                _w.simplefilter("ignore", RuntimeWarning)
                return {
                    "t": self.grid,
                    "tpr": np.nanmean(self.tpr, axis=0),
                    "tnr": np.nanmean(self.tnr, axis=0),
                    "tpr0": np.nanmean(self.tpr0, axis=0),
                    "tnr0": np.nanmean(self.tnr0, axis=0),
                }


def study_config(design: SimDesign, grid=None, **overrides) -> DpcaConfig:
    """Default fit settings for a study: common-design smoother, uncentered pooling otherwise."""
    base = dict(d=3, bandwidth=0.1, grid=np.linspace(0.0, 1.0, 100) if grid is None else grid)
    if design.design == "common":
        base.update(covariance="common", center=True)
    else:
        base.update(covariance="pooled", center=False)
    base.update(overrides)
    return DpcaConfig(**base)


def run_replication(design: SimDesign, config: DpcaConfig, r: int, tune: bool = False, grids=None):
    """Generate replication ``r``, optionally tune, fit and score it."""
    from .tuning import tune as run_tuning

    data, truth = generate_panel(design, r)
    cfg = config
    report = None
    if tune:
        report = run_tuning(data, cfg, grids, seed=design.seed + r)
        cfg = report.apply(cfg)
    fit = fit_trajectory(data, cfg)
    out = {
        "ise0": mise(fit, truth, cfg.grid, "U0"),
        "ise": mise(fit, truth, cfg.grid, "U"),
    }
    out["tpr"], out["tnr"] = tpr_tnr(fit, truth, cfg.grid)
    out["tpr0"], out["tnr0"] = tpr_tnr(fit, truth, cfg.grid, which="U0")
    out["report"] = report
    return out


def run_study(design: SimDesign, config: DpcaConfig = None, tune: bool = False, grids=None,
              n_jobs: int = 1, progress: bool = False) -> ReplicationResult:
    """Run ``design.replications`` seeded replications and aggregate their errors.

    Replication ``r`` draws from the stream keyed by ``(seed, r)``; a failed
    replication is recorded in ``failures`` and the study continues. Timing is
    kept out of the deterministic fields.

    Raises
    ------
    DynspcaError
        If every replication failed.
    """
    config = config or study_config(design)
    R = design.replications
    T = config.grid.size

    def job(r):
        t0 = time.perf_counter()
        try:
            res = run_replication(design, config, r, tune, grids)
        except DynspcaError as exc:
            res = exc
        elapsed = time.perf_counter() - t0
        if progress:
            print(f"replication {r + 1}/{R} done in {elapsed:.1f}s", file=sys.stderr)
        return res, elapsed

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(job, range(R)))
    else:
        results = [job(r) for r in range(R)]

    nan = np.full(R, np.nan)
    out = ReplicationResult(design, config.grid.copy(), nan.copy(), nan.copy(),
                            np.full((R, T), np.nan), np.full((R, T), np.nan),
                            np.full((R, T), np.nan), np.full((R, T), np.nan),
                            seconds=np.array([e for _, e in results]))
    for r, (res, _) in enumerate(results):
        if isinstance(res, Exception):
            out.failures[r] = f"{type(res).__name__}: {res}"
            out.tuned.append(None)
            continue
        out.ise0[r], out.ise[r] = res["ise0"], res["ise"]
        out.tpr[r], out.tnr[r] = res["tpr"], res["tnr"]
        out.tpr0[r], out.tnr0[r] = res["tpr0"], res["tnr0"]
        out.tuned.append(res["report"])
    if len(out.failures) == R:
        raise DynspcaError(f"all {R} replications failed; first: {out.failures[0]}")
    return out


def with_replications(design: SimDesign, R: int) -> SimDesign:
    return replace(design, replications=R)
