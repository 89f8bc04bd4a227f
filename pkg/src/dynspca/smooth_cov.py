"""Local linear smoothing of the mean vector and covariance matrix.

Two estimators are provided. The pooled estimator works for any design and
weights every observation ``(i, l)`` by its local linear weight. The common
design estimator first forms the cross-sectional sample covariance ``S_l`` at
each shared grid time and then smooths those matrices over the grid.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DegenerateWindow, DimensionError, WrongDesign
from .kernel import KernelSpec, check_window, common_design_weights, local_linear_weights, scaled_kernel
from .panel import Design, PanelDataset


def symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + S.T)


def eigengap_diagnostic(S, d: int) -> float:
    """``lambda_d - lambda_{d+1}`` of a symmetric matrix (eigenvalues descending)."""
    mat = S.S if isinstance(S, SmoothedCovariance) else np.asarray(S, dtype=float)
    p = mat.shape[0]
    if not 1 <= d < p:
        raise DimensionError(f"need 1 <= d < p, got d={d}, p={p}")
    ev = np.linalg.eigvalsh(mat)[::-1]
    return float(ev[d - 1] - ev[d])


@dataclass
class SmoothedCovariance:
    """Smoothed covariance ``S_h(t)`` at one evaluation time.

    ``S`` estimates ``Sigma(t) + sigma^2 I`` and is exactly symmetric, but is
    not guaranteed to be positive semidefinite after mean correction.
    """

    t: float
    S: np.ndarray
    mean: np.ndarray
    n_window: int
    method: str
    d: int = None

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.S)[::-1]

    @property
    def top_eigenvalues(self) -> np.ndarray:
        if self.d is None:
            raise ValueError("no subspace dimension configured for diagnostics")
        return self.eigenvalues[: self.d + 1]

    @property
    def eigengap(self) -> float:
        if self.d is None:
            raise ValueError("no subspace dimension configured for diagnostics")
        if not 1 <= self.d < self.S.shape[0]:
            raise DimensionError(f"need 1 <= d < p, got d={self.d}")
        ev = self.eigenvalues
        return float(ev[self.d - 1] - ev[self.d])

    def diagnostics(self) -> dict:
        out = {"t": self.t, "n_window": self.n_window, "method": self.method}
        if self.d is not None:
            out["top_eigenvalues"] = self.top_eigenvalues.tolist()
            out["eigengap"] = self.eigengap
        return out


class CovarianceSmoother:
    """Smoothed mean and covariance of a panel at arbitrary times.

    Parameters
    ----------
    data : PanelDataset
    kernel : KernelSpec
    method : {'auto', 'pooled', 'common'}
        ``'auto'`` uses the common-design estimator when the panel has a common
        design and the pooled estimator otherwise.
    center : bool, default=True
        Subtract the smoothed mean in the pooled estimator. The common design
        estimator always centers at the cross-sectional means.
    """

    def __init__(self, data: PanelDataset, kernel: KernelSpec, method: str = "auto", center: bool = True):
        if method == "auto":
            method = "common" if data.design is Design.COMMON else "pooled"
        if method not in ("pooled", "common"):
            raise ValueError(f"unknown covariance method {method!r}")
        if method == "common" and data.design is not Design.COMMON:
            raise WrongDesign("the common-design estimator needs a common design panel")
        self.data = data
        self.kernel = kernel
        self.method = method
        self.center = bool(center) if method == "pooled" else True
        if method == "pooled":
            self._order = np.argsort(data.flat_times, kind="stable")
            self._sorted_times = data.flat_times[self._order]

    def with_bandwidth(self, h: float) -> "CovarianceSmoother":
        """A shallow copy sharing all precomputed per-panel arrays."""
        other = copy.copy(self)
        other.kernel = self.kernel.with_bandwidth(h)
        return other

    # -- common design internals -------------------------------------------

    @cached_property
    def _common_mean(self) -> np.ndarray:
        return self.data.stacked.mean(axis=0)

    @cached_property
    def _common_resid(self) -> np.ndarray:
        # (m, n, p): residuals about the cross-sectional mean at each grid time
        return (self.data.stacked - self._common_mean[None]).transpose(1, 0, 2)

    @cached_property
    def _common_cov(self) -> np.ndarray:
        r = self._common_resid
        return np.matmul(r.transpose(0, 2, 1), r) / self.data.n

    def grid_mean(self) -> np.ndarray:
        """Cross-sectional means ``ybar_l`` at the shared grid times, ``(m, p)``."""
        return self._common_mean

    # -- pooled internals ----------------------------------------------------

    def _window(self, t: float) -> np.ndarray:
        h = self.kernel.bandwidth
        lo = np.searchsorted(self._sorted_times, t - h, side="left")
        hi = np.searchsorted(self._sorted_times, t + h, side="right")
        return self._order[lo:hi]

    def _pooled_parts(self, t: float):
        idx = self._window(t)
        times = self.data.flat_times[idx]
        delta = times - t
        k = scaled_kernel(self.kernel, delta)
        keep = k > 0.0
        idx, delta, k = idx[keep], delta[keep], k[keep]
        return idx, delta, k

    @staticmethod
    def _combine(Y, k, delta, times, center):
        kd = k * delta
        R0, R1, R2 = k.sum(), kd.sum(), (kd * delta).sum()
        den = check_window(k, delta, times, R0, R1, R2)
        w = (R2 * k - R1 * kd) / den
        mean = w @ Y
        S = Y.T @ (w[:, None] * Y)
        if center:
            S = S - np.outer(mean, mean)
        return symmetrize(S), (mean if center else np.zeros(Y.shape[1])), int(k.size)

    # -- public ----------------------------------------------------------------

    def weights(self, t: float):
        if self.method == "common":
            return common_design_weights(self.data.grid, t, self.kernel)
        return local_linear_weights(self.data.flat_times, t, self.kernel)

    def mean(self, t: float) -> np.ndarray:
        """Local linear smoothed mean, ``sum_il w_il y_il``."""
        if self.method == "common":
            lw = common_design_weights(self.data.grid, t, self.kernel)
            return lw.weights @ self._common_mean
        idx, delta, k = self._pooled_parts(t)
        kd = k * delta
        R0, R1, R2 = k.sum(), kd.sum(), (kd * delta).sum()
        den = check_window(k, delta, self.data.flat_times[idx], R0, R1, R2)
        w = (R2 * k - R1 * kd) / den
        return w @ self.data.flat_values[idx]

    def matrix(self, t: float):
        """Return ``(S, mean, n_window)`` at time ``t``."""
        t = float(t)
        if self.method == "common":
            lw = common_design_weights(self.data.grid, t, self.kernel)
            win = lw.window
            w = lw.weights[win]
            S = np.tensordot(w, self._common_cov[win], axes=1)
            return symmetrize(S), w @ self._common_mean[win], int(win.size * self.data.n)
        idx, delta, k = self._pooled_parts(t)
        times = self.data.flat_times[idx]
        return self._combine(self.data.flat_values[idx], k, delta, times, self.center)

    def covariance(self, t: float, d: int = None) -> SmoothedCovariance:
        S, mean, nw = self.matrix(t)
        return SmoothedCovariance(float(t), S, mean, nw, self.method, d)

    def leave_one_out(self, t: float, subjects=None):
        """Yield ``(i, S^{-i}(t))`` for each subject, recomputing only what changes.

        Subjects whose removal leaves a degenerate window yield ``None`` in
        place of the matrix.
        """
        t = float(t)
        n = self.data.n
        subjects = range(n) if subjects is None else subjects
        if self.method == "common":
            lw = common_design_weights(self.data.grid, t, self.kernel)
            win = lw.window
            w = lw.weights[win]
            S = np.tensordot(w, self._common_cov[win], axes=1)
            resid = self._common_resid[win]  # (|win|, n, p)
            # downdate of the 1/n sample covariance when one subject is removed
            c1, c2 = n / (n - 1.0), n / (n - 1.0) ** 2
            for i in subjects:
                r = resid[:, i, :]
                yield i, symmetrize(c1 * S - c2 * (r.T @ (w[:, None] * r)))
            return
        idx, delta, k = self._pooled_parts(t)
        subj = self.data.flat_subject[idx]
        Y = self.data.flat_values[idx]
        times = self.data.flat_times[idx]
        kd = k * delta
        A0 = Y.T @ (k[:, None] * Y)
        A1 = Y.T @ (kd[:, None] * Y)
        b0, b1 = k @ Y, kd @ Y
        R = np.array([k.sum(), kd.sum(), (kd * delta).sum()])
        for i in subjects:
            mine = subj == i
            if not mine.any():
                keep = slice(None)
                Ri, A0i, A1i, b0i, b1i = R, A0, A1, b0, b1
            else:
                keep = ~mine
                ki, kdi, Yi = k[mine], kd[mine], Y[mine]
                Ri = R - np.array([ki.sum(), kdi.sum(), (kdi * delta[mine]).sum()])
                A0i = A0 - Yi.T @ (ki[:, None] * Yi)
                A1i = A1 - Yi.T @ (kdi[:, None] * Yi)
                b0i, b1i = b0 - ki @ Yi, b1 - kdi @ Yi
            try:
                den = check_window(k[keep], delta[keep], times[keep], *Ri)
            except DegenerateWindow:
                yield i, None
                continue
            S = (Ri[2] * A0i - Ri[1] * A1i) / den
            if self.center:
                mu = (Ri[2] * b0i - Ri[1] * b1i) / den
                S = S - np.outer(mu, mu)
            yield i, symmetrize(S)


def smooth_mean(data: PanelDataset, t: float, spec: KernelSpec) -> np.ndarray:
    """Pooled local linear estimate of the mean vector at ``t``."""
    return CovarianceSmoother(data, spec, method="pooled", center=True).mean(t)


def smooth_cov_pooled(data: PanelDataset, t: float, spec: KernelSpec, center: bool = True, d: int = None):
    return CovarianceSmoother(data, spec, method="pooled", center=center).covariance(t, d)


def smooth_cov_common(data: PanelDataset, t: float, spec: KernelSpec, d: int = None):
    """``sum_l w_l S_l`` over the shared grid, ``S_l`` the 1/n sample covariance."""
    if data.design is not Design.COMMON:
        raise WrongDesign("smooth_cov_common requires a common design panel")
    return CovarianceSmoother(data, spec, method="common").covariance(t, d)
