"""Kernel functions and local linear smoothing weights."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DegenerateWindow

# Relative tolerance on R0*R2 - R1**2 below which the local design is singular.
DEGENERACY_TOL = 1e-12

_GAUSS_NORM = 1.0 / (math.sqrt(2.0 * math.pi) * math.erf(1.0 / math.sqrt(2.0)))


class KernelFamily(str, Enum):
    EPANECHNIKOV = "epanechnikov"
    GAUSSIAN = "gaussian"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class KernelSpec:
    """A kernel family together with its bandwidth.

    Parameters
    ----------
    bandwidth : float
        Window half-width ``h`` in ``(0, 1]``.
    family : KernelFamily, default=KernelFamily.EPANECHNIKOV
        Kernel shape. All families are symmetric densities supported on
        ``[-1, 1]``; the Gaussian is truncated at ``+-1`` and renormalized.
    """

    bandwidth: float
    family: KernelFamily = KernelFamily.EPANECHNIKOV

    def __post_init__(self):
        h = float(self.bandwidth)
        if not (np.isfinite(h) and 0.0 < h <= 1.0):
            raise ValueError(f"bandwidth must lie in (0, 1], got {self.bandwidth!r}")
        object.__setattr__(self, "bandwidth", h)
        object.__setattr__(self, "family", KernelFamily(self.family))

    def with_bandwidth(self, h: float) -> "KernelSpec":
        return KernelSpec(h, self.family)


def kernel_eval(spec: KernelSpec, u):
    """Evaluate the unscaled kernel ``K(u)``; accepts scalars or arrays."""
    u = np.asarray(u, dtype=float)
    inside = np.abs(u) <= 1.0
    if spec.family is KernelFamily.EPANECHNIKOV:
        k = 0.75 * (1.0 - u * u)
    elif spec.family is KernelFamily.GAUSSIAN:
        k = _GAUSS_NORM * np.exp(-0.5 * u * u)
    else:
        k = np.full_like(u, 0.5)
    k = np.where(inside, k, 0.0)
    k = np.maximum(k, 0.0)
    return float(k) if k.ndim == 0 else k


def scaled_kernel(spec: KernelSpec, delta):
    """``K_h(delta) = K(delta / h) / h``."""
    h = spec.bandwidth
    return kernel_eval(spec, np.asarray(delta, dtype=float) / h) / h


@dataclass(frozen=True)
class LocalWeights:
    """Local linear weights at a target time.

    ``weights`` is aligned with the observation order passed in; entries
    outside the window are exactly zero.
    """

    t: float
    weights: np.ndarray
    R0: float
    R1: float
    R2: float

    @property
    def window(self) -> np.ndarray:
        return np.flatnonzero(self.weights != 0.0)


def local_moments(spec: KernelSpec, times, t: float):
    """Return ``(K_h, delta, R0, R1, R2)`` for the observation times."""
    delta = np.asarray(times, dtype=float) - float(t)
    k = scaled_kernel(spec, delta)
    kd = k * delta
    return k, delta, float(k.sum()), float(kd.sum()), float((kd * delta).sum())


def check_window(k, delta, times, R0, R1, R2):
    """Raise ``DegenerateWindow`` unless the local linear design is full rank."""
    inside = k > 0.0
    if np.unique(np.asarray(times)[inside]).size < 2:
        raise DegenerateWindow(
            f"fewer than 2 distinct time points in the window ({int(inside.sum())} in-window)"
        )
    den = R0 * R2 - R1 * R1
    if not abs(den) > DEGENERACY_TOL * abs(R0 * R2):
        raise DegenerateWindow(f"local design is singular (R0*R2 - R1^2 = {den:.3e})")
    return den


def local_linear_weights(times, t: float, spec: KernelSpec) -> LocalWeights:
    """Local linear intercept weights for the pooled observation times.

    ``w_il = (R2 K_h(t_il - t) - R1 K_h(t_il - t)(t_il - t)) / (R0 R2 - R1^2)``.
    The weights sum to one and have a vanishing first moment about ``t``.

    Raises
    ------
    DegenerateWindow
        If fewer than two distinct times fall inside the window or the
        moment determinant is numerically zero.
    """
    times = np.asarray(times, dtype=float).ravel()
    k, delta, R0, R1, R2 = local_moments(spec, times, t)
    den = check_window(k, delta, times, R0, R1, R2)
    w = (R2 * k - R1 * k * delta) / den
    w[k == 0.0] = 0.0
    return LocalWeights(float(t), w, R0, R1, R2)


def common_design_weights(grid_times, t: float, spec: KernelSpec) -> LocalWeights:
    """Weights over the shared grid of a common design.

    Same formula as :func:`local_linear_weights`, with the moments summed
    over the ``m`` grid times only (one term per time, not per subject).
    """
    return local_linear_weights(grid_times, t, spec)
