"""Repeated-measurement panel container."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import DimensionError, WrongDesign


class Design(str, Enum):
    COMMON = "common"
    IRREGULAR = "irregular"


@dataclass
class PanelDataset:
    """Noisy ``p``-dimensional observations of ``n`` subjects over ``[0, 1]``.

    Parameters
    ----------
    times : list of ndarray
        Per-subject sorted observation times, each of shape ``(m_i,)``.
    values : list of ndarray
        Per-subject observations, each of shape ``(m_i, p)``.
    subject_ids : list of str, optional
        Defaults to ``"0", "1", ...``.
    design : Design, optional
        Detected from the time vectors when omitted: common iff every subject
        shares the identical time vector.
    metadata : dict
        Free-form provenance (e.g. the time normalization map).
    """

    times: list
    values: list
    subject_ids: list = None
    design: Design = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.times) != len(self.values):
            raise DimensionError("times and values must have one entry per subject")
        n = len(self.times)
        if n < 2:
            raise DimensionError(f"need at least 2 subjects, got {n}")
        times, values = [], []
        p = None
        for i, (t, y) in enumerate(zip(self.times, self.values)):
            t = np.asarray(t, dtype=float).ravel()
            y = np.asarray(y, dtype=float)
            if y.ndim == 1:
                y = y.reshape(len(t), -1)
            if y.shape[0] != t.size:
                raise DimensionError(f"subject {i}: {t.size} times but {y.shape[0]} observations")
            if p is None:
                p = y.shape[1]
            elif y.shape[1] != p:
                raise DimensionError(f"subject {i}: expected {p} variables, got {y.shape[1]}")
            if t.size and (t.min() < 0.0 or t.max() > 1.0):
                raise ValueError(f"subject {i}: time points must lie in [0, 1]")
            order = np.argsort(t, kind="stable")
            times.append(t[order])
            values.append(y[order])
        self.times, self.values = times, values
        if sum(t.size for t in times) < 2:
            raise DimensionError("need at least 2 observations in total")
        if self.subject_ids is None:
            self.subject_ids = [str(i) for i in range(n)]
        self.subject_ids = [str(s) for s in self.subject_ids]
        detected = Design.COMMON if self._shares_grid() else Design.IRREGULAR
        if self.design is None:
            self.design = detected
        else:
            self.design = Design(self.design)
            if self.design is Design.COMMON and detected is not Design.COMMON:
                raise WrongDesign("common design requires identical time vectors for all subjects")

    def _shares_grid(self) -> bool:
        t0 = self.times[0]
        return all(t.shape == t0.shape and np.array_equal(t, t0) for t in self.times[1:])

    @property
    def n(self) -> int:
        return len(self.times)

    @property
    def p(self) -> int:
        return self.values[0].shape[1]

    @property
    def counts(self) -> np.ndarray:
        return np.array([t.size for t in self.times])

    @property
    def N(self) -> int:
        return int(self.counts.sum())

    @property
    def mbar(self) -> float:
        return self.N / self.n

    @cached_property
    def flat_times(self) -> np.ndarray:
        return np.concatenate(self.times)

    @cached_property
    def flat_values(self) -> np.ndarray:
        return np.vstack(self.values)

    @cached_property
    def flat_subject(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), self.counts)

    @property
    def grid(self) -> np.ndarray:
        """The shared time grid of a common design."""
        if self.design is not Design.COMMON:
            raise WrongDesign("dataset does not have a common design")
        return self.times[0]

    @cached_property
    def stacked(self) -> np.ndarray:
        """Observations as an ``(n, m, p)`` array (common design only)."""
        if self.design is not Design.COMMON:
            raise WrongDesign("dataset does not have a common design")
        return np.stack(self.values)

    def subset(self, subjects: Sequence[int]) -> "PanelDataset":
        idx = [int(i) for i in subjects]
        return PanelDataset(
            [self.times[i] for i in idx],
            [self.values[i] for i in idx],
            [self.subject_ids[i] for i in idx],
            design=self.design,
            metadata=dict(self.metadata),
        )

    def equals(self, other: "PanelDataset") -> bool:
        """Exact equality of ids, design, times and values."""
        return (
            self.subject_ids == other.subject_ids
            and self.design == other.design
            and all(np.array_equal(a, b) for a, b in zip(self.times, other.times))
            and all(np.array_equal(a, b) for a, b in zip(self.values, other.values))
        )
