"""Core data containers: studies, datasets, univariate series, test results.

A study reports up to two outcomes; an absent outcome is marked with None
in both the effect and standard-error slots. Within-study standard errors
(and, for complete studies, the within-study correlation) are treated as
known quantities throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

N_OUTCOMES = 2


@dataclass(frozen=True)
class Study:
    """One study's observed effect sizes and their known standard errors.

    ``rho_w`` is the within-study correlation of the two effect estimates;
    it is required when both outcomes are reported and ignored otherwise.
    """

    id: str
    y: tuple[float | None, float | None]
    se: tuple[float | None, float | None]
    rho_w: float | None = None

    def __post_init__(self):
        y = tuple(None if v is None else float(v) for v in self.y)
        se = tuple(None if v is None else float(v) for v in self.se)
        if len(y) != N_OUTCOMES or len(se) != N_OUTCOMES:
            raise ValueError(f"study {self.id!r}: exactly {N_OUTCOMES} outcome slots required")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "se", se)
        for j in range(N_OUTCOMES):
            if (y[j] is None) != (se[j] is None):
                raise ValueError(f"study {self.id!r}: y and se must be absent together (outcome {j + 1})")
            if y[j] is not None:
                if not (math.isfinite(y[j]) and math.isfinite(se[j])):
                    raise ValueError(f"study {self.id!r}: non-finite value for outcome {j + 1}")
                if se[j] <= 0.0:
                    raise ValueError(f"study {self.id!r}: se must be positive (outcome {j + 1})")
        if not self.observed:
            raise ValueError(f"study {self.id!r}: at least one outcome must be reported")
        if self.is_complete:
            if self.rho_w is None:
                raise ValueError(f"study {self.id!r}: rho_w required when both outcomes are reported")
            rho = float(self.rho_w)
            if not (math.isfinite(rho) and -1.0 <= rho <= 1.0):
                raise ValueError(f"study {self.id!r}: rho_w must lie in [-1, 1]")
            object.__setattr__(self, "rho_w", rho)

    @property
    def observed(self) -> tuple[int, ...]:
        """Indices (0-based) of the reported outcomes."""
        return tuple(j for j in range(N_OUTCOMES) if self.y[j] is not None)

    @property
    def is_complete(self) -> bool:
        return len(self.observed) == N_OUTCOMES


@dataclass(frozen=True)
class MetaDataset:
    """Ordered collection of studies on a shared pair of outcomes."""

    studies: tuple[Study, ...]
    outcome_names: tuple[str, str] = ("outcome1", "outcome2")
    scales: tuple[str, str] = ("unspecified", "unspecified")

    def __post_init__(self):
        studies = tuple(self.studies)
        if not studies:
            raise ValueError("dataset must contain at least one study")
        if not all(isinstance(s, Study) for s in studies):
            raise TypeError("dataset entries must be Study instances")
        object.__setattr__(self, "studies", studies)
        object.__setattr__(self, "outcome_names", tuple(str(n) for n in self.outcome_names))
        object.__setattr__(self, "scales", tuple(str(n) for n in self.scales))
        if len(self.outcome_names) != N_OUTCOMES or len(self.scales) != N_OUTCOMES:
            raise ValueError("outcome_names and scales must have one entry per outcome")

    @property
    def m(self) -> int:
        return len(self.studies)

    @property
    def m_complete(self) -> int:
        return sum(1 for s in self.studies if s.is_complete)

    @property
    def m_partial(self) -> int:
        return self.m - self.m_complete

    def n_observed(self, j: int) -> int:
        """Number of studies reporting outcome ``j``."""
        return sum(1 for s in self.studies if s.y[j] is not None)

    def outcome_series(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Effects and standard errors of all studies reporting outcome ``j``."""
        rows = [(s.y[j], s.se[j]) for s in self.studies if s.y[j] is not None]
        if not rows:
            return np.empty(0), np.empty(0)
        y, se = zip(*rows)
        return np.asarray(y, dtype=float), np.asarray(se, dtype=float)

    def complete_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(y, se, rho_w) arrays over complete studies; y and se are (m_c, 2)."""
        comp = [s for s in self.studies if s.is_complete]
        if not comp:
            return np.empty((0, 2)), np.empty((0, 2)), np.empty(0)
        y = np.asarray([s.y for s in comp], dtype=float)
        se = np.asarray([s.se for s in comp], dtype=float)
        rw = np.asarray([s.rho_w for s in comp], dtype=float)
        return y, se, rw

    def partial_arrays(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Effects and standard errors of studies reporting *only* outcome ``j``."""
        rows = [(s.y[j], s.se[j]) for s in self.studies if s.observed == (j,)]
        if not rows:
            return np.empty(0), np.empty(0)
        y, se = zip(*rows)
        return np.asarray(y, dtype=float), np.asarray(se, dtype=float)

    def subset_outcome(self, j: int) -> "MetaDataset":
        """Project onto a single outcome, dropping studies that do not report it."""
        studies = []
        for s in self.studies:
            if s.y[j] is None:
                continue
            y: list[float | None] = [None, None]
            se: list[float | None] = [None, None]
            y[j], se[j] = s.y[j], s.se[j]
            studies.append(Study(id=s.id, y=tuple(y), se=tuple(se)))
        if not studies:
            raise ValueError(f"no study reports outcome {j + 1}")
        return MetaDataset(tuple(studies), self.outcome_names, self.scales)


@dataclass(frozen=True, eq=False)
class UniSeries:
    """Univariate meta-analysis series: effect sizes and positive standard errors."""

    y: np.ndarray
    se: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        se = np.asarray(self.se, dtype=float)
        if y.ndim != 1 or se.shape != y.shape:
            raise ValueError("y and se must be one-dimensional arrays of equal length")
        if len(y) < 3:
            raise ValueError("a univariate series needs at least 3 studies")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(se))):
            raise ValueError("y and se must be finite")
        if np.any(se <= 0.0):
            raise ValueError("all standard errors must be positive")
        y.setflags(write=False)
        se.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "se", se)

    @property
    def m(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class TestResult:
    """Outcome of a single publication-bias test."""

    method: str
    statistic: float
    df_or_null: float | str
    p_value: float
    detail: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        p = float(self.p_value)
        if not math.isfinite(p) or p < -1e-9 or p > 1.0 + 1e-9:
            raise ValueError(f"p_value must lie in [0, 1], got {p!r}")
        object.__setattr__(self, "p_value", min(max(p, 0.0), 1.0))
        object.__setattr__(self, "statistic", float(self.statistic))
