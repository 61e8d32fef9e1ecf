"""Multivariate regression-based score test for publication bias.

Each observed effect is standardized by its total standard deviation
(within- plus between-study, using REML plug-ins), giving a per-outcome
standardized deviate SND_ij = y_ij / sqrt(s_ij^2 + tau_j^2) and precision
P_ij = 1 / sqrt(s_ij^2 + tau_j^2). Absent small-study effects the deviates
regress through the origin on precision, so a nonzero intercept vector
indicates funnel asymmetry jointly across outcomes.

The test is a Rao score test of the intercepts at zero with the slopes
profiled out under the null. The default working likelihood keeps the
cross-outcome correlation of the standardized residuals (plug-in matrix
Sigma_i); ``objective="independent"`` drops it and reduces to a plain sum
of squared residuals. Studies reporting one outcome enter as univariate
rows, so partially reported and completely unpublished selection are
covered by the same statistic. The statistic is referred to a chi-square
with one degree of freedom per tested outcome.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from mvpb.brma import BrmaFit, BrmaParams, RemlOptions, reml_fit
from mvpb.data import MetaDataset
from mvpb.errors import (
    BoundaryDegeneracyError,
    DegenerateDesignError,
    SingularInformationError,
)

_LOG_2PI = math.log(2.0 * math.pi)

_OBJECTIVES = ("correlated", "independent")


@dataclass(frozen=True, eq=False)
class RstDesign:
    """Per-study standardized deviates, precisions, and residual correlations."""

    snd: tuple[np.ndarray, ...]
    p: tuple[np.ndarray, ...]
    sigma: tuple[np.ndarray, ...]
    pattern: tuple[tuple[int, ...], ...]
    outcomes_tested: tuple[int, ...]

    @property
    def m(self) -> int:
        return len(self.snd)


@dataclass(frozen=True, eq=False)
class RstResult:
    """Score-test outcome: statistic, reference distribution, and pieces."""

    statistic: float
    df: int
    p_value: float
    b_profiled: np.ndarray      # null-profiled slopes, one per tested outcome
    score_at_null: np.ndarray   # intercept score at (0, b_profiled)
    info_aa: np.ndarray         # information block entering the quadratic form
    outcomes_tested: tuple[int, ...]
    fit: BrmaFit | None = None


def _plugin_params(fit: BrmaFit | BrmaParams) -> BrmaParams:
    if isinstance(fit, BrmaFit):
        if not fit.converged:
            raise ValueError("REML fit has not converged; refuse to build the design")
        return fit.params
    return fit


def build_design(data: MetaDataset, fit: BrmaFit | BrmaParams) -> RstDesign:
    """Standardize a dataset with between-study plug-ins.

    The variance used for outcome j is always s_ij^2 + tau_j^2. For a
    complete study the residual correlation is
    (rho_w s_i1 s_i2 + rho_b tau_1 tau_2) / sqrt((s_i1^2+tau_1^2)(s_i2^2+tau_2^2));
    a study reporting one outcome gets the scalar matrix [1].
    """
    params = _plugin_params(fit)
    t1, t2 = params.tau2
    snd: list[np.ndarray] = []
    prec: list[np.ndarray] = []
    sigma: list[np.ndarray] = []
    pattern: list[tuple[int, ...]] = []
    for st in data.studies:
        obs = st.observed
        if len(obs) == 2:
            if not (math.isfinite(t1) and math.isfinite(t2) and math.isfinite(params.rho_b)):
                raise ValueError("complete studies require finite tau2 and rho_b plug-ins")
            d1 = math.sqrt(st.se[0] ** 2 + t1)
            d2 = math.sqrt(st.se[1] ** 2 + t2)
            off = (st.rho_w * st.se[0] * st.se[1] + params.rho_b * math.sqrt(t1 * t2)) / (d1 * d2)
            if abs(off) >= 1.0 - 1e-12:
                raise BoundaryDegeneracyError(
                    f"study {st.id!r}: residual correlation {off:.6f} at the boundary"
                )
            snd.append(np.array([st.y[0] / d1, st.y[1] / d2]))
            prec.append(np.array([1.0 / d1, 1.0 / d2]))
            sigma.append(np.array([[1.0, off], [off, 1.0]]))
        else:
            j = obs[0]
            tj = params.tau2[j]
            if not math.isfinite(tj):
                raise ValueError(f"tau2 plug-in for outcome {j + 1} is not available")
            d = math.sqrt(st.se[j] ** 2 + tj)
            snd.append(np.array([st.y[j] / d]))
            prec.append(np.array([1.0 / d]))
            sigma.append(np.array([[1.0]]))
        pattern.append(obs)
    tested = tuple(j for j in (0, 1) if any(j in pat for pat in pattern))
    return RstDesign(tuple(snd), tuple(prec), tuple(sigma), tuple(pattern), tested)


def _inv2(s: np.ndarray) -> np.ndarray:
    if s.shape == (1, 1):
        return np.array([[1.0 / s[0, 0]]])
    det = s[0, 0] * s[1, 1] - s[0, 1] * s[1, 0]
    return np.array([[s[1, 1], -s[0, 1]], [-s[1, 0], s[0, 0]]]) / det


def _weights(design: RstDesign, objective: str) -> list[np.ndarray]:
    if objective not in _OBJECTIVES:
        raise ValueError(f"objective must be one of {_OBJECTIVES}, got {objective!r}")
    if objective == "independent":
        return [np.eye(len(pat)) for pat in design.pattern]
    return [_inv2(s) for s in design.sigma]


def _check_identifiable(design: RstDesign) -> dict[int, int]:
    """Map tested outcomes to statistic coordinates, validating the design."""
    idx = {j: k for k, j in enumerate(design.outcomes_tested)}
    for j in design.outcomes_tested:
        pj = np.array([p[pat.index(j)] for p, pat in zip(design.p, design.pattern) if j in pat])
        if len(pj) < 2:
            raise DegenerateDesignError(
                f"outcome {j + 1}: need at least 2 observations to separate intercept and slope"
            )
        if np.ptp(pj) <= 1e-12 * np.max(pj):
            raise DegenerateDesignError(f"outcome {j + 1}: all precisions equal")
    return idx


def _blocks(design: RstDesign, objective: str):
    """Accumulate the GLS normal-equation blocks of the (a, b) regression."""
    idx = _check_identifiable(design)
    t = len(idx)
    kaa = np.zeros((t, t))
    kab = np.zeros((t, t))
    kbb = np.zeros((t, t))
    sa = np.zeros(t)   # A' W snd
    sb = np.zeros(t)   # B' W snd
    weights = _weights(design, objective)
    for snd_i, p_i, pat_i, w in zip(design.snd, design.p, design.pattern, weights):
        rows = [idx[j] for j in pat_i]
        wy = w @ snd_i
        for r, gr in enumerate(rows):
            sa[gr] += wy[r]
            sb[gr] += p_i[r] * wy[r]
            for c, gc in enumerate(rows):
                kaa[gr, gc] += w[r, c]
                kab[gr, gc] += w[r, c] * p_i[c]
                kbb[gr, gc] += p_i[r] * w[r, c] * p_i[c]
    return idx, kaa, kab, kbb, sa, sb


def rst_loglik(design: RstDesign, a: np.ndarray, b: np.ndarray, objective: str = "correlated") -> float:
    """Working log-likelihood of the intercept/slope regression.

    ``a`` and ``b`` are indexed by ``design.outcomes_tested``. The
    correlated form is the full Gaussian log-density with the plug-in
    residual correlations; the independent form is the bare -1/2 sum of
    squared residuals.
    """
    idx = {j: k for k, j in enumerate(design.outcomes_tested)}
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    weights = _weights(design, objective)
    ll = 0.0
    for snd_i, p_i, pat_i, sig_i, w in zip(design.snd, design.p, design.pattern, design.sigma, weights):
        rows = [idx[j] for j in pat_i]
        r = snd_i - a[rows] - b[rows] * p_i
        ll -= 0.5 * float(r @ w @ r)
        if objective == "correlated":
            det = sig_i[0, 0] if sig_i.shape == (1, 1) else sig_i[0, 0] * sig_i[1, 1] - sig_i[0, 1] ** 2
            ll -= 0.5 * (math.log(det) + len(r) * _LOG_2PI)
    return ll


def rst_score(design: RstDesign, a: np.ndarray, b: np.ndarray, objective: str = "correlated"):
    """Gradient of the working log-likelihood: (intercept part, slope part)."""
    idx, kaa, kab, kbb, sa, sb = _blocks(design, objective)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ua = sa - kaa @ a - kab @ b
    ub = sb - kab.T @ a - kbb @ b
    return ua, ub


def rst_information(design: RstDesign, objective: str = "correlated") -> np.ndarray:
    """Observed information of the working likelihood, order (a..., b...).

    The regression is linear, so the information is constant in (a, b).
    """
    _, kaa, kab, kbb, _, _ = _blocks(design, objective)
    return np.block([[kaa, kab], [kab.T, kbb]])


def profile_b(design: RstDesign, objective: str = "correlated") -> np.ndarray:
    """Null-profiled slopes: the GLS fit through the origin."""
    _, _, _, kbb, _, sb = _blocks(design, objective)
    try:
        b0 = np.linalg.solve(kbb, sb)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded upstream
        raise DegenerateDesignError(f"slope normal equations singular: {exc}") from exc
    return b0


def rst_from_design(
    design: RstDesign,
    objective: str = "correlated",
    printed_scaling: bool = False,
    fit: BrmaFit | None = None,
) -> RstResult:
    """Score statistic for the intercepts at zero, slopes profiled out.

    The quadratic form is statistic = (1/m) U_a' I_aa U_a. By default
    ``I_aa`` is the intercept block of the inverse *average* information
    (m times the inverse-total-information block), which makes the
    statistic the standard Rao score form with a chi-square reference.
    ``printed_scaling=True`` instead takes ``I_aa`` from the inverse total
    information, shrinking the statistic by a factor of m; that variant is
    kept for comparability but is far from its chi-square reference.
    """
    idx, kaa, kab, kbb, sa, sb = _blocks(design, objective)
    t = len(idx)
    try:
        b0 = np.linalg.solve(kbb, sb)
        schur = kaa - kab @ np.linalg.solve(kbb, kab.T)
        cond = np.linalg.cond(schur)
        if not np.isfinite(cond) or cond > 1e12:
            raise SingularInformationError(f"intercept information ill-conditioned (cond={cond:.2e})")
        schur_inv = np.linalg.inv(schur)
    except np.linalg.LinAlgError as exc:
        raise SingularInformationError(f"information matrix singular: {exc}") from exc
    ua = sa - kab @ b0
    m = design.m
    if printed_scaling:
        info_aa = schur_inv
    else:
        info_aa = m * schur_inv
    statistic = float(ua @ info_aa @ ua) / m
    statistic = max(statistic, 0.0)
    p = float(stats.chi2.sf(statistic, t))
    return RstResult(
        statistic=statistic,
        df=t,
        p_value=p,
        b_profiled=b0,
        score_at_null=ua,
        info_aa=info_aa,
        outcomes_tested=design.outcomes_tested,
        fit=fit,
    )


def rst_test(
    data: MetaDataset,
    fit: BrmaFit | BrmaParams | None = None,
    objective: str = "correlated",
    printed_scaling: bool = False,
    reml_options: RemlOptions | None = None,
) -> RstResult:
    """Joint score test for publication bias across both outcomes.

    Fits the null random-effects model by REML (unless plug-ins are
    supplied), standardizes the data, profiles the slopes, and refers the
    intercept score statistic to chi-square with one degree of freedom per
    tested outcome.
    """
    if fit is None:
        fit = reml_fit(data, reml_options)
    design = build_design(data, fit)
    return rst_from_design(
        design,
        objective=objective,
        printed_scaling=printed_scaling,
        fit=fit if isinstance(fit, BrmaFit) else None,
    )
