"""Classical univariate publication-bias tests and bivariate adapters.

Implements the Egger regression test (Egger et al. 1997), the Begg and
Mazumdar rank-correlation test (1994), and the Duval and Tweedie
trim-and-fill procedure (2000), together with two adapters that lift them
to bivariate data: a combined univariate measure (log diagnostic odds
ratio) and a Bonferroni combination of per-outcome results.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy import stats

from mvpb.data import MetaDataset, TestResult, UniSeries
from mvpb.errors import (
    BoundaryDegeneracyError,
    CovarianceUnavailableError,
    DataInsufficiencyError,
    DegenerateDesignError,
    DegenerateRankingError,
    IterationLimitError,
)


def egger_test(series: UniSeries, weighted: bool = False) -> TestResult:
    """Regression test for funnel asymmetry.

    Regresses the standardized effect (y/se) on precision (1/se) and
    t-tests the intercept against zero with m-2 degrees of freedom. The
    default is the classical unweighted fit; ``weighted=True`` weights
    observations by inverse variance.
    """
    snd = series.y / series.se
    prec = 1.0 / series.se
    m = series.m
    if np.ptp(prec) <= 1e-12 * np.max(prec):
        raise DegenerateDesignError("constant precision: intercept and slope are confounded")
    w = 1.0 / series.se**2 if weighted else np.ones(m)
    X = np.column_stack([np.ones(m), prec])
    xtwx = X.T @ (w[:, None] * X)
    xtwy = X.T @ (w * snd)
    coef = np.linalg.solve(xtwx, xtwy)
    resid = snd - X @ coef
    dof = m - 2
    s2 = (w * resid**2).sum() / dof
    scale = 1.0 + float(np.mean(snd**2))
    if s2 <= 1e-24 * scale:
        # exact fit: the intercept either vanishes or is infinitely significant
        exact_zero = abs(coef[0]) <= 1e-9 * math.sqrt(scale)
        return TestResult(
            method="egger",
            statistic=0.0 if exact_zero else math.copysign(math.inf, coef[0]),
            df_or_null=float(dof),
            p_value=1.0 if exact_zero else 0.0,
            detail={"intercept": float(coef[0]), "intercept_se": 0.0,
                    "slope": float(coef[1]), "weighted": weighted},
        )
    cov = s2 * np.linalg.inv(xtwx)
    se_a = math.sqrt(cov[0, 0])
    t = coef[0] / se_a
    p = 2.0 * stats.t.sf(abs(t), dof)
    return TestResult(
        method="egger",
        statistic=float(t),
        df_or_null=float(dof),
        p_value=float(p),
        detail={"intercept": float(coef[0]), "intercept_se": se_a,
                "slope": float(coef[1]), "weighted": weighted},
    )


def begg_test(series: UniSeries) -> TestResult:
    """Rank-correlation test of standardized effects against variances.

    Effects are centered at the inverse-variance weighted mean and scaled
    by sqrt(v_i - var(weighted mean)); Kendall's tau between the resulting
    deviates and the variances is referred to its normal approximation
    z = tau / sqrt(2(2m+5) / (9 m (m-1))).
    """
    v = series.se**2
    m = series.m
    if np.ptp(v) <= 1e-12 * np.max(v):
        raise DegenerateRankingError("constant variance: every pair is tied")
    w = 1.0 / v
    sw = w.sum()
    mu_w = (w * series.y).sum() / sw
    denom = v - 1.0 / sw  # strictly positive for m >= 2
    z_dev = (series.y - mu_w) / np.sqrt(denom)
    tau = stats.kendalltau(z_dev, v).statistic
    sd_tau = math.sqrt(2.0 * (2 * m + 5) / (9.0 * m * (m - 1)))
    z = tau / sd_tau
    p = 2.0 * stats.norm.sf(abs(z))
    return TestResult(
        method="begg",
        statistic=float(z),
        df_or_null="normal",
        p_value=float(p),
        detail={"kendall_tau": float(tau), "weighted_mean": float(mu_w)},
    )


# ---------------------------------------------------------------------------
# Trim and fill
# ---------------------------------------------------------------------------


def _dl_pool(y: np.ndarray, v: np.ndarray) -> tuple[float, float]:
    """DerSimonian-Laird random-effects pooled mean and tau^2."""
    w = 1.0 / v
    sw = w.sum()
    mu_fe = (w * y).sum() / sw
    q = (w * (y - mu_fe) ** 2).sum()
    denom = sw - (w * w).sum() / sw
    tau2 = max(0.0, (q - (len(y) - 1)) / denom) if denom > 0.0 else 0.0
    wr = 1.0 / (v + tau2)
    mu = (wr * y).sum() / wr.sum()
    return float(mu), float(tau2)


def _estimate_k0(dev: np.ndarray, estimator: str) -> tuple[int, float]:
    """Missing-study count from signed ranks of centered effects.

    L uses the Wilcoxon rank sum of the positive side,
    L0 = (4*T - m(m+1)) / (2m - 1); R uses the length of the run of
    positive deviations among the most extreme absolute values,
    R0 = gamma* - 1. Returns (rounded nonnegative count, raw estimate).
    """
    m = len(dev)
    if estimator == "L":
        ranks = stats.rankdata(np.abs(dev))  # average ranks on ties
        t_pos = ranks[dev > 0].sum()
        raw = (4.0 * t_pos - m * (m + 1)) / (2.0 * m - 1.0)
        return max(0, int(math.floor(raw + 0.5))), float(raw)
    order = np.argsort(np.abs(dev), kind="stable")
    gamma = 0
    for idx in order[::-1]:
        if dev[idx] > 0:
            gamma += 1
        else:
            break
    raw = gamma - 1.0
    return max(0, gamma - 1), float(raw)


def _trim_iterate(y: np.ndarray, v: np.ndarray, estimator: str, max_rounds: int = 50):
    """Run the trim iteration assuming excess on the right (trim largest y).

    Stops when the trimmed count stabilizes. A two-cycle (the estimate
    bouncing between two counts) is settled at the larger count, with the
    center and estimator re-evaluated there.
    """
    m = len(y)
    order = np.argsort(y, kind="stable")

    def evaluate(k_trim: int):
        keep = order[: m - k_trim] if k_trim else order
        mu, _ = _dl_pool(y[keep], v[keep])
        k_est, raw = _estimate_k0(y - mu, estimator)
        return mu, k_est, raw

    k = 0
    two_back = -1
    for rounds in range(1, max_rounds + 1):
        mu, k_est, raw = evaluate(k)
        k_new = min(k_est, m - 3)  # keep enough studies to pool
        if k_new == k:
            return k_est, raw, mu, rounds, k_est > m - 3
        if k_new == two_back:
            k = max(k, k_new)
            mu, _, raw = evaluate(k)
            return k, raw, mu, rounds + 1, False
        two_back = k
        k = k_new
    raise IterationLimitError(f"trim iteration did not stabilize in {max_rounds} rounds")


def trim_fill(series: UniSeries, estimator: str = "R", side: str = "auto") -> TestResult:
    """Trim-and-fill estimate of suppressed studies with a test of k0 = 0.

    ``side`` names where the *observed* excess lies ('right' means the
    suppressed studies would fall on the left); 'auto' runs both
    orientations and keeps the one with the larger estimated count. The
    significance test follows the chosen estimator's null distribution: a
    normal approximation for L0, the exact run distribution for R0. With a
    fixed side the test is one-sided; under 'auto' the p-value is doubled,
    since the side is chosen from the data. R0 is the default because its
    run test is exact under the null; L0's normal approximation is
    strongly anticonservative once the trim iteration has shifted the
    center, so prefer L0 only for the count estimate itself.
    """
    if estimator not in ("L", "R"):
        raise ValueError(f"estimator must be 'L' or 'R', got {estimator!r}")
    if side not in ("left", "right", "auto"):
        raise ValueError(f"side must be 'left', 'right' or 'auto', got {side!r}")
    v = series.se**2

    def oriented(which: str):
        ys = series.y if which == "right" else -series.y
        k_est, raw, mu, rounds, capped = _trim_iterate(ys, v, estimator)
        return {"side": which, "k": k_est, "raw": raw, "mu": mu,
                "rounds": rounds, "capped": capped, "ys": ys}

    if side == "auto":
        right = oriented("right")
        left = oriented("left")
        res = right if (right["k"], abs(right["raw"])) >= (left["k"], abs(left["raw"])) else left
    else:
        res = oriented(side)

    m = series.m
    k_report = min(res["k"], m)
    if res["k"] > m:  # pragma: no cover - estimators are bounded by m
        res["capped"] = True

    sides = 2.0 if side == "auto" else 1.0
    if estimator == "L":
        var0 = 2.0 * m * (m + 1) * (2 * m + 1) / (3.0 * (2.0 * m - 1.0) ** 2)
        z = res["raw"] / math.sqrt(var0)
        p = float(min(1.0, sides * stats.norm.sf(z)))
        statistic = float(z)
        null_desc = "normal(L0)"
    else:
        gamma = res["raw"] + 1.0  # run length of the most extreme positives
        p = float(min(1.0, sides * 0.5 ** max(gamma, 0.0)))
        statistic = float(gamma)
        null_desc = "run(R0)"

    # fill: mirror the k most extreme studies on the heavy side
    ys = res["ys"]
    order = np.argsort(ys, kind="stable")
    k_fill = min(k_report, m - 3)
    fill_idx = order[m - k_fill:] if k_fill else np.empty(0, dtype=int)
    y_fill = 2.0 * res["mu"] - ys[fill_idx]
    v_fill = v[fill_idx]
    mu_adj, _ = _dl_pool(np.concatenate([ys, y_fill]), np.concatenate([v, v_fill]))
    sign = 1.0 if res["side"] == "right" else -1.0

    return TestResult(
        method="trimfill",
        statistic=statistic,
        df_or_null=null_desc,
        p_value=p,
        detail={
            "k0": int(k_report),
            "k0_raw": float(res["raw"]),
            "estimator": estimator,
            "side": res["side"],
            "center": sign * res["mu"],
            "adjusted_estimate": sign * mu_adj,
            "filled": [(float(sign * yf), float(math.sqrt(vf))) for yf, vf in zip(y_fill, v_fill)],
            "iterations": int(res["rounds"]),
            "capped": bool(res["capped"]),
        },
    )


# ---------------------------------------------------------------------------
# Bivariate adapters
# ---------------------------------------------------------------------------


def total_se_series(series: UniSeries) -> UniSeries:
    """Restate a series in terms of total standard errors.

    Adds the DerSimonian-Laird heterogeneity estimate to the squared
    within-study standard errors, so the deviates y/se and precisions 1/se
    seen by the funnel-asymmetry tests carry the total (within plus
    between) variance. Without this, the regression test rejects far above
    its nominal level whenever between-study variance is nonneglible.
    """
    _, tau2 = _dl_pool(series.y, series.se**2)
    if tau2 == 0.0:
        return series
    return UniSeries(series.y, np.sqrt(series.se**2 + tau2))


def combine_logdor(data: MetaDataset) -> UniSeries:
    """Combine the two outcomes of each complete study into one measure.

    For logit-scale outcomes the sum is the log diagnostic odds ratio; its
    standard error is sqrt(s1^2 + s2^2 + 2 s1 s2 rho_w). Studies missing
    an outcome are dropped with a warning.
    """
    ys: list[float] = []
    ses: list[float] = []
    dropped = 0
    for st in data.studies:
        if not st.is_complete:
            dropped += 1
            continue
        if st.rho_w is None:  # defensive: Study validation enforces this
            raise CovarianceUnavailableError(f"study {st.id!r}: rho_w required to combine outcomes")
        s1, s2 = st.se
        var_c = s1 * s1 + s2 * s2 + 2.0 * s1 * s2 * st.rho_w
        if var_c <= 0.0:
            raise BoundaryDegeneracyError(
                f"study {st.id!r}: combined variance is not positive (rho_w={st.rho_w})"
            )
        ys.append(st.y[0] + st.y[1])
        ses.append(math.sqrt(var_c))
    if dropped:
        warnings.warn(
            f"combine_logdor: dropped {dropped} studies with a missing outcome",
            stacklevel=2,
        )
    if len(ys) < 3:
        raise DataInsufficiencyError(
            f"combined series needs at least 3 complete studies, have {len(ys)}"
        )
    return UniSeries(np.asarray(ys), np.asarray(ses))


def bonferroni_combine(r1: TestResult, r2: TestResult) -> TestResult:
    """Bonferroni combination of the same test applied to each outcome."""
    if r1.method != r2.method:
        raise ValueError(f"cannot combine results of {r1.method!r} and {r2.method!r}")
    pick = r1 if r1.p_value <= r2.p_value else r2
    p = min(1.0, 2.0 * min(r1.p_value, r2.p_value))
    return TestResult(
        method=r1.method,
        statistic=pick.statistic,
        df_or_null=pick.df_or_null,
        p_value=p,
        detail={"variant": "bonferroni", "p1": r1.p_value, "p2": r2.p_value},
    )
