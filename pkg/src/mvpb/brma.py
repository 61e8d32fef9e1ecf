"""Bivariate random-effects model: marginal covariance and REML estimation.

Observed effects are normal around study-specific true effects with known
within-study covariance (standard errors ``s_ij`` and correlation
``rho_w``); the true effects are normal around the overall effect with
between-study variances ``tau_j^2`` and correlation ``rho_b``. Marginally
the observed vector of study ``i`` is normal with covariance
``Delta_i + Omega``, and a study reporting a single outcome contributes
its univariate marginal density ``N(beta_j, s_ij^2 + tau_j^2)``.

Between-study parameters are estimated by restricted maximum likelihood:
the overall effects are profiled out by generalized least squares and the
restricted objective carries the usual log-determinant correction for the
fixed-effect design. The search runs on the unconstrained scale
``(log tau_1^2, log tau_2^2, atanh rho_b)`` with a restarted Nelder-Mead
simplex, so variance positivity and the correlation bound never require
projection steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from mvpb.data import MetaDataset, Study
from mvpb.errors import BoundaryDegeneracyError, DataInsufficiencyError, NonConvergenceError

_LOG_2PI = math.log(2.0 * math.pi)

RHO_B_MAX = 0.999
_Z_MAX = math.atanh(RHO_B_MAX)
_LOG_TAU2_MIN = -30.0
_LOG_TAU2_MAX = 15.0


@dataclass(frozen=True)
class BrmaParams:
    """Model parameters: overall effects, between-study variances, correlation.

    NaN entries mark parameters the data carry no information about (for
    example the second outcome of a dataset that never reports it).
    """

    beta: tuple[float, float]
    tau2: tuple[float, float]
    rho_b: float

    def __post_init__(self):
        beta = tuple(float(b) for b in self.beta)
        tau2 = tuple(float(t) for t in self.tau2)
        rho = float(self.rho_b)
        if len(beta) != 2 or len(tau2) != 2:
            raise ValueError("beta and tau2 must each have two entries")
        for t in tau2:
            if not math.isnan(t) and (not math.isfinite(t) or t < 0.0):
                raise ValueError(f"tau2 entries must be >= 0, got {t!r}")
        if not math.isnan(rho) and not -1.0 <= rho <= 1.0:
            raise ValueError(f"rho_b must lie in [-1, 1], got {rho!r}")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "tau2", tau2)
        object.__setattr__(self, "rho_b", rho)

    def omega(self) -> np.ndarray:
        """Between-study covariance matrix."""
        t1, t2 = self.tau2
        off = math.sqrt(t1 * t2) * self.rho_b
        return np.array([[t1, off], [off, t2]])


@dataclass(frozen=True)
class BrmaFit:
    """REML estimate with convergence diagnostics."""

    params: BrmaParams
    loglik_restricted: float
    converged: bool
    iterations: int
    se_beta: tuple[float, float]
    boundary: bool = False
    notes: tuple[str, ...] = ()


@dataclass(frozen=True)
class RemlOptions:
    """Stopping rules for the restarted simplex search."""

    max_restarts: int = 6
    max_iter_per_start: int = 800
    loglik_tol: float = 1e-10     # restricted-loglik change between restarts
    param_tol: float = 1e-8       # transformed-parameter change between restarts
    grad_tol: float = 1e-3        # max |finite-difference gradient| at the optimum
    simplex_step: float = 0.25


def marginal_cov(study: Study, params: BrmaParams) -> np.ndarray:
    """Marginal covariance of a study's observed effects.

    Returns the within-plus-between covariance restricted to the observed
    outcomes: a 2x2 matrix for complete studies, 1x1 otherwise. Raises
    BoundaryDegeneracyError when the result is numerically singular, which
    can only happen at a correlation boundary with degenerate inputs.
    """
    obs = study.observed
    t1, t2 = params.tau2
    if len(obs) == 2:
        if not (math.isfinite(t1) and math.isfinite(t2) and math.isfinite(params.rho_b)):
            raise ValueError("complete study requires finite tau2 and rho_b")
        s1, s2 = study.se
        v11 = s1 * s1 + t1
        v22 = s2 * s2 + t2
        off = s1 * s2 * study.rho_w + math.sqrt(t1 * t2) * params.rho_b
        det = v11 * v22 - off * off
        if det <= 1e-14 * v11 * v22:
            raise BoundaryDegeneracyError(
                f"study {study.id!r}: marginal covariance singular (det={det:.3e})"
            )
        return np.array([[v11, off], [off, v22]])
    j = obs[0]
    tj = params.tau2[j]
    if not math.isfinite(tj):
        raise ValueError(f"tau2 for outcome {j + 1} is not available")
    v = study.se[j] ** 2 + tj
    return np.array([[v]])


# ---------------------------------------------------------------------------
# Restricted likelihood
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Parts:
    """Pattern-grouped copies of a dataset, for vectorized likelihoods."""

    yc1: np.ndarray
    yc2: np.ndarray
    sc1: np.ndarray
    sc2: np.ndarray
    rw: np.ndarray
    yp: tuple[np.ndarray, np.ndarray]   # partial-only studies, per outcome
    sp: tuple[np.ndarray, np.ndarray]

    @property
    def mc(self) -> int:
        return len(self.yc1)

    @property
    def n_obs(self) -> int:
        return 2 * self.mc + len(self.yp[0]) + len(self.yp[1])

    def count(self, j: int) -> int:
        return self.mc + len(self.yp[j])


def _split(data: MetaDataset) -> _Parts:
    yc, sc, rw = data.complete_arrays()
    yp0, sp0 = data.partial_arrays(0)
    yp1, sp1 = data.partial_arrays(1)
    return _Parts(yc[:, 0], yc[:, 1], sc[:, 0], sc[:, 1], rw, (yp0, yp1), (sp0, sp1))


def _profile_biv(parts: _Parts, t1: float, t2: float, rb: float):
    """Restricted log-likelihood with the overall effects profiled out.

    Returns (loglik, beta_hat, A) where A is the GLS information for beta,
    or None when the covariance is infeasible at (t1, t2, rb).
    """
    a11 = a22 = a12 = 0.0
    c1 = c2 = 0.0
    logdet_v = 0.0

    if parts.mc:
        v11 = parts.sc1 * parts.sc1 + t1
        v22 = parts.sc2 * parts.sc2 + t2
        v12 = parts.sc1 * parts.sc2 * parts.rw + math.sqrt(t1 * t2) * rb
        det = v11 * v22 - v12 * v12
        if np.any(det <= 0.0):
            return None
        i11 = v22 / det
        i22 = v11 / det
        i12 = -v12 / det
        a11 += i11.sum()
        a22 += i22.sum()
        a12 += i12.sum()
        c1 += i11 @ parts.yc1 + i12 @ parts.yc2
        c2 += i12 @ parts.yc1 + i22 @ parts.yc2
        logdet_v += np.log(det).sum()

    d1 = d2 = None
    if len(parts.yp[0]):
        d1 = parts.sp[0] * parts.sp[0] + t1
        a11 += (1.0 / d1).sum()
        c1 += (parts.yp[0] / d1).sum()
        logdet_v += np.log(d1).sum()
    if len(parts.yp[1]):
        d2 = parts.sp[1] * parts.sp[1] + t2
        a22 += (1.0 / d2).sum()
        c2 += (parts.yp[1] / d2).sum()
        logdet_v += np.log(d2).sum()

    det_a = a11 * a22 - a12 * a12
    if det_a <= 0.0:
        return None
    b1 = (a22 * c1 - a12 * c2) / det_a
    b2 = (a11 * c2 - a12 * c1) / det_a

    rss = 0.0
    if parts.mc:
        r1 = parts.yc1 - b1
        r2 = parts.yc2 - b2
        rss += (i11 * r1 * r1 + 2.0 * i12 * r1 * r2 + i22 * r2 * r2).sum()
    if d1 is not None:
        r = parts.yp[0] - b1
        rss += (r * r / d1).sum()
    if d2 is not None:
        r = parts.yp[1] - b2
        rss += (r * r / d2).sum()

    ll = -0.5 * (logdet_v + math.log(det_a) + rss) - 0.5 * (parts.n_obs - 2) * _LOG_2PI
    A = np.array([[a11, a12], [a12, a22]])
    return ll, np.array([b1, b2]), A


def _profile_uni(y: np.ndarray, s: np.ndarray, tau2: float):
    """Univariate restricted log-likelihood, effect profiled out."""
    d = s * s + tau2
    if np.any(d <= 0.0):
        return None
    a = (1.0 / d).sum()
    beta = (y / d).sum() / a
    r = y - beta
    rss = (r * r / d).sum()
    ll = -0.5 * (np.log(d).sum() + math.log(a) + rss) - 0.5 * (len(y) - 1) * _LOG_2PI
    return ll, beta, a


def restricted_loglik(data: MetaDataset, tau2: tuple[float, float], rho_b: float) -> float:
    """Restricted log-likelihood at the given between-study parameters.

    Overall effects are profiled out internally. Returns -inf when the
    implied covariance is infeasible.
    """
    parts = _split(data)
    present = [j for j in (0, 1) if parts.count(j) > 0]
    if len(present) == 1:
        j = present[0]
        y = np.concatenate([(parts.yc1, parts.yc2)[j], parts.yp[j]])
        s = np.concatenate([(parts.sc1, parts.sc2)[j], parts.sp[j]])
        out = _profile_uni(y, s, float(tau2[j]))
    else:
        out = _profile_biv(parts, float(tau2[0]), float(tau2[1]), float(rho_b))
    return -math.inf if out is None else float(out[0])


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


def _dl_tau2(y: np.ndarray, s: np.ndarray) -> float:
    """DerSimonian-Laird moment estimate, used only as a starting value."""
    v = s * s
    w = 1.0 / v
    sw = w.sum()
    mu = (w * y).sum() / sw
    q = (w * (y - mu) ** 2).sum()
    denom = sw - (w * w).sum() / sw
    if denom <= 0.0:
        return 0.0
    return max(0.0, (q - (len(y) - 1)) / denom)


def _fd_grad(fun, x: np.ndarray, bounds: list[tuple[float, float]], h: float = 1e-6) -> np.ndarray:
    g = np.empty_like(x)
    for k in range(len(x)):
        lo, hi = bounds[k]
        up = min(x[k] + h, hi)
        dn = max(x[k] - h, lo)
        xp = x.copy()
        xm = x.copy()
        xp[k] = up
        xm[k] = dn
        g[k] = (fun(xp) - fun(xm)) / (up - dn)
    return g


def _minimize_restarted(fun, x0: np.ndarray, bounds: list[tuple[float, float]], opts: RemlOptions):
    """Nelder-Mead with restarts until successive runs agree.

    Returns (x, f, total_iterations, criteria_met).
    """
    x = np.asarray(x0, dtype=float)
    f_prev = fun(x)
    total_nit = 0
    step = opts.simplex_step
    met = False
    for _ in range(opts.max_restarts):
        simplex = np.vstack([x] + [x + step * np.eye(len(x))[k] for k in range(len(x))])
        simplex = np.clip(simplex, [b[0] for b in bounds], [b[1] for b in bounds])
        res = optimize.minimize(
            fun,
            x,
            method="Nelder-Mead",
            bounds=bounds,
            options={
                "initial_simplex": simplex,
                "xatol": 1e-10,
                "fatol": 1e-12,
                "maxiter": opts.max_iter_per_start,
                "maxfev": 4 * opts.max_iter_per_start,
            },
        )
        total_nit += res.nit
        d_f = abs(f_prev - res.fun)
        d_x = np.max(np.abs(x - res.x))
        x, f_prev = res.x, res.fun
        step = max(step / 5.0, 0.01)
        if d_f < opts.loglik_tol and d_x < opts.param_tol:
            met = True
            break
    return x, f_prev, total_nit, met


def _grad_ok(fun, x: np.ndarray, bounds: list[tuple[float, float]], tol: float) -> bool:
    g = _fd_grad(fun, x, bounds)
    for k in range(len(x)):
        lo, hi = bounds[k]
        at_lo = x[k] <= lo + 1e-6
        at_hi = x[k] >= hi - 1e-6
        if at_lo and g[k] >= -tol:
            continue
        if at_hi and g[k] <= tol:
            continue
        if abs(g[k]) <= tol:
            continue
        return False
    return True


def _map_tau2(u: float) -> tuple[float, bool]:
    if u <= _LOG_TAU2_MIN + 1e-6:
        return 0.0, True
    return math.exp(u), False


def _map_rho(z: float) -> tuple[float, bool]:
    if z >= _Z_MAX - 1e-9:
        return RHO_B_MAX, True
    if z <= -_Z_MAX + 1e-9:
        return -RHO_B_MAX, True
    return math.tanh(z), False


def _all_identical(data: MetaDataset) -> bool:
    sig = {(s.y, s.se, s.rho_w) for s in data.studies}
    return len(sig) == 1 and data.m >= 2


def _fit_degenerate(data: MetaDataset, parts: _Parts) -> BrmaFit:
    s0 = data.studies[0]
    obs = s0.observed
    if len(obs) == 2:
        params = BrmaParams(beta=s0.y, tau2=(0.0, 0.0), rho_b=0.0)
        out = _profile_biv(parts, 0.0, 0.0, 0.0)
        ll, _, A = out
        se = tuple(math.sqrt(v) for v in np.diag(np.linalg.inv(A)))
    else:
        j = obs[0]
        beta = [math.nan, math.nan]
        tau2 = [math.nan, math.nan]
        beta[j] = s0.y[j]
        tau2[j] = 0.0
        params = BrmaParams(beta=tuple(beta), tau2=tuple(tau2), rho_b=math.nan)
        ll, _, a = _profile_uni(*_uni_arrays(parts, j), 0.0)
        se_j = math.sqrt(1.0 / a)
        se = (se_j, math.nan) if j == 0 else (math.nan, se_j)
    return BrmaFit(
        params=params,
        loglik_restricted=float(ll),
        converged=True,
        iterations=0,
        se_beta=se,
        boundary=True,
        notes=("degenerate: all studies identical",),
    )


def _uni_arrays(parts: _Parts, j: int) -> tuple[np.ndarray, np.ndarray]:
    y = np.concatenate([(parts.yc1, parts.yc2)[j], parts.yp[j]])
    s = np.concatenate([(parts.sc1, parts.sc2)[j], parts.sp[j]])
    return y, s


def _fit_univariate(data: MetaDataset, parts: _Parts, j: int, opts: RemlOptions) -> BrmaFit:
    y, s = _uni_arrays(parts, j)
    if len(y) < 2:
        raise DataInsufficiencyError(
            f"outcome {j + 1}: need at least 2 studies, have {len(y)}"
        )
    bounds = [(_LOG_TAU2_MIN, _LOG_TAU2_MAX)]

    def nll(x):
        t, _ = _map_tau2(x[0])
        out = _profile_uni(y, s, t)
        return math.inf if out is None else -out[0]

    u0 = math.log(max(_dl_tau2(y, s), 1e-4))
    x, f, nit, met = _minimize_restarted(nll, np.array([u0]), bounds, opts)
    if not met:
        raise NonConvergenceError(
            "univariate REML did not stabilize",
            last_iterate={"log_tau2": float(x[0]), "nll": float(f)},
        )
    tau_j, at_bound = _map_tau2(x[0])
    ll, beta_j, a = _profile_uni(y, s, tau_j)
    beta = [math.nan, math.nan]
    tau2 = [math.nan, math.nan]
    se = [math.nan, math.nan]
    beta[j] = float(beta_j)
    tau2[j] = tau_j
    se[j] = math.sqrt(1.0 / a)
    converged = _grad_ok(nll, x, bounds, opts.grad_tol)
    return BrmaFit(
        params=BrmaParams(beta=tuple(beta), tau2=tuple(tau2), rho_b=math.nan),
        loglik_restricted=float(ll),
        converged=converged,
        iterations=nit,
        se_beta=tuple(se),
        boundary=at_bound,
        notes=(f"univariate fit: outcome {2 - j} never observed",),
    )


def reml_fit(data: MetaDataset, opts: RemlOptions | None = None) -> BrmaFit:
    """Estimate between-study variances and correlation by REML.

    Studies reporting a single outcome contribute their univariate marginal
    density. When one outcome is never observed the fit reduces to the
    univariate model for the other outcome and the remaining parameters are
    reported as NaN. When no study reports both outcomes the between-study
    correlation is unidentifiable and reported as NaN.
    """
    opts = opts or RemlOptions()
    parts = _split(data)

    if _all_identical(data):
        return _fit_degenerate(data, parts)

    n1, n2 = parts.count(0), parts.count(1)
    if n1 == 0:
        return _fit_univariate(data, parts, 1, opts)
    if n2 == 0:
        return _fit_univariate(data, parts, 0, opts)
    if n1 < 2 or n2 < 2:
        raise DataInsufficiencyError(
            f"need at least 2 studies per outcome, have ({n1}, {n2})"
        )

    y1, s1 = _uni_arrays(parts, 0)
    y2, s2 = _uni_arrays(parts, 1)
    u0 = [
        math.log(max(_dl_tau2(y1, s1), 1e-4)),
        math.log(max(_dl_tau2(y2, s2), 1e-4)),
    ]
    rho_free = parts.mc > 0
    notes: tuple[str, ...] = ()
    bounds = [(_LOG_TAU2_MIN, _LOG_TAU2_MAX)] * 2
    x0 = np.array(u0)
    if rho_free:
        bounds = bounds + [(-_Z_MAX, _Z_MAX)]
        x0 = np.append(x0, 0.0)
    else:
        notes = ("rho_b unidentifiable: no study reports both outcomes",)

    def nll(x):
        t1, _ = _map_tau2(x[0])
        t2, _ = _map_tau2(x[1])
        rb = _map_rho(x[2])[0] if rho_free else 0.0
        out = _profile_biv(parts, t1, t2, rb)
        return math.inf if out is None else -out[0]

    x, f, nit, met = _minimize_restarted(nll, x0, bounds, opts)
    if not met:
        t1, _ = _map_tau2(x[0])
        t2, _ = _map_tau2(x[1])
        rb = _map_rho(x[2])[0] if rho_free else math.nan
        raise NonConvergenceError(
            "REML did not stabilize within the restart budget",
            last_iterate={"tau2": (t1, t2), "rho_b": rb, "nll": float(f)},
        )

    t1, b1 = _map_tau2(x[0])
    t2, b2 = _map_tau2(x[1])
    if rho_free:
        rb, b3 = _map_rho(x[2])
    else:
        rb, b3 = 0.0, False
    out = _profile_biv(parts, t1, t2, rb)
    if out is None:  # pragma: no cover - mapped-back params are always feasible
        raise NonConvergenceError("REML optimum infeasible after clamping")
    ll, beta, A = out
    se = tuple(math.sqrt(v) for v in np.diag(np.linalg.inv(A)))
    converged = _grad_ok(nll, x, bounds, opts.grad_tol)
    return BrmaFit(
        params=BrmaParams(
            beta=tuple(float(b) for b in beta),
            tau2=(t1, t2),
            rho_b=rb if rho_free else math.nan,
        ),
        loglik_restricted=float(ll),
        converged=converged,
        iterations=nit,
        se_beta=se,
        boundary=b1 or b2 or b3,
        notes=notes,
    )
