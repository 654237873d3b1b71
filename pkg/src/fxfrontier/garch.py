"""GARCH(1,1) quasi-maximum likelihood for exchange-rate returns.

``h[t] = omega + alpha * r[t-1]**2 + beta * h[t-1]`` with ``h[0]`` equal to the
sample second moment of the (optionally demeaned) returns.  The optimizer
works on ``(ln omega, logit(alpha + beta), logit(alpha / (alpha + beta)))`` so
that stationarity holds at every iterate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize
from scipy.special import expit

from . import kernels
from .errors import DegenerateSeries, DidNotConverge, NotConverged, SeriesTooShort


@dataclass
class GarchOptions:
    demean: bool = False
    maxiter: int = 1000
    gtol: float = 1e-6
    raise_on_fail: bool = True


@dataclass
class GarchFit:
    omega: float
    alpha: float
    beta: float
    cond_variance: np.ndarray
    loglik: float
    converged: bool
    mean: float = 0.0
    se: dict = field(default_factory=dict)
    cov: np.ndarray | None = None
    iterations: int = 0
    grad_norm: float = 0.0
    message: str = ""

    @property
    def persistence(self) -> float:
        return self.alpha + self.beta

    @property
    def unconditional_variance(self) -> float:
        return self.omega / (1.0 - self.alpha - self.beta)

    def to_dict(self) -> dict:
        return {"omega": self.omega, "alpha": self.alpha, "beta": self.beta, "mean": self.mean,
                "loglik": self.loglik, "converged": self.converged, "se": self.se,
                "iterations": self.iterations}


def _natural(theta):
    omega = math.exp(theta[0])
    p = float(expit(theta[1]))
    s = float(expit(theta[2]))
    return omega, p * s, p * (1.0 - s), p, s


def _theta_from(omega, alpha, beta):
    p = min(max(alpha + beta, 1e-8), 1 - 1e-8)
    s = min(max(alpha / (alpha + beta) if alpha + beta > 0 else 0.5, 1e-8), 1 - 1e-8)
    return np.array([math.log(omega), math.log(p / (1 - p)), math.log(s / (1 - s))])


def null_loglik(returns, demean: bool = False) -> float:
    """Gaussian log-likelihood of the constant-variance model."""
    r = np.asarray(returns, float)
    e = r - r.mean() if demean else r
    var = float(np.mean(e * e))
    return -0.5 * r.size * (math.log(2 * math.pi) + math.log(var) + 1.0)


def fit_garch(returns, options: GarchOptions | None = None, **kw) -> GarchFit:
    """Gaussian quasi-MLE of GARCH(1,1) with sandwich standard errors."""
    opts = options or GarchOptions(**kw)
    r = np.asarray(returns, dtype=float).ravel()
    if r.size < 30:
        raise SeriesTooShort(f"{r.size} returns; at least 30 required")
    if not np.all(np.isfinite(r)):
        raise ValueError("returns contain non-finite values")
    mean = float(r.mean()) if opts.demean else 0.0
    e = r - mean
    m2 = float(np.mean(e * e))
    if not m2 > 0 or float(np.ptp(e)) == 0.0:
        raise DegenerateSeries("returns have zero variance")
    # scale-free problem: fit on unit-variance residuals, rescale omega afterwards
    scale = math.sqrt(m2)
    x = e / scale
    h0 = float(np.mean(x * x))
    n = x.size

    def fun(theta):
        omega, alpha, beta, p, s = _natural(theta)
        ll, g, _, _ = kernels.garch_loglik_grad(x, omega, alpha, beta, h0)
        if not np.isfinite(ll):
            return 1e10, np.zeros(3)
        dp = p * (1 - p)
        ds = s * (1 - s)
        gt = np.array([g[0] * omega,
                       g[1] * s * dp + g[2] * (1 - s) * dp,
                       (g[1] - g[2]) * p * ds])
        return -ll / n, -gt / n

    starts = [_theta_from(0.05, 0.05, 0.90), _theta_from(0.2, 0.10, 0.70),
              _theta_from(0.9, 0.02, 0.08)]
    best = None
    for th0 in starts:
        res = optimize.minimize(fun, th0, jac=True, method="BFGS",
                                options={"maxiter": opts.maxiter, "gtol": opts.gtol * 1e-2})
        if best is None or res.fun < best.fun - 1e-12:
            best = res
    theta = best.x
    omega_s, alpha, beta, _, _ = _natural(theta)
    ll_s, g_nat, S, h = kernels.garch_loglik_grad(x, omega_s, alpha, beta, h0)
    grad_norm = float(np.max(np.abs(fun(theta)[1]))) * n
    converged = bool(np.isfinite(ll_s) and (best.success or grad_norm < opts.gtol * n)
                     and alpha + beta < 1.0)

    # sandwich covariance in (omega, alpha, beta) on the standardized scale
    def nat_grad(v):
        return kernels.garch_loglik_grad(x, v[0], v[1], v[2], h0)[1]

    v0 = np.array([omega_s, alpha, beta])
    H = np.empty((3, 3))
    for k in range(3):
        step = 1e-6 * max(abs(v0[k]), 1e-3)
        vp, vm = v0.copy(), v0.copy()
        vp[k] += step
        vm[k] -= step
        H[:, k] = (nat_grad(vp) - nat_grad(vm)) / (2 * step)
    H = 0.5 * (H + H.T)
    try:
        Hinv = np.linalg.inv(H)
        cov = Hinv @ (S.T @ S) @ Hinv
    except np.linalg.LinAlgError:
        cov = np.full((3, 3), np.nan)
    D = np.diag([scale ** 2, 1.0, 1.0])
    cov = D @ cov @ D
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    fit = GarchFit(
        omega=omega_s * scale ** 2, alpha=alpha, beta=beta, cond_variance=h * scale ** 2,
        loglik=float(ll_s - n * math.log(scale)), converged=converged, mean=mean,
        se={"omega": float(se[0]), "alpha": float(se[1]), "beta": float(se[2])}, cov=cov,
        iterations=int(best.nit), grad_norm=grad_norm,
        message="converged" if converged else str(best.message),
    )
    if not converged and opts.raise_on_fail:
        raise DidNotConverge(f"GARCH fit did not converge: {best.message}", fit=fit)
    return fit


def conditional_variance(fit: GarchFit, returns) -> np.ndarray:
    """Recompute the variance recursion from the fitted parameters."""
    e = np.asarray(returns, float) - fit.mean
    return kernels.garch_filter(e, fit.omega, fit.alpha, fit.beta, float(np.mean(e * e)))


def implied_volatility(fit: GarchFit) -> np.ndarray:
    if not fit.converged:
        raise NotConverged("implied volatility requires a converged GARCH fit")
    return np.sqrt(fit.cond_variance)


def log_returns(levels) -> np.ndarray:
    lv = np.asarray(levels, float)
    if np.any(~(lv > 0)):
        raise ValueError("exchange-rate levels must be positive")
    return np.diff(np.log(lv))


def quarterly_volatility(weekly: pd.DataFrame, fit: GarchFit | None = None,
                         options: GarchOptions | None = None) -> pd.DataFrame:
    """Root-mean-square of within-quarter conditional volatilities, in percent.

    ``weekly`` needs ``quarter`` and ``exchange_rate`` columns; returns are the
    weekly log differences (the first week has no return and is skipped).
    """
    r = log_returns(weekly["exchange_rate"].to_numpy())
    if fit is None:
        fit = fit_garch(r, options)
    vol2 = fit.cond_variance
    q = weekly["quarter"].to_numpy()[1:]
    frame = pd.DataFrame({"quarter": q, "h": vol2})
    out = frame.groupby("quarter", sort=True)["h"].mean()
    return pd.DataFrame({"quarter": out.index.to_numpy(np.int64),
                         "volatility": 100.0 * np.sqrt(out.to_numpy())})
