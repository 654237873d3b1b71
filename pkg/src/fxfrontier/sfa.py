"""Stochastic cost frontier with a covariate-shifted truncated-normal inefficiency.

Model::

    y = b0 + X b + v + u,   v ~ N(0, sv2),   u ~ N+(z'delta, su2)

estimated by maximum likelihood.  The parameter vector is packed as
``theta = (b0, b, delta, ln su2, ln sv2)`` in the units of the data.  The
optimizer works on standardized regressors and a standardized dependent
variable; results are mapped back exactly (the map is affine).
"""
from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import linalg, optimize

from . import kernels
from .errors import (
    DidNotConverge,
    NonFiniteLikelihood,
    NotConverged,
    RankDeficientDesign,
)
from .translog import Design, FrontierSpec

DEFAULT_Z = [
    "own_Big4", "own_OtherState", "own_Foreign", "bailout", "tight_regulation",
    "liquidity_ratio", "lt_loans_firms_ratio", "lt_loans_hh_ratio", "asset_growth_4q",
    "equity_ratio",
]

_SQRT_2_PI = math.sqrt(2.0 / math.pi)


@dataclass
class InefficiencySpec:
    """Covariates of the pre-truncation mean.

    Ownership enters through ``own_Big4``, ``own_OtherState`` and
    ``own_Foreign`` (DomesticPrivate is the reference).  ``half_normal=True``
    fixes the mean at zero.
    """

    covariates: list[str] = field(default_factory=lambda: list(DEFAULT_Z))
    include_constant: bool = True
    lag: int = 0
    half_normal: bool = False

    def __post_init__(self):
        if "own_DomesticPrivate" in self.covariates:
            raise ValueError("the reference ownership category cannot be a covariate")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ZMatrix:
    Z: np.ndarray
    names: list[str]
    include_constant: bool = True
    half_normal: bool = False

    @property
    def full(self) -> np.ndarray:
        if self.half_normal:
            return np.empty((self.Z.shape[0], 0))
        if self.include_constant:
            return np.column_stack([np.ones(self.Z.shape[0]), self.Z])
        return self.Z

    @property
    def full_names(self) -> list[str]:
        if self.half_normal:
            return []
        return (["const"] if self.include_constant else []) + list(self.names)

    def subset(self, mask) -> "ZMatrix":
        return dataclasses.replace(self, Z=self.Z[np.asarray(mask)])


def build_z(panel: pd.DataFrame, spec: InefficiencySpec | None = None) -> ZMatrix:
    """Inefficiency covariates from a panel; ``own_<group>`` columns are dummies."""
    spec = spec or InefficiencySpec()
    if spec.half_normal:
        return ZMatrix(np.empty((len(panel), 0)), [], False, True)
    cols = []
    for name in spec.covariates:
        if name.startswith("own_"):
            col = (panel["ownership"].astype(str) == name[4:]).to_numpy(float)
        else:
            if name not in panel.columns:
                from .errors import UnknownColumn
                raise UnknownColumn(name)
            col = panel[name].to_numpy(float)
        cols.append(col)
    Z = np.column_stack(cols) if cols else np.empty((len(panel), 0))
    if spec.lag:
        frame = pd.DataFrame(Z, index=panel.index)
        g = panel["bank_id"]
        q = panel["quarter"]
        shifted = frame.groupby(g.values).shift(spec.lag)
        gap = q.groupby(g.values).shift(spec.lag)
        shifted[(q - gap) != spec.lag] = np.nan
        Z = shifted.to_numpy(float)
    return ZMatrix(Z, list(spec.covariates), spec.include_constant, False)


def constant_covariates(z: ZMatrix) -> list[str]:
    """Covariates without variation over the complete rows (unidentified next to the constant)."""
    ok = np.all(np.isfinite(z.Z), axis=1)
    return [n for j, n in enumerate(z.names) if not ok.any() or np.ptp(z.Z[ok, j]) == 0]


@dataclass
class SfaOptions:
    n_starts: int = 5
    seed: int = 0
    maxiter: int = 500
    ftol: float = 1e-9
    gtol: float = 1e-5
    threads: int = 1
    chunk_size: int = 4096
    tie_tol: float = 1e-7
    perturb_scale: float = 0.1
    se_type: str = "cluster"  # cluster | robust | oim
    raise_on_fail: bool = True
    log_var_bounds: tuple[float, float] = (-40.0, 10.0)


@dataclass
class SfaFit:
    beta: np.ndarray
    delta: np.ndarray
    sigma_u: float
    sigma_v: float
    loglik: float
    converged: bool
    iterations: int
    cluster_se: dict
    score_norm_at_optimum: float
    frontier_names: list[str]
    z_names: list[str]
    theta: np.ndarray
    cov: np.ndarray | None
    n_obs: int
    n_clusters: int
    spec: FrontierSpec | None = None
    half_normal: bool = False
    design_meta: dict = field(default_factory=dict)
    message: str = ""
    start_logliks: list = field(default_factory=list)
    se_type: str = "cluster"

    @property
    def param_names(self) -> list[str]:
        return ([f"beta:{n}" for n in self.frontier_names] + [f"delta:{n}" for n in self.z_names]
                + ["ln_sigma_u2", "ln_sigma_v2"])

    def params(self) -> dict[str, float]:
        """Estimates keyed as ``beta:<term>``, ``delta:<term>``, ``sigma_u``, ``sigma_v``."""
        out = {f"beta:{n}": float(b) for n, b in zip(self.frontier_names, self.beta)}
        out.update({f"delta:{n}": float(d) for n, d in zip(self.z_names, self.delta)})
        out["sigma_u"] = self.sigma_u
        out["sigma_v"] = self.sigma_v
        return out

    def standard_errors(self) -> dict[str, float]:
        se = self.cluster_se
        out = {f"beta:{n}": float(s) for n, s in zip(self.frontier_names, se["beta"])}
        out.update({f"delta:{n}": float(s) for n, s in zip(self.z_names, se["delta"])})
        out["sigma_u"] = float(se["sigma_u"])
        out["sigma_v"] = float(se["sigma_v"])
        return out

    def coef(self, name: str) -> float:
        return self.params()[name]

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()
        return {
            "beta": dict(zip(self.frontier_names, arr(self.beta))),
            "delta": dict(zip(self.z_names, arr(self.delta))),
            # explicit order: the JSON writer sorts keys
            "frontier_names": list(self.frontier_names),
            "z_names": list(self.z_names),
            "sigma_u": self.sigma_u,
            "sigma_v": self.sigma_v,
            "loglik": self.loglik,
            "converged": self.converged,
            "iterations": self.iterations,
            "score_norm_at_optimum": self.score_norm_at_optimum,
            "se_type": self.se_type,
            "se": {"beta": arr(self.cluster_se["beta"]), "delta": arr(self.cluster_se["delta"]),
                   "sigma_u": self.cluster_se["sigma_u"], "sigma_v": self.cluster_se["sigma_v"]},
            "theta": arr(self.theta),
            "cov": arr(self.cov),
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "half_normal": self.half_normal,
            "spec": None if self.spec is None else self.spec.to_dict(),
            "design_meta": self.design_meta,
            "message": self.message,
            "start_logliks": list(self.start_logliks),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SfaFit":
        se = d["se"]
        fnames = d.get("frontier_names", list(d["beta"]))
        znames = d.get("z_names", list(d["delta"]))
        return cls(
            beta=np.array([d["beta"][n] for n in fnames], float),
            delta=np.array([d["delta"][n] for n in znames], float),
            sigma_u=d["sigma_u"], sigma_v=d["sigma_v"], loglik=d["loglik"],
            converged=d["converged"], iterations=d["iterations"],
            cluster_se={"beta": np.array(se["beta"], float), "delta": np.array(se["delta"], float),
                        "sigma_u": se["sigma_u"], "sigma_v": se["sigma_v"]},
            score_norm_at_optimum=d["score_norm_at_optimum"],
            frontier_names=list(fnames), z_names=list(znames),
            theta=np.array(d["theta"], float),
            cov=None if d.get("cov") is None else np.array(d["cov"], float),
            n_obs=d["n_obs"], n_clusters=d["n_clusters"],
            spec=None if d.get("spec") is None else FrontierSpec.from_dict(d["spec"]),
            half_normal=d.get("half_normal", False), design_meta=d.get("design_meta", {}),
            message=d.get("message", ""), start_logliks=d.get("start_logliks", []),
            se_type=d.get("se_type", "cluster"),
        )

    @classmethod
    def from_json(cls, text: str) -> "SfaFit":
        return cls.from_dict(json.loads(text))


# -- likelihood core -------------------------------------------------------------

class _Problem:
    """Data and evaluation of the log-likelihood for one (X, y, Z) triple.

    ``X`` and ``Z`` include their constant columns.  Per-observation terms are
    computed in fixed-size chunks, optionally on worker threads; the chunking
    does not depend on the thread count, so results are bitwise identical for
    any ``threads``.
    """

    def __init__(self, X, y, Z, threads=1, chunk_size=4096):
        self.X = np.ascontiguousarray(X, float)
        self.y = np.ascontiguousarray(y, float)
        self.Z = np.ascontiguousarray(Z, float)
        self.n, self.kx = self.X.shape
        self.kz = self.Z.shape[1]
        self.p = self.kx + self.kz + 2
        self.threads = max(int(threads), 1)
        self.chunks = [slice(s, min(s + chunk_size, self.n)) for s in range(0, self.n, chunk_size)]

    def unpack(self, theta):
        b = theta[:self.kx]
        d = theta[self.kx:self.kx + self.kz]
        return b, d, theta[-2], theta[-1]

    def terms(self, theta):
        b, d, a, bb = self.unpack(theta)
        eps = self.y - self.X @ b
        mu = self.Z @ d if self.kz else np.zeros(self.n)
        su2, sv2 = math.exp(a), math.exp(bb)

        def run(sl):
            return kernels.sfa_terms(eps[sl], mu[sl], su2, sv2)

        if self.threads > 1 and len(self.chunks) > 1:
            with ThreadPoolExecutor(self.threads) as ex:
                parts = list(ex.map(run, self.chunks))
        else:
            parts = [run(sl) for sl in self.chunks]
        cols = [np.concatenate([p[k] for p in parts]) for k in range(5)]
        return cols, su2, sv2

    def scores(self, theta):
        """Per-observation log-likelihood (n,) and score matrix (n, p)."""
        (ll, g_eps, g_mu, g_su2, g_sv2), su2, sv2 = self.terms(theta)
        S = np.empty((self.n, self.p))
        S[:, :self.kx] = -g_eps[:, None] * self.X
        if self.kz:
            S[:, self.kx:self.kx + self.kz] = g_mu[:, None] * self.Z
        S[:, -2] = su2 * g_su2
        S[:, -1] = sv2 * g_sv2
        return ll, S

    def value_grad(self, theta):
        (ll, g_eps, g_mu, g_su2, g_sv2), su2, sv2 = self.terms(theta)
        grad = np.empty(self.p)
        grad[:self.kx] = -(self.X.T @ g_eps)
        if self.kz:
            grad[self.kx:self.kx + self.kz] = self.Z.T @ g_mu
        grad[-2] = su2 * math.fsum(g_su2)
        grad[-1] = sv2 * math.fsum(g_sv2)
        return math.fsum(ll), grad, ll

    def hessian(self, theta, rel_step=1e-5):
        """Central differences of the analytic gradient, symmetrized."""
        H = np.empty((self.p, self.p))
        for k in range(self.p):
            h = rel_step * max(1.0, abs(theta[k]))
            tp = theta.copy()
            tm = theta.copy()
            tp[k] += h
            tm[k] -= h
            H[:, k] = (self.value_grad(tp)[1] - self.value_grad(tm)[1]) / (2.0 * h)
        return 0.5 * (H + H.T)


def _with_const(X):
    return np.column_stack([np.ones(X.shape[0]), X])


def loglik_obs(theta, design: Design | np.ndarray, z, y=None) -> np.ndarray:
    """Per-observation log-likelihood in data units.

    ``design`` is a :class:`Design` (or a raw regressor matrix without the
    intercept, in which case ``y`` is required); ``z`` is a :class:`ZMatrix` or a
    matrix that already contains its constant column.
    """
    X = design.X if isinstance(design, Design) else np.asarray(design, float)
    y = design.y if isinstance(design, Design) else np.asarray(y, float)
    Z = z.full if isinstance(z, ZMatrix) else np.asarray(z, float).reshape(X.shape[0], -1)
    prob = _Problem(_with_const(X), y, Z)
    theta = np.asarray(theta, float)
    if theta.shape != (prob.p,):
        raise ValueError(f"theta has length {theta.shape}, expected {prob.p}")
    ll = prob.terms(theta)[0][0]
    bad = ~np.isfinite(ll)
    if bad.any():
        raise NonFiniteLikelihood(int(np.flatnonzero(bad)[0]))
    return ll


def loglikelihood(theta, design, z, y=None) -> float:
    """Exact marginal log-likelihood of the normal / truncated-normal composed error."""
    return math.fsum(loglik_obs(theta, design, z, y))


def gradient(theta, design, z, y=None) -> np.ndarray:
    """Analytic gradient of :func:`loglikelihood` with respect to ``theta``."""
    X = design.X if isinstance(design, Design) else np.asarray(design, float)
    y = design.y if isinstance(design, Design) else np.asarray(y, float)
    Z = z.full if isinstance(z, ZMatrix) else np.asarray(z, float).reshape(X.shape[0], -1)
    return _Problem(_with_const(X), y, Z).value_grad(np.asarray(theta, float))[1]


# -- estimation ------------------------------------------------------------------

def _check_rank(M, names, tol=1e-10):
    if M.shape[1] == 0:
        return
    scale = np.sqrt((M * M).mean(axis=0))
    scale[scale == 0] = 1.0
    _, R, piv = linalg.qr(M / scale, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * max(diag[0], 1e-300) * max(M.shape)))
    if rank < M.shape[1]:
        raise RankDeficientDesign([names[i] for i in sorted(piv[rank:])])


@dataclass
class _Standardizer:
    """Affine map between standardized optimizer coordinates and data units."""

    A: np.ndarray
    c: np.ndarray
    Xs: np.ndarray
    ys: np.ndarray
    Zs: np.ndarray
    log_sy: float

    def to_raw(self, p):
        return self.A @ p + self.c

    def to_internal(self, theta):
        return np.linalg.solve(self.A, theta - self.c)


def _standardize(X, y, Z, z_const):
    n, kx = X.shape
    kz_full = Z.shape[1]
    mx = X.mean(axis=0)
    sx = X.std(axis=0)
    sx[sx == 0] = 1.0
    my = float(y.mean())
    sy = float(y.std()) or 1.0
    Xs = np.column_stack([np.ones(n), (X - mx) / sx])
    ys = (y - my) / sy
    if z_const:
        Zr = Z[:, 1:]
        mz = Zr.mean(axis=0)
    else:
        Zr = Z
        mz = np.zeros(Z.shape[1])
    sz = Zr.std(axis=0) if Zr.shape[1] else np.zeros(0)
    sz = np.where(sz == 0, 1.0, sz)
    if not z_const:
        # no intercept in the mean: scale only, so the model is unchanged
        rms = np.sqrt((Zr * Zr).mean(axis=0)) if Zr.shape[1] else np.zeros(0)
        sz = np.where(rms == 0, 1.0, rms)
    Zs_r = (Zr - mz) / sz
    Zs = np.column_stack([np.ones(n), Zs_r]) if z_const else Zs_r

    p = 1 + kx + kz_full + 2
    A = np.zeros((p, p))
    c = np.zeros(p)
    A[0, 0] = sy
    c[0] = my
    for j in range(kx):
        A[1 + j, 1 + j] = sy / sx[j]
        A[0, 1 + j] = -sy * mx[j] / sx[j]
    off = 1 + kx
    if z_const:
        A[off, off] = sy
        for k in range(Zr.shape[1]):
            A[off + 1 + k, off + 1 + k] = sy / sz[k]
            A[off, off + 1 + k] = -sy * mz[k] / sz[k]
    else:
        for k in range(Zr.shape[1]):
            A[off + k, off + k] = sy / sz[k]
    A[-2, -2] = A[-1, -1] = 1.0
    c[-2] = c[-1] = 2.0 * math.log(sy)
    return _Standardizer(A, c, Xs, ys, Zs, math.log(sy))


def _ols_start(prob: _Problem):
    coef, *_ = np.linalg.lstsq(prob.X, prob.y, rcond=None)
    e = prob.y - prob.X @ coef
    e = e - e.mean()
    var = float(np.mean(e * e))
    m3 = float(np.mean(e ** 3))
    k3 = _SQRT_2_PI * (4.0 / math.pi - 1.0)
    su = (m3 / k3) ** (1.0 / 3.0) if m3 > 0 else 0.1 * math.sqrt(var)
    su = min(su, math.sqrt(var / (1.0 - 2.0 / math.pi)) * 0.95)
    sv2 = max(var - (1.0 - 2.0 / math.pi) * su * su, 0.05 * var)
    theta = np.zeros(prob.p)
    theta[:prob.kx] = coef
    theta[0] -= su * _SQRT_2_PI
    theta[-2] = math.log(max(su * su, 1e-8))
    theta[-1] = math.log(sv2)
    return theta


def _optimize(prob: _Problem, start, opts: SfaOptions):
    n = prob.n
    state = {"nfev": 0}

    def fun(theta):
        state["nfev"] += 1
        val, grad, _ = prob.value_grad(theta)
        if not np.isfinite(val) or not np.all(np.isfinite(grad)):
            return 1e10, np.zeros_like(theta)
        return -val / n, -grad / n

    lo, hi = opts.log_var_bounds
    bounds = [(None, None)] * (prob.p - 2) + [(lo, hi), (lo, hi)]
    res = optimize.minimize(fun, start, jac=True, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": opts.maxiter, "ftol": 1e-15, "gtol": 1e-10,
                                     "maxcor": 30})
    theta = res.x
    iters = int(res.nit)
    ll, grad, _ = prob.value_grad(theta)
    prev = -np.inf

    # Newton polish with the finite-difference Hessian of the analytic gradient
    for _ in range(50):
        if not np.isfinite(ll):
            break
        at_bound = _active_bounds(theta, grad, lo, hi)
        pg = np.where(at_bound, 0.0, grad)
        if np.max(np.abs(pg)) < opts.gtol * 1e-2 and abs(ll - prev) <= opts.ftol * abs(ll):
            break
        free = ~at_bound
        H = prob.hessian(theta)[np.ix_(free, free)]
        try:
            evals = np.linalg.eigvalsh(H)
            if evals.max() >= 0:
                H = H - (evals.max() + 1e-6 * max(1.0, abs(evals.min()))) * np.eye(H.shape[0])
            step_free = -np.linalg.solve(H, pg[free])
        except np.linalg.LinAlgError:
            break
        step = np.zeros_like(theta)
        step[free] = step_free
        t = 1.0
        improved = False
        for _ in range(30):
            cand = theta + t * step
            cand[-2:] = np.clip(cand[-2:], lo, hi)
            c_ll, c_grad, _ = prob.value_grad(cand)
            if np.isfinite(c_ll) and c_ll >= ll - 1e-12 * abs(ll):
                improved = True
                break
            t *= 0.5
        iters += 1
        if not improved:
            break
        prev, ll, theta, grad = ll, c_ll, cand, c_grad
    at_bound = _active_bounds(theta, grad, lo, hi)
    pg = np.where(at_bound, 0.0, grad)
    gnorm = float(np.max(np.abs(pg))) if pg.size else 0.0
    rel = abs(ll - prev) / max(abs(ll), 1.0) if np.isfinite(prev) else (0.0 if res.success else np.inf)
    converged = bool(np.isfinite(ll) and gnorm < opts.gtol and rel < opts.ftol and iters <= opts.maxiter + 50)
    return theta, ll, converged, iters, gnorm


def _active_bounds(theta, grad, lo, hi):
    act = np.zeros(theta.shape, dtype=bool)
    act[-2:] = ((theta[-2:] <= lo + 1e-12) & (grad[-2:] < 0)) | ((theta[-2:] >= hi - 1e-12) & (grad[-2:] > 0))
    return act


def _cluster_cov(prob: _Problem, theta, groups, se_type):
    H = prob.hessian(theta)
    try:
        Hinv = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        Hinv = np.linalg.pinv(H)
    if se_type == "oim":
        return -Hinv, len(np.unique(groups))
    _, S = prob.scores(theta)
    if se_type == "robust":
        groups = np.arange(prob.n)
    codes, uniq = pd.factorize(pd.Series(groups), sort=True)
    G = len(uniq)
    Sg = np.zeros((G, prob.p))
    np.add.at(Sg, codes, S)
    B = Sg.T @ Sg
    cov = Hinv @ B @ Hinv * (G / (G - 1.0) if G > 1 else 1.0)
    return 0.5 * (cov + cov.T), G


def fit_frontier(design: Design, z: ZMatrix | None = None, options: SfaOptions | None = None,
                 **kw) -> SfaFit:
    """Maximum-likelihood fit of the frontier and inefficiency mean.

    Multi-start L-BFGS-B with analytic gradient, followed by Newton polishing.
    The best local optimum across starts is returned; ties within
    ``tie_tol`` go to the smaller parameter norm.
    """
    opts = dataclasses.replace(options, **kw) if options else SfaOptions(**kw)
    if z is None:
        z = ZMatrix(np.empty((len(design), 0)), [], True, False)
    X = np.asarray(design.X, float)
    y = np.asarray(design.y, float)
    Zfull = z.full
    if Zfull.shape[0] != X.shape[0]:
        raise ValueError("design and z are not row-aligned")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y)) and np.all(np.isfinite(Zfull))):
        raise ValueError("non-finite values in design or z; drop incomplete rows first")
    p = 1 + X.shape[1] + Zfull.shape[1] + 2
    if X.shape[0] < p + 1:
        from .errors import TooFewObservations
        raise TooFewObservations(f"{X.shape[0]} observations for {p} parameters")
    fnames = ["const"] + list(design.names)
    _check_rank(_with_const(X), fnames)
    _check_rank(Zfull, [f"z:{n}" for n in z.full_names])

    z_const = z.include_constant and not z.half_normal
    st = _standardize(X, y, Zfull, z_const)
    prob = _Problem(st.Xs, st.ys, st.Zs, opts.threads, opts.chunk_size)

    base = _ols_start(prob)
    rng = np.random.default_rng(opts.seed)
    starts = [base]
    for _ in range(max(opts.n_starts, 1) - 1):
        pert = base + opts.perturb_scale * rng.standard_normal(prob.p)
        starts.append(pert)

    results = [_optimize(prob, s, opts) for s in starts]
    best = None
    for r in results:
        if not np.isfinite(r[1]):
            continue
        if best is None or r[1] > best[1] + opts.tie_tol:
            best = r
        elif abs(r[1] - best[1]) <= opts.tie_tol and np.linalg.norm(r[0]) < np.linalg.norm(best[0]):
            best = r
    if best is None:
        raise DidNotConverge("no start produced a finite log-likelihood")
    p_int, ll_int, converged, iters, gnorm = best

    theta = st.to_raw(p_int)
    ll = ll_int - prob.n * st.log_sy
    groups = design.bank_id
    cov_int, G = _cluster_cov(prob, p_int, groups, opts.se_type)
    cov = st.A @ cov_int @ st.A.T
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    kx = X.shape[1] + 1
    kz = Zfull.shape[1]
    su2, sv2 = math.exp(theta[-2]), math.exp(theta[-1])
    su, sv = math.sqrt(su2), math.sqrt(sv2)
    fit = SfaFit(
        beta=theta[:kx].copy(), delta=theta[kx:kx + kz].copy(), sigma_u=su, sigma_v=sv,
        loglik=float(ll), converged=converged, iterations=iters,
        cluster_se={"beta": se[:kx], "delta": se[kx:kx + kz],
                    "sigma_u": 0.5 * su * se[-2], "sigma_v": 0.5 * sv * se[-1]},
        score_norm_at_optimum=gnorm, frontier_names=fnames, z_names=z.full_names,
        theta=theta, cov=cov, n_obs=prob.n, n_clusters=G, spec=design.spec,
        half_normal=z.half_normal, design_meta=design.meta(),
        message="converged" if converged else "convergence criteria not met",
        start_logliks=[float(r[1] - prob.n * st.log_sy) for r in results],
        se_type=opts.se_type,
    )
    if not converged and opts.raise_on_fail:
        raise DidNotConverge(f"best start: gradient norm {gnorm:.3g}", fit=fit)
    return fit


# -- efficiency scores ---------------------------------------------------------------

def residuals(fit: SfaFit, design: Design, z: ZMatrix | None):
    X = _with_const(np.asarray(design.X, float))
    if X.shape[1] != fit.beta.shape[0]:
        from .errors import SpecMismatch
        raise SpecMismatch("design does not match the fitted frontier")
    eps = design.y - X @ fit.beta
    if fit.half_normal or z is None or fit.delta.size == 0:
        mu = np.zeros(len(eps))
    else:
        mu = z.full @ fit.delta
    return eps, mu


def efficiency_scores(fit: SfaFit, design: Design, z: ZMatrix | None = None,
                      require_converged: bool = True) -> pd.DataFrame:
    """Battese-Coelli scores ``E[exp(-u) | eps]`` and ``E[u | eps]`` per observation."""
    if require_converged and not fit.converged:
        raise NotConverged("efficiency scores require a converged fit")
    eps, mu = residuals(fit, design, z)
    log_ce, u_hat = kernels.bc_scores(eps, mu, fit.sigma_u ** 2, fit.sigma_v ** 2)
    ce = np.minimum(np.exp(log_ce), 1.0)
    return pd.DataFrame({"bank_id": design.bank_id, "quarter": design.quarter,
                         "ce": ce, "u_hat": u_hat, "log_ce": log_ce})


def scores_from_theta(theta, design: Design, z: ZMatrix | None) -> np.ndarray:
    """Efficiency scores at an arbitrary packed ``theta`` (no fit needed)."""
    kx = design.X.shape[1] + 1
    eps = design.y - _with_const(design.X) @ theta[:kx]
    Z = z.full if z is not None else np.empty((len(eps), 0))
    mu = Z @ theta[kx:kx + Z.shape[1]] if Z.shape[1] else np.zeros(len(eps))
    log_ce, _ = kernels.bc_scores(eps, mu, math.exp(theta[-2]), math.exp(theta[-1]))
    return np.minimum(np.exp(log_ce), 1.0)


def pack_theta(beta: Sequence[float], delta: Sequence[float], sigma_u: float, sigma_v: float):
    return np.concatenate([np.asarray(beta, float), np.asarray(delta, float),
                           [2.0 * math.log(sigma_u), 2.0 * math.log(sigma_v)]])
