"""Fixed-effects and exactly identified IV panel regressions.

Regressors are written as small expressions over panel columns, evaluated
per bank on the quarter index::

    lag(x, k)      x from k quarters earlier (missing across gaps)
    pos(x), neg(x) max(x, 0) and min(x, 0)
    log(x)         natural log (non-positive values become missing)
    diff(x, k)     x - lag(x, k)
    center(x)      x minus its mean on the estimation sample
    std(x)         x divided by its standard deviation on the estimation sample
    a * b, a + b, a - b, a / b, numeric literals

``center`` and ``std`` are evaluated after listwise deletion, so their
statistics always refer to the rows actually used.
"""
from __future__ import annotations

import ast
import dataclasses
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import linalg, stats

from .errors import (
    Collinear,
    FxFrontierError,
    InsufficientHistory,
    TooFewObservations,
    WeakInstrumentWarning,
)
from .paneldata import resample_banks


# -- expressions ---------------------------------------------------------------------

class _Evaluator:
    def __init__(self, panel: pd.DataFrame, mask: np.ndarray | None = None):
        self.panel = panel
        self.mask = mask
        self.bank = panel["bank_id"].to_numpy()
        self.quarter = panel["quarter"].to_numpy(np.int64)
        self._lag_index: dict[int, np.ndarray] = {}

    def lag_index(self, k: int) -> np.ndarray:
        if k not in self._lag_index:
            key = pd.MultiIndex.from_arrays([self.bank, self.quarter])
            target = pd.MultiIndex.from_arrays([self.bank, self.quarter - k])
            self._lag_index[k] = key.get_indexer(target)
        return self._lag_index[k]

    def lag(self, x, k):
        idx = self.lag_index(int(k))
        out = np.full(x.shape, np.nan)
        ok = idx >= 0
        out[ok] = x[idx[ok]]
        return out

    def _sample(self, x):
        m = np.isfinite(x) if self.mask is None else (self.mask & np.isfinite(x))
        return x[m]

    def eval(self, expr: str) -> np.ndarray:
        tree = ast.parse(expr, mode="eval")
        return np.asarray(self._node(tree.body), dtype=float) * np.ones(len(self.panel))

    def _node(self, node):
        if isinstance(node, ast.Name):
            if node.id not in self.panel.columns:
                raise KeyError(f"unknown column {node.id!r}")
            col = self.panel[node.id]
            if col.dtype == bool:
                return col.to_numpy(float)
            return pd.to_numeric(col, errors="coerce").to_numpy(float)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            return -self._node(node.operand)
        if isinstance(node, ast.BinOp):
            a, b = self._node(node.left), self._node(node.right)
            ops = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply,
                   ast.Div: np.divide, ast.Pow: np.power}
            fn = ops.get(type(node.op))
            if fn is None:
                raise ValueError(f"unsupported operator in {ast.unparse(node)!r}")
            with np.errstate(divide="ignore", invalid="ignore"):
                return fn(a, b)
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
            name = node.func.id
            args = node.args
            if name == "lag":
                k = int(self._node(args[1])) if len(args) > 1 else 1
                return self.lag(self._node(args[0]) * np.ones(len(self.panel)), k)
            if name == "diff":
                k = int(self._node(args[1])) if len(args) > 1 else 1
                x = self._node(args[0]) * np.ones(len(self.panel))
                return x - self.lag(x, k)
            x = self._node(args[0]) * np.ones(len(self.panel))
            if name == "pos":
                return np.where(np.isnan(x), np.nan, np.maximum(x, 0.0))
            if name == "neg":
                return np.where(np.isnan(x), np.nan, np.minimum(x, 0.0))
            if name == "log":
                with np.errstate(divide="ignore", invalid="ignore"):
                    return np.where(x > 0, np.log(np.where(x > 0, x, 1.0)), np.nan)
            if name == "abs":
                return np.abs(x)
            if name == "center":
                return x - self._sample(x).mean()
            if name == "std":
                s = self._sample(x)
                sd = s.std(ddof=1) if s.size > 1 else 0.0
                return x / sd if sd > 0 else x * np.nan
            raise ValueError(f"unknown function {name!r}")
        raise ValueError(f"unsupported expression {ast.unparse(node)!r}")


def evaluate(panel: pd.DataFrame, exprs: Sequence[str], mask=None) -> np.ndarray:
    ev = _Evaluator(panel, mask)
    return np.column_stack([ev.eval(e) for e in exprs]) if exprs else np.empty((len(panel), 0))


# -- specification and results -------------------------------------------------------

@dataclass
class Bootstrap:
    replications: int = 1000
    seed: int = 0
    by_cluster: bool = True
    threads: int = 1


@dataclass
class RegressionSpec:
    dependent: str
    regressors: list[str]
    fixed_effects: tuple[str, ...] = ("bank", "quarter")
    cluster: str | None = "bank_id"
    instruments: dict[str, str] = field(default_factory=dict)
    bootstrap: Bootstrap | None = None
    standardize: bool = False
    combinations: list[dict[str, float]] = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        extra = set(self.instruments) - set(self.regressors)
        if extra:
            raise ValueError(f"instrumented terms not among regressors: {sorted(extra)}")
        bad = set(self.fixed_effects) - {"bank", "quarter"}
        if bad:
            raise ValueError(f"unknown fixed effects {sorted(bad)}")


@dataclass
class LinearCombination:
    weights: dict[str, float]
    estimate: float
    se: float

    @property
    def t(self) -> float:
        return self.estimate / self.se if self.se > 0 else math.nan


@dataclass
class RegressionFit:
    names: list[str]
    coefficients: np.ndarray
    se: np.ndarray
    se_method: str
    cov: np.ndarray
    r2_within: float
    n_obs: int
    n_clusters: int
    n_dropped: int = 0
    linear_combination_tests: list[LinearCombination] = field(default_factory=list)
    first_stage_f: dict[str, float] = field(default_factory=dict)
    spec: RegressionSpec | None = None
    name: str = ""
    sample_mask: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def stderr(self, name: str) -> float:
        return float(self.se[self.names.index(name)])

    def tstat(self, name: str) -> float:
        return self.coef(name) / self.stderr(name)

    def pvalue(self, name: str) -> float:
        df = max(self.n_clusters - 1, 1)
        return float(2 * stats.t.sf(abs(self.tstat(name)), df))

    def table(self) -> pd.DataFrame:
        p = [self.pvalue(n) for n in self.names]
        return pd.DataFrame({"coefficient": self.names, "estimate": self.coefficients,
                             "se": self.se, "stars": [stars(x) for x in p]})


def stars(p: float) -> str:
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.1 else ""


# -- numerical core ------------------------------------------------------------------

def demean(M: np.ndarray, groups: Sequence[np.ndarray], tol: float = 1e-13,
           maxiter: int = 10_000) -> np.ndarray:
    """Project out group means; alternating projections for more than one grouping."""
    M = np.array(M, dtype=float, copy=True)
    if M.ndim == 1:
        M = M[:, None]
    codes = [pd.factorize(pd.Series(g), sort=True)[0] for g in groups]
    counts = [np.bincount(c) for c in codes]

    def sweep(A):
        for c, n in zip(codes, counts):
            sums = np.zeros((n.size, A.shape[1]))
            np.add.at(sums, c, A)
            A -= (sums / n[:, None])[c]
        return A

    if len(codes) == 0:
        return M
    if len(codes) == 1:
        return sweep(M)
    scale = max(float(np.abs(M).max()), 1e-300)
    for _ in range(maxiter):
        prev = M.copy()
        M = sweep(M)
        if float(np.abs(M - prev).max()) <= tol * scale:
            break
    return M


def _rank_check(X: np.ndarray, names: Sequence[str], raw: np.ndarray | None = None, tol=1e-9):
    if X.shape[1] == 0:
        return
    ref = raw if raw is not None else X
    scale = np.sqrt((ref * ref).mean(axis=0))
    scale[scale == 0] = 1.0
    Xs = X / scale
    _, R, piv = linalg.qr(Xs, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    thresh = tol * math.sqrt(X.shape[0])
    rank = int(np.sum(diag > thresh))
    if rank < X.shape[1]:
        raise Collinear([names[i] for i in sorted(piv[rank:])])


def _cluster_meat(U: np.ndarray, clusters: np.ndarray) -> tuple[np.ndarray, int]:
    codes, uniq = pd.factorize(pd.Series(clusters), sort=True)
    G = len(uniq)
    Ug = np.zeros((G, U.shape[1]))
    np.add.at(Ug, codes, U)
    return Ug.T @ Ug, G


def _estimate(y, X, Z=None):
    """OLS (Z is None) or exactly identified IV on already-demeaned data."""
    if Z is None:
        XtX = X.T @ X
        coef = linalg.solve(XtX, X.T @ y, assume_a="sym")
        bread = linalg.inv(XtX)
        return coef, bread, X
    ZtX = Z.T @ X
    coef = linalg.solve(ZtX, Z.T @ y)
    bread = linalg.inv(ZtX)
    return coef, bread, Z


def _sandwich(resid, bread, W, clusters, k):
    n = resid.shape[0]
    U = W * resid[:, None]
    meat, G = _cluster_meat(U, clusters)
    factor = (G / (G - 1.0)) * ((n - 1.0) / (n - k)) if G > 1 and n > k else 1.0
    cov = bread @ meat @ bread.T * factor
    return 0.5 * (cov + cov.T), G


# -- estimation ----------------------------------------------------------------------

@dataclass
class _Prepared:
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray | None
    fe: list[np.ndarray]
    clusters: np.ndarray
    mask: np.ndarray
    names: list[str]
    n_dropped: int


def _prepare(panel: pd.DataFrame, spec: RegressionSpec) -> _Prepared:
    names = list(spec.regressors)
    inst_terms = [spec.instruments.get(r, r) for r in names]
    exprs = [spec.dependent] + names + [e for r, e in zip(names, inst_terms) if r in spec.instruments]
    ev = _Evaluator(panel)
    first = np.column_stack([ev.eval(e) for e in exprs])
    mask = np.all(np.isfinite(first), axis=1)
    if spec.cluster:
        mask &= panel[spec.cluster].notna().to_numpy()
    # drop singleton fixed-effect groups (they carry no within variation)
    fe_cols = {"bank": panel["bank_id"].to_numpy(), "quarter": panel["quarter"].to_numpy()}
    changed = True
    while changed and spec.fixed_effects:
        changed = False
        for f in spec.fixed_effects:
            counts = pd.Series(fe_cols[f][mask]).value_counts()
            single = counts.index[counts < 2]
            if len(single):
                drop = mask & np.isin(fe_cols[f], single.to_numpy())
                if drop.any():
                    mask &= ~drop
                    changed = True
    n_dropped = int(len(panel) - mask.sum())
    ev2 = _Evaluator(panel, mask)
    full = np.column_stack([ev2.eval(e) for e in exprs])[mask]
    y = full[:, 0]
    X = full[:, 1:1 + len(names)]
    Z = None
    if spec.instruments:
        Z = X.copy()
        extra = full[:, 1 + len(names):]
        j = 0
        for i, r in enumerate(names):
            if r in spec.instruments:
                Z[:, i] = extra[:, j]
                j += 1
    if spec.standardize:
        sy = y.std(ddof=1)
        sx = X.std(ddof=1, axis=0)
        y = y / sy if sy > 0 else y
        sx_safe = np.where(sx > 0, sx, 1.0)
        X = X / sx_safe
        if Z is not None:
            sz = Z.std(ddof=1, axis=0)
            Z = Z / np.where(sz > 0, sz, 1.0)
    fe = [fe_cols[f][mask] for f in spec.fixed_effects]
    clusters = panel[spec.cluster].to_numpy()[mask] if spec.cluster else np.arange(int(mask.sum()))
    return _Prepared(y, X, Z, fe, clusters, mask, names, n_dropped)


def _solve(prep: _Prepared, spec: RegressionSpec):
    k = prep.X.shape[1]
    n = prep.y.shape[0]
    if n <= k + 1:
        raise TooFewObservations(f"{n} observations for {k} regressors")
    M = np.column_stack([prep.y, prep.X] + ([prep.Z] if prep.Z is not None else []))
    D = demean(M, prep.fe)
    yd = D[:, 0]
    Xd = D[:, 1:1 + k]
    Zd = D[:, 1 + k:] if prep.Z is not None else None
    _rank_check(Xd, prep.names, prep.X)
    if Zd is not None:
        _rank_check(Zd, [f"instrument({r})" for r in prep.names], prep.Z)
    coef, bread, W = _estimate(yd, Xd, Zd)
    resid = yd - Xd @ coef
    return coef, bread, W, resid, yd, Xd, Zd


def fit_fe(panel: pd.DataFrame, spec: RegressionSpec) -> RegressionFit:
    """Within estimator with cluster-robust (CR1) or cluster-bootstrap errors.

    With ``spec.instruments`` the exactly identified IV estimator
    ``(Z'X)^-1 Z'y`` is applied to the demeaned data.
    """
    prep = _prepare(panel, spec)
    coef, bread, W, resid, yd, Xd, Zd = _solve(prep, spec)
    n, k = Xd.shape
    cov, G = _sandwich(resid, bread, W, prep.clusters, k)
    method = "cluster" if spec.cluster else "robust"
    fit_extras = {}
    if spec.bootstrap is not None and spec.bootstrap.replications > 1:
        draws = bootstrap_draws(prep, spec)
        cov = np.cov(draws, rowvar=False, ddof=1).reshape(k, k)
        method = "bootstrap"
        fit_extras["bootstrap_draws"] = draws
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    tss = float(yd @ yd)
    r2 = 1.0 - float(resid @ resid) / tss if tss > 0 else math.nan
    fit = RegressionFit(
        names=list(prep.names), coefficients=coef, se=se, se_method=method, cov=cov,
        r2_within=r2, n_obs=n, n_clusters=G, n_dropped=prep.n_dropped, spec=spec,
        name=spec.name, sample_mask=prep.mask, extras=fit_extras,
    )
    if Zd is not None:
        fit.first_stage_f = _first_stage_f(Xd, Zd, prep.names, spec)
        for r, f in fit.first_stage_f.items():
            if f < 10:
                warnings.warn(f"weak instrument for {r}: first-stage F = {f:.2f}",
                              WeakInstrumentWarning, stacklevel=2)
    for w in spec.combinations:
        fit.linear_combination_tests.append(linear_combination(fit, w))
    return fit


def fit_iv(panel: pd.DataFrame, spec: RegressionSpec) -> RegressionFit:
    if not spec.instruments:
        raise ValueError("fit_iv requires instruments")
    return fit_fe(panel, spec)


def _first_stage_f(Xd, Zd, names, spec):
    out = {}
    for i, r in enumerate(names):
        if r not in spec.instruments:
            continue
        coef, *_ = np.linalg.lstsq(Zd, Xd[:, i], rcond=None)
        resid = Xd[:, i] - Zd @ coef
        others = np.delete(Zd, i, axis=1)
        if others.shape[1]:
            c0, *_ = np.linalg.lstsq(others, Xd[:, i], rcond=None)
            r0 = Xd[:, i] - others @ c0
        else:
            r0 = Xd[:, i]
        n, k = Zd.shape
        ssr1 = float(resid @ resid)
        ssr0 = float(r0 @ r0)
        out[r] = (ssr0 - ssr1) / (ssr1 / max(n - k, 1)) if ssr1 > 0 else math.inf
    return out


def linear_combination(fit: RegressionFit, weights: Mapping[str, float]) -> LinearCombination:
    """Estimate and delta-method SE of ``sum(w * coef)``."""
    w = np.zeros(len(fit.names))
    for name, val in weights.items():
        w[fit.names.index(name)] = val
    est = float(w @ fit.coefficients)
    se = float(math.sqrt(max(w @ fit.cov @ w, 0.0)))
    return LinearCombination(dict(weights), est, se)


def bootstrap_draws(prep: _Prepared, spec: RegressionSpec) -> np.ndarray:
    """Coefficient draws from the cluster bootstrap.

    Replicate ``b`` uses ``numpy.random.default_rng([seed, b])``; resampled
    clusters are relabelled so a bank drawn twice enters as two banks.
    """
    bs = spec.bootstrap
    codes, uniq = pd.factorize(pd.Series(prep.clusters), sort=True)
    G = len(uniq)
    members = [np.flatnonzero(codes == g) for g in range(G)]
    fe_names = list(spec.fixed_effects)

    def one(b):
        rng = np.random.default_rng([bs.seed, b])
        if bs.by_cluster:
            pick = rng.integers(0, G, G)
            rows = np.concatenate([members[g] for g in pick])
            new_cl = np.concatenate([np.full(members[g].size, j) for j, g in enumerate(pick)])
        else:
            rows = rng.integers(0, prep.y.shape[0], prep.y.shape[0])
            new_cl = np.arange(rows.size)
        fe = []
        for name, f in zip(fe_names, prep.fe):
            fe.append(new_cl if (name == "bank" and spec.cluster == "bank_id" and bs.by_cluster) else f[rows])
        sub = _Prepared(prep.y[rows], prep.X[rows], None if prep.Z is None else prep.Z[rows],
                        fe, new_cl, prep.mask, prep.names, 0)
        try:
            coef = _solve(sub, spec)[0]
        except (Collinear, TooFewObservations, linalg.LinAlgError):
            coef = np.full(prep.X.shape[1], np.nan)
        return coef

    reps = range(bs.replications)
    if bs.threads > 1:
        with ThreadPoolExecutor(bs.threads) as ex:
            draws = list(ex.map(one, reps))
    else:
        draws = [one(b) for b in reps]
    draws = np.array(draws)
    return draws[np.all(np.isfinite(draws), axis=1)]


# -- Z-score -------------------------------------------------------------------------

class ZeroVolatility(UserWarning):
    """ROA volatility is zero over the window; the Z-score is undefined there."""


def zscore(panel: pd.DataFrame, window: int = 4, return_components: bool = False):
    """Z-score ``(EQ/TA + ROA) / sigma_window(ROA)`` per observation, in percent units.

    ROA is 100 times the four-quarter sum of gross profit over total assets;
    sigma is the moving standard deviation (ddof 1) of the annualized
    quarterly ROA over ``window`` quarters.  Observations without enough
    gap-free history are NaN; if no observation qualifies,
    :class:`InsufficientHistory` is raised.  Zero-volatility windows yield NaN
    and a :class:`ZeroVolatility` warning.
    """
    if window not in (4, 8, 12):
        raise ValueError("window must be 4, 8 or 12")
    need = max(4, window)
    ev = _Evaluator(panel)
    gp = panel["gross_profit"].to_numpy(float)
    ta = panel["total_assets"].to_numpy(float)
    gp_lags = np.column_stack([ev.lag(gp, k) for k in range(4)])
    roa = 100.0 * gp_lags.sum(axis=1) / ta
    q_roa = 400.0 * gp / ta
    window_vals = np.column_stack([ev.lag(q_roa, k) for k in range(window)])
    hist_ok = np.all(np.isfinite(np.column_stack([ev.lag(q_roa, k) for k in range(need)])), axis=1)
    sigma = np.where(hist_ok, np.std(window_vals, axis=1, ddof=1), np.nan)
    cap = panel["equity_ratio"].to_numpy(float)
    if not hist_ok.any():
        raise InsufficientHistory(f"no bank has {need} consecutive quarters of profit data")
    zero = hist_ok & (sigma == 0)
    if zero.any():
        warnings.warn(f"{int(zero.sum())} observations with zero ROA volatility", ZeroVolatility,
                      stacklevel=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(hist_ok & (sigma > 0), (cap + roa) / sigma, np.nan)
    roa = np.where(hist_ok, roa, np.nan)
    if return_components:
        return pd.DataFrame({"zscore": z, "roa": roa, "sigma_roa": sigma}, index=panel.index)
    return pd.Series(z, index=panel.index, name="zscore")


# -- applied suites ------------------------------------------------------------------

CHANNEL_INTERACTIONS = {
    "ln_ta": "log(total_assets)",
    "eq_ta": "equity_ratio",
    "liq_ta": "liquidity_ratio",
    "d4_ln_ta": "asset_growth_4q",
}


def channels_suite(panel: pd.DataFrame, interactions: Sequence[str] | None = None,
                   cluster: str = "bank_id") -> list[RegressionFit]:
    """Revals-/TC on lagged signed net-FX parts and their interactions.

    One fit per interaction variable (bank size, capital, liquidity, asset
    growth).  Right-hand variables are centred, every variable is divided by
    its standard deviation, and bank and quarter effects are absorbed.
    """
    if "net_fx_position" not in panel.columns:
        from .errors import MissingColumn
        raise MissingColumn("net_fx_position")
    df = _with_derived(panel)
    keys = list(interactions or CHANNEL_INTERACTIONS)
    fits = []
    plus = "center(pos(lag(net_fx_position, 1)))"
    minus = "center(neg(lag(net_fx_position, 1)))"
    controls = [f"center(lag({e}, 1))" for e in CHANNEL_INTERACTIONS.values()]
    for key in keys:
        x = f"center(lag({CHANNEL_INTERACTIONS[key]}, 1))"
        regs = [plus, minus, f"{plus} * {x}", f"{minus} * {x}"] + controls
        spec = RegressionSpec(dependent="revals_share", regressors=regs, cluster=cluster,
                              standardize=True, name=f"channels:{key}")
        fit = _fit_dropping_collinear(df, spec)
        fit.extras["labels"] = _channel_labels(regs, key)
        fits.append(fit)
    return fits


def _channel_labels(regs, key):
    labels = {}
    for r in regs:
        lab = r
        lab = lab.replace("center(pos(lag(net_fx_position, 1)))", "NetFX+")
        lab = lab.replace("center(neg(lag(net_fx_position, 1)))", "NetFX-")
        for k, e in CHANNEL_INTERACTIONS.items():
            lab = lab.replace(f"center(lag({e}, 1))", k)
        labels[r] = lab
    return labels


def _fit_dropping_collinear(df, spec: RegressionSpec) -> RegressionFit:
    """Fit, removing regressors reported as collinear (recorded in ``extras``)."""
    dropped: list[str] = []
    while True:
        try:
            fit = fit_fe(df, spec)
            fit.extras["dropped_collinear"] = dropped
            return fit
        except Collinear as exc:
            bad = [c for c in exc.columns if c in spec.regressors]
            if not bad:
                raise
            dropped.extend(bad)
            regs = [r for r in spec.regressors if r not in bad]
            if not regs:
                raise
            spec = dataclasses.replace(
                spec, regressors=regs,
                instruments={k: v for k, v in spec.instruments.items() if k in regs},
                combinations=[w for w in spec.combinations if set(w) <= set(regs)])


def _with_derived(panel: pd.DataFrame) -> pd.DataFrame:
    df = panel.copy()
    tc = df["total_costs"].to_numpy(float)
    df["revals_share"] = df["revals_neg"].to_numpy(float) / tc
    return df


def _quartile_cuts(panel: pd.DataFrame) -> dict[str, np.ndarray]:
    """Row masks for the full sample and for dropping the top / bottom quarter of banks by mean TA."""
    size = panel.groupby("bank_id")["total_assets"].mean()
    lo, hi = np.quantile(size.to_numpy(), [0.25, 0.75])
    bank_size = panel["bank_id"].map(size).to_numpy()
    return {
        "full": np.ones(len(panel), dtype=bool),
        "without_largest": bank_size <= hi,
        "without_smallest": bank_size >= lo,
    }


def market_structure_suite(panel: pd.DataFrame, scores_dropped: pd.DataFrame,
                           scores_kept: pd.DataFrame, bootstrap: Bootstrap | None = None,
                           controls: Sequence[str] = ("log(total_assets)",),
                           markets: Sequence[str] = ("corp", "hh"),
                           cuts: Sequence[str] = ("full", "without_largest", "without_smallest"),
                           ) -> list[RegressionFit]:
    """ln market share on ln CE (dropped- and kept-revaluation scores), OLS and IV.

    The IV instruments ln CE with its first lag.  Each fit stores the absolute
    impact ``100 * gamma * SD(ln CE)`` (percentage points of the dependent
    variable per one-SD change) and its standard error in ``extras``.
    """
    df = panel.copy()
    for label, sc in (("dropped", scores_dropped), ("kept", scores_kept)):
        key = pd.MultiIndex.from_arrays([sc["bank_id"].astype(str), sc["quarter"].astype(np.int64)])
        s = pd.Series(sc["ce"].to_numpy(float), index=key)
        idx = pd.MultiIndex.from_arrays([df["bank_id"].astype(str), df["quarter"].astype(np.int64)])
        df[f"ce_{label}"] = s.reindex(idx).to_numpy()
    masks = _quartile_cuts(df)
    fits = []
    for market in markets:
        dep = f"log(market_share_{market})"
        for cut in cuts:
            sub = df[masks[cut]].reset_index(drop=True)
            for variant in ("dropped", "kept"):
                x = f"log(ce_{variant})"
                for estimator in ("ols", "iv"):
                    inst = {x: f"lag({x}, 1)"} if estimator == "iv" else {}
                    spec = RegressionSpec(dependent=dep, regressors=[x, *controls],
                                          instruments=inst, bootstrap=bootstrap,
                                          name=f"ms:{market}:{cut}:{variant}:{estimator}")
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", WeakInstrumentWarning)
                        fit = fit_fe(sub, spec)
                    lnce = evaluate(sub, [x])[:, 0][fit.sample_mask]
                    sd = float(np.std(lnce, ddof=1))
                    g, se = fit.coef(x), fit.stderr(x)
                    fit.extras.update({"market": market, "cut": cut, "variant": variant,
                                       "estimator": estimator, "gamma": g, "gamma_se": se,
                                       "sd_ln_ce": sd, "impact_pp": 100 * g * sd,
                                       "impact_se": 100 * se * sd, "n_rows_cut": len(sub)})
                    fits.append(fit)
    return fits


def deep_market_structure_se(panel: pd.DataFrame, score_step, bootstrap: Bootstrap,
                             **suite_kw) -> pd.DataFrame:
    """Market-structure SEs with the efficiency scores re-estimated on every resample.

    ``score_step(panel) -> (scores_dropped, scores_kept)`` is rerun on each bank
    resample (``numpy.random.default_rng([seed, b])``), so the SEs carry the
    sampling noise of the scores.  Returns one row per fit name with the
    bootstrap SEs of gamma and of the absolute impact, and the number of
    replicates that produced estimates.
    """
    def one(b):
        boot = resample_banks(panel, np.random.default_rng([bootstrap.seed, b]))
        try:
            dropped, kept = score_step(boot)
            fits = market_structure_suite(boot, dropped, kept, None, **suite_kw)
        except FxFrontierError:
            return None
        return {f.name: (f.extras["gamma"], f.extras["impact_pp"]) for f in fits}

    reps = range(bootstrap.replications)
    if bootstrap.threads > 1:
        with ThreadPoolExecutor(bootstrap.threads) as ex:
            draws = list(ex.map(one, reps))
    else:
        draws = [one(b) for b in reps]
    draws = [d for d in draws if d is not None]
    names = list(draws[0]) if draws else []
    rows = []
    for name in names:
        vals = np.array([d[name] for d in draws if name in d], float)
        ok = np.all(np.isfinite(vals), axis=1)
        sd = vals[ok].std(axis=0, ddof=1) if ok.sum() > 1 else np.full(2, np.nan)
        rows.append(dict(name=name, gamma_se=sd[0], impact_se=sd[1], replications_ok=int(ok.sum())))
    return pd.DataFrame(rows, columns=["name", "gamma_se", "impact_se", "replications_ok"])


STABILITY_DEPENDENTS = {
    "zscore": "zscore",
    "eq_ta": "equity_ratio",
    "roa": "roa",
    "sigma_roa": "sigma_roa",
    "ln_npl": "log(npl)",
}

STABILITY_CONTROLS = [
    "log(total_assets)", "diff(log(loans), 1)", "diff(log(loans), 1) * diff(log(loans), 1)",
    "liquidity_ratio", "foreign_assets_ratio", "foreign_liabilities_ratio", "gdp_growth_4q",
]


def stability_suite(panel: pd.DataFrame, measure: str = "revals", window: int = 4,
                    lag: int = 4, high_capital_threshold: float = 20.0,
                    cluster: str = "bank_id") -> list[RegressionFit]:
    """Stability measures on lagged Revals-/TC (``measure="revals"``) or net FX (``"netfx"``).

    For ``revals`` the key regressor is interacted with large foreign-asset and
    foreign-liability share dummies (above the sample mean); for ``netfx`` it is
    interacted with a high-capital dummy (equity ratio above the threshold).
    Linear combinations beta + gamma1 and beta + gamma1 + gamma2 (or
    phi + pi) are reported with delta-method SEs.  Bank fixed effects.
    """
    df = _with_derived(panel)
    comp = zscore(df, window, return_components=True)
    df["zscore"] = comp["zscore"].to_numpy()
    df["roa"] = comp["roa"].to_numpy()
    df["sigma_roa"] = comp["sigma_roa"].to_numpy()
    fa_mean = float(np.nanmean(df["foreign_assets_ratio"]))
    fl_mean = float(np.nanmean(df["foreign_liabilities_ratio"]))
    df["large_fa"] = (df["foreign_assets_ratio"] > fa_mean).astype(float)
    df["large_fl"] = (df["foreign_liabilities_ratio"] > fl_mean).astype(float)
    df["high_cap"] = (df["equity_ratio"] > high_capital_threshold).astype(float)
    if measure == "revals":
        key = f"lag(revals_share, {lag})"
        regs = [key, f"{key} * lag(large_fa, {lag})", f"{key} * lag(large_fl, {lag})",
                f"lag(large_fa, {lag})", f"lag(large_fl, {lag})"]
        combos = [{regs[0]: 1.0, regs[1]: 1.0}, {regs[0]: 1.0, regs[1]: 1.0, regs[2]: 1.0}]
    elif measure == "netfx":
        key = f"lag(100 * net_fx_position, {lag})"
        regs = [key, f"{key} * lag(high_cap, {lag})", f"lag(high_cap, {lag})"]
        combos = [{regs[0]: 1.0, regs[1]: 1.0}]
    else:
        raise ValueError("measure must be 'revals' or 'netfx'")
    fits = []
    for name, dep in STABILITY_DEPENDENTS.items():
        spec = RegressionSpec(dependent=dep, regressors=regs + list(STABILITY_CONTROLS),
                              fixed_effects=("bank",), cluster=cluster, combinations=combos,
                              name=f"stability:{measure}:{name}")
        fits.append(_fit_dropping_collinear(df, spec))
    return fits


def fits_to_long(fits: Sequence[RegressionFit], suite: str) -> pd.DataFrame:
    rows = []
    for f in fits:
        labels = f.extras.get("labels", {})
        for n, b, s in zip(f.names, f.coefficients, f.se):
            p = f.pvalue(n)
            rows.append({"suite": suite, "model": f.name, "coefficient": labels.get(n, n),
                         "estimate": float(b), "se": float(s), "stars": stars(p)})
        for lc in f.linear_combination_tests:
            p = 2 * stats.t.sf(abs(lc.t), max(f.n_clusters - 1, 1)) if lc.se > 0 else math.nan
            label = " + ".join(labels.get(k, k) for k in lc.weights)
            rows.append({"suite": suite, "model": f.name, "coefficient": f"lincom: {label}",
                         "estimate": lc.estimate, "se": lc.se, "stars": stars(p)})
        if "impact_pp" in f.extras:
            p = 2 * stats.norm.sf(abs(f.extras["impact_pp"] / f.extras["impact_se"]))
            rows.append({"suite": suite, "model": f.name, "coefficient": "absolute_impact_pp",
                         "estimate": f.extras["impact_pp"], "se": f.extras["impact_se"],
                         "stars": stars(p)})
    return pd.DataFrame(rows, columns=["suite", "model", "coefficient", "estimate", "se", "stars"])
