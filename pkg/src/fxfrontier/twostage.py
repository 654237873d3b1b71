"""Counterfactual currency-adjusted efficiency when revaluations are unobserved.

Stage one removes the exchange-rate driven part of operating costs with a
bank fixed-effects regression on lags of an NER regressor.  Stage two fits an
FX-augmented translog frontier (FX and rouble loans as separate outputs, NER
in the log block) with FX-sensitive inefficiency covariates.  Partial and
combined variants are provided for comparison with the kept (OC) and
dropped (CAOC) benchmarks.
"""
from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from . import garch, kernels
from .errors import (CollinearRegressors, DidNotConverge, InsufficientLags, NonPositiveValue,
                     RankDeficientDesign)
from .paneldata import resample_banks
from .panelreg import demean
from .sfa import (DEFAULT_Z, InefficiencySpec, SfaFit, SfaOptions, build_z, constant_covariates,
                  efficiency_scores, fit_frontier)
from .sfa import residuals as sfa_residuals
from .translog import FrontierSpec, build_design


class NerRegressor(str, enum.Enum):
    LOG_LEVEL = "log_level"
    GARCH_VOLATILITY = "garch_volatility"


class Variant(str, enum.Enum):
    KEPT = "kept"
    FIRST_ONLY = "first_only"
    SECOND_ONLY = "second_only"
    ONE_STAGE = "one_stage_combined"
    BOTH = "both_stages"
    DROPPED = "dropped"


VARIANT_ORDER = [Variant.KEPT, Variant.FIRST_ONLY, Variant.SECOND_ONLY, Variant.ONE_STAGE,
                Variant.BOTH, Variant.DROPPED]

FX_Z = ["fx_loans_ratio", "d4_ln_ner", "fx_loans_ratio_x_d4_ln_ner"]

# inefficiency-mean terms netted out of the currency-adjusted scores
SCORE_ADJUSTMENTS = {
    "none": [],
    "fx_exposure": ["fx_loans_ratio", "fx_loans_ratio_x_d4_ln_ner"],
    "fx_all": list(FX_Z),
}


@dataclass
class TwoStageConfig:
    ner_regressor: NerRegressor = NerRegressor.GARCH_VOLATILITY
    lags: int = 2
    variant: Variant = Variant.BOTH
    zero_fx_policy: str = "offset"  # offset | drop
    fx_offset: float = 1.0
    score_adjustment: str = "fx_exposure"  # none | fx_exposure | fx_all
    base_covariates: list[str] = field(default_factory=lambda: list(DEFAULT_Z))
    frontier: FrontierSpec = field(default_factory=FrontierSpec)
    sfa: SfaOptions = field(default_factory=SfaOptions)

    def __post_init__(self):
        self.ner_regressor = NerRegressor(self.ner_regressor)
        self.variant = Variant(self.variant)
        if not 0 <= int(self.lags) <= 4:
            raise ValueError("lags must be between 0 and 4")
        if self.zero_fx_policy not in ("offset", "drop"):
            raise ValueError("zero_fx_policy must be 'offset' or 'drop'")
        if self.score_adjustment not in SCORE_ADJUSTMENTS:
            raise ValueError(f"score_adjustment must be one of {sorted(SCORE_ADJUSTMENTS)}")
        if not self.fx_offset > 0:
            raise ValueError("fx_offset must be positive")


@dataclass
class StageOneFit:
    beta_k: np.ndarray
    names: list[str]
    se: np.ndarray
    bank_fe: pd.Series
    r2_within: float
    purged_log_costs: np.ndarray
    log_costs: np.ndarray
    ner_terms: np.ndarray
    controls: dict[str, float] = field(default_factory=dict)
    regressor: str = NerRegressor.GARCH_VOLATILITY.value


# -- NER inputs ------------------------------------------------------------------------

def quarterly_ner(weekly: pd.DataFrame, fit: garch.GarchFit | None = None,
                  with_volatility: bool = True) -> pd.DataFrame:
    """Quarter-end NER levels, ln NER, four-quarter log change and GARCH volatility."""
    q = weekly.groupby("quarter", sort=True)["exchange_rate"].last()
    out = pd.DataFrame({"quarter": q.index.to_numpy(np.int64), "ner": q.to_numpy(float)})
    out["ln_ner"] = np.log(out["ner"])
    out["d4_ln_ner"] = out["ln_ner"].diff(4)
    if with_volatility:
        vol = garch.quarterly_volatility(weekly, fit)
        out = out.merge(vol, on="quarter", how="left")
    return out


def _ner_lookup(ner_q: pd.DataFrame, column: str, quarters: np.ndarray) -> np.ndarray:
    s = pd.Series(ner_q[column].to_numpy(float), index=ner_q["quarter"].to_numpy(np.int64))
    return s.reindex(quarters).to_numpy(float)


def _regressor_column(config: TwoStageConfig) -> str:
    return "ln_ner" if config.ner_regressor == NerRegressor.LOG_LEVEL else "volatility"


def ner_lag_matrix(panel: pd.DataFrame, ner_q: pd.DataFrame, config: TwoStageConfig) -> np.ndarray:
    col = _regressor_column(config)
    if col not in ner_q.columns:
        raise ValueError(f"NER series lacks column {col!r}")
    q = panel["quarter"].to_numpy(np.int64)
    K = int(config.lags)
    X = np.column_stack([_ner_lookup(ner_q, col, q - k) for k in range(K + 1)])
    if not np.all(np.isfinite(X)):
        missing = sorted({int(v) for v in (q[:, None] - np.arange(K + 1))[~np.isfinite(X)]})
        raise InsufficientLags(f"NER series lacks quarters {missing[:5]} needed for {K} lags")
    return X


def operating_costs(panel: pd.DataFrame) -> np.ndarray:
    oc = panel["total_costs"].to_numpy(float) - panel["interest_expenses"].to_numpy(float)
    bad = ~(oc > 0)
    if bad.any():
        raise NonPositiveValue("operating_costs", int(np.flatnonzero(bad)[0]))
    return oc


# -- stage one -------------------------------------------------------------------------

def stage_one(panel: pd.DataFrame, ner_q: pd.DataFrame, config: TwoStageConfig | None = None
              ) -> StageOneFit:
    """Within regression of ln OC on NER lags, ln TA and a quadratic trend.

    Purged costs are ``ln OC - sum_k beta_k X[t-k]``; bank effects, the size
    control and the trend stay in them.
    """
    config = config or TwoStageConfig()
    X_ner = ner_lag_matrix(panel, ner_q, config)
    K = X_ner.shape[1]
    ln_oc = np.log(operating_costs(panel))
    q = panel["quarter"].to_numpy(np.int64)
    t = (q - q.min()) / max(float(q.max() - q.min()), 1.0)
    ln_ta = np.log(panel["total_assets"].to_numpy(float))
    X = np.column_stack([X_ner, ln_ta, t, 0.5 * t * t])
    names = [f"ner_lag{k}" for k in range(K)] + ["ln_total_assets", "t", "0.5*t^2"]
    bank = panel["bank_id"].astype(str).to_numpy()
    D = demean(np.column_stack([ln_oc, X]), [bank])
    yd, Xd = D[:, 0], D[:, 1:]

    scale = np.sqrt((X * X).mean(axis=0))
    scale[scale == 0] = 1.0
    from scipy import linalg
    _, R, piv = linalg.qr(Xd / scale, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > 1e-9 * math.sqrt(len(yd))))
    if rank < X.shape[1]:
        raise CollinearRegressors([names[i] for i in sorted(piv[rank:])])

    coef, *_ = np.linalg.lstsq(Xd, yd, rcond=None)
    resid = yd - Xd @ coef
    XtX_inv = np.linalg.inv(Xd.T @ Xd)
    codes, uniq = pd.factorize(bank, sort=True)
    G = len(uniq)
    Ug = np.zeros((G, X.shape[1]))
    np.add.at(Ug, codes, Xd * resid[:, None])
    n, k = Xd.shape
    adj = G / (G - 1) * (n - 1) / (n - k) if G > 1 else 1.0
    cov = XtX_inv @ (Ug.T @ Ug) @ XtX_inv * adj
    se = np.sqrt(np.clip(np.diag(cov), 0, None))

    fe = pd.Series(ln_oc - X @ coef).groupby(bank).mean()
    beta_k = coef[:K]
    ner_terms = X_ner @ beta_k
    tss = float(yd @ yd)
    return StageOneFit(
        beta_k=beta_k, names=names, se=se, bank_fe=fe,
        r2_within=1.0 - float(resid @ resid) / tss if tss > 0 else math.nan,
        purged_log_costs=ln_oc - ner_terms, log_costs=ln_oc, ner_terms=ner_terms,
        controls=dict(zip(names[K:], coef[K:].tolist())),
        regressor=config.ner_regressor.value,
    )


# -- stage two -------------------------------------------------------------------------

def augmented_spec(base: FrontierSpec) -> FrontierSpec:
    """The FX-augmented frontier: split loans and ln NER in the log block."""
    extra = list(base.extra_log_variables)
    if "ner" not in extra:
        extra.append("ner")
    return dataclasses.replace(base, split_fx_loans=True, extra_log_variables=extra)


def _stage_two_frame(panel: pd.DataFrame, ner_q: pd.DataFrame, config: TwoStageConfig):
    """Panel with NER columns and the zero-FX rule applied; returns (frame, keep mask)."""
    df = panel.copy()
    q = df["quarter"].to_numpy(np.int64)
    df["ner"] = _ner_lookup(ner_q, "ner", q)
    df["d4_ln_ner"] = _ner_lookup(ner_q, "d4_ln_ner", q)
    fx = df["fx_loans"].to_numpy(float)
    keep = np.ones(len(df), dtype=bool)
    if config.zero_fx_policy == "offset":
        df["fx_loans"] = fx + config.fx_offset
    else:
        keep &= fx > 0
    rub = df["rub_loans"].to_numpy(float)
    if config.zero_fx_policy == "offset":
        df["rub_loans"] = rub + config.fx_offset
    else:
        keep &= rub > 0
    ratio = 100.0 * fx / df["total_assets"].to_numpy(float)
    df["fx_loans_ratio"] = ratio
    df["fx_loans_ratio_x_d4_ln_ner"] = ratio * df["d4_ln_ner"].to_numpy(float)
    keep &= np.isfinite(df["ner"].to_numpy(float)) & np.isfinite(df["d4_ln_ner"].to_numpy(float))
    return df, keep


def _nondegenerate(df: pd.DataFrame, cols: Sequence[str]) -> tuple[list[str], list[str]]:
    dropped = constant_covariates(build_z(df, InefficiencySpec(covariates=list(cols))))
    return [c for c in cols if c not in dropped], dropped


@dataclass
class VariantResult:
    variant: Variant
    fit: SfaFit
    scores: pd.DataFrame
    stage_one: StageOneFit | None = None
    dropped_covariates: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def stage_two(purged: StageOneFit | None, panel: pd.DataFrame, ner_q: pd.DataFrame,
              config: TwoStageConfig | None = None, *, log_costs: np.ndarray | None = None,
              linear_extra: dict[str, np.ndarray] | None = None) -> VariantResult:
    """FX-augmented frontier with FX-sensitive inefficiency mean.

    The inefficiency mean adds the FX loan ratio (percent of assets), the
    four-quarter log NER change and their product to the base covariates.
    Covariates without variation in the sample are dropped and listed.
    """
    config = config or TwoStageConfig()
    df, keep = _stage_two_frame(panel, ner_q, config)
    if log_costs is None:
        log_costs = purged.purged_log_costs if purged is not None else np.log(operating_costs(panel))
    log_costs = np.asarray(log_costs, float)
    if linear_extra:
        for k, v in linear_extra.items():
            df[k] = v
    spec = augmented_spec(config.frontier)
    no_fx = not np.any(panel["fx_loans"].to_numpy(float)[keep] > 0)
    if no_fx:
        # nothing to split: total loans stay a single output
        spec = dataclasses.replace(spec, split_fx_loans=False)
    if linear_extra:
        spec = dataclasses.replace(spec, risk_covariates=list(spec.risk_covariates) + list(linear_extra))
    zcols, dropped = _nondegenerate(df[keep], list(config.base_covariates) + FX_Z)
    sub = df[keep].reset_index(drop=True)
    design = build_design(sub, spec, log_cost=log_costs[keep])
    z = build_z(sub, InefficiencySpec(covariates=zcols))
    fit = fit_frontier(design, z, config.sfa)
    scores = adjusted_scores(fit, design, z, SCORE_ADJUSTMENTS[config.score_adjustment],
                             require_converged=config.sfa.raise_on_fail)
    meta = {"score_adjustment": config.score_adjustment, "zero_fx_policy": config.zero_fx_policy,
            "fx_offset": config.fx_offset if config.zero_fx_policy == "offset" else None,
            "rows_dropped": int((~keep).sum()), "split_fx_loans": spec.split_fx_loans}
    return VariantResult(config.variant, fit, scores, purged, dropped, meta)


def adjusted_scores(fit: SfaFit, design, z, remove: Sequence[str],
                    require_converged: bool = True) -> pd.DataFrame:
    """Scores with the named inefficiency-mean terms treated as cost rather than inefficiency.

    With ``c`` the fitted contribution of the removed covariates, both the
    composed residual and the pre-truncation mean are shifted by ``-c`` before
    the conditional expectation is taken.  The unadjusted score is kept in
    ``ce_unadjusted``.
    """
    base = efficiency_scores(fit, design, z, require_converged)
    idx = [fit.z_names.index(n) for n in remove if n in fit.z_names]
    if not idx:
        base["ce_unadjusted"] = base["ce"]
        return base
    eps, mu = sfa_residuals(fit, design, z)
    c = z.full[:, idx] @ fit.delta[idx]
    log_ce, u_hat = kernels.bc_scores(eps - c, mu - c, fit.sigma_u ** 2, fit.sigma_v ** 2)
    out = base.copy()
    out["ce_unadjusted"] = base["ce"]
    out["ce"] = np.minimum(np.exp(log_ce), 1.0)
    out["u_hat"] = u_hat
    out["log_ce"] = log_ce
    return out


def _plain(panel: pd.DataFrame, config: TwoStageConfig, *, log_costs=None, cost_choice="oc"):
    zcols, dropped = _nondegenerate(panel, config.base_covariates)
    design = build_design(panel, config.frontier, cost_choice, log_cost=log_costs)
    z = build_z(panel, InefficiencySpec(covariates=zcols))
    fit = fit_frontier(design, z, config.sfa)
    return fit, efficiency_scores(fit, design, z, config.sfa.raise_on_fail), dropped


def kept_dropped_scores(panel: pd.DataFrame, config: TwoStageConfig | None = None
                        ) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Plain-frontier scores on CAOC (dropped) and OC (kept), in that order."""
    config = config or TwoStageConfig()
    panel = panel.reset_index(drop=True)
    return (_plain(panel, config, cost_choice="caoc")[1], _plain(panel, config, cost_choice="oc")[1])


def run_variant(panel: pd.DataFrame, ner_q: pd.DataFrame, config: TwoStageConfig | None = None
                ) -> VariantResult:
    """Run one pipeline variant and return its fit and scores.

    ``kept`` and ``dropped`` are the plain frontier on OC and on CAOC.
    ``first_only`` fits the plain frontier on purged costs, ``second_only``
    the augmented frontier on raw OC, ``both_stages`` the augmented frontier
    on purged costs, and ``one_stage_combined`` enters the stage-one NER lags
    as linear frontier terms of the augmented model on raw OC.
    """
    config = config or TwoStageConfig()
    v = config.variant
    panel = panel.reset_index(drop=True)
    if v in (Variant.KEPT, Variant.DROPPED):
        fit, scores, dropped = _plain(panel, config, cost_choice="oc" if v == Variant.KEPT else "caoc")
        return VariantResult(v, fit, scores, None, dropped)
    if v == Variant.FIRST_ONLY:
        s1 = stage_one(panel, ner_q, config)
        fit, scores, dropped = _plain(panel, config, log_costs=s1.purged_log_costs)
        return VariantResult(v, fit, scores, s1, dropped)
    if v == Variant.SECOND_ONLY:
        return stage_two(None, panel, ner_q, config)
    if v == Variant.BOTH:
        s1 = stage_one(panel, ner_q, config)
        return stage_two(s1, panel, ner_q, config)
    if v == Variant.ONE_STAGE:
        X = ner_lag_matrix(panel, ner_q, config)
        extra = {f"ner_lag{k}": X[:, k] for k in range(X.shape[1])}
        return stage_two(None, panel, ner_q, config, linear_extra=extra)
    raise ValueError(f"unknown variant {v!r}")


def common_sample(panel: pd.DataFrame, ner_q: pd.DataFrame, config: TwoStageConfig) -> pd.DataFrame:
    """Rows usable by every variant, so that all of them are compared on one sample."""
    keep = np.ones(len(panel), dtype=bool)
    col = _regressor_column(config)
    q = panel["quarter"].to_numpy(np.int64)
    for k in range(int(config.lags) + 1):
        keep &= np.isfinite(_ner_lookup(ner_q, col, q - k))
    _, k2 = _stage_two_frame(panel, ner_q, config)
    keep &= k2
    return panel[keep].reset_index(drop=True)


def run_all(panel: pd.DataFrame, ner_q: pd.DataFrame, config: TwoStageConfig | None = None,
            variants: Sequence[Variant] = tuple(VARIANT_ORDER)) -> dict[Variant, VariantResult]:
    config = config or TwoStageConfig()
    sample = common_sample(panel, ner_q, config)
    out = {}
    for v in variants:
        out[Variant(v)] = run_variant(sample, ner_q, dataclasses.replace(config, variant=Variant(v)))
    return out


@dataclass
class PipelineBootstrap:
    """Bank-cluster bootstrap of a whole variant, stage one included."""

    draws: pd.DataFrame
    se: pd.Series
    n_failed: int
    replications: int
    seed: int


def bootstrap_variant(panel: pd.DataFrame, ner_q: pd.DataFrame, config: TwoStageConfig | None = None,
                      replications: int = 100, seed: int = 0) -> PipelineBootstrap:
    """Standard errors that carry the generated-regressor noise of stage one.

    Replicate ``b`` resamples banks with ``numpy.random.default_rng([seed, b])``
    and reruns the variant on the common sample.  Each draw records the
    stage-two parameters and the mean score; replicates that fail to fit are
    counted and skipped.
    """
    config = config or TwoStageConfig()
    sample = common_sample(panel, ner_q, config)
    rows, failed = [], 0
    for b in range(replications):
        boot = resample_banks(sample, np.random.default_rng([seed, b]))
        try:
            res = run_variant(boot, ner_q, config)
        except (DidNotConverge, CollinearRegressors, RankDeficientDesign):
            failed += 1
            continue
        rows.append(dict(res.fit.params(), mean_ce=float(res.scores["ce"].mean())))
    draws = pd.DataFrame(rows)
    se = draws.std(ddof=1) if len(draws) > 1 else pd.Series(np.nan, index=draws.columns)
    return PipelineBootstrap(draws, se, failed, replications, seed)


def variant_summary(results: dict[Variant, VariantResult]) -> pd.DataFrame:
    """Summary of CE per variant (percent): variant, n_obs, mean, sd, min, max."""
    rows = []
    for v in VARIANT_ORDER:
        if v not in results:
            continue
        ce = 100.0 * results[v].scores["ce"].to_numpy(float)
        rows.append({"variant": v.value, "n_obs": int(ce.size), "mean": float(ce.mean()),
                     "sd": float(ce.std(ddof=1)), "min": float(ce.min()), "max": float(ce.max())})
    return pd.DataFrame(rows, columns=["variant", "n_obs", "mean", "sd", "min", "max"])


def closure(results: dict[Variant, VariantResult], variant: Variant = Variant.BOTH) -> float:
    """Share of the kept-to-dropped gap in mean CE closed by ``variant``."""
    m = {v: float(r.scores["ce"].mean()) for v, r in results.items()}
    gap = m[Variant.DROPPED] - m[Variant.KEPT]
    return (m[variant] - m[Variant.KEPT]) / gap if gap != 0 else math.nan
