import dataclasses

import numpy as np
import pandas as pd
import pytest

from fxfrontier import paneldata, synth
from fxfrontier import twostage as ts
from fxfrontier.errors import CollinearRegressors, InsufficientLags

NO_FX = synth.FxStructure(**{k: 0.0 for k in (
    "fx_loan_share_mean", "fx_loan_share_sd", "foreign_fx_loan_share_mean", "shock_sd",
    "foreign_assets_mean", "foreign_assets_sd", "foreign_bank_foreign_assets_mean",
    "net_fx_mean", "net_fx_sd", "net_fx_noise_sd")})

LOOSE = ts.TwoStageConfig(sfa=ts.SfaOptions(raise_on_fail=False))


@pytest.fixture(scope="module")
def no_fx_world():
    """No FX balance sheet at all: zero FX loans and no revaluations."""
    panel, truth = synth.generate(synth.SynthConfig(seed=0, n_banks=80, n_quarters=32, fx=NO_FX))
    return panel, ts.quarterly_ner(truth.ner_weekly)


@pytest.fixture(scope="module")
def no_fx_results(no_fx_world):
    panel, nq = no_fx_world
    return ts.run_all(panel, nq, LOOSE)


def _pass_through_panel(panel, nq, coef, column="ln_ner", rng=None):
    """Replace operating costs by exp(bank effect + coef * NER column + noise)."""
    rng = rng or np.random.default_rng(0)
    x = ts._ner_lookup(nq, column, panel["quarter"].to_numpy(np.int64))
    codes, uniq = pd.factorize(panel["bank_id"], sort=True)
    alpha = rng.normal(3.0, 0.5, len(uniq))[codes]
    oc = np.exp(alpha + coef * x + 0.05 * rng.standard_normal(len(panel)))
    return panel.assign(total_costs=panel["interest_expenses"] + oc,
                        revals_neg=0.0, revals_pos=0.0)


# -- configuration and inputs ----------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        ts.TwoStageConfig(lags=5)
    with pytest.raises(ValueError):
        ts.TwoStageConfig(zero_fx_policy="impute")
    with pytest.raises(ValueError):
        ts.TwoStageConfig(score_adjustment="bogus")
    assert ts.TwoStageConfig(variant="first_only").variant is ts.Variant.FIRST_ONLY


def test_quarterly_ner_columns(default_synth):
    _, truth = default_synth
    nq = ts.quarterly_ner(truth.ner_weekly)
    assert {"quarter", "ner", "ln_ner", "d4_ln_ner", "volatility"} <= set(nq.columns)
    assert np.allclose(nq["ln_ner"].diff(4).dropna(), nq["d4_ln_ner"].dropna())
    assert np.all(nq["volatility"].dropna() > 0)


def test_insufficient_lags(default_synth):
    panel, truth = default_synth
    nq = ts.quarterly_ner(truth.ner_weekly)
    short = nq[nq["quarter"] >= panel["quarter"].min()]
    with pytest.raises(InsufficientLags):
        ts.ner_lag_matrix(panel, short, ts.TwoStageConfig(lags=2))


# -- stage one -------------------------------------------------------------------------

def test_stage_one_recovers_pass_through(default_synth):
    panel, truth = default_synth
    nq = ts.quarterly_ner(truth.ner_weekly)
    sub = panel[panel["bank_id"] < "B0060"].reset_index(drop=True)
    costed = _pass_through_panel(sub, nq, 1.4)
    s1 = ts.stage_one(costed, nq, ts.TwoStageConfig(ner_regressor="log_level", lags=0))
    assert abs(s1.beta_k[0] - 1.4) < 3 * s1.se[0]
    assert s1.names[0] == "ner_lag0" and s1.regressor == "log_level"


def test_purged_costs_identity(default_synth):
    panel, truth = default_synth
    nq = ts.quarterly_ner(truth.ner_weekly)
    s1 = ts.stage_one(panel, nq, ts.TwoStageConfig(lags=2))
    np.testing.assert_allclose(s1.purged_log_costs + s1.ner_terms, s1.log_costs, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(s1.log_costs, np.log(ts.operating_costs(panel)))
    X = ts.ner_lag_matrix(panel, nq, ts.TwoStageConfig(lags=2))
    np.testing.assert_allclose(s1.ner_terms, X @ s1.beta_k, rtol=1e-14)


def test_constant_ner_is_collinear(default_synth):
    panel, truth = default_synth
    nq = ts.quarterly_ner(truth.ner_weekly).assign(ln_ner=np.log(30.0), volatility=1.0)
    for reg in ("log_level", "garch_volatility"):
        with pytest.raises(CollinearRegressors):
            ts.stage_one(panel, nq, ts.TwoStageConfig(ner_regressor=reg, lags=1))


# -- stage two and variants ------------------------------------------------------------

def test_zero_fx_drops_exposure_terms(no_fx_results):
    r = no_fx_results[ts.Variant.BOTH]
    assert r.meta["split_fx_loans"] is False
    assert {"fx_loans_ratio", "fx_loans_ratio_x_d4_ln_ner"} <= set(r.dropped_covariates)
    assert "fx_loans_ratio" not in r.fit.z_names
    assert "d4_ln_ner" in r.fit.z_names
    assert not any("fx_loans" in n for n in r.fit.frontier_names)
    assert "ln_loans" in r.fit.frontier_names and "ln_ner" in r.fit.frontier_names


def test_no_revaluations_all_variants_agree(no_fx_results):
    means = ts.variant_summary(no_fx_results).set_index("variant")["mean"]
    assert len(means) == 6
    assert means.max() - means.min() < 2.0


def test_null_ner_terms_within_three_se(no_fx_results):
    fit = no_fx_results[ts.Variant.SECOND_ONLY].fit
    est, se = fit.params(), fit.standard_errors()
    ner_terms = [k for k in est if k.startswith("beta:") and "ner" in k]
    assert len(ner_terms) == 6
    for k in ner_terms:
        assert abs(est[k]) < 3 * se[k], k


def test_first_only_closes_gap_without_fx_heterogeneity(no_fx_world):
    # revaluations proportional to costs, identical across banks, driven by NER volatility
    panel, nq = no_fx_world
    vol = ts._ner_lookup(nq, "volatility", panel["quarter"].to_numpy(np.int64))
    caoc = (panel["total_costs"] - panel["interest_expenses"]).to_numpy()
    kappa = np.log(1.4) / np.nanmean(vol)
    rv = caoc * np.expm1(kappa * vol)
    world = panel.assign(revals_neg=rv, total_costs=panel["total_costs"] + rv)
    cfg = dataclasses.replace(LOOSE, lags=0)
    res = ts.run_all(world, nq, cfg, variants=[ts.Variant.KEPT, ts.Variant.FIRST_ONLY, ts.Variant.DROPPED])
    m = ts.variant_summary(res).set_index("variant")["mean"]
    assert m["dropped"] - m["kept"] > 1.0
    assert ts.closure(res, ts.Variant.FIRST_ONLY) > 0.5
    assert res[ts.Variant.FIRST_ONLY].stage_one.beta_k[0] == pytest.approx(kappa, rel=0.1)


def test_variants_deterministic():
    panel, truth = synth.generate(synth.SynthConfig(seed=3, n_banks=30, n_quarters=16))
    nq = ts.quarterly_ner(truth.ner_weekly)
    cfg = dataclasses.replace(LOOSE, variant=ts.Variant.BOTH)
    sample = ts.common_sample(panel, nq, cfg)
    a = ts.run_variant(sample, nq, cfg)
    b = ts.run_variant(sample, nq, cfg)
    pd.testing.assert_frame_equal(a.scores, b.scores)
    assert np.array_equal(a.fit.theta, b.fit.theta)


def test_adjusted_scores_bounds(no_fx_results):
    for r in no_fx_results.values():
        ce = r.scores["ce"].to_numpy()
        assert np.all((ce > 0) & (ce <= 1))


def test_variant_summary_shape(no_fx_results):
    t = ts.variant_summary(no_fx_results)
    assert list(t.columns) == ["variant", "n_obs", "mean", "sd", "min", "max"]
    assert list(t["variant"]) == [v.value for v in ts.VARIANT_ORDER]
    assert t["n_obs"].nunique() == 1


def test_zero_fx_drop_policy(default_synth):
    panel, truth = default_synth
    nq = ts.quarterly_ner(truth.ner_weekly)
    sub = panel[panel["bank_id"] < "B0010"].reset_index(drop=True)
    sub.loc[:5, "rub_loans"] += sub.loc[:5, "fx_loans"]
    sub.loc[:5, "fx_loans"] = 0.0
    df, keep = ts._stage_two_frame(sub, nq, ts.TwoStageConfig(zero_fx_policy="drop"))
    assert not keep[:6].any()
    df, keep = ts._stage_two_frame(sub, nq, ts.TwoStageConfig(zero_fx_policy="offset", fx_offset=2.0))
    assert keep[:6].all() and np.all(df["fx_loans"].to_numpy()[:6] == 2.0)


@pytest.mark.slow
def test_fx_exposure_signs_monte_carlo():
    # large exposure effects; stage two on perfectly purged costs
    delta = dict(synth.Inefficiency().delta)
    delta.update({"fx_loans_ratio": 0.026, "fx_loans_ratio_x_d4_ln_ner": 0.018})
    hits_a1 = hits_a3 = 0
    n_rep = 100
    for seed in range(n_rep):
        cfg = synth.SynthConfig(seed=1000 + seed, n_banks=100, n_quarters=40,
                                inefficiency=synth.Inefficiency(delta=delta))
        panel, truth = synth.generate(cfg)
        nq = ts.quarterly_ner(truth.ner_weekly)
        sample = ts.common_sample(panel, nq, LOOSE)
        purged = np.log(paneldata.cost_measures(sample)["caoc"].to_numpy())
        fit = ts.stage_two(None, sample, nq, LOOSE, log_costs=purged).fit
        est = fit.params()
        hits_a1 += est["delta:fx_loans_ratio"] > 0
        hits_a3 += est["delta:fx_loans_ratio_x_d4_ln_ner"] > 0
    assert hits_a1 >= 0.95 * n_rep
    assert hits_a3 >= 0.95 * n_rep


def test_pipeline_bootstrap_deterministic():
    panel, truth = synth.generate(synth.SynthConfig(seed=3, n_banks=30, n_quarters=16))
    nq = ts.quarterly_ner(truth.ner_weekly)
    cfg = dataclasses.replace(LOOSE, sfa=ts.SfaOptions(raise_on_fail=False, n_starts=2))
    a = ts.bootstrap_variant(panel, nq, cfg, replications=6, seed=2)
    b = ts.bootstrap_variant(panel, nq, cfg, replications=6, seed=2)
    pd.testing.assert_frame_equal(a.draws, b.draws)
    assert a.n_failed + len(a.draws) == 6
    assert a.se["mean_ce"] > 0 and "delta:fx_loans_ratio" in a.se
