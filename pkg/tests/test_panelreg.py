import warnings

import numpy as np
import pandas as pd
import pytest

from fxfrontier import panelreg as pr
from fxfrontier.errors import Collinear, InsufficientHistory, WeakInstrumentWarning


def toy_panel(n_banks=20, n_quarters=8, seed=0):
    r = np.random.default_rng(seed)
    bank = np.repeat([f"b{i:02d}" for i in range(n_banks)], n_quarters)
    quarter = np.tile(8000 + np.arange(n_quarters), n_banks)
    a = np.repeat(r.normal(size=n_banks), n_quarters)
    t = np.tile(r.normal(size=n_quarters), n_banks)
    x1 = r.normal(size=bank.size) + a
    x2 = r.normal(size=bank.size) - t
    y = 1.5 * x1 - 0.7 * x2 + 2 * a + t + r.normal(size=bank.size)
    return pd.DataFrame({"bank_id": bank, "quarter": quarter, "x1": x1, "x2": x2, "y": y,
                         "row_id": np.arange(bank.size)})


def _dummy_ols(df, y, xs, fe=("bank", "quarter")):
    cols = [df[x].to_numpy(float) for x in xs]
    D = []
    if "bank" in fe:
        D.append(pd.get_dummies(df["bank_id"]).to_numpy(float))
    if "quarter" in fe:
        D.append(pd.get_dummies(df["quarter"]).to_numpy(float)[:, 1:])
    X = np.column_stack(cols + D)
    coef = np.linalg.solve(X.T @ X, X.T @ df[y].to_numpy(float))
    return coef[:len(xs)], X


# -- estimator core -------------------------------------------------------------------

def test_two_by_three_matches_dummy_ols():
    df = toy_panel(2, 3, seed=1)
    fit = pr.fit_fe(df, pr.RegressionSpec("y", ["x1"], cluster=None))
    ref, _ = _dummy_ols(df, "y", ["x1"])
    np.testing.assert_allclose(fit.coefficients, ref, rtol=0, atol=1e-10)


def test_two_way_matches_dummy_ols_larger():
    df = toy_panel(15, 7, seed=2).sample(frac=0.85, random_state=0).sort_index()
    fit = pr.fit_fe(df, pr.RegressionSpec("y", ["x1", "x2"]))
    ref, _ = _dummy_ols(fit_sample(df, fit), "y", ["x1", "x2"])
    np.testing.assert_allclose(fit.coefficients, ref, rtol=0, atol=1e-10)


def fit_sample(df, fit):
    return df[fit.sample_mask]


def test_cluster_se_matches_manual_sandwich():
    df = toy_panel(12, 6, seed=3)
    fit = pr.fit_fe(df, pr.RegressionSpec("y", ["x1", "x2"], fixed_effects=("bank",)))
    coef, X = _dummy_ols(df, "y", ["x1", "x2"], fe=("bank",))
    full = np.linalg.solve(X.T @ X, X.T @ df["y"].to_numpy())
    e = df["y"].to_numpy() - X @ full
    Xd = pr.demean(df[["x1", "x2"]].to_numpy(), [df["bank_id"].to_numpy()])
    bread = np.linalg.inv(Xd.T @ Xd)
    G, n, k = 12, len(df), 2
    meat = sum(np.outer(Xd[m].T @ e[m], Xd[m].T @ e[m]) for m in
               [df["bank_id"].to_numpy() == b for b in df["bank_id"].unique()])
    cov = bread @ meat @ bread * G / (G - 1) * (n - 1) / (n - k)
    np.testing.assert_allclose(fit.cov, cov, rtol=1e-10)


def test_singleton_clusters_equal_robust():
    df = toy_panel(10, 6, seed=4)
    a = pr.fit_fe(df, pr.RegressionSpec("y", ["x1", "x2"], cluster="row_id"))
    b = pr.fit_fe(df, pr.RegressionSpec("y", ["x1", "x2"], cluster=None))
    np.testing.assert_allclose(a.cov, b.cov, rtol=1e-12)
    assert a.n_clusters == a.n_obs


def test_constant_within_bank_is_collinear():
    df = toy_panel(10, 5)
    df["size"] = df["bank_id"].str[1:].astype(float)
    with pytest.raises(Collinear) as exc:
        pr.fit_fe(df, pr.RegressionSpec("y", ["x1", "size"]))
    assert exc.value.columns == ["size"]


def test_fe_shift_invariance():
    df = toy_panel(12, 6, seed=5)
    base = pr.fit_fe(df, pr.RegressionSpec("y", ["x1", "x2"]))
    shifted = df.copy()
    r = np.random.default_rng(0)
    shifted["x1"] += shifted["bank_id"].map(dict(zip(df.bank_id.unique(), r.normal(size=12) * 10)))
    shifted["x1"] += shifted["quarter"].map(dict(zip(df.quarter.unique(), r.normal(size=6) * 10)))
    moved = pr.fit_fe(shifted, pr.RegressionSpec("y", ["x1", "x2"]))
    np.testing.assert_allclose(moved.coefficients, base.coefficients, rtol=0, atol=1e-9)


def test_standardization_bookkeeping():
    df = toy_panel(12, 6, seed=6)
    raw = pr.fit_fe(df, pr.RegressionSpec("y", ["x1", "x2"]))
    std = pr.fit_fe(df, pr.RegressionSpec("y", ["x1", "x2"], standardize=True))
    sy = df["y"].std(ddof=1)
    for x in ("x1", "x2"):
        assert std.coef(x) == pytest.approx(raw.coef(x) * df[x].std(ddof=1) / sy, abs=1e-10)


def test_listwise_deletion_and_lags():
    df = toy_panel(6, 5, seed=7)
    fit = pr.fit_fe(df, pr.RegressionSpec("y", ["lag(x1, 1)"], fixed_effects=("bank",)))
    assert fit.n_obs == 6 * 4 and fit.n_dropped == 6
    gap = df.drop(index=[2]).reset_index(drop=True)
    lagged = pr.evaluate(gap, ["lag(x1, 1)"])[:, 0]
    assert np.isnan(lagged[2])  # quarter 3 of bank 0 lost its predecessor


def test_expression_language():
    df = toy_panel(2, 4)
    out = pr.evaluate(df, ["pos(x1)", "neg(x1)", "x1 * x2", "-x1 + 2", "diff(x1, 1)", "x1 ** 2"])
    x1, x2 = df["x1"].to_numpy(), df["x2"].to_numpy()
    np.testing.assert_array_equal(out[:, 0], np.maximum(x1, 0))
    np.testing.assert_array_equal(out[:, 1], np.minimum(x1, 0))
    np.testing.assert_array_equal(out[:, 2], x1 * x2)
    np.testing.assert_array_equal(out[:, 3], -x1 + 2)
    assert np.isnan(out[0, 4]) and out[1, 4] == x1[1] - x1[0]
    with pytest.raises(Exception):
        pr.evaluate(df, ["__import__('os')"])


def test_linear_combination_delta_method():
    df = toy_panel(12, 6, seed=8)
    fit = pr.fit_fe(df, pr.RegressionSpec("y", ["x1", "x2"], combinations=[{"x1": 1.0, "x2": 1.0}]))
    lc = fit.linear_combination_tests[0]
    assert lc.estimate == pytest.approx(fit.coef("x1") + fit.coef("x2"), rel=1e-14)
    var = fit.cov[0, 0] + fit.cov[1, 1] + 2 * fit.cov[0, 1]
    assert lc.se == pytest.approx(np.sqrt(var), rel=1e-12)


# -- instrumental variables -------------------------------------------------------------

def test_self_instrumented_iv_equals_ols():
    df = toy_panel(12, 6, seed=9)
    ols = pr.fit_fe(df, pr.RegressionSpec("y", ["x1", "x2"]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WeakInstrumentWarning)
        iv = pr.fit_fe(df, pr.RegressionSpec("y", ["x1", "x2"], instruments={"x1": "x1"}))
    np.testing.assert_allclose(iv.coefficients, ols.coefficients, rtol=0, atol=1e-10)


def test_iv_closed_form():
    df = toy_panel(10, 6, seed=10)
    df["w"] = df["x1"] + np.random.default_rng(1).normal(size=len(df))
    fit = pr.fit_iv(df, pr.RegressionSpec("y", ["x1", "x2"], instruments={"x1": "w"}))
    D = pr.demean(df[["y", "x1", "x2", "w"]].to_numpy(), [df.bank_id.to_numpy(), df.quarter.to_numpy()])
    X, Z = D[:, [1, 2]], D[:, [3, 2]]
    ref = np.linalg.inv(Z.T @ X) @ Z.T @ D[:, 0]
    np.testing.assert_allclose(fit.coefficients, ref, rtol=0, atol=1e-10)


def _endogenous_panel(seed, rho):
    r = np.random.default_rng(seed)
    nb, nq = 40, 10
    bank = np.repeat(np.arange(nb), nq)
    quarter = np.tile(np.arange(nq), nb)
    e = r.normal(size=bank.size)
    x = np.empty(bank.size)
    for b in range(nb):
        s = slice(b * nq, (b + 1) * nq)
        xb = np.empty(nq)
        xb[0] = r.normal()
        for t in range(1, nq):
            xb[t] = 0.8 * xb[t - 1] + r.normal()
        x[s] = xb
    x = x + rho * e
    y = 1.0 * x + e
    return pd.DataFrame({"bank_id": bank, "quarter": quarter, "x": x, "y": y})


def test_iv_reduces_endogeneity_bias():
    ols_b, iv_b = [], []
    spec_o = pr.RegressionSpec("y", ["x"], fixed_effects=("bank",))
    spec_i = pr.RegressionSpec("y", ["x"], fixed_effects=("bank",), instruments={"x": "lag(x, 1)"})
    for s in range(100):
        df = _endogenous_panel(s, 0.8)
        ols_b.append(pr.fit_fe(df, spec_o).coef("x") - 1.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", WeakInstrumentWarning)
            iv_b.append(pr.fit_fe(df, spec_i).coef("x") - 1.0)
    assert abs(np.mean(iv_b)) < abs(np.mean(ols_b))


def test_iv_close_to_ols_under_exogeneity():
    spec_o = pr.RegressionSpec("y", ["x"], fixed_effects=("bank",))
    spec_i = pr.RegressionSpec("y", ["x"], fixed_effects=("bank",), instruments={"x": "lag(x, 1)"})
    close = 0
    for s in range(100):
        df = _endogenous_panel(1000 + s, 0.0)
        o, i = pr.fit_fe(df, spec_o), pr.fit_fe(df, spec_i)
        close += abs(o.coef("x") - i.coef("x")) < 3 * np.hypot(o.stderr("x"), i.stderr("x"))
    assert close >= 95


def test_weak_instrument_warning():
    df = toy_panel(10, 6, seed=11)
    df["noise"] = np.random.default_rng(2).normal(size=len(df))
    with pytest.warns(WeakInstrumentWarning):
        fit = pr.fit_fe(df, pr.RegressionSpec("y", ["x1"], instruments={"x1": "noise"}))
    assert fit.first_stage_f["x1"] < 10


# -- bootstrap -----------------------------------------------------------------------

def test_bootstrap_reproducible_and_thread_independent():
    df = toy_panel(15, 6, seed=12)
    spec = pr.RegressionSpec("y", ["x1", "x2"], bootstrap=pr.Bootstrap(200, seed=5))
    a = pr.fit_fe(df, spec)
    b = pr.fit_fe(df, spec)
    c = pr.fit_fe(df, pr.RegressionSpec("y", ["x1", "x2"], bootstrap=pr.Bootstrap(200, seed=5, threads=3)))
    np.testing.assert_array_equal(a.extras["bootstrap_draws"], b.extras["bootstrap_draws"])
    np.testing.assert_array_equal(a.extras["bootstrap_draws"], c.extras["bootstrap_draws"])
    assert a.se_method == "bootstrap"
    d = pr.fit_fe(df, pr.RegressionSpec("y", ["x1", "x2"], bootstrap=pr.Bootstrap(200, seed=6)))
    assert not np.array_equal(a.se, d.se)


def test_bootstrap_close_to_cluster_se():
    df = toy_panel(60, 8, seed=13)
    cl = pr.fit_fe(df, pr.RegressionSpec("y", ["x1", "x2"]))
    bs = pr.fit_fe(df, pr.RegressionSpec("y", ["x1", "x2"], bootstrap=pr.Bootstrap(500, seed=1)))
    np.testing.assert_allclose(bs.se, cl.se, rtol=0.25)


@pytest.mark.slow
def test_bootstrap_se_converges(default_synth):
    panel, truth = default_synth
    df = panel.merge(truth.ce[["bank_id", "quarter", "ce"]], on=["bank_id", "quarter"])
    spec = lambda b: pr.RegressionSpec("log(market_share_corp)", ["log(ce)", "log(total_assets)"],
                                       bootstrap=pr.Bootstrap(b, seed=3))
    se1 = pr.fit_fe(df, spec(1000)).se
    se4 = pr.fit_fe(df, spec(4000)).se
    assert np.all(np.abs(se1 / se4 - 1) < 0.15)


# -- Z-score ---------------------------------------------------------------------------

def _series(gp, eq=10.0, ta=100.0):
    n = len(gp)
    return pd.DataFrame({"bank_id": ["a"] * n, "quarter": 8000 + np.arange(n),
                         "gross_profit": gp, "total_assets": ta, "equity_ratio": eq})


def test_zscore_arithmetic():
    c = 0.5 / np.sqrt(4.0 / 3.0)
    gp = 0.5 + c * np.array([-1.0, -1.0, 1.0, 1.0])
    comp = pr.zscore(_series(gp), 4, return_components=True)
    assert comp["roa"].iloc[-1] == pytest.approx(2.0, abs=1e-12)
    assert comp["sigma_roa"].iloc[-1] == pytest.approx(2.0, abs=1e-12)
    assert comp["zscore"].iloc[-1] == pytest.approx(6.0, abs=1e-12)


def test_zscore_hand_computed_six_quarters():
    # TA = 400 so annualized quarterly ROA equals gross profit
    z = pr.zscore(_series([1.0, 2.0, 0.0, 3.0, 5.0, 2.0], ta=400.0), 4)
    assert z.iloc[:3].isna().all()
    # windows {1,2,0,3}, {2,0,3,5}, {0,3,5,2}: ROA 1.5, 2.5, 2.5; variances 5/3, 13/3, 13/3
    expect = [11.5 / np.sqrt(5 / 3), 12.5 / np.sqrt(13 / 3), 12.5 / np.sqrt(13 / 3)]
    np.testing.assert_allclose(z.iloc[3:].to_numpy(), expect, rtol=1e-13)


def test_zscore_zero_volatility_and_history():
    with pytest.warns(pr.ZeroVolatility):
        z = pr.zscore(_series([1.0] * 6), 4)
    assert z.isna().all()
    with pytest.raises(InsufficientHistory):
        pr.zscore(_series([1.0, 2.0, 3.0]), 4)
    with pytest.raises(InsufficientHistory):
        pr.zscore(_series([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), 8)
    with pytest.raises(ValueError):
        pr.zscore(_series([1.0] * 6), 5)


# -- suites ----------------------------------------------------------------------------

def test_quartile_cuts_are_complementary(default_synth):
    panel, _ = default_synth
    cuts = pr._quartile_cuts(panel)
    middle = cuts["without_largest"] & cuts["without_smallest"]
    assert cuts["without_largest"].sum() + cuts["without_smallest"].sum() == len(panel) + middle.sum()


def _ms_frames(panel, truth, noise_sd, seed=0):
    sc = truth.ce[["bank_id", "quarter", "ce"]].copy()
    kept = sc.copy()
    r = np.random.default_rng(seed)
    kept["ce"] = np.exp(np.log(sc["ce"]) - np.abs(r.normal(0, noise_sd, len(sc))))
    return sc, kept


def test_market_structure_esh_attenuation(default_synth):
    panel, truth = default_synth
    dropped, kept = _ms_frames(panel, truth, 0.3)
    fits = pr.market_structure_suite(panel, dropped, kept, markets=("corp",), cuts=("full",))
    by = {(f.extras["variant"], f.extras["estimator"]): f for f in fits}
    g_d, g_k = by["dropped", "ols"].extras, by["kept", "ols"].extras
    assert g_d["gamma"] > 0 and g_d["gamma"] / g_d["gamma_se"] > 3
    assert 0 <= g_k["gamma"] < g_d["gamma"]
    assert g_d["impact_pp"] > g_k["impact_pp"]


def test_market_structure_qlh_null():
    from fxfrontier import synth
    panel, truth = synth.generate(market_share_gamma=0.0, n_banks=120, n_quarters=30, seed=3)
    dropped, kept = _ms_frames(panel, truth, 0.3)
    fits = pr.market_structure_suite(panel, dropped, kept, markets=("corp", "hh"), cuts=("full",))
    for f in fits:
        assert abs(f.extras["gamma"]) < 3 * f.extras["gamma_se"], f.name


def _channels_dgp(panel, seed=0):
    df = panel.copy()
    r = np.random.default_rng(seed)
    ev = pr.evaluate(df, ["lag(net_fx_position, 1)", "center(lag(log(total_assets), 1))"])
    nfx, size = ev[:, 0], ev[:, 1]
    share = 0.1 + 0.06 * np.maximum(nfx, 0) - 0.16 * np.minimum(nfx, 0) \
        + 0.05 * np.minimum(nfx, 0) * size + r.normal(0, 0.002, len(df))
    share = np.where(np.isfinite(share), np.clip(share, 0, 0.9), 0.1)
    df["revals_neg"] = share * df["total_costs"]
    return df


def test_channels_sign_recovery(default_synth):
    panel, _ = default_synth
    fit = pr.channels_suite(_channels_dgp(panel), interactions=["ln_ta"])[0]
    lab = {v: k for k, v in fit.extras["labels"].items()}
    assert fit.coef(lab["NetFX+"]) > 0
    assert fit.coef(lab["NetFX-"]) < 0
    assert fit.coef(lab["NetFX- * ln_ta"]) > 0
    assert fit.se_method == "cluster"


def test_channels_asymmetry_frequency(default_synth):
    panel, _ = default_synth
    wins = 0
    reps = 20
    for s in range(reps):
        fit = pr.channels_suite(_channels_dgp(panel, seed=s), interactions=["ln_ta"])[0]
        lab = {v: k for k, v in fit.extras["labels"].items()}
        wins += abs(fit.coef(lab["NetFX-"])) > abs(fit.coef(lab["NetFX+"]))
    assert wins >= 0.95 * reps


def test_channels_zero_netfx_drops_interactions(default_synth):
    panel, _ = default_synth
    df = panel.copy()
    df["net_fx_position"] = 0.0
    fit = pr.channels_suite(df, interactions=["ln_ta"])[0]
    assert len(fit.extras["dropped_collinear"]) == 4
    assert not any("net_fx" in n for n in fit.names)


def test_stability_pattern(default_synth):
    panel, _ = default_synth
    fits = {f.name: f for f in pr.stability_suite(panel, "revals")}
    roa = fits["stability:revals:roa"]
    beta, g1 = roa.names[0], roa.names[1]
    assert roa.coef(beta) < 0 and roa.pvalue(beta) < 0.05
    assert roa.coef(g1) > 0
    lc = roa.linear_combination_tests[0]
    assert abs(lc.estimate) < 2 * lc.se


def test_stability_constant_npl(default_synth):
    panel, _ = default_synth
    df = panel.copy()
    df["npl"] = 1.0
    fit = {f.name: f for f in pr.stability_suite(df, "revals")}["stability:revals:ln_npl"]
    assert np.all(np.abs(fit.coefficients) <= 3 * fit.se + 1e-10)


def test_stability_high_capital_null(default_synth):
    panel, _ = default_synth
    for f in pr.stability_suite(panel, "netfx"):
        pi = f.names[1]
        assert "high_cap" in pi
        assert abs(f.coef(pi)) < 3 * f.stderr(pi), f.name


def test_long_format(default_synth):
    panel, _ = default_synth
    long = pr.fits_to_long(pr.stability_suite(panel, "netfx"), "stability")
    assert list(long.columns[:6]) == ["suite", "model", "coefficient", "estimate", "se", "stars"]
    assert (long["suite"] == "stability").all()


def test_deep_bootstrap_reruns_score_step(default_synth):
    import functools
    from fxfrontier import sfa, twostage
    panel, _ = default_synth
    sub = panel[panel["bank_id"] < "B0040"].reset_index(drop=True)
    sub = sub[sub["quarter"] < sub["quarter"].min() + 12].reset_index(drop=True)
    cfg = twostage.TwoStageConfig(sfa=sfa.SfaOptions(n_starts=1, raise_on_fail=False))
    calls = []

    def step(p):
        calls.append(p["bank_id"].iloc[0])
        return twostage.kept_dropped_scores(p, cfg)

    a = pr.deep_market_structure_se(sub, step, pr.Bootstrap(3, seed=4))
    b = pr.deep_market_structure_se(sub, functools.partial(twostage.kept_dropped_scores, config=cfg),
                                    pr.Bootstrap(3, seed=4, threads=2))
    assert len(calls) == 3 and len(set(calls)) > 1
    pd.testing.assert_frame_equal(a, b)
    assert len(a) == 24 and a["replications_ok"].max() <= 3
    assert (a["gamma_se"].dropna() > 0).all()
