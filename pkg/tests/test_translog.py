import itertools
import json
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from fxfrontier import translog as tl
from fxfrontier.errors import NonPositiveValue, SpecMismatch, UnknownColumn, ZeroElasticitySum

from conftest import small_panel_rows


def _closed_form(L, M, n_log_risk, n_lin_risk, trend):
    k = L + (M - 1) + n_log_risk
    return k + k * (k + 1) // 2 + n_lin_risk + trend


def _brute_force_count(spec):
    k = len(spec.log_block)
    first = k
    second = sum(1 for _ in itertools.combinations_with_replacement(range(k), 2))
    return first + second + len(spec.risk_covariates) + spec.trend_degree


def test_single_output_two_prices_length_five():
    spec = tl.FrontierSpec(outputs=["loans"], prices=["wage_rate", "capital_rate"], trend_degree=0)
    names = [t.name for t in tl.terms(spec)]
    assert names == ["ln_loans", "ln_wage_rate/capital_rate", "0.5*ln_loans^2",
                     "0.5*ln_wage_rate/capital_rate^2", "ln_loans*ln_wage_rate/capital_rate"]
    panel = small_panel_rows(1, 3)
    d = tl.build_design(panel, spec, "oc")
    ly = np.log(panel["loans"].to_numpy())
    lw = np.log(panel["wage_rate"].to_numpy() / panel["capital_rate"].to_numpy())
    expected = np.column_stack([ly, lw, 0.5 * ly ** 2, 0.5 * lw ** 2, ly * lw])
    np.testing.assert_allclose(d.X, expected, rtol=1e-13)
    oc = panel["total_costs"] - panel["interest_expenses"]
    np.testing.assert_allclose(d.y, np.log(oc / panel["capital_rate"]), rtol=1e-13)


@pytest.mark.parametrize("L,M,logr,linr,trend", [
    (1, 2, 0, 0, 0), (3, 2, 0, 5, 2), (3, 3, 1, 2, 1), (2, 4, 2, 0, 2), (5, 2, 0, 5, 2)])
def test_term_count_formula(L, M, logr, linr, trend):
    spec = tl.FrontierSpec(outputs=[f"y{i}" for i in range(L)], prices=[f"w{i}" for i in range(M)],
                           risk_covariates=[f"r{i}" for i in range(linr)],
                           log_risk_covariates=[f"lr{i}" for i in range(logr)], trend_degree=trend)
    n = len(tl.terms(spec))
    assert n == spec.n_terms() == _closed_form(L, M, logr, linr, trend) == _brute_force_count(spec)
    assert len({t.name for t in tl.terms(spec)}) == n


def test_default_spec_with_five_risk_covariates():
    risk = ["equity_ratio", "liquidity_ratio", "lt_loans_firms_ratio", "lt_loans_hh_ratio",
            "asset_growth_4q"]
    spec = tl.FrontierSpec(risk_covariates=risk)
    panel = small_panel_rows(2, 4)
    d = tl.build_design(panel, spec, "caoc")
    assert d.X.shape == (8, _closed_form(3, 2, 0, 5, 2)) == (8, 21)


def test_equal_prices_zero_normalized_logs():
    panel = small_panel_rows(2, 3)
    panel["wage_rate"] = panel["capital_rate"]
    spec = tl.FrontierSpec()
    d = tl.build_design(panel, spec, "oc")
    for i, name in enumerate(d.names):
        if "wage_rate/capital_rate" in name:
            assert np.all(d.X[:, i] == 0.0)


def test_price_homogeneity_bitwise():
    panel = small_panel_rows(3, 4)
    spec = tl.FrontierSpec()
    base = tl.build_design(panel, spec, "tc")
    for lam in (2.0, 0.25, 1024.0):
        scaled = panel.copy()
        for c in ("wage_rate", "capital_rate", "total_costs"):
            scaled[c] = scaled[c] * lam
        d = tl.build_design(scaled, spec, "tc")
        np.testing.assert_array_equal(d.X, base.X)
        np.testing.assert_allclose(d.y, base.y, rtol=0, atol=1e-14)


def test_price_homogeneity_general_lambda():
    panel = small_panel_rows(3, 4)
    spec = tl.FrontierSpec()
    base = tl.build_design(panel, spec, "tc")
    scaled = panel.copy()
    for c in ("wage_rate", "capital_rate", "total_costs"):
        scaled[c] = scaled[c] * 3.7
    d = tl.build_design(scaled, spec, "tc")
    np.testing.assert_allclose(d.X, base.X, rtol=0, atol=1e-12)
    np.testing.assert_allclose(d.y, base.y, rtol=0, atol=1e-12)


def test_row_permutation_equivariance():
    panel = small_panel_rows(3, 4)
    spec = tl.FrontierSpec()
    perm = np.random.default_rng(1).permutation(len(panel))
    a = tl.build_design(panel, spec, "oc", trend_origin=int(panel.quarter.min()), trend_span=3.0)
    b = tl.build_design(panel.iloc[perm], spec, "oc", trend_origin=int(panel.quarter.min()), trend_span=3.0)
    np.testing.assert_array_equal(b.X, a.X[perm])
    np.testing.assert_array_equal(b.y, a.y[perm])


def test_trend_scaled_to_unit_interval():
    d = tl.build_design(small_panel_rows(1, 5), tl.FrontierSpec(), "oc")
    t = d.X[:, d.names.index("t")]
    assert t.min() == 0.0 and t.max() == 1.0
    np.testing.assert_allclose(d.X[:, d.names.index("0.5*t^2")], 0.5 * t * t)


def test_errors():
    panel = small_panel_rows(1, 3)
    bad = panel.copy()
    bad.loc[1, "deposits"] = 0.0
    with pytest.raises(NonPositiveValue) as exc:
        tl.build_design(bad, tl.FrontierSpec(), "oc")
    assert exc.value.column == "deposits" and exc.value.row == 1
    with pytest.raises(UnknownColumn):
        tl.build_design(panel, tl.FrontierSpec(outputs=["nope"]), "oc")
    bad = panel.copy()
    bad.loc[0, "revals_neg"] = bad.loc[0, "total_costs"] - bad.loc[0, "interest_expenses"]
    with pytest.raises(NonPositiveValue):
        tl.build_design(bad, tl.FrontierSpec(), "caoc")


def test_spec_json_round_trip():
    spec = tl.FrontierSpec(risk_covariates=["equity_ratio"], split_fx_loans=True)
    assert tl.FrontierSpec.from_dict(json.loads(tl.spec_to_json(spec))) == spec
    with pytest.raises(ValueError):
        tl.FrontierSpec.from_dict({"bogus": 1})


def test_design_csv_round_trip(tmp_path):
    d = tl.build_design(small_panel_rows(2, 3), tl.FrontierSpec(), "oc")
    d.to_csv(tmp_path / "d.csv")
    back = pd.read_csv(tmp_path / "d.csv", float_precision="round_trip")
    np.testing.assert_array_equal(back[d.names].to_numpy(), d.X)


# -- elasticities ---------------------------------------------------------------

def _fake_fit(spec, coef):
    names = ["const"] + [t.name for t in tl.terms(spec)]
    return SimpleNamespace(spec=spec, frontier_names=names, beta=np.concatenate([[0.3], coef]))


def test_first_order_only_elasticities_are_coefficients():
    spec = tl.FrontierSpec(trend_degree=0)
    coef = np.zeros(spec.n_terms())
    coef[:3] = [0.4, 0.3, 0.1]
    fit = _fake_fit(spec, coef)
    d = tl.build_design(small_panel_rows(2, 3), spec, "oc")
    for row in d.rows():
        np.testing.assert_array_equal(tl.output_elasticities(fit, row), [0.4, 0.3, 0.1])
        assert tl.returns_to_scale(fit, row) == pytest.approx(1.25, rel=1e-15)


def test_elasticities_match_finite_differences(rng):
    spec = tl.FrontierSpec(risk_covariates=["equity_ratio"])
    coef = rng.normal(0, 0.1, spec.n_terms())
    fit = _fake_fit(spec, coef)
    panel = small_panel_rows(3, 4)
    d = tl.build_design(panel, spec, "oc")
    K = len(spec.log_block)
    lin = {"equity_ratio": panel["equity_ratio"].to_numpy(), "__t": d.X[:, -2], "__t2": d.X[:, -1]}

    def ln_cost(block):
        return tl.expand(spec, block, lin) @ coef

    block = d.X[:, :K]
    h = 1e-6
    worst = 0.0
    for k in range(len(spec.output_columns)):
        up, dn = block.copy(), block.copy()
        up[:, k] += h
        dn[:, k] -= h
        fd = (ln_cost(up) - ln_cost(dn)) / (2 * h)
        worst = max(worst, np.max(np.abs(fd - tl.output_elasticities(fit, d.X)[:, k])))
    assert worst < 1e-6


def test_symmetric_fit_equal_elasticities():
    spec = tl.FrontierSpec(trend_degree=0)
    names = [t.name for t in tl.terms(spec)]
    coef = np.zeros(len(names))
    for i, n in enumerate(names):
        if n.startswith("ln_") and "/" not in n and "*" not in n:
            coef[i] = 0.25
    fit = _fake_fit(spec, coef)
    e = tl.output_elasticities(fit, tl.build_design(small_panel_rows(1, 2), spec, "oc").row(0))
    assert np.all(e == e[0])


def test_rts_arithmetic_and_errors():
    assert tl.returns_to_scale(elasticities=[0.4, 0.3, 0.1]) == pytest.approx(1.25, rel=1e-15)
    spec = tl.FrontierSpec(outputs=["loans"], trend_degree=0)
    coef = np.zeros(spec.n_terms())
    coef[0] = 1.0
    row = tl.build_design(small_panel_rows(1, 2), spec, "oc").row(0)
    assert tl.returns_to_scale(_fake_fit(spec, coef), row) == 1.0
    with pytest.raises(ZeroElasticitySum):
        tl.returns_to_scale(elasticities=[0.5, -0.5])


def test_spec_mismatch():
    spec = tl.FrontierSpec(trend_degree=0)
    other = tl.FrontierSpec(trend_degree=1)
    row = tl.build_design(small_panel_rows(1, 2), other, "oc").row(0)
    with pytest.raises(SpecMismatch):
        tl.output_elasticities(_fake_fit(spec, np.zeros(spec.n_terms())), row)


def test_rts_recovered_on_synthetic_panel(default_fits):
    panel, truth, z, fits = default_fits
    d, fit = fits["caoc"]
    rts_hat = tl.returns_to_scale(fit, d.X).mean()
    true_coef = np.array([truth.beta[n] for n in fit.frontier_names])
    true_fit = SimpleNamespace(spec=fit.spec, frontier_names=fit.frontier_names, beta=true_coef)
    rts_true = tl.returns_to_scale(true_fit, d.X).mean()
    assert 1.1 <= rts_hat <= 1.4
    assert abs(rts_hat / rts_true - 1) < 0.05
