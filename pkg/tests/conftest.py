import functools

import numpy as np
import pandas as pd
import pytest

from fxfrontier import paneldata, synth


@functools.lru_cache(maxsize=None)
def _synth_panel(seed: int = 0, **kw):
    return synth.generate(seed=seed, **kw)


@pytest.fixture(scope="session")
def default_synth():
    """Default-calibration synthetic panel and its ground truth (seed 0)."""
    return _synth_panel(0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_panel_rows(n_banks=2, n_quarters=3, start="2010Q1", seed=0):
    """A tiny, internally consistent panel as a DataFrame."""
    r = np.random.default_rng(seed)
    q0 = paneldata.parse_quarter(start)
    rows = []
    for b in range(n_banks):
        for t in range(n_quarters):
            loans = float(r.uniform(50, 100))
            fx = float(r.uniform(0, 0.3)) * loans
            tc = float(r.uniform(20, 40))
            rows.append(dict(
                bank_id=f"B{b}", quarter=q0 + t, total_costs=tc, interest_income=5.0,
                interest_expenses=float(r.uniform(1, 4)), revals_pos=1.0,
                revals_neg=float(r.uniform(0, 5)), loans=loans, deposits=float(r.uniform(50, 90)),
                fee_income=float(r.uniform(1, 3)), fx_loans=fx, rub_loans=loans - fx,
                wage_rate=float(r.uniform(0.01, 0.03)), capital_rate=float(r.uniform(0.03, 0.07)),
                equity_ratio=float(r.uniform(8, 20)), liquidity_ratio=float(r.uniform(10, 30)),
                total_assets=float(r.uniform(150, 250)), lt_loans_firms_ratio=10.0,
                lt_loans_hh_ratio=5.0, asset_growth_4q=float(r.uniform(-5, 10)),
                foreign_assets_ratio=5.0, foreign_liabilities_ratio=7.0, net_fx_position=-0.02,
                ownership="DomesticPrivate", bailout=False, tight_regulation=False,
                market_share_corp=1.0, market_share_hh=1.0, npl=3.0, gdp_growth_4q=2.0,
                gross_profit=1.0,
            ))
    return pd.DataFrame(rows, columns=paneldata.FIELDS)


@functools.lru_cache(maxsize=None)
def _default_fits():
    from fxfrontier import sfa
    from fxfrontier.translog import build_design
    panel, truth = _synth_panel(0)
    z = sfa.build_z(panel)
    out = {}
    for cost in ("caoc", "oc"):
        d = build_design(panel, truth.frontier_spec, cost)
        out[cost] = (d, sfa.fit_frontier(d, z, raise_on_fail=False))
    return panel, truth, z, out


@pytest.fixture(scope="session")
def default_fits():
    """Frontier fits on CAOC and OC for the default synthetic panel."""
    return _default_fits()
