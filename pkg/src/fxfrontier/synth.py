"""Synthetic bank panels with known ground truth.

The generator draws, in order: a weekly exchange-rate path (GARCH(1,1)
innovations, drift and scheduled crisis jumps), bank characteristics and FX
balance-sheet shares, the true translog frontier and truncated-normal
inefficiency, and finally the cost identities

    TC = CAOC + IE + Revals-,   OC = TC - IE.

Revaluations are quarter-over-quarter: with ``g = dNER / NER[t-1]``, FX
liabilities ``L`` and FX assets ``A`` (local currency at the start of the
quarter), ``Revals- = L * max(g, 0) + A * max(-g, 0)`` and
``Revals+ = L * max(-g, 0) + A * max(g, 0)``.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import InvalidConfig
from .paneldata import FIELDS, OWNERSHIP_LEVELS, format_quarter, parse_quarter
from .translog import FrontierSpec, terms

WEEKS_PER_QUARTER = 13


@dataclass
class NerProcess:
    """Weekly log-return process for the exchange rate (local currency per USD)."""

    omega: float = 7.0e-6
    alpha: float = 0.10
    beta: float = 0.85
    drift_per_quarter: float = 0.002
    start_level: float = 28.0
    crises: list = field(default_factory=lambda: [
        ["2008Q4", 0.15], ["2009Q1", 0.12], ["2014Q3", 0.08], ["2014Q4", 0.40]])
    jump_weeks: int = 4
    presample_quarters: int = 8


@dataclass
class FxStructure:
    """Per-bank FX balance-sheet shares (fractions of total assets unless noted).

    FX loan shares are AR(1) in the share of loans with reflection at [0, 1].
    The net FX position (FX assets minus FX liabilities over TA) is a bank mean
    plus AR(1) noise; FX liabilities follow from it.
    """

    fx_loan_share_mean: float = 0.15
    fx_loan_share_sd: float = 0.08
    foreign_fx_loan_share_mean: float = 0.45
    ar: float = 0.9
    shock_sd: float = 0.03
    foreign_assets_mean: float = 0.06
    foreign_assets_sd: float = 0.04
    foreign_bank_foreign_assets_mean: float = 0.15
    net_fx_mean: float = -0.035
    net_fx_sd: float = 0.03
    net_fx_noise_sd: float = 0.01
    foreign_liab_fraction: float = 0.5


@dataclass
class Inefficiency:
    """True inefficiency mean ``mu = z'delta`` and scale ``sigma_u``."""

    sigma_u: float = 0.15
    delta: dict = field(default_factory=lambda: {
        "const": 0.05,
        "own_Big4": -0.05,
        "own_OtherState": 0.05,
        "own_Foreign": -0.20,
        "bailout": 0.10,
        "tight_regulation": 0.03,
        "liquidity_ratio": -0.002,
        "lt_loans_firms_ratio": 0.002,
        "lt_loans_hh_ratio": 0.001,
        "asset_growth_4q": -0.002,
        "equity_ratio": -0.003,
    })


@dataclass
class Frontier:
    """Translog coefficients on *centered* log regressors.

    ``first`` holds d ln C / d x at the centre for (ln loans, ln deposits,
    ln fee_income, ln(w1/w2)); ``second`` the symmetric Hessian.  They are
    converted to raw-log coefficients for the ground truth.
    """

    first: list = field(default_factory=lambda: [0.40, 0.30, 0.10, 0.60])
    second: list = field(default_factory=lambda: [
        [0.06, -0.03, -0.005, 0.01],
        [-0.03, 0.04, -0.005, 0.01],
        [-0.005, -0.005, 0.02, 0.0],
        [0.01, 0.01, 0.0, 0.05],
    ])
    trend: list = field(default_factory=lambda: [-0.15, 0.10])
    caoc_to_assets: float = 0.02
    sigma_v: float = 0.05


@dataclass
class SynthConfig:
    n_banks: int = 200
    n_quarters: int = 40
    start_quarter: str = "2005Q1"
    seed: int = 0
    ownership_mix: dict = field(default_factory=lambda: {
        "DomesticPrivate": 0.55, "Big4": 0.10, "OtherState": 0.15, "Foreign": 0.20})
    frontier: Frontier = field(default_factory=Frontier)
    inefficiency: Inefficiency = field(default_factory=Inefficiency)
    ner: NerProcess = field(default_factory=NerProcess)
    fx: FxStructure = field(default_factory=FxStructure)
    ie_share: float = 0.12
    market_share_gamma: float = 0.5
    stability_effect: float = 0.006
    bailout_share: float = 0.05

    def validate(self) -> None:
        if self.n_banks < 1:
            raise InvalidConfig("n_banks", "must be at least 1")
        if self.n_quarters < 1:
            raise InvalidConfig("n_quarters", "must be at least 1")
        try:
            parse_quarter(self.start_quarter)
        except ValueError:
            raise InvalidConfig("start_quarter", f"cannot parse {self.start_quarter!r}") from None
        if not self.frontier.sigma_v > 0:
            raise InvalidConfig("frontier.sigma_v", "must be > 0")
        if not self.inefficiency.sigma_u >= 0:
            raise InvalidConfig("inefficiency.sigma_u", "must be >= 0")
        if set(self.ownership_mix) != set(OWNERSHIP_LEVELS):
            raise InvalidConfig("ownership_mix", f"keys must be {OWNERSHIP_LEVELS}")
        probs = np.array([self.ownership_mix[k] for k in OWNERSHIP_LEVELS], float)
        if np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, abs_tol=1e-9):
            raise InvalidConfig("ownership_mix", "probabilities must be >= 0 and sum to 1")
        ner = self.ner
        if not (ner.omega > 0 and ner.alpha >= 0 and ner.beta >= 0 and ner.alpha + ner.beta < 1):
            raise InvalidConfig("ner", "GARCH parameters need omega > 0, alpha, beta >= 0, alpha + beta < 1")
        if not ner.start_level > 0:
            raise InvalidConfig("ner.start_level", "must be > 0")
        for q, _ in ner.crises:
            try:
                parse_quarter(q)
            except ValueError:
                raise InvalidConfig("ner.crises", f"cannot parse quarter {q!r}") from None
        fx = self.fx
        for name in ("fx_loan_share_mean", "foreign_fx_loan_share_mean", "foreign_assets_mean",
                     "foreign_bank_foreign_assets_mean", "foreign_liab_fraction"):
            if not 0.0 <= getattr(fx, name) <= 1.0:
                raise InvalidConfig(f"fx.{name}", "share must lie in [0, 1]")
        for name in ("fx_loan_share_sd", "shock_sd", "foreign_assets_sd", "net_fx_sd", "net_fx_noise_sd"):
            if getattr(fx, name) < 0:
                raise InvalidConfig(f"fx.{name}", "must be >= 0")
        if not 0 <= fx.ar < 1:
            raise InvalidConfig("fx.ar", "must lie in [0, 1)")
        if not 0 <= self.ie_share < 1:
            raise InvalidConfig("ie_share", "must lie in [0, 1)")
        if not 0 <= self.bailout_share <= 1:
            raise InvalidConfig("bailout_share", "must lie in [0, 1]")
        if np.array(self.frontier.second).shape != (4, 4):
            raise InvalidConfig("frontier.second", "must be 4x4")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        nested = {"frontier": Frontier, "inefficiency": Inefficiency, "ner": NerProcess, "fx": FxStructure}
        kwargs = {}
        valid = {f.name for f in dataclasses.fields(cls)}
        for k, v in d.items():
            if k not in valid:
                raise InvalidConfig(k, "unknown key")
            if k in nested and isinstance(v, dict):
                sub = nested[k]
                sub_valid = {f.name for f in dataclasses.fields(sub)}
                bad = set(v) - sub_valid
                if bad:
                    raise InvalidConfig(f"{k}.{sorted(bad)[0]}", "unknown key")
                kwargs[k] = sub(**v)
            else:
                kwargs[k] = v
        return cls(**kwargs)


@dataclass
class GroundTruth:
    ce: pd.DataFrame
    beta: dict
    delta: dict
    sigma_u: float
    sigma_v: float
    market_share_gamma: float
    stability_effect: float
    ner_weekly: pd.DataFrame
    ner_quarterly: pd.DataFrame
    frontier_spec: FrontierSpec
    trend_origin: int
    trend_span: float

    def params(self) -> dict[str, float]:
        out = {f"beta:{k}": v for k, v in self.beta.items()}
        out.update({f"delta:{k}": v for k, v in self.delta.items()})
        out["sigma_u"] = self.sigma_u
        out["sigma_v"] = self.sigma_v
        return out

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "delta": self.delta,
            "sigma_u": self.sigma_u,
            "sigma_v": self.sigma_v,
            "market_share_gamma": self.market_share_gamma,
            "stability_effect": self.stability_effect,
            "frontier_spec": self.frontier_spec.to_dict(),
            "trend_origin": format_quarter(self.trend_origin),
            "trend_span": self.trend_span,
            "scores": {
                "bank_id": self.ce["bank_id"].tolist(),
                "quarter": [format_quarter(q) for q in self.ce["quarter"]],
                "ce": self.ce["ce"].tolist(),
                "u": self.ce["u"].tolist(),
                "revals_neg": self.ce["revals_neg"].tolist(),
                "revals_pos": self.ce["revals_pos"].tolist(),
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


# -- building blocks ---------------------------------------------------------------

def simulate_ner(cfg: NerProcess, start_quarter: int, n_quarters: int, rng) -> pd.DataFrame:
    """Weekly NER path covering ``presample_quarters`` before ``start_quarter``."""
    q0 = start_quarter - cfg.presample_quarters
    nq = n_quarters + cfg.presample_quarters
    n = nq * WEEKS_PER_QUARTER
    z = rng.standard_normal(n)
    jumps = np.zeros(n)
    for q_text, size in cfg.crises:
        k = parse_quarter(q_text) - q0
        if 0 <= k < nq:
            w = max(1, min(cfg.jump_weeks, WEEKS_PER_QUARTER))
            jumps[k * WEEKS_PER_QUARTER: k * WEEKS_PER_QUARTER + w] += size / w
    mu_w = cfg.drift_per_quarter / WEEKS_PER_QUARTER
    h = cfg.omega / (1.0 - cfg.alpha - cfg.beta)
    eps_prev = 0.0
    r = np.empty(n)
    for t in range(n):
        if t > 0:
            h = cfg.omega + cfg.alpha * eps_prev * eps_prev + cfg.beta * h
        eps = math.sqrt(h) * z[t]
        r[t] = mu_w + eps + jumps[t]
        eps_prev = eps + jumps[t]
    level = cfg.start_level * np.exp(np.cumsum(r))
    week = np.arange(n)
    quarter = q0 + week // WEEKS_PER_QUARTER
    start = pd.Timestamp(year=q0 // 4, month=3 * (q0 % 4) + 1, day=7)
    dates = start + pd.to_timedelta(7 * week, unit="D")
    return pd.DataFrame({"date": dates.strftime("%Y-%m-%d"), "quarter": quarter,
                         "exchange_rate": level, "log_return": r})


def quarterly_ner(weekly: pd.DataFrame) -> pd.DataFrame:
    """Quarter-end NER levels with the quarter-over-quarter change and growth rate."""
    q = weekly.groupby("quarter", sort=True)["exchange_rate"].last()
    out = pd.DataFrame({"quarter": q.index.to_numpy(np.int64), "ner": q.to_numpy()})
    out["d_ner"] = out["ner"].diff()
    out["g_ner"] = out["d_ner"] / out["ner"].shift(1)
    out["d4_ln_ner"] = np.log(out["ner"]).diff(4)
    return out


def revaluations(fx_liabilities, fx_assets, growth):
    """Negative and positive revaluations of FX items valued at the start of the quarter.

    ``growth`` is the quarterly NER change over its start level.
    """
    up = np.maximum(growth, 0.0)
    down = np.maximum(-growth, 0.0)
    return fx_liabilities * up + fx_assets * down, fx_liabilities * down + fx_assets * up


def raw_translog(fr: Frontier, center: np.ndarray, intercept: float) -> np.ndarray:
    """Raw-log coefficients (const + the spec's terms) from centered ones."""
    b = np.asarray(fr.first, float)
    B = np.asarray(fr.second, float)
    first_raw = b - B @ center
    const = intercept - b @ center + 0.5 * center @ B @ center
    coefs = [const, *first_raw]
    k = len(b)
    coefs += [B[i, i] for i in range(k)]
    for i in range(k):
        for j in range(i + 1, k):
            coefs.append(B[i, j])
    coefs += list(fr.trend)
    return np.array(coefs)


def _ar_reflect(mean, sd, ar, n_t, rng, lo=0.0, hi=1.0):
    """AR(1) around per-bank means with reflection into [lo, hi]; shape (n_banks, n_t)."""
    n = mean.shape[0]
    x = np.empty((n, n_t))
    cur = mean + sd / math.sqrt(max(1 - ar * ar, 1e-12)) * rng.standard_normal(n)
    for t in range(n_t):
        if t > 0:
            cur = mean + ar * (cur - mean) + sd * rng.standard_normal(n)
        cur = _reflect(cur, lo, hi)
        x[:, t] = cur
    return x


def _reflect(x, lo, hi):
    span = hi - lo
    y = np.mod(x - lo, 2 * span)
    y = np.where(y > span, 2 * span - y, y)
    return lo + y


def _truncnorm_pos(mu, sigma, rng):
    """Draw from N(mu, sigma^2) truncated to [0, inf) by inverse CDF."""
    from scipy.special import ndtr, ndtri
    if sigma == 0:
        return np.zeros_like(mu)
    lo = ndtr(-mu / sigma)
    p = lo + (1.0 - lo) * rng.uniform(size=mu.shape)
    p = np.clip(p, 1e-16, 1 - 1e-16)
    return np.maximum(mu + sigma * ndtri(p), 0.0)


# -- generator -----------------------------------------------------------------------

def generate(config: SynthConfig | None = None, **overrides) -> tuple[pd.DataFrame, GroundTruth]:
    """Draw a synthetic panel and its ground truth.  Bitwise deterministic in ``seed``."""
    cfg = config or SynthConfig()
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    N, T = cfg.n_banks, cfg.n_quarters
    q_start = parse_quarter(cfg.start_quarter)
    quarters = q_start + np.arange(T)

    weekly = simulate_ner(cfg.ner, q_start, T, rng)
    qner = quarterly_ner(weekly)
    qidx = {int(q): i for i, q in enumerate(qner["quarter"])}
    g = qner["g_ner"].to_numpy()[[qidx[int(q)] for q in quarters]]

    # bank characteristics
    probs = np.array([cfg.ownership_mix[k] for k in OWNERSHIP_LEVELS])
    own_idx = rng.choice(len(OWNERSHIP_LEVELS), size=N, p=probs)
    ownership = np.array(OWNERSHIP_LEVELS)[own_idx]
    foreign = ownership == "Foreign"
    big4 = ownership == "Big4"
    ln_ta0 = rng.normal(math.log(5000.0), 1.5, N) + np.where(big4, 3.0, 0.0)
    growth = rng.normal(0.02, 0.01, N)
    T4 = T + 4
    ta_noise = np.cumsum(rng.normal(0.0, 0.03, (N, T4)), axis=1)
    ln_ta_full = ln_ta0[:, None] + growth[:, None] * (np.arange(T4) - 4)[None, :] + ta_noise
    ln_ta = ln_ta_full[:, 4:]
    ta = np.exp(ln_ta)
    asset_growth = 100.0 * (ln_ta_full[:, 4:] - ln_ta_full[:, :-4])

    loan_eff = rng.normal(0.0, 0.3, N)
    dep_eff = rng.normal(0.0, 0.3, N)
    fee_eff = rng.normal(0.0, 0.5, N)
    loans = ta * 0.55 * np.exp(loan_eff[:, None] + rng.normal(0, 0.1, (N, T)))
    loans = np.minimum(loans, 0.95 * ta)
    deposits = ta * 0.5 * np.exp(dep_eff[:, None] + rng.normal(0, 0.1, (N, T)))
    fee = ta * 0.005 * np.exp(fee_eff[:, None] + rng.normal(0, 0.2, (N, T)))
    w_cap = 0.05 * np.exp(rng.normal(0, 0.2, N)[:, None] + rng.normal(0, 0.1, (N, T)))
    w_lab = 0.02 * np.exp(rng.normal(0, 0.3, N)[:, None] + rng.normal(0, 0.1, (N, T)))

    # FX structure
    fx = cfg.fx
    fl_mean = np.where(foreign, fx.foreign_fx_loan_share_mean, fx.fx_loan_share_mean)
    fl_mean = _reflect(fl_mean + fx.fx_loan_share_sd * rng.standard_normal(N), 0.0, 1.0)
    fx_loan_share = _ar_reflect(fl_mean, fx.shock_sd, fx.ar, T, rng)
    fx_loans = fx_loan_share * loans
    rub_loans = loans - fx_loans
    fa_mean = np.where(foreign, fx.foreign_bank_foreign_assets_mean, fx.foreign_assets_mean)
    fa_mean = _reflect(fa_mean + fx.foreign_assets_sd * rng.standard_normal(N), 0.0, 0.9)
    fa_share = _ar_reflect(fa_mean, 0.3 * fx.shock_sd, fx.ar, T, rng, 0.0, 0.9)
    nfx_mean = fx.net_fx_mean + fx.net_fx_sd * rng.standard_normal(N)
    net_fx = nfx_mean[:, None] + _ar_reflect(np.zeros(N), fx.net_fx_noise_sd, fx.ar, T, rng, -1.0, 1.0)
    fx_assets = fx_loans + fa_share * ta
    fx_liab = np.maximum(fx_assets - net_fx * ta, 0.0)
    net_fx = (fx_assets - fx_liab) / ta
    fl_share = np.minimum(fx.foreign_liab_fraction * fx_liab / ta, 0.95)

    revals_neg, revals_pos = revaluations(fx_liab, fx_assets, g[None, :])

    # covariates of the inefficiency mean
    liquidity = np.clip(rng.uniform(10, 40, N)[:, None] + rng.normal(0, 3, (N, T)), 0.5, 95)
    lt_firms = np.clip(rng.uniform(5, 40, N)[:, None] + rng.normal(0, 3, (N, T)), 0.0, 95)
    lt_hh = np.clip(rng.uniform(0, 30, N)[:, None] + rng.normal(0, 3, (N, T)), 0.0, 95)
    equity = np.clip(rng.uniform(8, 25, N)[:, None] + rng.normal(0, 2, (N, T)), 1.0, 60)
    bailout_bank = rng.uniform(size=N) < cfg.bailout_share
    bailout_start = rng.integers(0, T, N)
    bailout = bailout_bank[:, None] & (np.arange(T)[None, :] >= bailout_start[:, None])
    tight = np.broadcast_to(quarters >= parse_quarter("2013Q3"), (N, T))

    zcols = {
        "own_Big4": big4[:, None] * np.ones((N, T)),
        "own_OtherState": (ownership == "OtherState")[:, None] * np.ones((N, T)),
        "own_Foreign": foreign[:, None] * np.ones((N, T)),
        "bailout": bailout.astype(float),
        "tight_regulation": tight.astype(float),
        "liquidity_ratio": liquidity,
        "lt_loans_firms_ratio": lt_firms,
        "lt_loans_hh_ratio": lt_hh,
        "asset_growth_4q": asset_growth,
        "equity_ratio": equity,
    }
    # optional FX exposure channel of the inefficiency mean (absent by default)
    d4 = np.nan_to_num(qner["d4_ln_ner"].to_numpy()[[qidx[int(q)] for q in quarters]])[None, :]
    fx_ratio = 100.0 * fx_loans / ta
    fx_cols = {"fx_loans_ratio": fx_ratio, "d4_ln_ner": d4 * np.ones((N, 1)),
               "fx_loans_ratio_x_d4_ln_ner": fx_ratio * d4}
    ineff = cfg.inefficiency
    mu = np.full((N, T), float(ineff.delta.get("const", 0.0)))
    for name, coef in ineff.delta.items():
        if name == "const":
            continue
        if name not in zcols and name not in fx_cols:
            raise InvalidConfig(f"inefficiency.delta.{name}", "unknown covariate")
        mu = mu + coef * (zcols[name] if name in zcols else fx_cols[name])
    u = _truncnorm_pos(mu, ineff.sigma_u, rng)
    v = rng.normal(0.0, cfg.frontier.sigma_v, (N, T))

    # frontier
    fr = cfg.frontier
    block = np.stack([np.log(loans), np.log(deposits), np.log(fee), np.log(w_lab / w_cap)], axis=-1)
    center = np.array([math.log(5000.0 * 0.55), math.log(5000.0 * 0.5),
                       math.log(5000.0 * 0.005), math.log(0.4)])
    intercept = math.log(fr.caoc_to_assets * 5000.0 / 0.05)
    t_scaled = (np.arange(T) / max(T - 1, 1))[None, :] * np.ones((N, 1))
    xc = block - center
    b1 = np.asarray(fr.first)
    B = np.asarray(fr.second)
    f = intercept + xc @ b1 + 0.5 * np.einsum("ntk,kl,ntl->nt", xc, B, xc)
    f = f + fr.trend[0] * t_scaled + fr.trend[1] * 0.5 * t_scaled ** 2
    caoc = w_cap * np.exp(f + v + u)
    ie = cfg.ie_share / (1.0 - cfg.ie_share) * caoc * np.exp(rng.normal(0, 0.1, (N, T)))
    tc = caoc + ie + revals_neg
    ii = ie * np.exp(rng.normal(math.log(1.5), 0.2, (N, T)))

    # market shares: ln MS = bank effect + gamma ln CE + noise
    ce = np.exp(-u)
    ms_c = np.exp(rng.normal(math.log(0.5), 1.0, N)[:, None] + cfg.market_share_gamma * np.log(ce)
                  + rng.normal(0, 0.05, (N, T)))
    ms_h = np.exp(rng.normal(math.log(0.5), 1.0, N)[:, None] + cfg.market_share_gamma * np.log(ce)
                  + rng.normal(0, 0.05, (N, T)))

    # profitability: lagged revaluation share lowers ROA for domestically oriented banks
    rshare = revals_neg / tc
    rshare_l4 = np.concatenate([np.full((N, min(4, T)), np.mean(rshare)), rshare[:, :max(T - 4, 0)]], axis=1)
    low_fa = fa_share < np.mean(fa_share)
    roa_q = (rng.normal(0.004, 0.001, N)[:, None] + rng.normal(0, 0.002, (N, T))
             - cfg.stability_effect * rshare_l4 * low_fa)
    gross_profit = roa_q * ta
    npl = loans * np.exp(rng.normal(math.log(0.05), 0.4, N)[:, None] + rng.normal(0, 0.1, (N, T)))
    gdp_q = 0.03 - 0.05 * np.isin(quarters, [parse_quarter("2009Q1"), parse_quarter("2009Q2"),
                                             parse_quarter("2015Q1")]) + rng.normal(0, 0.01, T)
    gdp = np.broadcast_to(100 * gdp_q, (N, T))

    bank_ids = np.array([f"B{i:04d}" for i in range(N)])
    data = {
        "bank_id": np.repeat(bank_ids, T),
        "quarter": np.tile(quarters, N),
        "total_costs": tc.ravel(),
        "interest_income": ii.ravel(),
        "interest_expenses": ie.ravel(),
        "revals_pos": revals_pos.ravel(),
        "revals_neg": revals_neg.ravel(),
        "loans": (fx_loans + rub_loans).ravel(),
        "deposits": deposits.ravel(),
        "fee_income": fee.ravel(),
        "fx_loans": fx_loans.ravel(),
        "rub_loans": rub_loans.ravel(),
        "wage_rate": w_lab.ravel(),
        "capital_rate": w_cap.ravel(),
        "equity_ratio": equity.ravel(),
        "liquidity_ratio": liquidity.ravel(),
        "total_assets": ta.ravel(),
        "lt_loans_firms_ratio": lt_firms.ravel(),
        "lt_loans_hh_ratio": lt_hh.ravel(),
        "asset_growth_4q": asset_growth.ravel(),
        "foreign_assets_ratio": (100 * fa_share).ravel(),
        "foreign_liabilities_ratio": (100 * fl_share).ravel(),
        "net_fx_position": net_fx.ravel(),
        "ownership": np.repeat(ownership, T),
        "bailout": bailout.ravel(),
        "tight_regulation": np.asarray(tight).ravel(),
        "market_share_corp": ms_c.ravel(),
        "market_share_hh": ms_h.ravel(),
        "npl": npl.ravel(),
        "gdp_growth_4q": np.asarray(gdp).ravel(),
        "gross_profit": gross_profit.ravel(),
    }
    panel = pd.DataFrame(data, columns=FIELDS)
    panel["ownership"] = pd.Categorical(panel["ownership"], categories=OWNERSHIP_LEVELS)

    spec = FrontierSpec()
    names = ["const"] + [t.name for t in terms(spec)]
    beta = dict(zip(names, raw_translog(fr, center, intercept).tolist()))
    delta = {"const": float(ineff.delta.get("const", 0.0))}
    delta.update({k: float(ineff.delta.get(k, 0.0)) for k in zcols})
    delta.update({k: float(ineff.delta[k]) for k in fx_cols if k in ineff.delta})
    truth = GroundTruth(
        ce=pd.DataFrame({"bank_id": data["bank_id"], "quarter": data["quarter"], "ce": ce.ravel(),
                         "u": u.ravel(), "v": v.ravel(), "caoc": caoc.ravel(),
                         "revals_neg": revals_neg.ravel(),
                         "revals_pos": revals_pos.ravel()}),
        beta=beta, delta=delta, sigma_u=float(ineff.sigma_u), sigma_v=float(fr.sigma_v),
        market_share_gamma=cfg.market_share_gamma, stability_effect=cfg.stability_effect,
        ner_weekly=weekly, ner_quarterly=qner, frontier_spec=spec,
        trend_origin=int(q_start), trend_span=float(max(T - 1, 1)),
    )
    return panel, truth


def ner_csv(weekly: pd.DataFrame, path_or_buf=None):
    out = weekly[["date", "quarter", "exchange_rate"]].copy()
    out["quarter"] = [format_quarter(int(q)) for q in out["quarter"]]
    out["exchange_rate"] = [repr(float(x)) for x in out["exchange_rate"]]
    return out.to_csv(path_or_buf, index=False, lineterminator="\n")


# -- summaries -----------------------------------------------------------------------

COST_COMPONENTS = ("total_costs", "interest_expenses", "revals_neg", "revals_pos", "oc", "caoc")


def describe(panel: pd.DataFrame, crisis_quarters=None):
    """Cost-component summary and per-quarter percentile bands of revaluation shares.

    Returns ``(summary, bands)``: ``summary`` has mean, sd, min and max per
    component; ``bands`` has the 10/25/50/75/90th percentiles of Revals-/TC
    and (Revals+ - Revals-)/TC for each quarter.
    """
    if len(panel) == 0:
        raise ValueError("empty panel")
    df = panel.copy()
    df["oc"] = df["total_costs"] - df["interest_expenses"]
    df["caoc"] = df["oc"] - df["revals_neg"]
    df["revals_share"] = df["revals_neg"] / df["total_costs"]
    df["delta_revals_share"] = (df["revals_pos"] - df["revals_neg"]) / df["total_costs"]
    cols = list(COST_COMPONENTS) + ["revals_share", "delta_revals_share"]
    summary = pd.DataFrame({
        "variable": cols,
        "mean": [df[c].mean() for c in cols],
        "sd": [df[c].std(ddof=1) if len(df) > 1 else 0.0 for c in cols],
        "min": [df[c].min() for c in cols],
        "max": [df[c].max() for c in cols],
    })
    pcts = [10, 25, 50, 75, 90]
    rows = []
    for q, grp in df.groupby("quarter", sort=True):
        rec = {"quarter": format_quarter(q)}
        for c in ("revals_share", "delta_revals_share"):
            vals = np.percentile(grp[c].to_numpy(), pcts)
            rec.update({f"{c}_p{p}": float(x) for p, x in zip(pcts, vals)})
        rows.append(rec)
    return summary, pd.DataFrame(rows)


def stylized_facts(panel: pd.DataFrame, ner_quarterly: pd.DataFrame) -> dict:
    """Headline moments of a generated panel."""
    share = panel["revals_neg"] / panel["total_costs"]
    ie_share = panel["interest_expenses"] / panel["total_costs"]
    q_mean = share.groupby(panel["quarter"]).mean()
    dner = ner_quarterly.set_index("quarter")["d_ner"].reindex(q_mean.index)
    abs_nfx = panel["net_fx_position"].abs()
    return {
        "mean_revals_share": float(share.mean()),
        "mean_ie_share": float(ie_share.mean()),
        "corr_quarterly_revals_dner": float(np.corrcoef(q_mean.to_numpy(), dner.to_numpy())[0, 1]),
        "corr_abs_netfx_revals": float(np.corrcoef(abs_nfx, share)[0, 1]),
        "share_negative_netfx_banks": float(
            (panel.groupby("bank_id")["net_fx_position"].mean() < 0).mean()),
    }
