"""Bank-quarter panel model, CSV ingestion, cleaning and cost measures.

The working representation of a panel is a :class:`pandas.DataFrame` whose
columns are the :class:`PanelObservation` fields, sorted by
``(bank_id, quarter)``.  Quarters are stored as integers ``4*year + q - 1`` so
that consecutive quarters differ by exactly one.
"""
from __future__ import annotations

import dataclasses
import enum
import io
import json
import math
import os
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DuplicateBankQuarter,
    EmptyPanel,
    InvariantViolation,
    MissingColumn,
    NonPositiveTotalCosts,
    ParseError,
)


class Ownership(enum.Enum):
    DomesticPrivate = "DomesticPrivate"
    Big4 = "Big4"
    OtherState = "OtherState"
    Foreign = "Foreign"


OWNERSHIP_LEVELS = [o.value for o in Ownership]

_QUARTER_RE = re.compile(r"^\s*(\d{4})\s*[Qq]([1-4])\s*$")


def parse_quarter(text: str) -> int:
    """``"2013Q3"`` -> integer quarter index."""
    m = _QUARTER_RE.match(str(text))
    if m is None:
        raise ValueError(f"bad quarter {text!r}")
    return 4 * int(m.group(1)) + int(m.group(2)) - 1


def format_quarter(index: int) -> str:
    year, q = divmod(int(index), 4)
    return f"{year}Q{q + 1}"


@dataclass(frozen=True)
class PanelObservation:
    bank_id: str
    quarter: int
    total_costs: float
    interest_income: float
    interest_expenses: float
    revals_pos: float
    revals_neg: float
    loans: float
    deposits: float
    fee_income: float
    fx_loans: float
    rub_loans: float
    wage_rate: float
    capital_rate: float
    equity_ratio: float
    liquidity_ratio: float
    total_assets: float
    lt_loans_firms_ratio: float
    lt_loans_hh_ratio: float
    asset_growth_4q: float
    foreign_assets_ratio: float
    foreign_liabilities_ratio: float
    net_fx_position: float
    ownership: Ownership
    bailout: bool
    tight_regulation: bool
    market_share_corp: float = math.nan
    market_share_hh: float = math.nan
    npl: float = math.nan
    gdp_growth_4q: float = math.nan
    gross_profit: float = math.nan


FIELDS = [f.name for f in dataclasses.fields(PanelObservation)]
FLAG_COLUMNS = ("bailout", "tight_regulation")
NUMERIC_COLUMNS = [c for c in FIELDS if c not in ("bank_id", "quarter", "ownership") + FLAG_COLUMNS]

#: columns whose cells must be present for frontier estimation
REQUIRED_COLUMNS = (
    "bank_id", "quarter", "total_costs", "interest_expenses", "revals_neg",
    "loans", "deposits", "fee_income", "wage_rate", "capital_rate", "total_assets",
)
#: columns that may be absent or blank (regression-only inputs)
OPTIONAL_COLUMNS = tuple(c for c in FIELDS if c not in REQUIRED_COLUMNS)

DEFAULT_RATIO_COLUMNS = (
    "equity_ratio", "liquidity_ratio", "lt_loans_firms_ratio", "lt_loans_hh_ratio",
    "foreign_assets_ratio", "foreign_liabilities_ratio",
)


@dataclass(frozen=True)
class CostMeasures:
    oc: float
    caoc: float
    revals_share: float
    delta_revals_share: float


@dataclass
class CleaningPolicy:
    """Cleaning configuration.

    ``percentile_method`` is passed to :func:`numpy.nanpercentile`; the default
    order-statistic rule makes cleaning idempotent.
    """

    ratio_columns: Sequence[str] = DEFAULT_RATIO_COLUMNS
    ratio_bounds: tuple[float, float] = (1.0, 99.0)
    growth_column: str = "asset_growth_4q"
    growth_bounds: tuple[float, float] = (1.0, 95.0)
    min_consecutive: int = 8
    survivors_only: bool = False
    percentile_method: str = "nearest"


@dataclass
class CleaningReport:
    rows_in: int
    rows_out: int
    winsorized_cells: dict[str, int] = field(default_factory=dict)
    banks_dropped_short_history: int = 0
    rows_dropped_outside_run: int = 0
    banks_dropped_not_survivor: int = 0
    flagged_nonpositive_caoc: int = 0
    bounds: dict[str, list[float]] = field(default_factory=dict)

    @property
    def changed(self) -> bool:
        return (self.rows_in != self.rows_out or any(self.winsorized_cells.values()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# -- conversion ----------------------------------------------------------------

def to_frame(obs: Iterable[PanelObservation]) -> pd.DataFrame:
    rows = []
    for o in obs:
        d = dataclasses.asdict(o)
        d["ownership"] = Ownership(d["ownership"]).value
        rows.append(d)
    df = pd.DataFrame(rows, columns=FIELDS)
    return _finalize(df)


def to_observations(panel: pd.DataFrame) -> list[PanelObservation]:
    out = []
    for rec in panel[FIELDS].to_dict("records"):
        rec["bank_id"] = str(rec["bank_id"])
        rec["quarter"] = int(rec["quarter"])
        rec["ownership"] = Ownership(rec["ownership"])
        for c in FLAG_COLUMNS:
            rec[c] = bool(rec[c])
        for c in NUMERIC_COLUMNS:
            rec[c] = float(rec[c])
        out.append(PanelObservation(**rec))
    return out


def _finalize(df: pd.DataFrame) -> pd.DataFrame:
    df = df.copy()
    df["bank_id"] = df["bank_id"].astype(str)
    df["quarter"] = df["quarter"].astype(np.int64)
    df["ownership"] = pd.Categorical(df["ownership"], categories=OWNERSHIP_LEVELS)
    for c in FLAG_COLUMNS:
        df[c] = df[c].astype(bool)
    for c in NUMERIC_COLUMNS:
        df[c] = df[c].astype(float)
    return df.sort_values(["bank_id", "quarter"], kind="mergesort").reset_index(drop=True)


def check_invariants(panel: pd.DataFrame, rtol: float = 1e-9) -> None:
    dup = panel.duplicated(["bank_id", "quarter"], keep="first")
    if dup.any():
        row = panel.loc[dup.idxmax()]
        raise DuplicateBankQuarter(row["bank_id"], format_quarter(row["quarter"]))
    split = panel[["fx_loans", "rub_loans", "loans"]].to_numpy(float)
    ok = np.isnan(split).any(axis=1)
    gap = np.abs(split[:, 0] + split[:, 1] - split[:, 2])
    bad = ~ok & (gap > rtol * np.maximum(np.abs(split[:, 2]), 1.0))
    if bad.any():
        i = int(np.argmax(bad))
        raise InvariantViolation(f"row {i}: fx_loans + rub_loans != loans")
    over = panel["revals_neg"].to_numpy() > panel["total_costs"].to_numpy()
    if over.any():
        raise InvariantViolation(f"row {int(np.argmax(over))}: revals_neg exceeds total_costs")


# -- ingestion -----------------------------------------------------------------

def _parse_flag(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "t", "y"):
        return True
    if t in ("0", "false", "no", "f", "n"):
        return False
    raise ValueError(text)


def ingest_panel(source, schema: Mapping[str, str] | None = None) -> pd.DataFrame:
    """Read a CSV panel.

    Parameters
    ----------
    source : path, bytes, text or binary file object
        UTF-8, comma-delimited, with a header row.
    schema : mapping, optional
        ``{field_name: csv_header}``; unmapped fields are looked up under their
        own name.

    Returns
    -------
    DataFrame sorted by ``(bank_id, quarter)``.  Use :func:`to_observations` for
    a list of :class:`PanelObservation`.
    """
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    elif isinstance(source, str) and not os.path.exists(source) and "\n" in source:
        source = io.StringIO(source)
    raw = pd.read_csv(source, dtype=str, keep_default_na=False, encoding="utf-8")
    schema = dict(schema or {})
    header = {name: schema.get(name, name) for name in FIELDS}
    for name in REQUIRED_COLUMNS:
        if header[name] not in raw.columns:
            raise MissingColumn(name)

    data: dict[str, list] = {}
    for name in FIELDS:
        col = header[name]
        if col not in raw.columns:
            if name == "ownership":
                data[name] = [Ownership.DomesticPrivate.value] * len(raw)
            elif name in FLAG_COLUMNS:
                data[name] = [False] * len(raw)
            else:
                data[name] = [math.nan] * len(raw)
            continue
        values = []
        for row, cell in enumerate(raw[col].tolist()):
            cell = cell.strip()
            if cell == "":
                if name in REQUIRED_COLUMNS:
                    raise ParseError(row, name, cell)
                values.append(math.nan if name in NUMERIC_COLUMNS else None)
                continue
            try:
                if name == "bank_id":
                    values.append(cell)
                elif name == "quarter":
                    values.append(parse_quarter(cell))
                elif name == "ownership":
                    values.append(Ownership(cell).value)
                elif name in FLAG_COLUMNS:
                    values.append(_parse_flag(cell))
                else:
                    v = float(cell)
                    if math.isnan(v) and name in REQUIRED_COLUMNS:
                        raise ValueError(cell)
                    values.append(v)
            except ValueError:
                raise ParseError(row, name, cell) from None
        if name == "ownership":
            values = [Ownership.DomesticPrivate.value if v is None else v for v in values]
        elif name in FLAG_COLUMNS:
            values = [False if v is None else v for v in values]
        data[name] = values
    df = _finalize(pd.DataFrame(data, columns=FIELDS))
    check_invariants(df)
    return df


def write_panel_csv(panel: pd.DataFrame, path_or_buf=None) -> str | None:
    """Write the panel in the ingestible schema; floats round-trip exactly."""
    out = panel[FIELDS].copy()
    out["quarter"] = [format_quarter(q) for q in out["quarter"]]
    out["ownership"] = out["ownership"].astype(str)
    for c in FLAG_COLUMNS:
        out[c] = out[c].astype(int)
    for c in NUMERIC_COLUMNS:
        out[c] = [("" if math.isnan(x) else repr(float(x))) for x in out[c]]
    return out.to_csv(path_or_buf, index=False, lineterminator="\n")


# -- cleaning ------------------------------------------------------------------

def longest_runs(panel: pd.DataFrame) -> pd.Series:
    """Boolean mask selecting each bank's longest gap-free quarter run.

    Ties are broken in favour of the earliest run.
    """
    keep = np.zeros(len(panel), dtype=bool)
    q = panel["quarter"].to_numpy()
    for _, idx in panel.groupby("bank_id", sort=False).indices.items():
        idx = np.sort(idx)
        qs = q[idx]
        breaks = np.flatnonzero(np.diff(qs) != 1) + 1
        starts = np.concatenate([[0], breaks])
        ends = np.concatenate([breaks, [len(qs)]])
        k = int(np.argmax(ends - starts))
        keep[idx[starts[k]:ends[k]]] = True
    return pd.Series(keep, index=panel.index)


def _winsorize(values: np.ndarray, lo_pct: float, hi_pct: float, method: str):
    finite = values[~np.isnan(values)]
    if finite.size == 0:
        return values, 0, [math.nan, math.nan]
    lo, hi = np.percentile(finite, [lo_pct, hi_pct], method=method)
    clamped = np.clip(values, lo, hi)
    changed = int(np.sum((clamped != values) & ~np.isnan(values)))
    return clamped, changed, [float(lo), float(hi)]


def clean_panel(panel: pd.DataFrame, policy: CleaningPolicy | None = None
                ) -> tuple[pd.DataFrame, CleaningReport]:
    """History filter, optional survivor filter, pooled winsorization, CAOC flag.

    The history filter runs first so that percentiles are computed on the
    retained sample, which makes a second application a no-op.
    """
    policy = policy or CleaningPolicy()
    if len(panel) == 0:
        raise EmptyPanel("panel has no rows")
    df = panel.copy()
    report = CleaningReport(rows_in=len(df), rows_out=0)

    run = longest_runs(df)
    run_len = run.groupby(df["bank_id"]).sum()
    short = set(run_len.index[run_len < policy.min_consecutive])
    report.banks_dropped_short_history = len(short)
    keep = run & ~df["bank_id"].isin(short)
    report.rows_dropped_outside_run = int((~run & ~df["bank_id"].isin(short)).sum())
    df = df[keep]

    if policy.survivors_only and len(df):
        first, last = df["quarter"].min(), df["quarter"].max()
        span = df.groupby("bank_id")["quarter"].agg(["min", "max"])
        surv = span.index[(span["min"] == first) & (span["max"] == last)]
        report.banks_dropped_not_survivor = int(len(span) - len(surv))
        df = df[df["bank_id"].isin(surv)]

    if len(df) == 0:
        raise EmptyPanel("no bank survives the history filter")
    df = df.reset_index(drop=True)

    targets = [(c, policy.ratio_bounds) for c in policy.ratio_columns]
    if policy.growth_column:
        targets.append((policy.growth_column, policy.growth_bounds))
    for col, (lo, hi) in targets:
        if col not in df.columns:
            raise MissingColumn(col)
        vals, n, bounds = _winsorize(df[col].to_numpy(float), lo, hi, policy.percentile_method)
        df[col] = vals
        report.winsorized_cells[col] = n
        report.bounds[col] = bounds

    caoc = df["total_costs"] - df["interest_expenses"] - df["revals_neg"]
    report.flagged_nonpositive_caoc = int((caoc <= 0).sum())
    report.rows_out = len(df)
    return df, report


# -- cost measures -------------------------------------------------------------

def derive_cost_measures(obs) -> CostMeasures:
    """OC, CAOC and revaluation shares for one observation (or a row mapping)."""
    get = (lambda k: getattr(obs, k)) if not isinstance(obs, Mapping) else obs.__getitem__
    tc = float(get("total_costs"))
    if not tc > 0:
        raise NonPositiveTotalCosts(f"total_costs = {tc}")
    ie = float(get("interest_expenses"))
    rn = float(get("revals_neg"))
    rp = float(get("revals_pos"))
    oc = tc - ie
    return CostMeasures(oc=oc, caoc=oc - rn, revals_share=rn / tc,
                        delta_revals_share=(rp - rn) / tc)


def cost_measures(panel: pd.DataFrame) -> pd.DataFrame:
    """Vectorized :func:`derive_cost_measures`; one row per panel row."""
    tc = panel["total_costs"].to_numpy(float)
    if np.any(~(tc > 0)):
        raise NonPositiveTotalCosts(f"row {int(np.argmax(~(tc > 0)))}")
    oc = tc - panel["interest_expenses"].to_numpy(float)
    rn = panel["revals_neg"].to_numpy(float)
    rp = panel["revals_pos"].to_numpy(float)
    return pd.DataFrame({
        "oc": oc,
        "caoc": oc - rn,
        "revals_share": rn / tc,
        "delta_revals_share": (rp - rn) / tc,
    }, index=panel.index)


def with_cost_measures(panel: pd.DataFrame) -> pd.DataFrame:
    out = panel.copy()
    cm = cost_measures(panel)
    for c in cm.columns:
        out[c] = cm[c]
    out["nonpositive_caoc"] = out["caoc"] <= 0
    return out


def resample_banks(panel: pd.DataFrame, rng: np.random.Generator) -> pd.DataFrame:
    """Draw banks with replacement; a bank drawn twice enters as two banks.

    New labels are ``"{draw:05d}:{bank_id}"`` so each bank's rows stay together
    and in their original order.
    """
    codes, uniq = pd.factorize(panel["bank_id"], sort=True)
    members = [np.flatnonzero(codes == g) for g in range(len(uniq))]
    pick = rng.integers(0, len(uniq), len(uniq))
    parts = []
    for j, g in enumerate(pick):
        part = panel.iloc[members[g]].copy()
        part["bank_id"] = f"{j:05d}:{uniq[g]}"
        parts.append(part)
    return pd.concat(parts, ignore_index=True)
