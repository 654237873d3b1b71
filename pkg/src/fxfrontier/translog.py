"""Translog cost-frontier design matrices, elasticities and returns to scale.

Terms are built from a *log block* of K variables (log outputs, log prices
normalized by the homogeneity price, log-type risk covariates, and optional
extra log variables such as the exchange rate): all K first-order terms, the K
half-squares ``0.5 * x_k**2`` and the ``K(K-1)/2`` cross products.  Ratio-type
risk covariates and the trend polynomial enter linearly.  The intercept is not
part of the design; the estimator adds it.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import NonPositiveValue, SpecMismatch, UnknownColumn, ZeroElasticitySum


@dataclass
class FrontierSpec:
    outputs: list[str] = field(default_factory=lambda: ["loans", "deposits", "fee_income"])
    prices: list[str] = field(default_factory=lambda: ["wage_rate", "capital_rate"])
    risk_covariates: list[str] = field(default_factory=list)
    log_risk_covariates: list[str] = field(default_factory=list)
    extra_log_variables: list[str] = field(default_factory=list)
    trend_degree: int = 2
    normalization_price: int = -1
    split_fx_loans: bool = False

    def __post_init__(self):
        if not self.outputs:
            raise ValueError("FrontierSpec.outputs must be non-empty")
        if not self.prices:
            raise ValueError("FrontierSpec.prices must be non-empty")
        if not -len(self.prices) <= self.normalization_price < len(self.prices):
            raise ValueError("normalization_price does not index into prices")
        if self.trend_degree not in (0, 1, 2):
            raise ValueError("trend_degree must be 0, 1 or 2")

    @property
    def norm_index(self) -> int:
        return self.normalization_price % len(self.prices)

    @property
    def output_columns(self) -> list[str]:
        if not self.split_fx_loans:
            return list(self.outputs)
        out = []
        for o in self.outputs:
            out.extend(["fx_loans", "rub_loans"] if o == "loans" else [o])
        return out

    @property
    def free_prices(self) -> list[str]:
        return [p for i, p in enumerate(self.prices) if i != self.norm_index]

    @property
    def log_block(self) -> list[str]:
        return (self.output_columns + self.free_prices + list(self.log_risk_covariates)
                + list(self.extra_log_variables))

    def n_terms(self) -> int:
        k = len(self.log_block)
        return k + k * (k + 1) // 2 + len(self.risk_covariates) + self.trend_degree

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FrontierSpec":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown FrontierSpec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Term:
    """``factor * prod(x[i] for i in idx)`` over log-block positions, or a linear column."""

    name: str
    idx: tuple[int, ...] = ()
    factor: float = 1.0
    linear: str | None = None


def terms(spec: FrontierSpec) -> list[Term]:
    """Ordered term list; a pure function of the spec."""
    w_norm = spec.prices[spec.norm_index]
    names = ([f"ln_{c}" for c in spec.output_columns]
             + [f"ln_{p}/{w_norm}" for p in spec.free_prices]
             + [f"ln_{c}" for c in list(spec.log_risk_covariates) + list(spec.extra_log_variables)])
    k = len(names)
    out = [Term(names[i], (i,)) for i in range(k)]
    for i in range(k):
        out.append(Term(f"0.5*{names[i]}^2", (i, i), 0.5))
    for i in range(k):
        for j in range(i + 1, k):
            out.append(Term(f"{names[i]}*{names[j]}", (i, j)))
    for r in spec.risk_covariates:
        out.append(Term(r, linear=r))
    if spec.trend_degree >= 1:
        out.append(Term("t", linear="__t"))
    if spec.trend_degree >= 2:
        out.append(Term("0.5*t^2", linear="__t2"))
    return out


@dataclass(frozen=True)
class DesignRow:
    regressors: np.ndarray
    normalized_log_cost: float
    names: tuple[str, ...]


@dataclass
class Design:
    """Frontier design for a panel.

    ``X`` has one column per :func:`terms` entry (no intercept); ``y`` is the
    price-normalized log cost.
    """

    X: np.ndarray
    y: np.ndarray
    names: list[str]
    spec: FrontierSpec
    bank_id: np.ndarray
    quarter: np.ndarray
    cost_choice: str
    trend_origin: int | None = None
    trend_span: float | None = None
    row_index: np.ndarray | None = None

    def __len__(self):
        return self.X.shape[0]

    def row(self, i: int) -> DesignRow:
        return DesignRow(self.X[i].copy(), float(self.y[i]), tuple(self.names))

    def rows(self):
        return [self.row(i) for i in range(len(self))]

    def subset(self, mask) -> "Design":
        mask = np.asarray(mask)
        return dataclasses.replace(
            self, X=self.X[mask], y=self.y[mask], bank_id=self.bank_id[mask],
            quarter=self.quarter[mask],
            row_index=None if self.row_index is None else self.row_index[mask])

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.X, columns=self.names)
        df.insert(0, "quarter", self.quarter)
        df.insert(0, "bank_id", self.bank_id)
        df["y"] = self.y
        return df

    def to_csv(self, path) -> None:
        df = self.to_frame()
        for c in self.names + ["y"]:
            df[c] = [repr(float(x)) for x in df[c]]
        df.to_csv(path, index=False, lineterminator="\n")

    def meta(self) -> dict:
        return {"spec": self.spec.to_dict(), "cost_choice": self.cost_choice,
                "trend_origin": self.trend_origin, "trend_span": self.trend_span,
                "names": list(self.names)}


def expand(spec: FrontierSpec, log_block: np.ndarray, linear: dict[str, np.ndarray]) -> np.ndarray:
    """Evaluate all terms given log-block values (n, K) and linear columns."""
    log_block = np.atleast_2d(np.asarray(log_block, dtype=float))
    cols = []
    for t in terms(spec):
        if t.linear is not None:
            cols.append(np.asarray(linear[t.linear], dtype=float))
        elif len(t.idx) == 1:
            cols.append(log_block[:, t.idx[0]])
        else:
            cols.append(t.factor * log_block[:, t.idx[0]] * log_block[:, t.idx[1]])
    return np.column_stack(cols) if cols else np.empty((log_block.shape[0], 0))


def _positive_log(panel: pd.DataFrame, col: str, values=None) -> np.ndarray:
    v = panel[col].to_numpy(float) if values is None else values
    bad = ~(v > 0)
    if bad.any():
        raise NonPositiveValue(col, int(np.flatnonzero(bad)[0]))
    return np.log(v)


def cost_series(panel: pd.DataFrame, cost_choice: str) -> np.ndarray:
    """Raw cost for ``oc``, ``caoc``, ``tc`` or any panel column name."""
    tc = panel["total_costs"].to_numpy(float)
    ie = panel["interest_expenses"].to_numpy(float)
    choice = cost_choice.lower()
    if choice == "oc":
        return tc - ie
    if choice == "caoc":
        return tc - ie - panel["revals_neg"].to_numpy(float)
    if choice == "tc":
        return tc
    if cost_choice in panel.columns:
        return panel[cost_choice].to_numpy(float)
    raise UnknownColumn(cost_choice)


def build_design(panel: pd.DataFrame, spec: FrontierSpec, cost_choice: str = "caoc",
                 *, cost_values: np.ndarray | None = None, log_cost: np.ndarray | None = None,
                 trend_origin: int | None = None, trend_span: float | None = None) -> Design:
    """Translog design with linear homogeneity in prices imposed.

    Cost and every non-normalization price are divided by the normalization
    price before logs are taken.  ``log_cost`` overrides the cost column with
    an already-logged (un-normalized) series, as used for purged costs.
    """
    needed = (spec.output_columns + list(spec.prices) + list(spec.risk_covariates)
              + list(spec.log_risk_covariates) + list(spec.extra_log_variables))
    for c in needed:
        if c not in panel.columns:
            raise UnknownColumn(c)
    n = len(panel)
    w_norm_col = spec.prices[spec.norm_index]
    w_norm = panel[w_norm_col].to_numpy(float)
    ln_wn = _positive_log(panel, w_norm_col)

    if log_cost is not None:
        y = np.asarray(log_cost, dtype=float) - ln_wn
    else:
        cost = cost_series(panel, cost_choice) if cost_values is None else np.asarray(cost_values, float)
        _positive_log(panel, cost_choice if cost_values is None else "cost", cost)
        y = np.log(cost / w_norm)

    block = np.empty((n, len(spec.log_block)))
    j = 0
    for c in spec.output_columns:
        block[:, j] = _positive_log(panel, c)
        j += 1
    for p in spec.free_prices:
        _positive_log(panel, p)
        block[:, j] = np.log(panel[p].to_numpy(float) / w_norm)
        j += 1
    for c in list(spec.log_risk_covariates) + list(spec.extra_log_variables):
        block[:, j] = _positive_log(panel, c)
        j += 1

    quarter = panel["quarter"].to_numpy(np.int64)
    linear = {r: panel[r].to_numpy(float) for r in spec.risk_covariates}
    for r in spec.risk_covariates:
        bad = ~np.isfinite(linear[r])
        if bad.any():
            raise NonPositiveValue(r, int(np.flatnonzero(bad)[0]))
    if spec.trend_degree:
        if trend_origin is None:
            trend_origin = int(quarter.min()) if n else 0
        if trend_span is None:
            trend_span = float(max(int(quarter.max()) - trend_origin, 1)) if n else 1.0
        t = (quarter - trend_origin) / trend_span
        linear["__t"] = t
        linear["__t2"] = 0.5 * t * t
    X = expand(spec, block, linear)
    return Design(X=X, y=y, names=[t.name for t in terms(spec)], spec=spec,
                  bank_id=panel["bank_id"].astype(str).to_numpy(), quarter=quarter,
                  cost_choice=cost_choice, trend_origin=trend_origin, trend_span=trend_span,
                  row_index=panel.index.to_numpy())


def _coef_lookup(fit, names: Sequence[str]) -> np.ndarray:
    fnames = list(getattr(fit, "frontier_names"))
    if [n for n in fnames if n != "const"] != list(names):
        raise SpecMismatch("fit terms do not match the design row")
    coef = dict(zip(fnames, np.asarray(fit.beta, dtype=float)))
    return np.array([coef[n] for n in names])


def elasticities_from_coef(spec: FrontierSpec, coef: np.ndarray, log_block: np.ndarray) -> np.ndarray:
    """d ln C / d x_k for every log-block variable; ``log_block`` is (n, K)."""
    log_block = np.atleast_2d(np.asarray(log_block, float))
    n, k = log_block.shape
    grad = np.zeros((n, k))
    for c, t in zip(coef, terms(spec)):
        if t.linear is not None:
            continue
        if len(t.idx) == 1:
            grad[:, t.idx[0]] += c
        elif t.idx[0] == t.idx[1]:
            grad[:, t.idx[0]] += c * 2.0 * t.factor * log_block[:, t.idx[0]]
        else:
            i, j = t.idx
            grad[:, i] += c * t.factor * log_block[:, j]
            grad[:, j] += c * t.factor * log_block[:, i]
    return grad


def _row_block(spec: FrontierSpec, row) -> np.ndarray:
    regs = np.asarray(row.regressors if isinstance(row, DesignRow) else row, dtype=float)
    return np.atleast_2d(regs)[:, :len(spec.log_block)]


def output_elasticities(fit, row) -> np.ndarray:
    """Analytic output elasticities of cost at a design row (or an (n, p) matrix)."""
    spec = fit.spec
    names = [t.name for t in terms(spec)]
    if isinstance(row, DesignRow) and tuple(row.names) != tuple(names):
        raise SpecMismatch("design row was built from a different spec")
    coef = _coef_lookup(fit, names)
    grad = elasticities_from_coef(spec, coef, _row_block(spec, row))
    out = grad[:, :len(spec.output_columns)]
    return out[0] if isinstance(row, DesignRow) or np.ndim(getattr(row, "regressors", row)) == 1 else out


def returns_to_scale(fit=None, row=None, *, elasticities=None):
    """RTS = 1 / sum of output elasticities."""
    if elasticities is None:
        elasticities = output_elasticities(fit, row)
    total = np.sum(np.asarray(elasticities, float), axis=-1)
    if np.any(total == 0):
        raise ZeroElasticitySum("sum of output elasticities is zero")
    return 1.0 / total


def spec_to_json(spec: FrontierSpec) -> str:
    return json.dumps(spec.to_dict(), sort_keys=True)
