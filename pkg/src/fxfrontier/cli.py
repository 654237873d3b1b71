"""Command-line pipeline: simulate, ingest, estimate, scores, twostage, copula, regress, report.

Every command reads one optional TOML or JSON config file with a ``[global]``
section and one section per command; ``--seed``, ``--out`` and ``--threads``
override the global values.  Outputs go to the output directory together with
a ``<command>_manifest.json`` holding the resolved config and SHA-256 digests
of every input and output file.

Exit codes: 0 success, 2 configuration or validation error, 3 estimation did
not converge, 4 I/O error.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import functools
import hashlib
import io
import json
import logging
import math
import sys
import warnings
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, copula, panelreg, paneldata, sfa, synth, twostage
from .errors import ConfigError, DidNotConverge, FxFrontierError, NotConverged
from .translog import FrontierSpec, build_design

log = logging.getLogger("fxfrontier")

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_IO = 0, 2, 3, 4

COMMANDS = ("simulate", "ingest", "estimate", "scores", "twostage", "copula", "regress", "report")

GLOBAL_DEFAULTS = {"seed": 0, "threads": 1, "out": "out", "log_level": "WARNING"}

DEFAULTS: dict[str, dict[str, Any]] = {
    "simulate": {"banks": 200, "quarters": 40, "start_quarter": "2005Q1", "synth": {}},
    "ingest": {"panel": "panel.csv", "clean": True, "cleaning": {}, "schema": {}},
    "estimate": {"panel": "", "costs": ["caoc", "oc"], "frontier": {}, "inefficiency": {},
                 "sfa": {}, "save_design": True},
    "scores": {"panel": "", "fit": "fit_caoc.json", "cost": "", "output": ""},
    "twostage": {"panel": "", "ner": "ner_weekly.csv", "variants": [v.value for v in twostage.VARIANT_ORDER],
                 "ner_regressor": "garch_volatility", "lags": 2, "zero_fx_policy": "offset",
                 "fx_offset": 1.0, "score_adjustment": "fx_exposure", "sfa": {},
                 "bootstrap_replications": 0},
    "copula": {"scores_a": "scores_oc.csv", "scores_b": "scores_caoc.csv", "quarters": [],
               "pooled": False, "epsilon": 0.1, "grid_size": 51, "n_bandwidths": 16},
    "regress": {"panel": "", "suites": ["channels", "market_structure", "stability"],
                "scores_dropped": "scores_caoc.csv", "scores_kept": "scores_oc.csv",
                "bootstrap_replications": 1000, "zscore_window": 4, "high_capital_threshold": 20.0,
                "deep_bootstrap": False, "deep_bootstrap_replications": 50, "sfa": {}},
    "report": {},
}


class _IOFailure(Exception):
    pass


# -- config --------------------------------------------------------------------------

def load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise _IOFailure(f"cannot read config {path}: {exc}") from exc
    try:
        if p.suffix.lower() == ".json":
            cfg = json.loads(raw.decode("utf-8"))
        else:
            cfg = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a table")
    unknown = set(cfg) - {"global", *COMMANDS}
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    return cfg


def resolve(command: str, file_cfg: dict, args: argparse.Namespace) -> tuple[dict, dict]:
    """Merge defaults, the config file and command-line overrides; reject unknown keys."""
    g = dict(GLOBAL_DEFAULTS)
    given = file_cfg.get("global", {})
    bad = set(given) - set(GLOBAL_DEFAULTS)
    if bad:
        raise ConfigError(f"global.{sorted(bad)[0]}: unknown key")
    g.update(given)
    for key in ("seed", "threads", "out"):
        val = getattr(args, key, None)
        if val is not None:
            g[key] = val
    if not isinstance(g["threads"], int) or g["threads"] < 1:
        raise ConfigError("global.threads: must be a positive integer")
    if not isinstance(g["seed"], int) or g["seed"] < 0:
        raise ConfigError("global.seed: must be a non-negative integer")
    c = copy.deepcopy(DEFAULTS[command])
    given = file_cfg.get(command, {})
    bad = set(given) - set(c)
    if bad:
        raise ConfigError(f"{command}.{sorted(bad)[0]}: unknown key")
    c.update(copy.deepcopy(given))
    if command == "simulate":
        for key in ("banks", "quarters"):
            val = getattr(args, key, None)
            if val is not None:
                c[key] = val
    return g, c


# -- io helpers ----------------------------------------------------------------------

def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _csv_text(df: pd.DataFrame) -> str:
    return df.to_csv(index=False, lineterminator="\n", float_format="%.17g")


class _Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, command: str, glob: dict, cfg: dict):
        self.command = command
        self.glob = glob
        self.cfg = cfg
        self.out = Path(glob["out"])
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.extra: dict[str, Any] = {}
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise _IOFailure(f"cannot create output directory {self.out}: {exc}") from exc

    def path(self, name: str, default: str = "") -> Path:
        """Input path: absolute or relative to the working directory, else inside the output dir."""
        name = name or default
        p = Path(name)
        if p.is_absolute() or p.exists():
            return p
        return self.out / name

    def read(self, name: str, default: str = "") -> Path:
        p = self.path(name, default)
        if not p.exists():
            raise _IOFailure(f"input not found: {p}")
        self.inputs[str(p)] = sha256(p)
        return p

    def write_text(self, rel: str, text: str) -> Path:
        p = self.out / rel
        try:
            p.parent.mkdir(parents=True, exist_ok=True)
            with open(p, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        except OSError as exc:
            raise _IOFailure(f"cannot write {p}: {exc}") from exc
        self.outputs[rel] = hashlib.sha256(text.encode("utf-8")).hexdigest()
        return p

    def write_csv(self, rel: str, df: pd.DataFrame) -> Path:
        return self.write_text(rel, _csv_text(df))

    def write_json(self, rel: str, obj) -> Path:
        return self.write_text(rel, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")

    def finish(self):
        # thread count is execution detail, not part of the result contract
        glob = {k: v for k, v in self.glob.items() if k not in ("threads", "log_level")}
        manifest = {
            "command": self.command,
            "version": __version__,
            "config": {"global": glob, self.command: self.cfg},
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
        }
        if self.extra:
            manifest["details"] = self.extra
        self.write_json(f"{self.command}_manifest.json", manifest)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _read_panel(run: _Run, name: str) -> pd.DataFrame:
    if not name:
        clean = run.out / "panel_clean.csv"
        name = str(clean) if clean.exists() else "panel.csv"
    p = run.read(name)
    return paneldata.ingest_panel(p)


def _read_scores(run: _Run, name: str) -> pd.DataFrame:
    p = run.read(name)
    df = pd.read_csv(p, dtype={"bank_id": str})
    for col in ("bank_id", "quarter", "ce"):
        if col not in df.columns:
            raise ConfigError(f"scores file {p} lacks column {col!r}")
    if df["quarter"].dtype == object:
        df["quarter"] = [paneldata.parse_quarter(q) for q in df["quarter"]]
    return df


def _scores_frame(scores: pd.DataFrame) -> pd.DataFrame:
    out = scores.copy()
    out["quarter"] = [paneldata.format_quarter(int(q)) for q in out["quarter"]]
    return out


def _sfa_options(section: dict, glob: dict) -> sfa.SfaOptions:
    opts = dict(section)
    valid = {f.name for f in dataclasses.fields(sfa.SfaOptions)}
    bad = set(opts) - valid
    if bad:
        raise ConfigError(f"sfa.{sorted(bad)[0]}: unknown key")
    opts.setdefault("seed", glob["seed"])
    opts["threads"] = glob["threads"]
    if "log_var_bounds" in opts:
        opts["log_var_bounds"] = tuple(opts["log_var_bounds"])
    return sfa.SfaOptions(**opts)


def _inefficiency_spec(section: dict) -> sfa.InefficiencySpec:
    valid = {f.name for f in dataclasses.fields(sfa.InefficiencySpec)}
    bad = set(section) - valid
    if bad:
        raise ConfigError(f"inefficiency.{sorted(bad)[0]}: unknown key")
    return sfa.InefficiencySpec(**section)


# -- commands ------------------------------------------------------------------------

def cmd_simulate(run: _Run) -> int:
    c = run.cfg
    try:
        scfg = synth.SynthConfig.from_dict(c.get("synth", {}))
    except TypeError as exc:
        raise ConfigError(f"synth: {exc}") from exc
    scfg = dataclasses.replace(scfg, n_banks=int(c["banks"]), n_quarters=int(c["quarters"]),
                               start_quarter=str(c["start_quarter"]), seed=int(run.glob["seed"]))
    panel, truth = synth.generate(scfg)
    run.write_text("panel.csv", paneldata.write_panel_csv(panel))
    run.write_text("ner_weekly.csv", synth.ner_csv(truth.ner_weekly))
    run.write_text("truth.json", truth.to_json() + "\n")
    run.write_csv("truth_scores.csv", _scores_frame(truth.ce))
    run.extra["rows"] = len(panel)
    return EXIT_OK


def cmd_ingest(run: _Run) -> int:
    c = run.cfg
    p = run.read(c["panel"])
    panel = paneldata.ingest_panel(p, c["schema"] or None)
    paneldata.check_invariants(panel)
    if c["clean"]:
        fields = {f.name for f in dataclasses.fields(paneldata.CleaningPolicy)}
        bad = set(c["cleaning"]) - fields
        if bad:
            raise ConfigError(f"ingest.cleaning.{sorted(bad)[0]}: unknown key")
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in c["cleaning"].items()}
        panel, report = paneldata.clean_panel(panel, paneldata.CleaningPolicy(**kw))
        run.write_text("cleaning_report.json", report.to_json() + "\n")
    run.write_text("panel_clean.csv", paneldata.write_panel_csv(panel))
    run.extra["rows"] = len(panel)
    return EXIT_OK


def cmd_estimate(run: _Run) -> int:
    c = run.cfg
    panel = _read_panel(run, c["panel"])
    spec = FrontierSpec.from_dict(c["frontier"]) if c["frontier"] else FrontierSpec()
    zspec = _inefficiency_spec(c["inefficiency"])
    opts = _sfa_options(c["sfa"], run.glob)
    failed = None
    for cost in c["costs"]:
        if cost not in ("oc", "caoc", "tc"):
            raise ConfigError(f"estimate.costs: unknown cost measure {cost!r}")
        design = build_design(panel, spec, cost)
        z = sfa.build_z(panel, zspec)
        ok = np.all(np.isfinite(z.Z), axis=1)
        if not ok.all():
            design, z = design.subset(ok), z.subset(ok)
        flat = sfa.constant_covariates(z) if z.include_constant else []
        if flat:
            keep_cols = [j for j, n in enumerate(z.names) if n not in flat]
            z = dataclasses.replace(z, Z=np.ascontiguousarray(z.Z[:, keep_cols]),
                                    names=[z.names[j] for j in keep_cols])
            run.extra.setdefault("dropped_covariates", {})[cost] = flat
        if c["save_design"]:
            run.write_text(f"design_{cost}.csv", _csv_text(design.to_frame()))
        try:
            fit = sfa.fit_frontier(design, z, dataclasses.replace(opts, raise_on_fail=True))
        except DidNotConverge as exc:
            if exc.fit is not None:
                run.write_text(f"fit_{cost}.partial.json", exc.fit.to_json() + "\n")
            failed = f"{cost}: {exc}"
            continue
        run.write_text(f"fit_{cost}.json", fit.to_json() + "\n")
        run.write_csv(f"scores_{cost}.csv", _scores_frame(sfa.efficiency_scores(fit, design, z)))
    if failed:
        run.extra["not_converged"] = failed
        run.finish()
        log.error("estimation did not converge (%s)", failed)
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_scores(run: _Run) -> int:
    c = run.cfg
    panel = _read_panel(run, c["panel"])
    fit = sfa.SfaFit.from_json(run.read(c["fit"]).read_text(encoding="utf-8"))
    meta = fit.design_meta or {}
    cost = c["cost"] or meta.get("cost_choice", "caoc")
    spec = fit.spec or FrontierSpec()
    design = build_design(panel, spec, cost, trend_origin=meta.get("trend_origin"),
                          trend_span=meta.get("trend_span"))
    zspec = sfa.InefficiencySpec(covariates=[n for n in fit.z_names if n != "const"],
                                 include_constant="const" in fit.z_names, half_normal=fit.half_normal)
    z = sfa.build_z(panel, zspec)
    ok = np.all(np.isfinite(z.Z), axis=1) if z.Z.size else np.ones(len(panel), bool)
    if not ok.all():
        design, z = design.subset(ok), z.subset(ok)
    scores = sfa.efficiency_scores(fit, design, z)
    run.write_csv(c["output"] or f"rescored_{cost}.csv", _scores_frame(scores))
    return EXIT_OK


def cmd_twostage(run: _Run) -> int:
    c = run.cfg
    panel = _read_panel(run, c["panel"])
    weekly = pd.read_csv(run.read(c["ner"]))
    if "quarter" not in weekly.columns:
        dates = pd.to_datetime(weekly["date"])
        weekly["quarter"] = dates.dt.year * 4 + (dates.dt.month - 1) // 3
    elif weekly["quarter"].dtype == object:
        weekly["quarter"] = [paneldata.parse_quarter(q) for q in weekly["quarter"]]
    nq = twostage.quarterly_ner(weekly)
    try:
        cfg = twostage.TwoStageConfig(
            ner_regressor=c["ner_regressor"], lags=int(c["lags"]), zero_fx_policy=c["zero_fx_policy"],
            fx_offset=float(c["fx_offset"]), score_adjustment=c["score_adjustment"],
            sfa=_sfa_options(c["sfa"], run.glob))
        variants = [twostage.Variant(v) for v in c["variants"]]
    except ValueError as exc:
        raise ConfigError(f"twostage: {exc}") from exc
    reps = int(c["bootstrap_replications"])
    if reps < 0:
        raise ConfigError("twostage.bootstrap_replications must be >= 0")
    results = twostage.run_all(panel, nq, cfg, variants)
    run.write_csv("twostage_summary.csv", twostage.variant_summary(results))
    frames = []
    for v, r in results.items():
        s = _scores_frame(r.scores[["bank_id", "quarter", "ce"]])
        s.insert(0, "variant", v.value)
        frames.append(s)
        run.write_text(f"twostage_fit_{v.value}.json", r.fit.to_json() + "\n")
    run.write_csv("twostage_scores.csv", pd.concat(frames, ignore_index=True))
    if {twostage.Variant.KEPT, twostage.Variant.DROPPED, twostage.Variant.BOTH} <= set(results):
        run.extra["closure"] = twostage.closure(results)
    if reps:
        rows = []
        for v in variants:
            bs = twostage.bootstrap_variant(panel, nq, dataclasses.replace(cfg, variant=v), reps,
                                            int(run.glob["seed"]))
            rows += [dict(variant=v.value, term=k, se=float(x), n_failed=bs.n_failed)
                     for k, x in bs.se.items()]
        run.write_csv("twostage_bootstrap_se.csv", pd.DataFrame(rows))
    return EXIT_OK


def cmd_copula(run: _Run) -> int:
    c = run.cfg
    a = _read_scores(run, c["scores_a"])
    b = _read_scores(run, c["scores_b"])
    opts = copula.CopulaOptions(grid_size=int(c["grid_size"]), n_bandwidths=int(c["n_bandwidths"]),
                                epsilon=float(c["epsilon"]))
    quarters = [paneldata.parse_quarter(q) if isinstance(q, str) else int(q) for q in c["quarters"]] or None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", copula.BandwidthSelectionFailed)
        dens = copula.by_quarter(a, b, opts, quarters=quarters, pooled=bool(c["pooled"]))
    summary = []
    for key, d in dens.items():
        label = key if key == "pooled" else paneldata.format_quarter(int(key))
        run.write_csv(f"copula/density_{label}.csv", d.to_frame())
        rep = copula.tail_report(d)
        run.write_json(f"copula/tail_{label}.json", rep)
        summary.append({"quarter": label, "n": d.n, "h_u": d.bandwidths[0], "h_v": d.bandwidths[1],
                        "method": d.method, **{f"ratio_{k}": v for k, v in rep["ratio"].items()}})
    run.write_csv("copula_summary.csv", pd.DataFrame(summary))
    if caught:
        run.extra["bandwidth_fallbacks"] = len(caught)
    return EXIT_OK


def cmd_regress(run: _Run) -> int:
    c = run.cfg
    panel = _read_panel(run, c["panel"])
    suites = list(c["suites"])
    bad = set(suites) - {"channels", "market_structure", "stability"}
    if bad:
        raise ConfigError(f"regress.suites: unknown suite(s) {sorted(bad)}")
    rows = {}
    if "channels" in suites:
        fits = panelreg.channels_suite(panel)
        run.write_csv("regress_channels.csv", panelreg.fits_to_long(fits, "channels"))
        rows["channels"] = [f.n_obs for f in fits]
    if "market_structure" in suites:
        dropped = _read_scores(run, c["scores_dropped"])
        kept = _read_scores(run, c["scores_kept"])
        reps = int(c["bootstrap_replications"])
        bs = panelreg.Bootstrap(reps, seed=run.glob["seed"], threads=run.glob["threads"]) if reps > 1 else None
        fits = panelreg.market_structure_suite(panel, dropped, kept, bootstrap=bs)
        run.write_csv("regress_market_structure.csv", panelreg.fits_to_long(fits, "market_structure"))
        if c["deep_bootstrap"]:
            cfg = twostage.TwoStageConfig(sfa=_sfa_options(c["sfa"], run.glob))
            deep = panelreg.deep_market_structure_se(
                panel, functools.partial(twostage.kept_dropped_scores, config=cfg),
                panelreg.Bootstrap(int(c["deep_bootstrap_replications"]), seed=run.glob["seed"],
                                   threads=run.glob["threads"]))
            run.write_csv("regress_market_structure_deep_se.csv", deep)
        rows["market_structure"] = {f.name: f.n_obs for f in fits}
    if "stability" in suites:
        for measure in ("revals", "netfx"):
            fits = panelreg.stability_suite(panel, measure, window=int(c["zscore_window"]),
                                            high_capital_threshold=float(c["high_capital_threshold"]))
            run.write_csv(f"regress_stability_{measure}.csv",
                          panelreg.fits_to_long(fits, f"stability_{measure}"))
            rows[f"stability_{measure}"] = [f.n_obs for f in fits]
    run.extra["row_counts"] = rows
    return EXIT_OK


def cmd_report(run: _Run) -> int:
    """Collect the manifests in the output directory into one summary."""
    lines = ["# fxfrontier run report", ""]
    for cmd in COMMANDS[:-1]:
        p = run.out / f"{cmd}_manifest.json"
        if not p.exists():
            continue
        run.read(str(p))
        m = json.loads(p.read_text(encoding="utf-8"))
        lines.append(f"## {cmd}")
        for name, digest in m["outputs"].items():
            lines.append(f"- {name} `{digest[:16]}`")
        for k, v in m.get("details", {}).items():
            lines.append(f"- {k}: {json.dumps(v, sort_keys=True, default=_json_default)}")
        lines.append("")
    t5 = run.out / "twostage_summary.csv"
    if t5.exists():
        run.read(str(t5))
        df = pd.read_csv(t5)
        lines += ["## mean cost efficiency by variant (percent)", "",
                  "| variant | n | mean | sd |", "|---|---|---|---|"]
        lines += [f"| {r.variant} | {r.n_obs} | {r.mean:.2f} | {r.sd:.2f} |" for r in df.itertuples()]
        lines.append("")
    run.write_text("report.md", "\n".join(lines))
    return EXIT_OK


HANDLERS: dict[str, Callable[[_Run], int]] = {
    "simulate": cmd_simulate, "ingest": cmd_ingest, "estimate": cmd_estimate,
    "scores": cmd_scores, "twostage": cmd_twostage, "copula": cmd_copula,
    "regress": cmd_regress, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fxfrontier", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="TOML or JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", "-o")
        p.add_argument("--threads", type=int)
        if name == "simulate":
            p.add_argument("--banks", type=int)
            p.add_argument("--quarters", type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_cfg = load_config(args.config)
        glob, cfg = resolve(args.command, file_cfg, args)
        logging.basicConfig(level=getattr(logging, str(glob["log_level"]).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        run = _Run(args.command, glob, cfg)
        code = HANDLERS[args.command](run)
        if code == EXIT_OK:
            run.finish()
        return code
    except _IOFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DidNotConverge, NotConverged) as exc:
        print(f"error: estimation did not converge: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FxFrontierError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
