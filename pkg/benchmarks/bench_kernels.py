"""Compiled vs numpy kernel timings.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0] [--json out.json]

Each kernel runs on the same inputs under both backends; the table reports
the best-of-``repeat`` wall time, the speedup and the largest absolute
difference between the two outputs.
"""
from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from fxfrontier import _kernels_py as py

try:
    from fxfrontier import _kernels as cy
except ImportError:
    cy = None


def _cases(scale: float, rng: np.random.Generator):
    n = int(8000 * scale)
    eps, mu = rng.normal(size=n), rng.normal(0.2, 0.5, n)
    ret = rng.standard_normal(int(10_000 * scale))
    m = int(600 * scale)
    u, v = rng.uniform(size=m), rng.uniform(size=m)
    hu, hv = np.linspace(0.03, 0.3, 12), np.linspace(0.03, 0.3, 12)
    return {
        "log_ndtr": (lambda k: k.log_ndtr_array(np.linspace(-40, 10, n))),
        "mills": (lambda k: k.mills(np.linspace(-40, 10, n))),
        "sfa_terms": (lambda k: k.sfa_terms(eps, mu, 0.25, 0.04)),
        "bc_scores": (lambda k: k.bc_scores(eps, mu, 0.25, 0.04)),
        "garch_filter": (lambda k: k.garch_filter(ret, 0.1, 0.1, 0.8, 1.0)),
        "garch_loglik_grad": (lambda k: k.garch_loglik_grad(ret, 0.1, 0.1, 0.8, 1.0)),
        "lcv_grid": (lambda k: k.lcv_grid(u, v, hu, hv)),
    }


def _max_diff(a, b) -> float:
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a, float), np.asarray(b, float)
    ok = np.isfinite(a) & np.isfinite(b)
    return float(np.max(np.abs(a[ok] - b[ok]))) if ok.any() else 0.0


def run(repeat: int = 5, scale: float = 1.0, seed: int = 0) -> list[dict]:
    if cy is None:
        raise SystemExit("compiled extension not built; run `python setup.py build_ext --inplace`")
    rows = []
    for name, call in _cases(scale, np.random.default_rng(seed)).items():
        t_py = min(timeit.repeat(lambda: call(py), number=1, repeat=repeat))
        t_cy = min(timeit.repeat(lambda: call(cy), number=1, repeat=repeat))
        rows.append(dict(kernel=name, python_ms=1e3 * t_py, cython_ms=1e3 * t_cy,
                         speedup=t_py / t_cy, max_abs_diff=_max_diff(call(py), call(cy))))
    return rows


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0, help="multiplier on input sizes")
    ap.add_argument("--json", help="also write the rows to this file")
    args = ap.parse_args(argv)
    rows = run(args.repeat, args.scale)
    print(f"{'kernel':<20}{'python ms':>12}{'cython ms':>12}{'speedup':>10}{'max |diff|':>14}")
    for r in rows:
        print(f"{r['kernel']:<20}{r['python_ms']:>12.2f}{r['cython_ms']:>12.2f}"
              f"{r['speedup']:>10.1f}{r['max_abs_diff']:>14.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
