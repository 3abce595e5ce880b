"""``modelcalc`` command line: run configs, reproduce counterexamples, self-test.

Exit codes: 0 all checks pass, 1 a check fails or diverges, 2 config or I/O error.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .calculus import power_bound, product2_bound, productN_bound
from .config import ConfigError, ExperimentConfig, parse_config, serialize_config
from .core import DerivativeLevel, Locality
from .oracles import Combination, combine_oracles, make_test_suite
from .runner import _atomic_write, _csv_num, _num, emit_reports, run_experiment, write_json
from .sampling import random_inputs, random_part, replicate
from .verification import finite_difference_check, run_counterexamples

__all__ = ["parse_config", "serialize_config", "run_experiment", "emit_reports", "main"]

OUT_ENV = "MODELCALC_OUT"
DEFAULT_OUT = "modelcalc-out"


def _out_dir(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def load_config(path, grid_count: int | None = None, seed: int | None = None) -> ExperimentConfig:
    cfg = parse_config(Path(path).read_text(encoding="utf-8"))
    if grid_count is not None:
        if grid_count < 4:
            raise ConfigError(f"grid count must be >= 4, got {grid_count}", None, "grid")
        cfg = replace(cfg, grid=replace(cfg.grid, count=grid_count))
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, args.grid_count, args.seed)
    except (ConfigError, OSError, UnicodeDecodeError) as exc:
        print(f"modelcalc: {args.config}: {exc}", file=sys.stderr)
        return 2
    result = run_experiment(cfg)
    try:
        status = emit_reports(result, _out_dir(args.out))
    except OSError as exc:
        print(f"modelcalc: cannot write reports: {exc}", file=sys.stderr)
        return 2
    for c in result.checks:
        mark = "ok" if c.ok else "MISMATCH"
        print(f"{cfg.name} {c.level.value} {c.locality.value}: {c.status} [{c.tag}] {mark}")
    return status


def cmd_counterexamples(args) -> int:
    report = run_counterexamples()
    out = _out_dir(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        summary = []
        for r in report.results:
            rows = ["delta,measured_error,bound_value,ok"]
            for p, e in zip(r.series.points, r.expected):
                match = math.isclose(p.error, e, rel_tol=1e-9)
                rows.append(f"{_csv_num(p.delta)},{_csv_num(p.error)},{_csv_num(e)},{'true' if match else 'false'}")
            _atomic_write(out / f"counterexample-{r.name}.{r.level.value}.at.csv", "\n".join(rows) + "\n")
            summary.append({"name": r.name, "level": r.level.value, "passed": r.passed,
                            "ratios": [_num(x) for x in r.ratios]})
            print(f"counterexample {r.name}: {'diverges as expected' if r.passed else 'FAILED'}")
        write_json(out / "counterexamples.summary.json", {"passed": report.passed, "results": summary})
    except OSError as exc:
        print(f"modelcalc: cannot write reports: {exc}", file=sys.stderr)
        return 2
    return 0 if report.passed else 1


def _selftest_fd() -> bool:
    rng = np.random.default_rng(0)
    suite = make_test_suite()
    scalars = [o for o in suite if o.is_scalar and o.dim_in == 2]
    positive = next(o for o in scalars if o.name.startswith("positive"))
    combos = [combine_oracles(Combination.PRODUCT, scalars[:3]),
              combine_oracles(Combination.QUOTIENT, [scalars[1], positive]),
              combine_oracles(Combination.POWER, [scalars[2]], 3)]
    ok = True
    for oracle in suite + combos:
        pts = rng.uniform(-0.5, 0.5, size=(10, oracle.dim_in))
        rep = finite_difference_check(oracle, pts)
        ok &= rep.passed
        if not rep.passed:
            print(f"  FD mismatch: {oracle.name} grad {rep.max_grad_error:.2e} hess {rep.max_hess_error:.2e}")
    return ok


def _selftest_reductions() -> bool:
    rng = np.random.default_rng(1)
    ok = True
    for _ in range(20):
        inputs = random_inputs(rng, 2, function_at_exact=True)
        part = random_part(rng, function_at_exact=True)
        for level in DerivativeLevel:
            for loc in Locality:
                a, b = product2_bound(level, loc, inputs), productN_bound(level, loc, inputs, 2)
                ok &= a.order == b.order and math.isclose(a.constant, b.constant, rel_tol=1e-12, abs_tol=1e-300)
                p = power_bound(level, replicate(part, 1), 3, loc)
                q = productN_bound(level, loc, replicate(part, 3), 3)
                ok &= p.order == q.order and math.isclose(p.constant, q.constant, rel_tol=1e-12, abs_tol=1e-300)
    return ok


def cmd_selftest(args) -> int:
    checks = [
        ("finite-difference derivatives", _selftest_fd),
        ("counterexamples diverge", lambda: run_counterexamples().passed),
        ("product/power reductions", _selftest_reductions),
    ]
    ok = True
    for name, fn in checks:
        passed = bool(fn())
        ok &= passed
        print(f"selftest {name}: {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modelcalc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("config")
    r.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    r.add_argument("--grid-count", type=int)
    r.add_argument("--seed", type=int)
    r.set_defaults(fn=cmd_run)
    c = sub.add_parser("counterexamples", help="reproduce the divergence constructions")
    c.add_argument("--out")
    c.set_defaults(fn=cmd_counterexamples)
    s = sub.add_parser("selftest", help="finite-difference checks and invariant suite")
    s.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
