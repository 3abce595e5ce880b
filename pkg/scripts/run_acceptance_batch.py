"""Run every config in a directory and write reports (deterministic).

Usage: python scripts/run_acceptance_batch.py OUT_DIR [CONFIG_DIR]

Writes ``<name>.*.csv`` and ``<name>.summary.json`` per config, the
counterexample reports, and ``batch.summary.json``.  Exit status 0 iff every
check matches its expected status and the counterexamples diverge.
"""
from __future__ import annotations

import sys
from pathlib import Path

from modelcalc.cli import load_config
from modelcalc.runner import emit_reports, run_experiment, write_json
from modelcalc import cli

DEFAULT_CONFIGS = Path(__file__).resolve().parent.parent / "configs" / "acceptance"


def run_batch(out_dir, config_dir=DEFAULT_CONFIGS, verbose=True) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = {}
    for path in sorted(Path(config_dir).glob("*.cfg")):
        result = run_experiment(load_config(path))
        status = emit_reports(result, out)
        rows[result.config.name] = {c.tag: c.status for c in result.checks} | {"exit_status": status}
        if verbose:
            print(f"{result.config.name}: {'ok' if status == 0 else 'MISMATCH'}")
    ce = cli.main(["counterexamples", "--out", str(out)]) if verbose else _quiet_counterexamples(out)
    status = 0 if ce == 0 and all(r["exit_status"] == 0 for r in rows.values()) else 1
    write_json(out / "batch.summary.json", {"configs": rows, "counterexamples": ce, "exit_status": status})
    return status


def _quiet_counterexamples(out: Path) -> int:
    import contextlib
    import io

    with contextlib.redirect_stdout(io.StringIO()):
        return cli.main(["counterexamples", "--out", str(out)])


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        print(__doc__, file=sys.stderr)
        return 2
    return run_batch(argv[0], argv[1] if len(argv) > 1 else DEFAULT_CONFIGS)


if __name__ == "__main__":
    sys.exit(main())
