import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from modelcalc import cli
from modelcalc.config import (
    CheckSpec,
    ConfigError,
    ExperimentConfig,
    GridSpec,
    LeafSpec,
    NodeSpec,
    leaves,
    parse_config,
    serialize_config,
    tree_depth,
)
from modelcalc.core import DerivativeLevel, Locality, Order
from modelcalc.oracles import LevelSpec
from modelcalc.runner import emit_reports, run_experiment

from conftest import REPO

ACCEPTANCE = sorted((REPO / "configs" / "acceptance").glob("*.cfg"))

MINIMAL = """\
name = tiny
base_point = 0.3, -0.2
tree = (product (exact trig) (exact exp))
check = gradient near
"""

SYNTH = """\
# two perturbed factors, orders 1 and 2
name = synth
base_point = 0.3, -0.2
grid = geometric 0.125 0.5 8
tree = (product
          (synthetic positive 1 (function 1 1.0 at))
          (synthetic exp 2 (function 2 0.5 at)))
check = function at 1
"""


class TestParse:
    def test_minimal(self):
        cfg = parse_config(MINIMAL)
        assert cfg.name == "tiny" and cfg.base_point == (0.3, -0.2)
        assert tree_depth(cfg.tree) == 1
        assert [leaf.oracle for leaf in leaves(cfg.tree)] == ["trig", "exp"]
        assert cfg.checks == (CheckSpec(DerivativeLevel.GRADIENT, Locality.NEAR),)
        assert cfg.grid == GridSpec() and cfg.seed == 42

    def test_multiline_tree_and_comments(self):
        cfg = parse_config(SYNTH)
        assert cfg.checks[0].expected_order == Order.of(1)
        assert leaves(cfg.tree)[1].levels[0].kappa == 0.5

    @pytest.mark.parametrize("text, line, field", [
        (MINIMAL.replace("(exact exp))", "(exact exp) (exact trig) )").replace("product", "quotient"), 3, "tree"),
        (MINIMAL.replace("check = gradient near", "check = gradient sideways"), 4, "check"),
        (MINIMAL + "grid = geometric 0.1 0.5 3\n", 5, "grid"),
        (MINIMAL + "colour = blue\n", 5, None),
        (MINIMAL.replace("name = tiny\n", ""), None, "name"),
        (MINIMAL + "check = gradient near\n", 5, "check"),
        (MINIMAL.replace("(exact exp)", "(exact nosuch)"), 3, "tree"),
        (MINIMAL.replace("(exact exp))", "(exact exp)"), None, "tree"),
    ])
    def test_errors_carry_location(self, text, line, field):
        with pytest.raises(ConfigError) as info:
            parse_config(text)
        if line is not None:
            assert info.value.line == line
        if field is not None:
            assert info.value.field == field

    def test_quotient_needs_two_children(self):
        text = MINIMAL.replace("(product (exact trig) (exact exp))", "(quotient (exact trig) (exact exp) (exact exp))")
        with pytest.raises(ConfigError, match="line 3"):
            parse_config(text)

    def test_dimension_type_check(self):
        text = MINIMAL.replace("(product (exact trig) (exact exp))", "(product (exact map_linear) (exact exp))")
        with pytest.raises(ConfigError):
            parse_config(text)

    @pytest.mark.parametrize("path", ACCEPTANCE, ids=lambda p: p.stem)
    def test_acceptance_round_trip(self, path):
        cfg = parse_config(path.read_text())
        assert parse_config(serialize_config(cfg)) == cfg

    @given(
        seed=st.integers(0, 2**31),
        db=st.floats(0.01, 1.0),
        base=st.lists(st.floats(-1, 1, allow_subnormal=False), min_size=1, max_size=3),
        kappa=st.floats(0.0, 5.0, exclude_min=True),
        order=st.integers(0, 4),
    )
    def test_round_trip_property(self, seed, db, base, kappa, order):
        leaf = LeafSpec("synthetic", "trig", seed % 97, (LevelSpec(DerivativeLevel.GRADIENT, order, kappa, Locality.NEAR),))
        cfg = ExperimentConfig(
            name="prop",
            base_point=tuple(base),
            tree=NodeSpec("power", (leaf,), 3),
            checks=(CheckSpec(DerivativeLevel.GRADIENT, Locality.NEAR, Order.of(order)),),
            delta_bar=db,
            seed=seed,
        )
        assert parse_config(serialize_config(cfg)) == cfg


class TestRun:
    def test_exact_leaves_have_zero_errors(self):
        text = MINIMAL.replace("check = gradient near", "\n".join(
            f"check = {lv.value} {loc.value}" for lv in DerivativeLevel for loc in Locality))
        result = run_experiment(parse_config(text))
        assert result.exit_status == 0
        for c in result.checks:
            assert c.status == "PASS" and all(p.error == 0.0 for p in c.series.points)

    def test_order_zero_denominator(self):
        text = (REPO / "configs" / "acceptance" / "precondition_quotient.cfg").read_text()
        result = run_experiment(parse_config(text))
        (c,) = result.checks
        assert c.status == "PRECONDITION_FAILED" and c.ok and result.exit_status == 0

    def test_wrong_expected_order_fails(self):
        result = run_experiment(parse_config(SYNTH.replace("check = function at 1", "check = function at 2")))
        assert result.checks[0].status == "FAIL" and result.exit_status == 1
        assert "slope" in result.checks[0].diagnostic

    def test_rule_tags(self):
        result = run_experiment(parse_config(SYNTH))
        assert result.checks[0].tag == "product2/function-at"


class TestEmit:
    def test_csv_and_summary(self, tmp_path):
        result = run_experiment(parse_config(SYNTH))
        assert emit_reports(result, tmp_path) == 0
        lines = (tmp_path / "synth.function.at.csv").read_text().splitlines()
        assert len(lines) == 9 and lines[0] == "delta,measured_error,bound_value,ok"
        assert all(row.endswith(",true") for row in lines[1:])
        summary = json.loads((tmp_path / "synth.summary.json").read_text())
        assert summary["exit_status"] == 0 and summary["checks"][0]["status"] == "PASS"


class TestCli:
    def write(self, tmp_path, text, name="c.cfg"):
        p = tmp_path / name
        p.write_text(text)
        return str(p)

    def test_run_pass(self, tmp_path, capsys):
        code = cli.main(["run", self.write(tmp_path, SYNTH), "--out", str(tmp_path / "out")])
        assert code == 0 and "PASS" in capsys.readouterr().out
        assert (tmp_path / "out" / "synth.summary.json").exists()

    def test_run_fail(self, tmp_path):
        text = SYNTH.replace("check = function at 1", "check = function at 2")
        assert cli.main(["run", self.write(tmp_path, text), "--out", str(tmp_path / "out")]) == 1

    def test_bad_config(self, tmp_path, capsys):
        assert cli.main(["run", self.write(tmp_path, "name = x\n"), "--out", str(tmp_path)]) == 2
        assert capsys.readouterr().err.startswith("modelcalc: ")
        assert cli.main(["run", str(tmp_path / "missing.cfg")]) == 2

    def test_grid_override(self, tmp_path):
        out = tmp_path / "out"
        assert cli.main(["run", self.write(tmp_path, SYNTH), "--out", str(out), "--grid-count", "5"]) == 0
        assert len((out / "synth.function.at.csv").read_text().splitlines()) == 6
        assert cli.main(["run", self.write(tmp_path, SYNTH), "--out", str(out), "--grid-count", "3"]) == 2

    def test_env_out_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
        assert cli.main(["run", self.write(tmp_path, SYNTH)]) == 0
        assert (tmp_path / "env" / "synth.summary.json").exists()

    def test_counterexamples(self, tmp_path):
        assert cli.main(["counterexamples", "--out", str(tmp_path)]) == 0
        rows = (tmp_path / "counterexample-quotient.function.at.csv").read_text().splitlines()
        assert len(rows) == 9 and rows[-1].split(",")[1] == "1023.0"

    def test_selftest(self, capsys):
        assert cli.main(["selftest"]) == 0
        assert capsys.readouterr().out.count("PASS") == 3

    def test_deterministic_output(self, tmp_path):
        cfg = self.write(tmp_path, SYNTH)
        for d in ("a", "b"):
            assert cli.main(["run", cfg, "--out", str(tmp_path / d)]) == 0
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
