"""Line-oriented experiment configuration with an S-expression combination tree.

See ``docs/config_grammar.md`` for the grammar.  ``serialize_config`` writes
floats with ``repr`` so ``parse_config(serialize_config(c)) == c``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Union

from .core import DerivativeLevel, Locality, ModelCalcError, Order, Quantity, Side
from .oracles import CATALOGUE, LevelSpec, make_oracle


class ConfigError(ModelCalcError, ValueError):
    """Malformed configuration; carries the 1-based line number and field name."""

    def __init__(self, message: str, line: int | None = None, field_name: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field_name is not None:
            where.append(f"field '{field_name}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.field = field_name


STATUSES = ("PASS", "FAIL", "DIVERGENT", "PRECONDITION_FAILED")
LEAF_KINDS = ("exact", "interp", "synthetic")
NODE_KINDS = ("product", "quotient", "compose", "power", "shift")


@dataclass(frozen=True)
class LeafSpec:
    kind: str
    oracle: str
    seed: int = 0
    levels: tuple[LevelSpec, ...] = ()


@dataclass(frozen=True)
class NodeSpec:
    kind: str
    children: tuple["TreeSpec", ...]
    exponent: int | None = None


TreeSpec = Union[LeafSpec, NodeSpec]


@dataclass(frozen=True)
class GridSpec:
    start: float = 0.125
    ratio: float = 0.5
    count: int = 8

    def deltas(self) -> tuple[float, ...]:
        return tuple(self.start * self.ratio**k for k in range(self.count))


@dataclass(frozen=True)
class CheckSpec:
    level: DerivativeLevel
    locality: Locality
    expected_order: Order | None = None
    expect: str = "PASS"


@dataclass(frozen=True)
class BoundOverride:
    """Analytic uniform bound replacing the sampled one for a leaf (1-based, depth-first)."""

    leaf: int
    quantity: Quantity
    locality: Locality
    value: float
    side: Side = Side.TRUTH


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    base_point: tuple[float, ...]
    tree: TreeSpec
    checks: tuple[CheckSpec, ...]
    delta_bar: float = 0.125
    grid: GridSpec = field(default_factory=GridSpec)
    seed: int = 42
    bounds: tuple[BoundOverride, ...] = ()
    zero_factors: tuple[int, ...] = ()

    @property
    def dim(self) -> int:
        return len(self.base_point)


# ---------------------------------------------------------------------------
# S-expressions
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"\s*(\(|\)|[^\s()]+)")


def _tokenize(text: str, line: int):
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise ConfigError(f"cannot tokenize tree near {text[pos:pos + 20]!r}", line, "tree")
        out.append(m.group(1))
        pos = m.end()
    return out


def _read_sexpr(tokens, line):
    def read(i):
        if i >= len(tokens):
            raise ConfigError("unexpected end of tree", line, "tree")
        tok = tokens[i]
        if tok == ")":
            raise ConfigError("unbalanced ')'", line, "tree")
        if tok != "(":
            return tok, i + 1
        items, i = [], i + 1
        while True:
            if i >= len(tokens):
                raise ConfigError("missing ')'", line, "tree")
            if tokens[i] == ")":
                return items, i + 1
            item, i = read(i)
            items.append(item)

    expr, end = read(0)
    if end != len(tokens):
        raise ConfigError("trailing tokens after tree", line, "tree")
    return expr


def _parse_enum(enum_cls, token, line, name):
    try:
        return enum_cls(token.lower())
    except ValueError:
        choices = ", ".join(e.value for e in enum_cls)
        raise ConfigError(f"unknown {name} {token!r} (expected one of {choices})", line, name) from None


def _parse_float(token, line, name) -> float:
    try:
        v = float(token)
    except ValueError:
        raise ConfigError(f"not a number: {token!r}", line, name) from None
    return v


def _parse_int(token, line, name) -> int:
    try:
        return int(token)
    except ValueError:
        raise ConfigError(f"not an integer: {token!r}", line, name) from None


def _parse_order(token, line, name) -> Order:
    try:
        return Order.of(token)
    except ValueError:
        raise ConfigError(f"invalid order {token!r}", line, name) from None


def _tree_from_expr(expr, line) -> TreeSpec:
    if not isinstance(expr, list) or not expr or isinstance(expr[0], list):
        raise ConfigError(f"tree node must be '(kind ...)', got {expr!r}", line, "tree")
    kind = expr[0].lower()
    args = expr[1:]
    if kind in LEAF_KINDS:
        if not args or isinstance(args[0], list):
            raise ConfigError(f"{kind} leaf needs an oracle name", line, "tree")
        name = args[0]
        if name not in CATALOGUE:
            raise ConfigError(f"unknown oracle {name!r}", line, "tree")
        if kind != "synthetic":
            if len(args) != 1:
                raise ConfigError(f"{kind} leaf takes only an oracle name", line, "tree")
            return LeafSpec(kind, name)
        if len(args) < 2 or isinstance(args[1], list):
            raise ConfigError("synthetic leaf needs '(synthetic NAME SEED (level order kappa locality) ...)'", line, "tree")
        seed = _parse_int(args[1], line, "tree")
        levels = []
        for item in args[2:]:
            if not isinstance(item, list) or len(item) not in (4, 5) or any(isinstance(t, list) for t in item):
                raise ConfigError(f"perturbation must be '(level order kappa locality [sign=-1])', got {item!r}", line, "tree")
            level = _parse_enum(DerivativeLevel, item[0], line, "tree")
            order = _parse_order(item[1], line, "tree")
            kappa = _parse_float(item[2], line, "tree")
            loc = _parse_enum(Locality, item[3], line, "tree")
            sign = 1.0
            if len(item) == 5:
                if not item[4].startswith("sign="):
                    raise ConfigError(f"unknown perturbation option {item[4]!r}", line, "tree")
                sign = _parse_float(item[4][5:], line, "tree")
            try:
                levels.append(LevelSpec(level, order, kappa, loc, sign))
            except ValueError as exc:
                raise ConfigError(str(exc), line, "tree") from None
        if len({ls.level for ls in levels}) != len(levels):
            raise ConfigError("duplicate perturbation level in synthetic leaf", line, "tree")
        return LeafSpec(kind, name, seed, tuple(levels))
    if kind not in NODE_KINDS:
        raise ConfigError(f"unknown tree node {expr[0]!r}", line, "tree")
    exponent = None
    if kind == "power":
        if len(args) != 2 or isinstance(args[0], list):
            raise ConfigError("power node must be '(power N CHILD)'", line, "tree")
        exponent = _parse_int(args[0], line, "tree")
        if exponent < 1:
            raise ConfigError("power exponent must be >= 1", line, "tree")
        args = args[1:]
    children = tuple(_tree_from_expr(a, line) for a in args)
    arity = {"product": None, "quotient": 2, "compose": 2, "power": 1, "shift": 1}[kind]
    if kind == "product" and len(children) < 2:
        raise ConfigError(f"product node needs at least 2 children, got {len(children)}", line, "tree")
    if arity is not None and len(children) != arity:
        raise ConfigError(f"{kind} node needs exactly {arity} children, got {len(children)}", line, "tree")
    return NodeSpec(kind, children, exponent)


def _tree_to_text(t: TreeSpec) -> str:
    if isinstance(t, LeafSpec):
        if t.kind != "synthetic":
            return f"({t.kind} {t.oracle})"
        parts = [f"(synthetic {t.oracle} {t.seed}"]
        for ls in t.levels:
            sign = "" if ls.sign == 1.0 else f" sign={ls.sign!r}"
            parts.append(f" ({ls.level.value} {ls.order} {ls.kappa!r} {ls.locality.value}{sign})")
        return "".join(parts) + ")"
    head = t.kind if t.exponent is None else f"{t.kind} {t.exponent}"
    return f"({head} " + " ".join(_tree_to_text(c) for c in t.children) + ")"


def leaves(tree: TreeSpec) -> list[LeafSpec]:
    """Leaves in depth-first order (index ``k`` in configs is ``leaves(tree)[k - 1]``)."""
    if isinstance(tree, LeafSpec):
        return [tree]
    return [leaf for c in tree.children for leaf in leaves(c)]


def tree_depth(tree: TreeSpec) -> int:
    if isinstance(tree, LeafSpec):
        return 0
    return 1 + max(tree_depth(c) for c in tree.children)


def output_dim(tree: TreeSpec, dim: int, line=None) -> int:
    """Type-check ``tree`` on ``R^dim`` and return its output dimension."""
    if isinstance(tree, LeafSpec):
        return make_oracle(tree.oracle, dim).dim_out
    if tree.kind == "compose":
        inner, outer = tree.children
        m = output_dim(inner, dim, line)
        if output_dim(outer, m, line) != 1:
            raise ConfigError("outer part of a composition must be scalar", line, "tree")
        return 1
    for c in tree.children:
        if output_dim(c, dim, line) != 1:
            raise ConfigError(f"{tree.kind} node needs scalar children; only a composition's inner part may be a mapping", line, "tree")
    return 1


# ---------------------------------------------------------------------------
# Parse / serialize
# ---------------------------------------------------------------------------

_KEYS = ("name", "base_point", "delta_bar", "grid", "seed", "tree", "check", "bound", "zero_factors")


def _logical_lines(text: str):
    """Yield ``(line_no, key, value)``; a tree value continues until parentheses balance."""
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        raw = lines[i].split("#", 1)[0].strip()
        start = i + 1
        i += 1
        if not raw:
            continue
        if "=" not in raw:
            raise ConfigError(f"expected 'key = value', got {raw!r}", start)
        key, value = (s.strip() for s in raw.split("=", 1))
        if key == "tree":
            depth = value.count("(") - value.count(")")
            while depth > 0 and i < len(lines):
                more = lines[i].split("#", 1)[0].strip()
                i += 1
                value += " " + more
                depth += more.count("(") - more.count(")")
        yield start, key, value


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a configuration; errors name the offending line and field."""
    fields: dict = {}
    checks, bounds = [], []
    tree_line = None
    for line, key, value in _logical_lines(text):
        if key not in _KEYS:
            raise ConfigError(f"unknown key {key!r}", line, key)
        if key in ("check", "bound"):
            pass
        elif key in fields:
            raise ConfigError("duplicate key", line, key)
        if key == "name":
            if not re.fullmatch(r"[A-Za-z0-9_.\-]+", value):
                raise ConfigError("name may contain only letters, digits, '_', '-', '.'", line, key)
            fields[key] = value
        elif key == "base_point":
            coords = tuple(_parse_float(t.strip(), line, key) for t in value.split(",") if t.strip())
            if not coords or not all(math.isfinite(c) for c in coords):
                raise ConfigError("base_point needs finite coordinates", line, key)
            fields[key] = coords
        elif key == "delta_bar":
            v = _parse_float(value, line, key)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError("delta_bar must be positive", line, key)
            fields[key] = v
        elif key == "grid":
            toks = value.split()
            if len(toks) != 4 or toks[0] != "geometric":
                raise ConfigError("grid must be 'geometric START RATIO COUNT'", line, key)
            start, ratio = _parse_float(toks[1], line, key), _parse_float(toks[2], line, key)
            count = _parse_int(toks[3], line, key)
            if count < 4:
                raise ConfigError(f"grid count must be >= 4, got {count}", line, key)
            if not (start > 0 and 0 < ratio < 1):
                raise ConfigError("grid needs start > 0 and 0 < ratio < 1", line, key)
            fields[key] = GridSpec(start, ratio, count)
        elif key == "seed":
            fields[key] = _parse_int(value, line, key)
        elif key == "tree":
            fields[key] = _tree_from_expr(_read_sexpr(_tokenize(value, line), line), line)
            tree_line = line
        elif key == "check":
            toks = value.split()
            expect = "PASS"
            if toks and toks[-1].startswith("expect="):
                expect = toks.pop()[len("expect="):].upper()
                if expect not in STATUSES:
                    raise ConfigError(f"unknown expected status {expect!r}", line, key)
            if len(toks) not in (2, 3):
                raise ConfigError("check must be 'LEVEL LOCALITY [ORDER] [expect=STATUS]'", line, key)
            level = _parse_enum(DerivativeLevel, toks[0], line, key)
            loc = _parse_enum(Locality, toks[1], line, key)
            order = _parse_order(toks[2], line, key) if len(toks) == 3 else None
            if any(k.level is level and k.locality is loc for k in checks):
                raise ConfigError(f"duplicate check for {level.value} {loc.value}", line, key)
            checks.append(CheckSpec(level, loc, order, expect))
        elif key == "bound":
            toks = value.split()
            if len(toks) not in (4, 5):
                raise ConfigError("bound must be 'LEAF QUANTITY LOCALITY VALUE [model]'", line, key)
            leaf = _parse_int(toks[0], line, key)
            q = _parse_enum(Quantity, toks[1], line, key)
            loc = _parse_enum(Locality, toks[2], line, key)
            v = _parse_float(toks[3], line, key)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError("bound value must be finite and >= 0", line, key)
            side = Side.TRUTH
            if len(toks) == 5:
                if toks[4] != "model":
                    raise ConfigError(f"unknown bound option {toks[4]!r}", line, key)
                side = Side.MODEL
            bounds.append(BoundOverride(leaf, q, loc, v, side))
            fields.setdefault("_bound_lines", []).append(line)
        elif key == "zero_factors":
            fields[key] = tuple(_parse_int(t.strip(), line, key) for t in value.split(",") if t.strip())
            fields["_zero_line"] = line
    for required in ("name", "base_point", "tree"):
        if required not in fields:
            raise ConfigError("missing required key", None, required)
    if not checks:
        raise ConfigError("at least one check is required", None, "check")
    tree = fields["tree"]
    dim = len(fields["base_point"])
    if output_dim(tree, dim, tree_line) != 1:
        raise ConfigError("the combined function must be scalar", tree_line, "tree")
    n_leaves = len(leaves(tree))
    for b, line in zip(bounds, fields.get("_bound_lines", [])):
        if not 1 <= b.leaf <= n_leaves:
            raise ConfigError(f"leaf index {b.leaf} out of range 1..{n_leaves}", line, "bound")
    zf = fields.get("zero_factors", ())
    if zf:
        line = fields.get("_zero_line")
        if not isinstance(tree, NodeSpec) or tree.kind != "product":
            raise ConfigError("zero_factors need a product at the root", line, "zero_factors")
        for z in zf:
            if not 1 <= z <= len(tree.children):
                raise ConfigError(f"factor index {z} out of range 1..{len(tree.children)}", line, "zero_factors")
    return ExperimentConfig(
        name=fields["name"],
        base_point=fields["base_point"],
        tree=tree,
        checks=tuple(checks),
        delta_bar=fields.get("delta_bar", 0.125),
        grid=fields.get("grid", GridSpec()),
        seed=fields.get("seed", 42),
        bounds=tuple(bounds),
        zero_factors=zf,
    )


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = [
        f"name = {cfg.name}",
        "base_point = " + ", ".join(repr(c) for c in cfg.base_point),
        f"delta_bar = {cfg.delta_bar!r}",
        f"grid = geometric {cfg.grid.start!r} {cfg.grid.ratio!r} {cfg.grid.count}",
        f"seed = {cfg.seed}",
        f"tree = {_tree_to_text(cfg.tree)}",
    ]
    for c in cfg.checks:
        order = "" if c.expected_order is None else f" {c.expected_order}"
        expect = "" if c.expect == "PASS" else f" expect={c.expect}"
        lines.append(f"check = {c.level.value} {c.locality.value}{order}{expect}")
    for b in cfg.bounds:
        model = " model" if b.side is Side.MODEL else ""
        lines.append(f"bound = {b.leaf} {b.quantity.value} {b.locality.value} {b.value!r}{model}")
    if cfg.zero_factors:
        lines.append("zero_factors = " + ", ".join(str(z) for z in cfg.zero_factors))
    return "\n".join(lines) + "\n"
