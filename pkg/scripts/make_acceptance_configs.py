"""Write the acceptance batch into ``configs/acceptance`` (deterministic).

Usage: python scripts/make_acceptance_configs.py [OUT_DIR]
"""
from __future__ import annotations

import itertools
import sys
from pathlib import Path

import numpy as np

from modelcalc.config import CheckSpec, ExperimentConfig, LeafSpec, NodeSpec, serialize_config
from modelcalc.core import DerivativeLevel, Locality, Order
from modelcalc.oracles import LevelSpec

F, G, H = DerivativeLevel.FUNCTION, DerivativeLevel.GRADIENT, DerivativeLevel.HESSIAN
AT, NEAR = Locality.AT, Locality.NEAR
BASES = {1: (0.3,), 2: (0.3, -0.2), 3: (0.3, -0.2, 0.1)}
SCALARS = ("trig", "exp", "positive", "quadratic", "sphere")
ALL_CHECKS = tuple(CheckSpec(lv, loc) for lv in DerivativeLevel for loc in Locality)
# AT gradient/Hessian bounds need function-exact leaves; skip them when function is perturbed.
NO_AT_DERIV = (CheckSpec(F, AT), CheckSpec(F, NEAR), CheckSpec(G, NEAR), CheckSpec(H, NEAR))


def synthetic(name, seed, *levels):
    return LeafSpec("synthetic", name, seed, tuple(LevelSpec(lv, Order.of(n), k, loc) for lv, n, k, loc in levels))


def minrule_configs():
    for level, (n1, n2) in itertools.product(DerivativeLevel, itertools.product((1, 2, 3), repeat=2)):
        tree = NodeSpec("product", (
            synthetic("positive", 1, (level, n1, 1.0, AT)),
            synthetic("exp", 2, (level, n2, 0.5, AT)),
        ))
        yield ExperimentConfig(
            name=f"minrule_{level.value}_{n1}{n2}",
            base_point=BASES[2],
            tree=tree,
            checks=(CheckSpec(level, AT, Order.of(min(n1, n2))),),
        )


def _random_leaf(rng, name, seed, with_function, dim_levels=True):
    levels = []
    for lv in DerivativeLevel:
        if lv is F and not with_function:
            continue
        if rng.random() < 0.8:
            levels.append((lv, int(rng.integers(1, 4)), float(rng.choice([0.25, 0.5, 1.0, 2.0])), NEAR))
    return synthetic(name, seed, *levels)


def soundness_configs():
    rng = np.random.default_rng(2024)
    k = 0

    def leaf(name, with_function):
        nonlocal k
        k += 1
        return _random_leaf(rng, name, k, with_function)

    def cfg(tag, dim, tree, with_function):
        return ExperimentConfig(
            name=f"sound_{tag}", base_point=BASES[dim], tree=tree,
            checks=NO_AT_DERIV if with_function else ALL_CHECKS,
        )

    for n, variant, wf in itertools.product((2, 3, 4), (0, 1), (True, False)):
        dim = 1 + (n + variant) % 3
        names = [SCALARS[(i + variant + n) % len(SCALARS)] for i in range(n)]
        tree = NodeSpec("product", tuple(leaf(nm, wf) for nm in names))
        yield cfg(f"product{n}_{variant}_{'f' if wf else 'g'}", dim, tree, wf)
    for n, variant, wf in itertools.product((2, 3), (0, 1), (True, False)):
        dim = 1 + (n + variant) % 3
        tree = NodeSpec("power", (leaf(SCALARS[(n + variant) % len(SCALARS)], wf),), n)
        yield cfg(f"power{n}_{variant}_{'f' if wf else 'g'}", dim, tree, wf)
    for variant, wf in itertools.product((0, 1, 2), (True, False)):
        dim = 1 + variant
        num = SCALARS[variant % len(SCALARS)]
        den = ("positive", "exp", "positive")[variant]
        tree = NodeSpec("quotient", (leaf(num, wf), leaf(den, wf)))
        yield cfg(f"quotient_{variant}_{'f' if wf else 'g'}", dim, tree, wf)
    inners = {1: ("trig", "exp", "quadratic"), 2: ("map_nonlinear", "map_linear", "map_nonlinear")}
    outers = {1: ("exp", "trig", "positive"), 2: ("trig", "sphere", "exp")}
    for m, variant, wf in itertools.product((1, 2), (0, 1, 2), (True, False)):
        dim = 1 + (variant + m) % 3
        tree = NodeSpec("compose", (leaf(inners[m][variant], wf), leaf(outers[m][variant], wf)))
        yield cfg(f"compose_m{m}_{variant}_{'f' if wf else 'g'}", dim, tree, wf)
    # Nested trees exercise certificates derived by the calculus itself.
    yield cfg("nested_quotient_of_product", 2, NodeSpec("quotient", (
        NodeSpec("product", (leaf("trig", True), leaf("exp", True))), leaf("positive", True))), True)
    yield cfg("nested_power_of_compose", 2, NodeSpec("power", (
        NodeSpec("compose", (leaf("map_linear", False), leaf("exp", False))),), 2), False)
    yield cfg("nested_product_of_shift", 2, NodeSpec("product", (
        NodeSpec("shift", (leaf("trig", True),)), leaf("exp", False))), False)


def refinement_configs():
    yield ExperimentConfig(
        name="zero_function_13",
        base_point=(0.0, 0.3),
        tree=NodeSpec("product", (
            synthetic("exp", 1, (F, 1, 1.0, AT)),
            synthetic("root", 2, (F, 3, 1.0, AT)),
        )),
        checks=(CheckSpec(F, AT, Order.of(3)),),
        zero_factors=(2,),
    )
    yield ExperimentConfig(
        name="zero_gradient_two",
        base_point=(0.0, 0.3),
        tree=NodeSpec("product", (
            synthetic("root", 1, (G, 1, 1.0, AT)),
            synthetic("root2", 2, (G, 2, 1.0, AT)),
        )),
        checks=(CheckSpec(G, AT),),
        zero_factors=(1, 2),
    )
    for d in (1, 2, 3):
        yield ExperimentConfig(
            name=f"shift_d{d}",
            base_point=BASES[d],
            tree=NodeSpec("shift", (synthetic("trig", d, (F, 1, 1.0, AT), (G, 2, 0.5, AT)),)),
            checks=(CheckSpec(F, AT, Order.of("inf")), CheckSpec(G, AT, Order.of(2))),
        )
    for d in (1, 2, 3):
        yield ExperimentConfig(
            name=f"interp_d{d}",
            base_point=BASES[d],
            tree=LeafSpec("interp", "trig"),
            checks=(CheckSpec(F, NEAR, Order.of(2)), CheckSpec(G, NEAR, Order.of(1)), CheckSpec(F, AT)),
        )
    yield ExperimentConfig(
        name="precondition_quotient",
        base_point=BASES[2],
        tree=NodeSpec("quotient", (LeafSpec("exact", "trig"), synthetic("positive", 1, (F, 0, 0.5, NEAR)))),
        checks=(CheckSpec(F, NEAR, expect="PRECONDITION_FAILED"),),
    )


def all_configs():
    return [*minrule_configs(), *soundness_configs(), *refinement_configs()]


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    out = Path(argv[0]) if argv else Path(__file__).resolve().parent.parent / "configs" / "acceptance"
    out.mkdir(parents=True, exist_ok=True)
    for old in out.glob("*.cfg"):
        old.unlink()
    configs = all_configs()
    for cfg in configs:
        (out / f"{cfg.name}.cfg").write_text(serialize_config(cfg), encoding="utf-8")
    print(f"wrote {len(configs)} configs to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
