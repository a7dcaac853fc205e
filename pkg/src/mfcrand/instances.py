"""Randomly drawn micro instances small enough for exhaustive enumeration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controls import ActionSet
from .model import Coefficients, InitialCondition, Reward, make_coefficients, make_reward
from .scenario import AtomSpace, NoiseLattice, ScenarioTree, TimeGrid, build_tree

# (steps, actions) pairs whose action spaces stay below the enumeration cap
SHAPES = ((2, 2), (3, 2), (2, 3))


@dataclass
class Instance:
    name: str
    tree: ScenarioTree
    coeffs: Coefficients
    reward: Reward
    xi: InitialCondition
    actions: ActionSet
    params: dict

    def describe(self) -> dict:
        return {"name": self.name, "params": self.params, "tree": self.tree.summary()}


def build_instance(name: str, steps: int, horizon: float, action_values, coeffs: dict,
                   reward: dict, xi_values, g_probs=None) -> Instance:
    """Instance with binary W and B lattices in dimension one."""
    g = AtomSpace.uniform(len(xi_values)) if g_probs is None else \
        AtomSpace(tuple(range(len(xi_values))), tuple(g_probs))
    tree = build_tree(TimeGrid.uniform(horizon, steps), NoiseLattice.binary(), NoiseLattice.binary(), g)
    co = make_coefficients(coeffs["family"], **{k: v for k, v in coeffs.items() if k != "family"})
    rw = make_reward(reward["family"], **{k: v for k, v in reward.items() if k != "family"})
    acts = ActionSet.bounded(np.asarray(action_values, dtype=float))
    xi = InitialCondition(g, np.asarray(xi_values, dtype=float).reshape(-1, 1))
    params = {"steps": steps, "horizon": horizon, "actions": [float(a) for a in action_values],
              "coefficients": coeffs, "reward": reward,
              "xi": [float(x) for x in np.ravel(xi_values)]}
    return Instance(name, tree, co, rw, xi, acts, params)


def random_instance(seed: int, shape: tuple[int, int] | None = None) -> Instance:
    """Linear dynamics with a tracking reward and random parameters."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(7,)))
    steps, k = SHAPES[int(rng.integers(len(SHAPES)))] if shape is None else shape
    r = lambda lo, hi: float(np.round(rng.uniform(lo, hi), 3))   # noqa: E731
    coeffs = {"family": "linear", "bx": r(-0.8, 0.4), "bm": r(-0.5, 0.5), "ba": r(0.5, 1.5),
              "b0": r(-0.2, 0.2), "sigma": r(0.1, 0.5), "sigma0": r(0.1, 0.5)}
    reward = {"family": "tracking", "cx": r(0.0, 0.5), "cm": r(0.0, 0.5), "ca": r(0.0, 0.2),
              "gx": r(0.5, 1.5), "gm": r(0.0, 1.0), "target": r(-0.5, 0.5)}
    acts = np.sort(rng.choice([-1.0, -0.5, 0.0, 0.5, 1.0], size=k, replace=False))
    xi = np.round(rng.uniform(-1.0, 1.0, size=2), 3)
    return build_instance(f"random-{seed}", steps, r(0.5, 1.0), acts, coeffs, reward, xi)


def micro_instances(n: int = 5, seed: int = 2024) -> list[Instance]:
    """``n`` random instances cycling through the admissible shapes."""
    return [random_instance(seed + i, SHAPES[i % len(SHAPES)]) for i in range(n)]
