"""Action sets, decomposed actions and controls, their metrics, and lambda-families.

A decomposed action at step ``s`` is an integer vector over the step-``s``
atoms (action indices).  The space of all of them is enumerated
lexicographically, so a decomposed action is also identified by its index in
that enumeration.  Lifting to a later step repeats each entry over the atom's
descendants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .scenario import BudgetExceeded, ScenarioTree

ENUM_CAP = 4096


@dataclass(frozen=True)
class ActionSet:
    """Finite action set with a metric bounded by a constant below one."""

    values: np.ndarray
    rho: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        r = np.asarray(self.rho, dtype=float)
        k = v.shape[0]
        if r.shape != (k, k):
            raise ValueError("metric matrix must be K x K")
        if np.max(np.abs(r - r.T)) > 0 or np.any(np.diag(r) != 0):
            raise ValueError("metric must be symmetric with zero diagonal")
        if np.any(r < 0) or np.max(r) >= 1.0:
            raise ValueError("metric values must lie in [0, 1)")
        off = ~np.eye(k, dtype=bool)
        if k > 1 and np.any(r[off] <= 0):
            raise ValueError("metric must separate distinct actions")
        if np.any(r[:, None, :] > r[:, :, None] + r[None, :, :] + 1e-15):
            raise ValueError("metric violates the triangle inequality")
        v.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "rho", r)

    @classmethod
    def bounded(cls, values: Sequence) -> "ActionSet":
        """Metric |a - b| / (1 + |a - b|)."""
        v = np.asarray(values, dtype=float)
        v2 = v[:, None] if v.ndim == 1 else v
        dist = np.linalg.norm(v2[:, None, :] - v2[None, :, :], axis=-1)
        return cls(v2, dist / (1.0 + dist))

    @classmethod
    def discrete(cls, values: Sequence, c: float = 0.9) -> "ActionSet":
        v = np.asarray(values, dtype=float)
        k = v.shape[0]
        return cls(v, c * (1.0 - np.eye(k)))

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class DecomposedAction:
    """Map from step-``step`` atoms to action indices."""

    step: int
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.int64)
        if v.ndim != 1:
            raise ValueError("decomposed action must be a vector over atoms")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def lift(self, tree: ScenarioTree, step: int) -> "DecomposedAction":
        """The same random variable seen as an element of the later space at ``step``."""
        if step < self.step:
            raise ValueError("cannot lift to an earlier step")
        return DecomposedAction(step, self.values[tree.ancestor_atoms(step, self.step)])

    def measurable_at(self, tree: ScenarioTree, step: int) -> bool:
        """True if the map only depends on the atom's ancestor at ``step``."""
        if step >= self.step:
            return True
        groups = self.values.reshape(-1, tree.nw ** (self.step - step))
        return bool(np.all(groups == groups[:, :1]))

    def restrict(self, tree: ScenarioTree, step: int) -> "DecomposedAction":
        if not self.measurable_at(tree, step):
            raise ValueError(f"action at step {self.step} is not measurable at step {step}")
        return DecomposedAction(step, self.values[:: tree.nw ** (self.step - step)])

    def __eq__(self, other) -> bool:
        return (isinstance(other, DecomposedAction) and self.step == other.step
                and np.array_equal(self.values, other.values))

    def __hash__(self) -> int:
        return hash((self.step, self.values.tobytes()))

    def to_json(self, tree: ScenarioTree) -> dict:
        labels = tree.atom_labels(self.step)
        return {"step": self.step,
                "map": [[_label_str(lab), int(a)] for lab, a in zip(labels, self.values)]}


def _label_str(label) -> str:
    g, w = label
    return f"{g}|{''.join(str(x) for x in w)}"


@lru_cache(maxsize=64)
def _enumeration(n_atoms: int, n_actions: int) -> np.ndarray:
    grids = np.indices((n_actions,) * n_atoms).reshape(n_atoms, -1).T
    grids.setflags(write=False)
    return grids


@dataclass(frozen=True)
class ActionSpace:
    """All decomposed actions at one step, in lexicographic order."""

    step: int
    n_atoms: int
    n_actions: int
    table: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.table.shape[0]

    def index(self, values: np.ndarray) -> np.ndarray:
        """Enumeration index of atom maps (last axis = atoms)."""
        v = np.asarray(values, dtype=np.int64)
        powers = self.n_actions ** np.arange(self.n_atoms - 1, -1, -1, dtype=np.int64)
        return v @ powers

    def element(self, i: int) -> DecomposedAction:
        return DecomposedAction(self.step, self.table[i])

    def elements(self) -> list[DecomposedAction]:
        return [self.element(i) for i in range(self.size)]


def enumerate_action_space(tree: ScenarioTree, step: int, n_actions: int,
                           cap: int = ENUM_CAP) -> ActionSpace:
    """Every measurable atom map at ``step``; raises if there are more than ``cap``."""
    n = tree.n_atoms(step)
    count = n_actions**n
    if count > cap:
        raise BudgetExceeded(
            f"{n_actions}^{n} = {count} decomposed actions at step {step} exceed cap {cap}"
        )
    return ActionSpace(step, n, n_actions, _enumeration(n, n_actions))


def lift_index(tree: ScenarioTree, src: ActionSpace, dst: ActionSpace) -> np.ndarray:
    """Index in ``dst`` of every element of ``src`` after lifting."""
    anc = tree.ancestor_atoms(dst.step, src.step)
    return dst.index(src.table[:, anc])


def rho_hat(a1: DecomposedAction, a2: DecomposedAction, weights: np.ndarray,
            actions: ActionSet) -> float:
    """Expected action distance between two decomposed actions at the same step."""
    if a1.step != a2.step:
        raise ValueError(f"time index mismatch: {a1.step} vs {a2.step}")
    if a1.values.size != weights.size or a2.values.size != weights.size:
        raise ValueError("decomposed actions do not match the atom weights")
    return float(weights @ actions.rho[a1.values, a2.values])


def rho_hat_matrix(space: ActionSpace, weights: np.ndarray, actions: ActionSet) -> np.ndarray:
    """Pairwise expected distances between all elements of an action space."""
    t = space.table
    out = np.empty((space.size, space.size))
    for i in range(space.size):
        out[i] = actions.rho[t[i][None, :], t] @ weights
    return out


# ---------------------------------------------------------------------------
# controls
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecomposedControl:
    """For each step k, an array (nodes at k, atoms at k) of action indices.

    Row ``v`` of ``maps[k]`` is the decomposed action used on [t_k, t_{k+1})
    at common node ``v``.
    """

    maps: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        maps = tuple(np.asarray(m, dtype=np.int64) for m in self.maps)
        for m in maps:
            m.setflags(write=False)
        object.__setattr__(self, "maps", maps)

    def validate(self, tree: ScenarioTree, n_actions: int) -> None:
        if len(self.maps) != tree.M:
            raise ValueError("decomposed control must cover every step")
        for k, m in enumerate(self.maps):
            if m.shape != (tree.n_nodes(k), tree.n_atoms(k)):
                raise ValueError(f"step {k}: expected shape {(tree.n_nodes(k), tree.n_atoms(k))}")
            if m.min() < 0 or m.max() >= n_actions:
                raise ValueError(f"step {k}: action index out of range")

    def action(self, k: int, node: int) -> DecomposedAction:
        return DecomposedAction(k, self.maps[k][node])

    @classmethod
    def from_path(cls, tree: ScenarioTree, path: Sequence[DecomposedAction]) -> "DecomposedControl":
        """Node-independent control from one decomposed action per step."""
        maps = []
        for k, act in enumerate(path):
            lifted = act.lift(tree, k) if act.step < k else act
            if lifted.step != k:
                raise ValueError(f"action for step {k} is measurable only at step {act.step}")
            maps.append(np.broadcast_to(lifted.values, (tree.n_nodes(k), tree.n_atoms(k))))
        return cls(tuple(maps))

    @classmethod
    def constant(cls, tree: ScenarioTree, a: int) -> "DecomposedControl":
        return cls(tuple(np.full((tree.n_nodes(k), tree.n_atoms(k)), a) for k in range(tree.M)))

    def restricted(self, s: int) -> "DecomposedControl":
        return DecomposedControl(self.maps[s:])


@dataclass(frozen=True)
class FlatControl:
    """A control process on the full finite sample space.

    ``values[k]`` has shape (B-leaves, final atoms): the action used on
    [t_k, t_{k+1}) in every elementary outcome.  Admissible controls only
    depend on the B-history up to k and the atom up to k.
    """

    values: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        vals = tuple(np.asarray(v, dtype=np.int64) for v in self.values)
        for v in vals:
            v.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __eq__(self, other) -> bool:
        return (isinstance(other, FlatControl) and len(self.values) == len(other.values)
                and all(np.array_equal(a, b) for a, b in zip(self.values, other.values)))

    __hash__ = None


def identify_flat_to_decomposed(alpha: FlatControl, tree: ScenarioTree) -> DecomposedControl:
    """Slice a predictable flat control into per-node atom maps."""
    if len(alpha.values) != tree.M:
        raise ValueError("flat control must cover every step")
    nbM, naM = tree.n_nodes(tree.M), tree.n_atoms(tree.M)
    maps = []
    for k, v in enumerate(alpha.values):
        if v.shape != (nbM, naM):
            raise ValueError(f"step {k}: flat control must be defined on every outcome")
        bw, ww = tree.nb ** (tree.M - k), tree.nw ** (tree.M - k)
        blocks = v.reshape(tree.n_nodes(k), bw, tree.n_atoms(k), ww)
        first = blocks[:, :1, :, :1]
        if not np.all(blocks == first):
            bad = np.argwhere(blocks != first)[0]
            raise ValueError(
                f"step {k}: control is not predictable (depends on noise after t_{k}) "
                f"at node {bad[0]}, atom {bad[2]}"
            )
        maps.append(first[:, 0, :, 0].copy())
    return DecomposedControl(tuple(maps))


def identify_decomposed_to_flat(ahat: DecomposedControl, tree: ScenarioTree) -> FlatControl:
    """Evaluate a decomposed control on every elementary outcome."""
    out = []
    for k, m in enumerate(ahat.maps):
        bw, ww = tree.nb ** (tree.M - k), tree.nw ** (tree.M - k)
        out.append(np.repeat(np.repeat(m, bw, axis=0), ww, axis=1))
    return FlatControl(tuple(out))


def control_distance(c1, c2, tree: ScenarioTree, actions: ActionSet) -> float:
    """Time-integrated expected action distance between two controls of the same kind."""
    if type(c1) is not type(c2):
        raise TypeError("controls must be of the same kind")
    dts = tree.grid.dt
    if isinstance(c1, FlatControl):
        prob = np.outer(tree.node_probs(tree.M), tree.atom_weights(tree.M))
        return float(sum(dts[k] * np.sum(prob * actions.rho[a, b])
                         for k, (a, b) in enumerate(zip(c1.values, c2.values))))
    if isinstance(c1, DecomposedControl):
        total = 0.0
        for k in range(tree.M):
            w, p = tree.atom_weights(k), tree.node_probs(k)
            per_node = [rho_hat(c1.action(k, v), c2.action(k, v), w, actions)
                        for v in range(tree.n_nodes(k))]
            total += dts[k] * float(p @ np.asarray(per_node))
        return total
    raise TypeError(f"unsupported control type {type(c1).__name__}")


def random_flat_control(tree: ScenarioTree, n_actions: int, rng: np.random.Generator) -> FlatControl:
    """Uniformly random predictable flat control."""
    return identify_decomposed_to_flat(random_decomposed_control(tree, n_actions, rng), tree)


def random_decomposed_control(tree: ScenarioTree, n_actions: int,
                              rng: np.random.Generator) -> DecomposedControl:
    return DecomposedControl(tuple(rng.integers(0, n_actions, size=(tree.n_nodes(k), tree.n_atoms(k)))
                                   for k in range(tree.M)))


# ---------------------------------------------------------------------------
# lambda families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LambdaFamily:
    """Mark measures per grid cell.

    ``masses[k]`` is indexed by the action space at step k and is the mark
    measure on the cell (t_k, t_{k+1}].  ``kappas`` records the construction
    as (step, masses) in enumeration order.
    """

    spaces: tuple[ActionSpace, ...]
    masses: tuple[np.ndarray, ...]
    kappas: tuple[tuple[int, np.ndarray], ...] = ()

    def total_mass(self, k: int) -> float:
        return float(self.masses[k].sum())

    def probabilities(self, k: int) -> np.ndarray:
        tot = self.masses[k].sum()
        return self.masses[k] / tot if tot > 0 else np.zeros_like(self.masses[k])

    def max_total_mass(self) -> float:
        return max(self.total_mass(k) for k in range(len(self.masses)))

    def check(self, tree: ScenarioTree) -> None:
        """Assert full support per step, nested supports with densities, finite mass."""
        for k, (sp, m) in enumerate(zip(self.spaces, self.masses)):
            if m.shape != (sp.size,):
                raise ValueError(f"step {k}: mass vector does not match the action space")
            if not np.all(m > 0):
                raise ValueError(f"step {k}: support is not the full space of measurable maps")
            if not np.all(np.isfinite(m)):
                raise ValueError(f"step {k}: infinite mass")
        for j in range(len(self.masses)):
            for k in range(j + 1, len(self.masses)):
                idx = lift_index(tree, self.spaces[j], self.spaces[k])
                if not np.all(self.masses[k][idx] > 0):
                    raise ValueError(f"support at step {j} not contained in support at step {k}")


def build_lambda_family(kappas: Sequence[tuple[int, np.ndarray]], tree: ScenarioTree,
                        n_actions: int, cap: int = ENUM_CAP) -> LambdaFamily:
    """lambda_k = sum over enumeration entries n with s_n <= t_k of 2^-n kappa_{s_n}."""
    spaces = tuple(enumerate_action_space(tree, k, n_actions, cap) for k in range(tree.M))
    masses = [np.zeros(sp.size) for sp in spaces]
    rec = []
    for n, (s, kap) in enumerate(kappas, start=1):
        if not 0 <= s < tree.M:
            raise ValueError(f"kappa step {s} outside the cells of the grid")
        kap = np.asarray(kap, dtype=float)
        if kap.shape != (spaces[s].size,) or not np.all(kap > 0):
            raise ValueError(f"kappa at step {s} must be fully supported on the step-{s} space")
        rec.append((s, kap))
        for k in range(s, tree.M):
            idx = lift_index(tree, spaces[s], spaces[k])
            np.add.at(masses[k], idx, 2.0**-n * kap)
    for k, m in enumerate(masses):
        if not np.all(m > 0):
            raise ValueError(f"accumulated support at step {k} misses measurable maps")
    fam = LambdaFamily(spaces, tuple(masses), tuple(rec))
    fam.check(tree)
    return fam


def default_lambda_family(tree: ScenarioTree, n_actions: int, mass: float = 1.0,
                          cap: int = ENUM_CAP) -> LambdaFamily:
    """Uniform kappa of total ``mass`` at every step, enumerated in time order."""
    kappas = []
    for k in range(tree.M):
        size = enumerate_action_space(tree, k, n_actions, cap).size
        kappas.append((k, np.full(size, mass / size)))
    return build_lambda_family(kappas, tree, n_actions, cap)


def random_lambda_family(tree: ScenarioTree, n_actions: int, rng: np.random.Generator,
                         mass: float = 1.0, cap: int = ENUM_CAP) -> LambdaFamily:
    """Random positive kappas, enumerated in reverse time order."""
    kappas = []
    for k in reversed(range(tree.M)):
        size = enumerate_action_space(tree, k, n_actions, cap).size
        w = rng.uniform(0.2, 1.0, size=size)
        kappas.append((k, mass * w / w.sum()))
    return build_lambda_family(kappas, tree, n_actions, cap)
