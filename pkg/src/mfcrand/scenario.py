"""Finite filtered probability model: time grid, noise lattices, atoms and the scenario tree.

The tree has two independent layers.  Common-noise nodes at step ``k`` are
indexed by the B-increment history (an integer in base ``nb``), and the
idiosyncratic atoms at step ``k`` are pairs (G-atom, W-increment history),
indexed as ``g * nw**k + w_history``.  With this layout the parent of node or
atom ``i`` is ``i // nb`` respectively ``i // nw``, so measurability at an
earlier step is a plain integer-division check.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping, Sequence

import numpy as np

MOMENT_TOL = 1e-12
DEFAULT_BUDGET = 1_000_000


class BudgetExceeded(ValueError):
    """Raised when a tree or enumeration would exceed its configured size."""


@dataclass(frozen=True)
class TimeGrid:
    times: tuple[float, ...]

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("time grid needs at least two points (M >= 1)")
        if t[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if not np.all(np.diff(t) > 0):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "times", tuple(float(x) for x in t))

    @classmethod
    def uniform(cls, horizon: float, steps: int) -> "TimeGrid":
        return cls(tuple(np.linspace(0.0, horizon, steps + 1)))

    @property
    def M(self) -> int:
        return len(self.times) - 1

    @property
    def horizon(self) -> float:
        return self.times[-1]

    @property
    def dt(self) -> np.ndarray:
        return np.diff(np.asarray(self.times))

    def index_of(self, t: float, tol: float = 1e-12) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a grid point."""
        arr = np.asarray(self.times)
        k = int(np.argmin(np.abs(arr - t)))
        if abs(arr[k] - t) > tol:
            raise ValueError(f"time {t} is not on the grid")
        return k

    def cell_of(self, t: float) -> int:
        """Index k of the cell (t_k, t_{k+1}] containing ``t``."""
        if not (self.times[0] < t <= self.times[-1]):
            raise ValueError(f"time {t} outside (0, T]")
        return int(np.searchsorted(np.asarray(self.times), t, side="left")) - 1


@dataclass(frozen=True)
class NoiseLattice:
    """Increment distribution of a Brownian motion over one grid step.

    ``points`` hold unit-variance increments; the increment over a step of
    length ``dt`` is ``points * sqrt(dt)``, so the covariance is ``dt * I``
    for every step.
    """

    points: np.ndarray
    probs: np.ndarray

    def __post_init__(self) -> None:
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] == 1 and np.asarray(self.points).ndim == 1:
            pts = pts.T
        p = np.asarray(self.probs, dtype=float)
        if pts.shape[0] != p.size:
            raise ValueError("lattice points and probabilities differ in length")
        if np.any(p <= 0):
            raise ValueError("lattice probabilities must be positive")
        if abs(p.sum() - 1.0) > MOMENT_TOL:
            raise ValueError("lattice probabilities must sum to 1")
        mean = p @ pts
        if np.max(np.abs(mean)) > MOMENT_TOL:
            raise ValueError("lattice increments must have mean 0")
        cov = (pts * p[:, None]).T @ pts
        if np.max(np.abs(cov - np.eye(pts.shape[1]))) > MOMENT_TOL:
            raise ValueError("lattice increments must have covariance dt * I")
        pts.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "probs", p)

    @classmethod
    def binary(cls, dim: int = 1) -> "NoiseLattice":
        """Product of independent +-1 coin flips, 2**dim points."""
        grids = np.array(np.meshgrid(*([[-1.0, 1.0]] * dim), indexing="ij"))
        pts = grids.reshape(dim, -1).T
        return cls(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]))

    @classmethod
    def trinomial(cls, dim: int = 1) -> "NoiseLattice":
        """Product of {-sqrt3, 0, sqrt3} with probabilities (1/6, 2/3, 1/6)."""
        r3 = np.sqrt(3.0)
        base = np.array([-r3, 0.0, r3])
        bp = np.array([1 / 6, 2 / 3, 1 / 6])
        grids = np.array(np.meshgrid(*([base] * dim), indexing="ij"))
        pgrid = np.array(np.meshgrid(*([bp] * dim), indexing="ij"))
        return cls(grids.reshape(dim, -1).T, pgrid.reshape(dim, -1).prod(axis=0))

    @classmethod
    def from_increments(cls, increments: Sequence, probs: Sequence, dt: float) -> "NoiseLattice":
        if dt <= 0:
            raise ValueError("step length must be positive")
        inc = np.asarray(increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        return cls(inc / np.sqrt(dt), np.asarray(probs, dtype=float))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def branching(self) -> int:
        return self.points.shape[0]

    def increments(self, dt: float) -> np.ndarray:
        return self.points * np.sqrt(dt)


@dataclass(frozen=True)
class AtomSpace:
    labels: tuple
    probs: np.ndarray
    role: str = "G"

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=float)
        labels = tuple(self.labels)
        if len(labels) != p.size or p.size == 0:
            raise ValueError("atom labels and probabilities differ in length")
        if len(set(labels)) != len(labels):
            raise ValueError("atom labels must be unique")
        if np.any(p <= 0) or abs(p.sum() - 1.0) > MOMENT_TOL:
            raise ValueError("atom probabilities must be positive and sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n: int, role: str = "G") -> "AtomSpace":
        return cls(tuple(range(n)), np.full(n, 1.0 / n), role)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class ScenarioTree:
    grid: TimeGrid
    lat_w: NoiseLattice
    lat_b: NoiseLattice
    g_atoms: AtomSpace
    budget: int = field(default=DEFAULT_BUDGET, compare=False)
    t_offset: float = 0.0

    def __post_init__(self) -> None:
        total = sum(self.n_nodes(k) * self.n_atoms(k) for k in range(self.M + 1))
        if total > self.budget:
            raise BudgetExceeded(
                f"scenario tree needs {total} node-atom entries, budget is {self.budget}"
            )

    # sizes -------------------------------------------------------------
    @property
    def M(self) -> int:
        return self.grid.M

    @property
    def nb(self) -> int:
        return self.lat_b.branching

    @property
    def nw(self) -> int:
        return self.lat_w.branching

    @property
    def n_g(self) -> int:
        return len(self.g_atoms)

    def n_nodes(self, k: int) -> int:
        return self.nb**k

    def n_atoms(self, k: int) -> int:
        return self.n_g * self.nw**k

    def dt(self, k: int) -> float:
        return self.grid.times[k + 1] - self.grid.times[k]

    def time(self, k: int) -> float:
        """Absolute calendar time of grid point k (restarted trees keep their offset)."""
        return self.t_offset + self.grid.times[k]

    # weights -----------------------------------------------------------
    @cached_property
    def _atom_weights(self) -> tuple[np.ndarray, ...]:
        out = [np.array(self.g_atoms.probs, dtype=float)]
        for _ in range(self.M):
            out.append(np.kron(out[-1], self.lat_w.probs))
        for w in out:
            w.setflags(write=False)
        return tuple(out)

    @cached_property
    def _node_probs(self) -> tuple[np.ndarray, ...]:
        out = [np.ones(1)]
        for _ in range(self.M):
            out.append(np.kron(out[-1], self.lat_b.probs))
        for w in out:
            w.setflags(write=False)
        return tuple(out)

    def atom_weights(self, k: int) -> np.ndarray:
        """Conditional weights of the step-k atoms, identical at every node."""
        return self._atom_weights[k]

    def node_probs(self, k: int) -> np.ndarray:
        return self._node_probs[k]

    def w_increments(self, k: int) -> np.ndarray:
        """W increments over step k, shape (nw, m)."""
        return self.lat_w.increments(self.dt(k))

    def b_increments(self, k: int) -> np.ndarray:
        return self.lat_b.increments(self.dt(k))

    # labels ------------------------------------------------------------
    def atom_label(self, k: int, idx: int) -> tuple:
        g, w = divmod(idx, self.nw**k)
        return (self.g_atoms.labels[g], _digits(w, self.nw, k))

    def atom_labels(self, k: int) -> list[tuple]:
        return [self.atom_label(k, i) for i in range(self.n_atoms(k))]

    def node_path(self, k: int, idx: int) -> tuple[int, ...]:
        return _digits(idx, self.nb, k)

    def node_index(self, path: Sequence[int]) -> int:
        idx = 0
        for b in path:
            idx = idx * self.nb + int(b)
        return idx

    def ancestor_atoms(self, k_from: int, k_to: int) -> np.ndarray:
        """Index of the step-``k_to`` ancestor of every step-``k_from`` atom."""
        if k_to > k_from:
            raise ValueError("ancestor step must not exceed the current step")
        return np.arange(self.n_atoms(k_from)) // self.nw ** (k_from - k_to)

    # expectations ------------------------------------------------------
    def _as_array(self, k: int, payoff: Any) -> np.ndarray:
        n = self.n_atoms(k)
        if isinstance(payoff, Mapping):
            vals = np.empty(n)
            for i in range(n):
                lab = self.atom_label(k, i)
                if lab not in payoff:
                    raise KeyError(f"payoff missing atom {lab} at step {k}")
                vals[i] = payoff[lab]
            return vals
        vals = np.asarray(payoff, dtype=float)
        if vals.shape[0] != n:
            raise KeyError(f"payoff defined on {vals.shape[0]} atoms, step {k} has {n}")
        return vals

    def cond_expect(self, node: tuple[int, int], payoff: Any) -> float:
        """Exact conditional expectation of an atom payoff at a common node."""
        k, b = node
        if not 0 <= b < self.n_nodes(k):
            raise KeyError(f"no node {b} at step {k}")
        return float(self.atom_weights(k) @ self._as_array(k, payoff))

    def project(self, k: int, payoff_next: np.ndarray) -> np.ndarray:
        """E[payoff_{k+1} | node_k, atom_k] for a payoff on (node_{k+1}, atom_{k+1}).

        ``payoff_next`` has shape (n_nodes(k+1), n_atoms(k+1)); the result has
        shape (n_nodes(k), n_atoms(k)).
        """
        v = np.asarray(payoff_next, dtype=float).reshape(
            self.n_nodes(k), self.nb, self.n_atoms(k), self.nw
        )
        v = np.tensordot(v, self.lat_w.probs, axes=([3], [0]))
        return np.tensordot(v, self.lat_b.probs, axes=([1], [0]))

    # restarts ----------------------------------------------------------
    def subtree(self, s: int) -> "ScenarioTree":
        """Tree on [t_s, T] whose root atoms are the step-s atoms of this tree.

        Atom ordering is preserved, so step-j atoms of the subtree coincide
        with step-(s+j) atoms here.
        """
        if not 0 <= s <= self.M:
            raise ValueError("restart step outside the grid")
        t0 = self.grid.times[s]
        times = tuple(t - t0 for t in self.grid.times[s:])
        if len(times) < 2:
            times = (0.0,)
        labels = tuple(self.atom_labels(s))
        atoms = AtomSpace(labels, self.atom_weights(s) / self.atom_weights(s).sum(), "W")
        if len(times) == 1:
            return _TerminalTree(atoms, self.time(s))
        return ScenarioTree(TimeGrid(times), self.lat_w, self.lat_b, atoms, self.budget,
                            self.time(s))

    def summary(self) -> dict:
        return {
            "steps": self.M,
            "times": list(self.grid.times),
            "nodes_per_step": [self.n_nodes(k) for k in range(self.M + 1)],
            "atoms_per_step": [self.n_atoms(k) for k in range(self.M + 1)],
            "b_lattice": {"points": self.lat_b.points.tolist(), "probs": self.lat_b.probs.tolist()},
            "w_lattice": {"points": self.lat_w.points.tolist(), "probs": self.lat_w.probs.tolist()},
            "g_atoms": {"labels": [str(x) for x in self.g_atoms.labels],
                        "probs": self.g_atoms.probs.tolist()},
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


class _TerminalTree:
    """Degenerate zero-step tree used when a restart happens at T."""

    M = 0
    nb = 1
    nw = 1

    def __init__(self, atoms: AtomSpace, t_offset: float) -> None:
        self.g_atoms = atoms
        self.n_g = len(atoms)
        self.t_offset = t_offset

    def time(self, k: int) -> float:
        return self.t_offset

    def n_nodes(self, k: int) -> int:
        return 1

    def n_atoms(self, k: int) -> int:
        return self.n_g

    def atom_weights(self, k: int) -> np.ndarray:
        return np.asarray(self.g_atoms.probs)

    def node_probs(self, k: int) -> np.ndarray:
        return np.ones(1)

    def atom_labels(self, k: int) -> list:
        return list(self.g_atoms.labels)


def _digits(x: int, base: int, length: int) -> tuple[int, ...]:
    out = []
    for _ in range(length):
        x, r = divmod(x, base)
        out.append(r)
    return tuple(reversed(out))


def build_tree(grid: TimeGrid, lat_w: NoiseLattice, lat_b: NoiseLattice,
               g_atoms: AtomSpace, budget: int = DEFAULT_BUDGET) -> ScenarioTree:
    """Assemble and validate a scenario tree."""
    return ScenarioTree(grid, lat_w, lat_b, g_atoms, budget)


def cond_expect(tree: ScenarioTree, node: tuple[int, int], payoff: Any) -> float:
    return tree.cond_expect(node, payoff)
