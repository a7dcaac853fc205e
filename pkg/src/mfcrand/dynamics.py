"""Forward engines: exact pushforward on the scenario tree and particle Euler schemes.

All engines apply the same explicit step

    x_{k+1} = x_k + b(t_k, x_k, mu_k, a) dt + sigma(...) dW + sigma0(...) dB

with ``mu_k`` the conditional law at the start of the step (the atom-weighted
states of a tree node, or the particle cloud).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .controls import ActionSet, ActionSpace, DecomposedAction, DecomposedControl, \
    enumerate_action_space, lift_index, ENUM_CAP
from .model import Coefficients, EmpiricalMeasure, InitialCondition, Reward
from .scenario import BudgetExceeded, ScenarioTree

MARK_TREE_BUDGET = 20_000_000


def _increment(coeffs: Coefficients, t: float, dt: float, x: np.ndarray, law: EmpiricalMeasure,
               a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Drift move, sigma and sigma0 at the start of a step (broadcast over leading axes)."""
    drift = np.asarray(coeffs.b(t, x, law, a), dtype=float) * dt
    sig = np.asarray(coeffs.sigma(t, x, law, a), dtype=float)
    sig0 = np.asarray(coeffs.sigma0(t, x, law, a), dtype=float)
    return x + drift, sig, sig0


def _tree_children(tree: ScenarioTree, coeffs: Coefficients, k: int, x: np.ndarray,
                   a: np.ndarray) -> np.ndarray:
    """Children states of a batch of nodes.

    ``x`` has shape (N, 1, n, d) or (N, n, d) and ``a`` broadcasts against it
    with a trailing action axis.  Output has shape (*batch, nb, n * nw, d).
    """
    law = EmpiricalMeasure(x, tree.atom_weights(k))
    moved, sig, sig0 = _increment(coeffs, tree.time(k), tree.dt(k), x, law, a)
    dw = tree.w_increments(k)
    db = tree.b_increments(k)
    w_part = np.einsum("...dm,wm->...wd", sig, dw)          # (*, n, nw, d)
    b_part = np.einsum("...dm,jm->...jd", sig0, db)         # (*, n, nb, d)
    y = moved[..., :, None, :] + w_part                     # (*, n, nw, d)
    y = y[..., None, :, :, :] + np.moveaxis(b_part, -2, -3)[..., :, :, None, :]
    shape = y.shape
    return y.reshape(shape[:-4] + (shape[-4], shape[-3] * shape[-2], shape[-1]))


def _check_finite(arr: np.ndarray, k: int, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise FloatingPointError(f"non-finite {what} at step {k}, index {tuple(int(i) for i in bad)}")


# ---------------------------------------------------------------------------
# tree pushforward under a decomposed control
# ---------------------------------------------------------------------------


@dataclass
class TreeStatePath:
    """States per step, shape (nodes at k, atoms at k, d), from ``start`` to T."""

    tree: ScenarioTree
    states: list[np.ndarray]
    control: DecomposedControl
    actions: ActionSet
    start: int = 0

    def at(self, k: int) -> np.ndarray:
        return self.states[k - self.start]

    def law(self, k: int, node: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.at(k)[node], self.tree.atom_weights(k))


def tree_pushforward(tree: ScenarioTree, coeffs: Coefficients, xi: InitialCondition,
                     control: DecomposedControl, actions: ActionSet) -> TreeStatePath:
    control.validate(tree, actions.size)
    if xi.values.shape != (tree.n_atoms(0), coeffs.d):
        raise ValueError("initial condition does not match the root atoms or the state dimension")
    x0 = np.array(xi.values, dtype=float)[None, :, :]
    return _pushforward_from(tree, coeffs, 0, x0, control, actions)


def _pushforward_from(tree: ScenarioTree, coeffs: Coefficients, s: int, xs: np.ndarray,
                      control: DecomposedControl, actions: ActionSet) -> TreeStatePath:
    states = [xs]
    for k in range(s, tree.M):
        x = states[-1]
        a = actions.values[control.maps[k]]
        kids = _tree_children(tree, coeffs, k, x, a)
        kids = np.broadcast_to(kids, (tree.n_nodes(k),) + kids.shape[-3:])
        nxt = kids.reshape(tree.n_nodes(k + 1), tree.n_atoms(k + 1), coeffs.d)
        _check_finite(nxt, k + 1, "state")
        states.append(nxt)
    return TreeStatePath(tree, states, control, actions, start=s)


def restart_path(path: TreeStatePath, s: int, coeffs: Coefficients) -> TreeStatePath:
    """Recompute the path on [t_s, T] from its own states at step s."""
    if not path.start <= s <= path.tree.M:
        raise ValueError("restart step outside the path")
    return _pushforward_from(path.tree, coeffs, s, path.at(s).copy(), path.control, path.actions)


def reward_eval(reward: Reward, path: "TreeStatePath | ParticlePath") -> float:
    """Expected terminal plus running reward along a tree path or one particle path."""
    if isinstance(path, ParticlePath):
        return path.payoff(reward)
    tree = path.tree
    total = 0.0
    for k in range(path.start, tree.M):
        x = path.at(k)
        law = EmpiricalMeasure(x, tree.atom_weights(k))
        a = path.actions.values[path.control.maps[k]]
        fv = np.asarray(reward.f(tree.time(k), x, law, a), dtype=float)
        total += tree.dt(k) * float(tree.node_probs(k) @ (fv @ tree.atom_weights(k)))
    xM = path.at(tree.M)
    gv = np.asarray(reward.g(xM, EmpiricalMeasure(xM, tree.atom_weights(tree.M))), dtype=float)
    return total + float(tree.node_probs(tree.M) @ (gv @ tree.atom_weights(tree.M)))


def max_second_moment(path: TreeStatePath) -> float:
    """Exact E[max_k |X_k|^2] along the tree path."""
    tree = path.tree
    run = np.zeros((tree.n_nodes(path.start), tree.n_atoms(path.start)))
    for k in range(path.start, tree.M + 1):
        if k > path.start:
            run = np.repeat(np.repeat(run, tree.nb, axis=0), tree.nw, axis=1)
        run = np.maximum(run, (path.at(k) ** 2).sum(-1))
    return float(tree.node_probs(tree.M) @ run @ tree.atom_weights(tree.M))


# ---------------------------------------------------------------------------
# action-history tree (forward pass for the backward solvers)
# ---------------------------------------------------------------------------


@dataclass
class MarkTree:
    """Exhaustive forward expansion over common noise and decomposed actions.

    Level k holds ``N_k`` nodes, one per (B-history, action history of steps
    < k).  A node at level k+1 has index ``(parent * A_k + a) * nb + j`` for
    parent node, action-space index ``a`` at step k and B-increment ``j``.

    ``running[k]`` has shape (N_k, A_k): the node-conditional expectation of
    the running reward when decomposed action ``a`` is used on step k.
    ``terminal`` has shape (N_M,).  ``current[k]`` (k >= 1) is the index in
    the step-k space of the action the node arrived with.
    """

    tree: ScenarioTree
    spaces: tuple[ActionSpace, ...]
    states: list[np.ndarray]
    running: list[np.ndarray]
    terminal: np.ndarray
    current: list[np.ndarray | None] = field(default_factory=list)

    @property
    def M(self) -> int:
        """Number of expanded levels (T, or an intermediate step for restarts)."""
        return len(self.states) - 1

    def n_nodes(self, k: int) -> int:
        return self.states[k].shape[0]

    def node_history(self, k: int, idx: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
        """(B-increment path, action-index path) leading to node ``idx`` at level k."""
        bs, marks = [], []
        for j in reversed(range(k)):
            idx, b = divmod(idx, self.tree.nb)
            idx, a = divmod(idx, self.spaces[j].size)
            bs.append(b)
            marks.append(a)
        return tuple(reversed(bs)), tuple(reversed(marks))

    def node_prob(self, k: int) -> np.ndarray:
        """Probability of each node's B-path (ignores the action history)."""
        p = np.ones(1)
        for j in range(k):
            p = np.repeat(p, self.spaces[j].size)
            p = np.kron(p, self.tree.lat_b.probs)
        return p


def expand_mark_tree(tree: ScenarioTree, coeffs: Coefficients, reward: Reward,
                     x0: np.ndarray, actions: ActionSet, cap: int = ENUM_CAP,
                     budget: int = MARK_TREE_BUDGET, levels: int | None = None) -> MarkTree:
    """Forward-expand every action history from the root states ``x0`` (atoms, d)."""
    M = tree.M if levels is None else levels
    spaces = tuple(enumerate_action_space(tree, k, actions.size, cap) for k in range(M))
    n_nodes, total = 1, 0
    for k in range(M + 1):
        total += n_nodes * tree.n_atoms(k)
        if k < M:
            n_nodes *= spaces[k].size * tree.nb
    if total > budget:
        raise BudgetExceeded(f"action-history tree needs {total} state entries, budget {budget}")
    x = np.asarray(x0, dtype=float).reshape(1, tree.n_atoms(0), coeffs.d)
    states, running, current = [x], [], [None]
    for k in range(M):
        sp = spaces[k]
        a = actions.values[sp.table][None]                   # (1, A, n, p)
        xk = states[-1][:, None]                              # (N, 1, n, d)
        law = EmpiricalMeasure(xk, tree.atom_weights(k))
        fv = np.asarray(reward.f(tree.time(k), xk, law, a), dtype=float)
        running.append(np.broadcast_to(fv, (xk.shape[0], sp.size, tree.n_atoms(k)))
                       @ tree.atom_weights(k))
        kids = _tree_children(tree, coeffs, k, xk, a)         # (N, A, nb, n', d)
        kids = np.broadcast_to(kids, (xk.shape[0], sp.size) + kids.shape[-3:])
        nxt = kids.reshape(-1, tree.n_atoms(k + 1), coeffs.d)
        _check_finite(nxt, k + 1, "state")
        states.append(nxt)
        if k + 1 < M:
            lift = lift_index(tree, sp, spaces[k + 1])
            current.append(np.tile(np.repeat(lift, tree.nb), xk.shape[0]))
    xM = states[-1]
    gv = np.asarray(reward.g(xM, EmpiricalMeasure(xM, tree.atom_weights(M))), dtype=float)
    terminal = gv @ tree.atom_weights(M)
    return MarkTree(tree, spaces, states, running, terminal, current)


# ---------------------------------------------------------------------------
# particles
# ---------------------------------------------------------------------------


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (seed, key...) regardless of call order."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


@dataclass
class ParticlePath:
    """Particle states sharing one common-noise path.

    ``states[j]`` has shape (N, d) for step ``start + j``; ``atoms[j]`` holds
    each particle's atom index at that step.
    """

    tree: ScenarioTree
    states: list[np.ndarray]
    atoms: list[np.ndarray]
    acts: list[np.ndarray]
    b_path: tuple[int, ...]
    actions: ActionSet
    start: int = 0

    @property
    def N(self) -> int:
        return self.states[0].shape[0]

    def at(self, k: int) -> np.ndarray:
        return self.states[k - self.start]

    def law(self, k: int) -> EmpiricalMeasure:
        x = self.at(k)
        return EmpiricalMeasure(x, np.full(x.shape[0], 1.0 / x.shape[0]))

    def payoff(self, reward: Reward) -> float:
        total = 0.0
        for k in range(self.start, self.tree.M):
            x = self.at(k)
            a = self.actions.values[self.acts[k - self.start]]
            total += self.tree.dt(k) * float(np.mean(reward.f(self.tree.time(k), x, self.law(k), a)))
        xM = self.at(self.tree.M)
        return total + float(np.mean(reward.g(xM, self.law(self.tree.M))))


def control_actions(control, tree: ScenarioTree, k: int, node: int, atoms: np.ndarray) -> np.ndarray:
    """Action index for particles with the given step-k atoms at common node ``node``."""
    if isinstance(control, DecomposedControl):
        return control.maps[k][node][atoms]
    act = control[k]
    if isinstance(act, DecomposedAction):
        if act.step != k:
            act = act.lift(tree, k)
        return act.values[atoms]
    raise TypeError("control must be a DecomposedControl or a per-step list of decomposed actions")


def simulate_particles(tree: ScenarioTree, coeffs: Coefficients, xi: InitialCondition,
                       control, actions: ActionSet, N: int, b_path: Sequence[int], seed: int,
                       start: int = 0, start_states: np.ndarray | None = None,
                       start_atoms: np.ndarray | None = None) -> ParticlePath:
    """Euler scheme for N particles along a fixed common-noise lattice path.

    Randomness is drawn from ``stream(seed, 0)`` for the initial atoms and
    ``stream(seed, k + 1)`` for the idiosyncratic increments of step k, so a
    restart from step s with the same seed reuses the same increments.
    """
    if N < 1:
        raise ValueError("need at least one particle")
    b_path = tuple(int(b) for b in b_path)
    if len(b_path) != tree.M:
        raise ValueError("common-noise path must cover every step")
    if start_states is None:
        g = stream(seed, 0).choice(tree.n_g, size=N, p=np.asarray(tree.g_atoms.probs))
        x = np.array(xi.values[g], dtype=float)
        atoms = g.astype(np.int64)
    else:
        x = np.array(start_states, dtype=float)
        atoms = np.asarray(start_atoms, dtype=np.int64).copy()
    states, atom_hist, acts = [x], [atoms], []
    w = np.full(N, 1.0 / N)
    for k in range(start, tree.M):
        node = tree.node_index(b_path[:k])
        ai = control_actions(control, tree, k, node, atoms)
        acts.append(ai)
        a = actions.values[ai]
        law = EmpiricalMeasure(x, w)
        moved, sig, sig0 = _increment(coeffs, tree.time(k), tree.dt(k), x, law, a)
        jw = stream(seed, k + 1).choice(tree.nw, size=N, p=np.asarray(tree.lat_w.probs))
        dw = tree.w_increments(k)[jw]
        db = tree.b_increments(k)[b_path[k]]
        x = (moved + np.einsum("ndm,nm->nd", sig, dw)) + np.einsum("ndm,m->nd", sig0, db)
        _check_finite(x, k + 1, "particle state")
        atoms = atoms * tree.nw + jw
        states.append(x)
        atom_hist.append(atoms)
    return ParticlePath(tree, states, atom_hist, acts, b_path, actions, start)


def restart_particles(path: ParticlePath, s: int, coeffs: Coefficients, control,
                      seed: int) -> ParticlePath:
    """Re-simulate from the path's own step-s particles with the same noise streams."""
    return simulate_particles(path.tree, coeffs, None, control, path.actions, path.N, path.b_path,
                              seed, start=s, start_states=path.at(s).copy(),
                              start_atoms=path.atoms[s - path.start].copy())
