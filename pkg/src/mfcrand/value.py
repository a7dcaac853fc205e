"""Value of the control problem computed directly, by the penalised backward
solver, and by Monte Carlo over tilted point processes, plus the checks
relating them.
"""

from __future__ import annotations

import itertools
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bsde import (BSDESolution, bang_bang_tables, solve_constrained_limit, solve_penalised,
                   tilted_values)
from .controls import ENUM_CAP, ActionSet, ActionSpace, DecomposedAction, DecomposedControl, \
    LambdaFamily, default_lambda_family, enumerate_action_space
from .dynamics import _tree_children, expand_mark_tree, reward_eval, simulate_particles, \
    stream, tree_pushforward
from .model import Coefficients, EmpiricalMeasure, InitialCondition, Reward, law_of
from .randomisation import IntensityControl, folded_indices, girsanov_weights, sample_ppp_batch
from .scenario import ScenarioTree

DEFAULT_LEVELS = tuple(2.0**j for j in range(9))
DPP_N_GRID = (1e3, 1e6, 1e9, 1e12)
DPP_EPS_GRID = tuple(10.0**-j for j in range(3, 13, 3))


def _initial_states(tree, xi) -> np.ndarray:
    if isinstance(xi, InitialCondition):
        if len(xi.values) != tree.n_atoms(0):
            raise ValueError("initial condition does not match the root atoms of the tree")
        return np.asarray(xi.values, dtype=float)
    x = np.asarray(xi, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != tree.n_atoms(0):
        raise ValueError("initial states do not match the root atoms of the tree")
    return x


# ---------------------------------------------------------------------------
# direct value
# ---------------------------------------------------------------------------


def value_direct(tree: ScenarioTree, coeffs: Coefficients, reward: Reward, xi,
                 actions: ActionSet, cap: int = ENUM_CAP) -> float:
    """Brute-force optimum over all decomposed actions at every common node.

    Depth-first recursion: V(k, X) = max_a [fbar_k(X, a) dt + E_B V(k+1, X')].
    """
    x0 = _initial_states(tree, xi)
    return float(_direct_batch(tree, coeffs, reward, x0[None], actions, cap)[0])


def _direct_batch(tree, coeffs: Coefficients, reward: Reward, x0: np.ndarray,
                  actions: ActionSet, cap: int = ENUM_CAP) -> np.ndarray:
    """value_direct for a batch (B, n, d) of root state vectors."""
    tables = [enumerate_action_space(tree, k, actions.size, cap).table for k in range(tree.M)]

    def v(k: int, x: np.ndarray) -> np.ndarray:
        w = tree.atom_weights(k)
        if k == tree.M:
            return np.asarray(reward.g(x, EmpiricalMeasure(x, w)), dtype=float) @ w
        a = actions.values[tables[k]][None]                          # (1, A, n, p)
        xb = x[:, None]
        lawb = EmpiricalMeasure(xb, w)
        run = np.broadcast_to(np.asarray(reward.f(tree.time(k), xb, lawb, a), dtype=float),
                              (x.shape[0], a.shape[1], x.shape[1])) @ w
        kids = _tree_children(tree, coeffs, k, xb, a)
        kids = np.broadcast_to(kids, (x.shape[0], a.shape[1]) + kids.shape[-3:])
        nxt = v(k + 1, kids.reshape(-1, tree.n_atoms(k + 1), x.shape[-1]))
        cont = nxt.reshape(x.shape[0], a.shape[1], tree.nb) @ tree.lat_b.probs
        return np.max(run * tree.dt(k) + cont, axis=1)

    return v(0, np.asarray(x0, dtype=float))


def value_direct_many(tree: ScenarioTree, coeffs: Coefficients, reward: Reward,
                      states: np.ndarray, actions: ActionSet, chunk: int = 4096) -> np.ndarray:
    """value_direct for many root state vectors (N, n, d), deduplicating repeats."""
    states = np.asarray(states, dtype=float)
    uniq, inv = np.unique(states.reshape(states.shape[0], -1), axis=0, return_inverse=True)
    uniq = uniq.reshape((-1,) + states.shape[1:])
    vals = np.concatenate([_direct_batch(tree, coeffs, reward, uniq[i:i + chunk], actions)
                           for i in range(0, uniq.shape[0], chunk)])
    return vals[inv.reshape(-1)]


# ---------------------------------------------------------------------------
# randomised value on the tree
# ---------------------------------------------------------------------------


def randomised_solution(tree: ScenarioTree, coeffs: Coefficients, reward: Reward, xi,
                        actions: ActionSet, alpha_idx: int = 0, lam: LambdaFamily | None = None,
                        levels: Sequence[float] = DEFAULT_LEVELS,
                        cap: int = ENUM_CAP) -> BSDESolution:
    """Constrained limit (with the penalisation sweep in ``info``)."""
    lam = default_lambda_family(tree, actions.size, cap=cap) if lam is None else lam
    mt = expand_mark_tree(tree, coeffs, reward, _initial_states(tree, xi), actions, cap)
    return solve_constrained_limit(mt, lam, levels, alpha_idx)


def value_randomised_bsde(tree: ScenarioTree, coeffs: Coefficients, reward: Reward, xi,
                          actions: ActionSet, alpha_idx: int = 0, lam: LambdaFamily | None = None,
                          levels: Sequence[float] = DEFAULT_LEVELS, cap: int = ENUM_CAP) -> float:
    return randomised_solution(tree, coeffs, reward, xi, actions, alpha_idx, lam, levels, cap).y0


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


def _particle_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=tuple(key)).generate_state(1)[0])


def _map_ordered(fn, items, threads: int) -> list:
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def value_randomised_mc(tree: ScenarioTree, coeffs: Coefficients, reward: Reward,
                        xi: InitialCondition, actions: ActionSet, alpha_idx: int,
                        lam: LambdaFamily, nu_family: Sequence[IntensityControl], budget: int,
                        N: int, replications: int, seed: int, threads: int = 1) -> dict:
    """Best tilted Monte Carlo estimate of E[L_T (g + int f)] over a family of intensities.

    The folded control of each replication does not depend on the common
    noise, so each replication runs one particle cloud along its own lattice
    path.  Particle noise is shared across family members.
    """
    if budget < 1:
        raise ValueError("optimizer budget must be at least one evaluation")
    if replications < 2:
        raise ValueError("need at least two replications for a standard error")
    members = list(nu_family)[:budget]
    batch = sample_ppp_batch(lam, tree, replications, stream(seed, 1))
    folded = folded_indices(alpha_idx, batch, tree, lam)
    tables = [lam.spaces[k].table for k in range(tree.M)]

    def payoff(r: int) -> float:
        path = [_as_action(tables, folded[r], k) for k in range(tree.M)]
        pp = simulate_particles(tree, coeffs, xi, path, actions, N, batch.b_path(r, tree.nb),
                                _particle_seed(seed, 2, r))
        return pp.payoff(reward)

    pay = np.array(_map_ordered(payoff, range(replications), threads))
    results = []
    for nu in members:
        L = girsanov_weights(nu, batch, lam, tree, alpha_idx)
        z = L * pay
        results.append({"nu": nu.describe(), "estimate": float(z.mean()),
                        "se": float(z.std(ddof=1) / math.sqrt(replications)),
                        "mean_weight": float(L.mean())})
    best = max(results, key=lambda r: r["estimate"])
    return {"estimate": best["estimate"], "se": best["se"], "best": best["nu"], "members": results}


def _as_action(tables, folded_row, k):
    return DecomposedAction(k, tables[k][folded_row[k]])


def mc_tree_consistency(tree: ScenarioTree, coeffs: Coefficients, reward: Reward,
                        xi: InitialCondition, actions: ActionSet, control: DecomposedControl,
                        N: int, replications: int, seed: int, threads: int = 1) -> dict:
    """Particle estimate of J for a fixed control against the exact tree value."""
    exact = reward_eval(reward, tree_pushforward(tree, coeffs, xi, control, actions))
    b_nodes_rng = stream(seed, 1)
    paths = [tuple(int(j) for j in b_nodes_rng.choice(tree.nb, size=tree.M, p=tree.lat_b.probs))
             for _ in range(replications)]

    def payoff(r: int) -> float:
        pp = simulate_particles(tree, coeffs, xi, control, actions, N, paths[r],
                                _particle_seed(seed, 2, r))
        return pp.payoff(reward)

    pay = np.array(_map_ordered(payoff, range(replications), threads))
    est, se = float(pay.mean()), float(pay.std(ddof=1) / math.sqrt(replications))
    return {"exact": exact, "estimate": est, "se": se, "z": (est - exact) / se if se > 0 else 0.0,
            "ok": abs(est - exact) <= 3 * se}


# ---------------------------------------------------------------------------
# dynamic programming and structural checks
# ---------------------------------------------------------------------------


def dpp_check(tree: ScenarioTree, coeffs: Coefficients, reward: Reward, xi, actions: ActionSet,
              s: int, alpha_idx: int = 0, lam: LambdaFamily | None = None,
              n_grid: Sequence[float] = DPP_N_GRID, eps_grid: Sequence[float] = DPP_EPS_GRID,
              cap: int = ENUM_CAP) -> dict:
    """|V(t, xi) - sup_nu E^nu[int_t^s f + V(s, law at s)]| on the tree.

    The inner V is value_direct restarted from each level-s node; the
    supremum runs over constant intensities and bang-bang intensities built
    from penalised solves with that terminal value.
    """
    if not 0 <= s <= tree.M:
        raise ValueError(f"intermediate step {s} is not on the grid 0..{tree.M}")
    lam = default_lambda_family(tree, actions.size, cap=cap) if lam is None else lam
    x0 = _initial_states(tree, xi)
    lhs = value_direct(tree, coeffs, reward, x0, actions, cap)
    mt = expand_mark_tree(tree, coeffs, reward, x0, actions, cap, levels=s)
    sub = tree.subtree(s)
    terminal = value_direct_many(sub, coeffs, reward, mt.states[s], actions)
    candidates = [("constant", 1.0, tilted_values(mt, lam, 1.0, alpha_idx, terminal)[0][0])]
    for n in n_grid:
        sol = solve_penalised(n, mt, lam, alpha_idx, terminal)
        for eps in eps_grid:
            J = tilted_values(mt, lam, bang_bang_tables(sol, n, eps), alpha_idx, terminal)
            candidates.append((f"bang_bang(n={n:g},eps={eps:g})", n, J[0][0]))
    best = max(candidates, key=lambda c: c[2])
    return {"s": s, "lhs": lhs, "rhs": float(best[2]), "residual": abs(lhs - float(best[2])),
            "argmax": best[0], "n_members": len(candidates)}


def law_invariance_check(tree: ScenarioTree, coeffs: Coefficients, reward: Reward,
                         xi1: InitialCondition, xi2: InitialCondition, actions: ActionSet,
                         tree2: ScenarioTree | None = None) -> float:
    """|V(xi1) - V(xi2)| for two initial conditions with the same law."""
    if not law_of(xi1).compact().same_as(law_of(xi2).compact()):
        raise ValueError("initial conditions have different laws")
    tree2 = tree if tree2 is None else tree2
    return abs(value_direct(tree, coeffs, reward, xi1, actions)
               - value_direct(tree2, coeffs, reward, xi2, actions))


def restriction_check(tree: ScenarioTree, coeffs: Coefficients, reward: Reward,
                      xi: InitialCondition, actions: ActionSet, s: int,
                      lam: LambdaFamily | None = None, alpha_idx: int = 0,
                      constants: Sequence[float] = (0.5, 1.0, 2.0), n_bang: float = 1e9,
                      eps_bang: float = 1e-9, max_maps: int = 100_000) -> dict:
    """Supremum over intensities ignoring the past versus intensities reading it.

    The problem starts at step s from ``xi`` (lifted to the step-s atoms).
    Pre-start histories are the common-noise node at s and whether an event
    occurred before t_s; a history-dependent member assigns one
    history-free member to every pre-start history.
    """
    lam = default_lambda_family(tree, actions.size) if lam is None else lam
    if not 0 <= s < tree.M:
        raise ValueError("start step must lie before the horizon")
    sub = tree.subtree(s)
    x_s = np.asarray(xi.values, dtype=float)[tree.ancestor_atoms(s, 0)]
    sub_lam = _shift_lambda(lam, s)
    mt = expand_mark_tree(sub, coeffs, reward, x_s, actions)
    members = [("constant", c, tilted_values(mt, sub_lam, float(c), alpha_idx)[0][0]) for c in constants]
    sol = solve_penalised(n_bang, mt, sub_lam, alpha_idx)
    members.append(("bang_bang", n_bang,
                    tilted_values(mt, sub_lam, bang_bang_tables(sol, n_bang, eps_bang), alpha_idx)[0][0]))
    vals = np.array([m[2] for m in members])
    mass_before = sum(lam.total_mass(k) * tree.dt(k) for k in range(s))
    p_event = -math.expm1(-mass_before)
    probs = np.concatenate([tree.node_probs(s) * (1.0 - p_event), tree.node_probs(s) * p_event])
    probs = probs[probs > 0]
    count = len(members) ** probs.size
    if count > max_maps:
        raise ValueError(f"{count} history-dependent members exceed the cap {max_maps}")
    best_hist = -math.inf
    for choice in itertools.product(range(len(members)), repeat=probs.size):
        best_hist = max(best_hist, float(probs @ vals[list(choice)]))
    best_free = float(vals.max())
    return {"s": s, "sup_restricted": best_free, "sup_full": best_hist,
            "residual": abs(best_hist - best_free), "n_histories": int(probs.size),
            "n_members": count}


def _shift_lambda(lam: LambdaFamily, s: int) -> LambdaFamily:
    spaces = tuple(ActionSpace(sp.step - s, sp.n_atoms, sp.n_actions, sp.table) for sp in lam.spaces[s:])
    return LambdaFamily(spaces, lam.masses[s:], ())


def continuity_check(tree: ScenarioTree, coeffs: Coefficients, reward: Reward,
                     xi: InitialCondition, actions: ActionSet, nu=1.0, alpha_idx: int = 0,
                     lam: LambdaFamily | None = None, eps_list: Sequence[float] = (1e-2, 1e-3, 1e-4),
                     direction: np.ndarray | None = None) -> dict:
    """|J(xi + eps e) - J(xi)| / eps for a fixed intensity on the tree."""
    lam = default_lambda_family(tree, actions.size) if lam is None else lam
    x0 = _initial_states(tree, xi)
    e = np.ones_like(x0) if direction is None else np.asarray(direction, dtype=float).reshape(x0.shape)

    def J(x):
        mt = expand_mark_tree(tree, coeffs, reward, x, actions)
        return float(tilted_values(mt, lam, nu, alpha_idx)[0][0])
    base = J(x0)
    diffs = [abs(J(x0 + eps * e) - base) for eps in eps_list]
    ratios = [d / eps for d, eps in zip(diffs, eps_list)]
    return {"base": base, "eps": list(eps_list), "diffs": diffs, "ratios": ratios,
            "max_ratio": max(ratios)}


def interior_consistency(tree: ScenarioTree, coeffs: Coefficients, reward: Reward, xi,
                         actions: ActionSet, k: int, lam: LambdaFamily | None = None,
                         alpha_idx: int = 0, max_nodes: int | None = None) -> float:
    """Largest gap between the limit Y at level-k nodes and value_direct restarted there."""
    sol = randomised_solution(tree, coeffs, reward, xi, actions, alpha_idx, lam)
    mt = expand_mark_tree(tree, coeffs, reward, _initial_states(tree, xi), actions, levels=k)
    nodes = np.arange(mt.n_nodes(k)) if max_nodes is None else np.arange(min(max_nodes, mt.n_nodes(k)))
    direct = value_direct_many(tree.subtree(k), coeffs, reward, mt.states[k][nodes], actions)
    return float(np.max(np.abs(sol.Y[k][nodes] - direct)))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class ValueReport:
    """Values of one instance computed by the different routes."""

    instance: dict
    v_direct: float
    v_bsde: dict
    v_mc: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def to_json(self, with_timings: bool = False) -> dict:
        out = {"instance": self.instance, "V_direct": self.v_direct, "V_bsde": self.v_bsde,
               "V_mc": self.v_mc, "residuals": self.residuals}
        if with_timings:
            out["timings"] = self.timings
        return out


def value_report(tree: ScenarioTree, coeffs: Coefficients, reward: Reward, xi: InitialCondition,
                 actions: ActionSet, instance: dict, alpha_idx: int = 0,
                 lam: LambdaFamily | None = None, levels: Sequence[float] = DEFAULT_LEVELS) -> ValueReport:
    t0 = time.perf_counter()
    vd = value_direct(tree, coeffs, reward, xi, actions)
    t1 = time.perf_counter()
    sol = randomised_solution(tree, coeffs, reward, xi, actions, alpha_idx, lam, levels)
    t2 = time.perf_counter()
    v_bsde = {"levels": sol.info["levels"], "root": sol.info["root"], "limit": sol.y0,
              "extrapolated": sol.info["extrapolated_root"]}
    return ValueReport(instance, vd, v_bsde, residuals={"equivalence": abs(vd - sol.y0)},
                       timings={"direct": t1 - t0, "bsde": t2 - t1})
