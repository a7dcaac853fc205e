"""Backward solvers on the action-history tree.

A node at level k is a common-noise history together with the grid controls
used on the earlier steps; its current mark is the control of step k - 1
(lifted to the step-k space), or the initial action at the root.  With

    G(a) = fbar_k(a) dt + E_B[Y_{k+1}(child after a)]

the penalised equation on a node reads

    Y = G(i) + sum_a c_a (G(a) - Y)_+,     c_a = n dt lam_k(a),

for the current mark i.  The right side is piecewise linear and decreasing
in Y, so the fixed point is found exactly after sorting G.  Letting n grow
gives Y = max over supported marks of G(a).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .controls import LambdaFamily
from .dynamics import MarkTree
from .randomisation import History, IntensityControl

MONOTONE_TOL = 1e-12
CONSTRAINT_TOL = 1e-9


@dataclass
class BSDESolution:
    """Discrete solution on the action-history tree.

    ``Y[k]`` has shape (N_k,), ``G[k]`` and ``U[k]`` shape (N_k, A_k) for
    k < M; ``Z[k]`` (N_k, nb) are the common-noise edge residuals under the
    current mark; ``dK[k]`` (N_k,) the compensator increments and ``K[k]``
    the compensator accumulated up to level k.
    """

    n: float
    Y: list[np.ndarray]
    G: list[np.ndarray]
    Yhat: list[np.ndarray]
    U: list[np.ndarray]
    Z: list[np.ndarray]
    dK: list[np.ndarray]
    K: list[np.ndarray]
    cur: list[np.ndarray]
    info: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.Y) - 1

    @property
    def y0(self) -> float:
        return float(self.Y[0][0])

    def max_positive_u(self, k: int) -> np.ndarray:
        return np.maximum(self.U[k], 0.0).max(axis=1)


def _current(mt: MarkTree, k: int, alpha_idx: int) -> np.ndarray:
    if k == 0:
        if not 0 <= alpha_idx < mt.spaces[0].size:
            raise ValueError(f"initial action index {alpha_idx} outside the first action space")
        return np.full(mt.n_nodes(0), alpha_idx, dtype=np.int64)
    return np.asarray(mt.current[k], dtype=np.int64)


def _continuation(mt: MarkTree, k: int, y_next: np.ndarray) -> np.ndarray:
    """E_B[Y_{k+1}] for every (node, action): shape (N_k, A_k)."""
    nb = mt.tree.nb
    return y_next.reshape(mt.n_nodes(k), mt.spaces[k].size, nb) @ mt.tree.lat_b.probs


def _terminal(mt: MarkTree, terminal: np.ndarray | None) -> np.ndarray:
    y = mt.terminal if terminal is None else np.asarray(terminal, dtype=float)
    if y.shape != (mt.n_nodes(mt.M),):
        raise ValueError(f"terminal values must have shape {(mt.n_nodes(mt.M),)}")
    return y


def penalised_fixed_point(yhat: np.ndarray, g: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Solve Y = yhat + sum_a c_a (g_a - Y)_+ row by row.

    Sorting g in decreasing order, the solution with the top j marks active is
    (yhat + sum c g) / (1 + sum c) over those marks; the first j whose next
    value of g does not exceed this candidate is the fixed point.
    """
    yhat = np.asarray(yhat, dtype=float)
    g = np.asarray(g, dtype=float)
    c = np.broadcast_to(np.asarray(c, dtype=float), g.shape)
    if np.any(c < 0):
        raise ValueError("penalty weights must be nonnegative")
    order = np.argsort(-g, axis=1, kind="stable")
    gs = np.take_along_axis(g, order, axis=1)
    cs = np.take_along_axis(c, order, axis=1)
    num = yhat[:, None] + np.cumsum(cs * gs, axis=1)
    den = 1.0 + np.cumsum(cs, axis=1)
    cand = np.concatenate([yhat[:, None], num / den], axis=1)             # (N, A + 1)
    nxt = np.concatenate([gs, np.full((g.shape[0], 1), -np.inf)], axis=1)
    ok = nxt <= cand
    first = np.argmax(ok, axis=1)
    return cand[np.arange(g.shape[0]), first]


def _check_lambda(mt: MarkTree, lam: LambdaFamily) -> None:
    for k in range(mt.M):
        if lam.masses[k].shape != (mt.spaces[k].size,):
            raise ValueError(f"mark measure at step {k} does not match the action space of the tree")


def _assemble(mt: MarkTree, n: float, Y, G, Yhat, U, dK, cur) -> BSDESolution:
    nb = mt.tree.nb
    Z, K = [], [np.zeros(1)]
    for k in range(mt.M):
        nk, ak = mt.n_nodes(k), mt.spaces[k].size
        kids = Y[k + 1].reshape(nk, ak, nb)[np.arange(nk), cur[k]]       # (N_k, nb)
        Z.append(kids - (kids @ mt.tree.lat_b.probs)[:, None])
        K.append(np.repeat(K[k] + dK[k], ak * nb))
    return BSDESolution(n, Y, G, Yhat, U, Z, dK, K, cur)


def solve_penalised(n: float, mt: MarkTree, lam: LambdaFamily, alpha_idx: int = 0,
                    terminal: np.ndarray | None = None) -> BSDESolution:
    """Exact backward induction for the penalised equation at level ``n``."""
    if not n >= 0:
        raise ValueError("penalty level must be nonnegative")
    _check_lambda(mt, lam)
    M = mt.M
    Y = [None] * (M + 1)
    G, Yhat, U, dK, cur = [None] * M, [None] * M, [None] * M, [None] * M, [None] * M
    Y[M] = _terminal(mt, terminal)
    for k in reversed(range(M)):
        dt = mt.tree.dt(k)
        g = mt.running[k] * dt + _continuation(mt, k, Y[k + 1])
        i = _current(mt, k, alpha_idx)
        yh = g[np.arange(g.shape[0]), i]
        c = n * dt * lam.masses[k]
        y = penalised_fixed_point(yh, g, c) if n > 0 else yh.copy()
        Y[k], G[k], Yhat[k], cur[k] = y, g, yh, i
        U[k] = g - y[:, None]
        dK[k] = np.maximum(U[k], 0.0) @ c if n > 0 else np.zeros_like(y)
    return _assemble(mt, float(n), Y, G, Yhat, U, dK, cur)


def bellman_limit(mt: MarkTree, lam: LambdaFamily, alpha_idx: int = 0,
                  terminal: np.ndarray | None = None) -> BSDESolution:
    """Closed-form limit: Y = max(G(i), max over supported a of G(a))."""
    _check_lambda(mt, lam)
    M = mt.M
    Y = [None] * (M + 1)
    G, Yhat, U, dK, cur = [None] * M, [None] * M, [None] * M, [None] * M, [None] * M
    Y[M] = _terminal(mt, terminal)
    for k in reversed(range(M)):
        g = mt.running[k] * mt.tree.dt(k) + _continuation(mt, k, Y[k + 1])
        i = _current(mt, k, alpha_idx)
        yh = g[np.arange(g.shape[0]), i]
        supported = lam.masses[k] > 0
        best = g[:, supported].max(axis=1) if supported.any() else np.full_like(yh, -np.inf)
        y = np.maximum(yh, best)
        Y[k], G[k], Yhat[k], cur[k] = y, g, yh, i
        U[k] = g - y[:, None]
        dK[k] = y - yh
    return _assemble(mt, math.inf, Y, G, Yhat, U, dK, cur)


def solve_constrained_limit(mt: MarkTree, lam: LambdaFamily, levels: Sequence[float],
                            alpha_idx: int = 0, terminal: np.ndarray | None = None,
                            tol: float = MONOTONE_TOL) -> BSDESolution:
    """Penalisation sweep plus the closed-form limit.

    Raises if Y^n decreases anywhere by more than ``tol`` between consecutive
    levels.  ``info`` records, per level, the root value, the largest gap to
    the limit, and a Richardson extrapolation of the root value from the last
    two levels (the gap behaves like C / n for large n).
    """
    levels = [float(x) for x in levels]
    if len(levels) < 2 or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be increasing with at least two entries")
    sweep = [solve_penalised(n, mt, lam, alpha_idx, terminal) for n in levels]
    worst = 0.0
    for lo, hi in zip(sweep, sweep[1:]):
        for k in range(mt.M + 1):
            drop = float(np.max(lo.Y[k] - hi.Y[k]))
            worst = max(worst, drop)
            if drop > tol:
                raise ArithmeticError(f"penalised values decrease by {drop:.3e} between n={lo.n:g} "
                                      f"and n={hi.n:g} at level {k}")
    limit = bellman_limit(mt, lam, alpha_idx, terminal)
    for k in range(mt.M):
        sup = lam.masses[k] > 0
        if np.max(limit.U[k][:, sup], initial=-np.inf) > CONSTRAINT_TOL:
            raise ArithmeticError(f"constraint violated at level {k}")
    gaps = [max(float(np.max(limit.Y[k] - s.Y[k])) for k in range(mt.M + 1)) for s in sweep]
    n1, n2 = levels[-2], levels[-1]
    y1, y2 = sweep[-2].y0, sweep[-1].y0
    limit.info = {
        "levels": levels,
        "root": [s.y0 for s in sweep],
        "gap": gaps,
        "max_monotone_violation": worst,
        "extrapolated_root": (n2 * y2 - n1 * y1) / (n2 - n1),
        "sweep": sweep,
    }
    return limit


# ---------------------------------------------------------------------------
# intensity-tilted evaluation
# ---------------------------------------------------------------------------


def intensity_tables(nu: IntensityControl, mt: MarkTree) -> list[np.ndarray]:
    """Evaluate an intensity control at every node of the action-history tree."""
    if {"count", "last"} & set(nu.uses):
        raise ValueError(f"intensity {nu.name} reads event counts, which the tree does not track")
    nb = mt.tree.nb
    out = []
    for k in range(mt.M):
        marks = np.arange(mt.spaces[k].size)
        tab = np.empty((mt.n_nodes(k), marks.size))
        for v in range(mt.n_nodes(k)):
            bs, acts = mt.node_history(k, v)
            b_node = 0
            for j in bs:
                b_node = b_node * nb + j
            tab[v] = nu(k, History(b_node, None, None, acts), marks)
        out.append(tab)
    return out


def tilted_values(mt: MarkTree, lam: LambdaFamily, nu, alpha_idx: int = 0,
                  terminal: np.ndarray | None = None) -> list[np.ndarray]:
    """Expected reward when the marks jump with intensity nu * lam.

    On step k a node with current mark i keeps it with probability
    1 / (1 + sum_a nu_a lam_a dt) and switches to a with probability
    nu_a lam_a dt / (1 + ...).  ``nu`` is an IntensityControl, a list of
    per-level tables (N_k, A_k), or a scalar.
    """
    _check_lambda(mt, lam)
    if isinstance(nu, IntensityControl):
        tables = intensity_tables(nu, mt)
    elif np.isscalar(nu):
        tables = [np.full((mt.n_nodes(k), mt.spaces[k].size), float(nu)) for k in range(mt.M)]
    else:
        tables = [np.asarray(t, dtype=float) for t in nu]
    M = mt.M
    J = [None] * (M + 1)
    J[M] = _terminal(mt, terminal)
    for k in reversed(range(M)):
        dt = mt.tree.dt(k)
        g = mt.running[k] * dt + _continuation(mt, k, J[k + 1])
        i = _current(mt, k, alpha_idx)
        rate = tables[k] * lam.masses[k] * dt                                # (N_k, A_k)
        J[k] = (g[np.arange(g.shape[0]), i] + np.sum(rate * g, axis=1)) / (1.0 + rate.sum(axis=1))
    return J


def bang_bang_tables(sol: BSDESolution, n: float, eps: float) -> list[np.ndarray]:
    """nu = n where U >= 0 and eps where U < 0."""
    return [np.where(u >= 0.0, float(n), float(eps)) for u in sol.U]


def representation_check(sol: BSDESolution, mt: MarkTree, lam: LambdaFamily, nu_grid,
                         alpha_idx: int = 0, terminal: np.ndarray | None = None,
                         tol: float = 1e-9) -> dict:
    """Compare tilted values over a grid of intensities bounded by n with Y^n.

    Every member must stay below Y^n at every node; the report also gives the
    best value at the root and its distance to Y^n.
    """
    worst, witness, best = -math.inf, None, -math.inf
    values = []
    for g_idx, nu in enumerate(nu_grid):
        tabs = intensity_tables(nu, mt) if isinstance(nu, IntensityControl) else nu
        if max(float(np.max(t)) for t in tabs) > sol.n * (1 + 1e-12):
            raise ValueError(f"grid member {g_idx} exceeds the penalty level {sol.n}")
        J = tilted_values(mt, lam, tabs, alpha_idx, terminal)
        values.append(float(J[0][0]))
        best = max(best, float(J[0][0]))
        for k in range(mt.M + 1):
            ex = J[k] - sol.Y[k]
            j = int(np.argmax(ex))
            if ex[j] > worst:
                worst, witness = float(ex[j]), {"member": g_idx, "level": k, "node": j}
    return {"ok": worst <= tol, "max_excess": worst, "witness": witness, "root_values": values,
            "best_root": best, "gap_to_Y": sol.y0 - best}


# ---------------------------------------------------------------------------
# structural checks
# ---------------------------------------------------------------------------


def martingale_residual(sol: BSDESolution, mt: MarkTree) -> float:
    """Largest error in Y_k = fbar(i) dt + Y_{k+1}(edge) - Z(edge) + dK along every edge."""
    nb = mt.tree.nb
    worst = 0.0
    for k in range(mt.M):
        nk, ak = mt.n_nodes(k), mt.spaces[k].size
        kids = sol.Y[k + 1].reshape(nk, ak, nb)[np.arange(nk), sol.cur[k]]
        f = mt.running[k][np.arange(nk), sol.cur[k]] * mt.tree.dt(k)
        rec = f[:, None] + kids - sol.Z[k] + sol.dK[k][:, None]
        worst = max(worst, float(np.max(np.abs(rec - sol.Y[k][:, None]))))
    return worst


def penalty_residual(sol: BSDESolution, mt: MarkTree, lam: LambdaFamily) -> float:
    """Largest error in dK = n dt sum_a lam_a (U_a)_+ (penalised solutions only)."""
    if not math.isfinite(sol.n):
        raise ValueError("the limit has no penalty term")
    return max(float(np.max(np.abs(sol.dK[k] - np.maximum(sol.U[k], 0.0)
                                   @ (sol.n * mt.tree.dt(k) * lam.masses[k]))))
               for k in range(mt.M))


def supersolution_from_bumps(mt: MarkTree, lam: LambdaFamily, bumps: Sequence[np.ndarray],
                             alpha_idx: int = 0) -> list[np.ndarray]:
    """Bellman recursion with a nonnegative bump added at every node.

    The result dominates every continuation, so it satisfies the constraint
    with a nondecreasing compensator and must lie above the minimal solution.
    """
    if any(np.min(b) < 0 for b in bumps):
        raise ValueError("bumps must be nonnegative")
    M = mt.M
    Y = [None] * (M + 1)
    Y[M] = mt.terminal + bumps[M]
    for k in reversed(range(M)):
        g = mt.running[k] * mt.tree.dt(k) + _continuation(mt, k, Y[k + 1])
        i = _current(mt, k, alpha_idx)
        sup = lam.masses[k] > 0
        Y[k] = np.maximum(g[np.arange(g.shape[0]), i], g[:, sup].max(axis=1)) + bumps[k]
    return Y


def is_supersolution(Y: Sequence[np.ndarray], mt: MarkTree, lam: LambdaFamily,
                     alpha_idx: int = 0, tol: float = 1e-12) -> bool:
    """Y_M >= g and Y_k >= G(a) for the current and every supported mark."""
    if np.any(Y[mt.M] < mt.terminal - tol):
        return False
    for k in range(mt.M):
        g = mt.running[k] * mt.tree.dt(k) + _continuation(mt, k, Y[k + 1])
        i = _current(mt, k, alpha_idx)
        sup = lam.masses[k] > 0
        need = np.maximum(g[np.arange(g.shape[0]), i], g[:, sup].max(axis=1))
        if np.any(Y[k] < need - tol):
            return False
    return True


def export_csv(solutions: Sequence[BSDESolution]) -> str:
    """Rows (n, step, node, mark, Y, K, maxU+) with 17 significant digits."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "step", "node", "mark", "Y", "K", "maxU+"])
    for sol in solutions:
        n = "inf" if math.isinf(sol.n) else f"{sol.n:.17g}"
        for k in range(sol.M):
            up = sol.max_positive_u(k)
            for v in range(sol.Y[k].size):
                w.writerow([n, k, v, int(sol.cur[k][v]), f"{sol.Y[k][v]:.17g}",
                            f"{sol.K[k][v]:.17g}", f"{up[v]:.17g}"])
    return buf.getvalue()
