"""Marked Poisson point processes, intensity controls and Girsanov weights.

Marks live in the spaces of decomposed actions: an event in the grid cell
(t_k, t_{k+1}] carries a mark drawn from ``lam.masses[k]``, which is an
element of the step-k action space.  Intensity controls are frozen at the
start of each cell, so they are predictable and the compensator integral is
an exact finite sum.

Two folding conventions turn a point process into a grid control:

* ``"end"``: the last mark of cell k drives step k (the convention of the
  backward tree solvers);
* ``"left"``: step k uses the last mark visible at t_k.
"""

from __future__ import annotations

import math
from collections import namedtuple
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .controls import (ActionSet, DecomposedAction, DecomposedControl, LambdaFamily, lift_index,
                       rho_hat_matrix)
from .scenario import ScenarioTree

History = namedtuple("History", ["node", "count", "last", "folded"])
History.__doc__ = """Information available at the start of a grid cell.

node: common-noise history index at the cell's step; count: number of events
so far (``None`` where untracked); last: (step, mark index) of the latest event
or ``None``; folded: grid-control indices of the previous steps (or ``None``).
"""

HISTORY_FIELDS = frozenset(History._fields)
KINDS = ("V", "V_t", "V^n")
BOUND_TOL = 1e-12


# ---------------------------------------------------------------------------
# marked point processes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MarkedPointProcess:
    """Finite list of events (time, decomposed action) on (start, end]."""

    start: float
    end: float
    times: tuple[float, ...] = ()
    marks: tuple[DecomposedAction, ...] = ()

    def __post_init__(self) -> None:
        times = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "marks", tuple(self.marks))
        if len(times) != len(self.marks):
            raise ValueError("every event needs a mark")
        if not self.start < self.end:
            raise ValueError("empty horizon")
        if times and (times[0] <= self.start or times[-1] > self.end):
            raise ValueError("event times must lie in (start, end]")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("event times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    def validate(self, tree: ScenarioTree) -> None:
        """Each mark must be measurable at the step of the cell containing its time."""
        for tau, mark in zip(self.times, self.marks):
            k = cell_index(tree, tau)
            if mark.step > k:
                raise ValueError(
                    f"mark at time {tau} is measurable only at step {mark.step}, "
                    f"but the event lies in cell {k}"
                )

    def before(self, t: float) -> "MarkedPointProcess":
        keep = [i for i, tau in enumerate(self.times) if tau <= t]
        return MarkedPointProcess(self.start, self.end, [self.times[i] for i in keep],
                                  [self.marks[i] for i in keep])

    def with_event(self, tau: float, mark: DecomposedAction) -> "MarkedPointProcess":
        pairs = sorted(list(zip(self.times, self.marks)) + [(float(tau), mark)], key=lambda p: p[0])
        return MarkedPointProcess(self.start, self.end, [p[0] for p in pairs], [p[1] for p in pairs])

    def to_json(self) -> dict:
        return {"start": self.start, "end": self.end,
                "events": [{"time": t, "step": m.step, "values": [int(v) for v in m.values]}
                           for t, m in zip(self.times, self.marks)]}

    @classmethod
    def from_json(cls, data: dict) -> "MarkedPointProcess":
        ev = data.get("events", [])
        return cls(float(data["start"]), float(data["end"]), [e["time"] for e in ev],
                   [DecomposedAction(int(e["step"]), e["values"]) for e in ev])


def cell_index(tree: ScenarioTree, t: float, tol: float = 1e-12) -> int:
    """k with t in (t_k, t_{k+1}] on the (possibly shifted) grid of ``tree``."""
    times = tree.t_offset + np.asarray(tree.grid.times, dtype=float)
    if t <= times[0] or t > times[-1] + tol:
        raise ValueError(f"time {t} outside ({times[0]}, {times[-1]}]")
    return int(min(max(np.searchsorted(times, t - tol, side="left") - 1, 0), tree.M - 1))


def sample_ppp(lam: LambdaFamily, tree: ScenarioTree, seed, start_step: int = 0) -> MarkedPointProcess:
    """Sample the marked Poisson process with intensity lam_k(da) ds by thinning.

    Candidate times come from a homogeneous process with the maximal total
    mass; a candidate in cell k survives with probability mass_k / max.
    ``seed`` may be an int, a SeedSequence or a Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    t0, t1 = tree.time(start_step), tree.time(tree.M)
    totals = np.array([lam.total_mass(k) for k in range(tree.M)])
    top = float(totals[start_step:].max()) if tree.M > start_step else 0.0
    if top <= 0.0:
        return MarkedPointProcess(t0, t1)
    n = rng.poisson(top * (t1 - t0))
    cand = np.sort(t0 + (t1 - t0) * (1.0 - rng.random(n)))    # values in (t0, t1]
    times, marks = [], []
    for tau in cand:
        k = cell_index(tree, tau)
        if rng.random() * top < totals[k]:
            idx = rng.choice(lam.spaces[k].size, p=lam.probabilities(k))
            times.append(float(tau))
            marks.append(lam.spaces[k].element(int(idx)))
    # thinning can produce ties only with probability zero; drop them defensively
    keep = [i for i in range(len(times)) if i == 0 or times[i] > times[i - 1]]
    return MarkedPointProcess(t0, t1, [times[i] for i in keep], [marks[i] for i in keep])


@dataclass(frozen=True)
class PPPBatch:
    """Many independent point processes, stored flat and sorted by (rep, time).

    ``mark`` is the index in the action space of the event's cell ``step``;
    ``b_nodes`` (optional, shape (n_reps, M + 1)) holds common-noise node indices.
    """

    n_reps: int
    rep: np.ndarray
    time: np.ndarray
    step: np.ndarray
    mark: np.ndarray
    b_nodes: np.ndarray | None = None

    def process(self, r: int, tree: ScenarioTree, lam: LambdaFamily) -> MarkedPointProcess:
        sel = self.rep == r
        return MarkedPointProcess(tree.time(0), tree.time(tree.M), self.time[sel],
                                  [lam.spaces[k].element(int(m))
                                   for k, m in zip(self.step[sel], self.mark[sel])])

    def b_path(self, r: int, nb: int) -> tuple[int, ...]:
        nodes = self.b_nodes[r]
        return tuple(int(nodes[k + 1] - nodes[k] * nb) for k in range(len(nodes) - 1))


def _sort_batch(n_reps, reps, times, steps, marks, b_nodes=None) -> PPPBatch:
    rep = np.concatenate(reps) if reps else np.zeros(0, dtype=np.int64)
    tim = np.concatenate(times) if times else np.zeros(0)
    stp = np.concatenate(steps) if steps else np.zeros(0, dtype=np.int64)
    mrk = np.concatenate(marks) if marks else np.zeros(0, dtype=np.int64)
    order = np.lexsort((tim, rep))
    return PPPBatch(n_reps, rep[order], tim[order], stp[order], mrk[order], b_nodes)


def sample_b_nodes(tree: ScenarioTree, n_reps: int, rng: np.random.Generator) -> np.ndarray:
    """Common-noise node indices along ``n_reps`` sampled lattice paths."""
    nodes = np.zeros((n_reps, tree.M + 1), dtype=np.int64)
    for k in range(tree.M):
        j = rng.choice(tree.nb, size=n_reps, p=np.asarray(tree.lat_b.probs))
        nodes[:, k + 1] = nodes[:, k] * tree.nb + j
    return nodes


def sample_ppp_batch(lam: LambdaFamily, tree: ScenarioTree, n_reps: int,
                     rng: np.random.Generator, with_b: bool = True) -> PPPBatch:
    """Independent copies of the reference point process, cell by cell.

    Within a cell the intensity is constant, so the count is Poisson and the
    times are uniform order statistics; this has the same law as thinning.
    """
    reps, times, steps, marks = [], [], [], []
    for k in range(tree.M):
        tot = lam.total_mass(k)
        dt = tree.dt(k)
        cnt = rng.poisson(tot * dt, size=n_reps) if tot > 0 else np.zeros(n_reps, dtype=np.int64)
        n = int(cnt.sum())
        reps.append(np.repeat(np.arange(n_reps), cnt))
        times.append(tree.time(k) + dt * (1.0 - rng.random(n)))
        steps.append(np.full(n, k, dtype=np.int64))
        marks.append(rng.choice(lam.spaces[k].size, size=n, p=lam.probabilities(k)) if n
                     else np.zeros(0, dtype=np.int64))
    b_nodes = sample_b_nodes(tree, n_reps, rng) if with_b else None
    return _sort_batch(n_reps, reps, times, steps, marks, b_nodes)


# ---------------------------------------------------------------------------
# folding into grid controls
# ---------------------------------------------------------------------------


def _grid_marks(alpha_t: DecomposedAction, mpp: MarkedPointProcess, tree: ScenarioTree,
                convention: str) -> list[DecomposedAction]:
    if convention not in ("end", "left"):
        raise ValueError(f"unknown convention {convention!r}")
    mpp.validate(tree)
    if alpha_t.step != 0:
        raise ValueError("initial action must belong to the first action space of the tree")
    path, cur, i = [], alpha_t, 0
    for k in range(tree.M):
        edge = tree.time(k + 1) if convention == "end" else tree.time(k)
        while i < len(mpp) and mpp.times[i] <= edge + 1e-12:
            cur = mpp.marks[i]
            i += 1
        path.append(cur.lift(tree, k) if cur.step < k else cur)
    return path


def step_control(alpha_t: DecomposedAction, mpp: MarkedPointProcess, tree: ScenarioTree,
                 convention: str = "end") -> DecomposedControl:
    """Piecewise-constant control started at ``alpha_t`` and switched at the events.

    ``tree`` is the scenario tree whose step 0 is the process start.  The
    result does not depend on the common-noise node.
    """
    path = _grid_marks(alpha_t, mpp, tree, convention)
    for k, a in enumerate(path):
        if a.step != k:
            raise ValueError(f"mark used on step {k} is not measurable there")
    return DecomposedControl.from_path(tree, path)


def folded_indices(alpha_idx: int, batch: PPPBatch, tree: ScenarioTree,
                   lam: LambdaFamily) -> np.ndarray:
    """Grid-control indices (end convention) for every replication: shape (n_reps, M)."""
    out = np.zeros((batch.n_reps, tree.M), dtype=np.int64)
    cur = np.full(batch.n_reps, alpha_idx, dtype=np.int64)
    for k in range(tree.M):
        if k > 0:
            cur = lift_index(tree, lam.spaces[k - 1], lam.spaces[k])[cur]
        sel = np.flatnonzero(batch.step == k)
        # events are sorted by (rep, time): the last write per rep wins
        cur[batch.rep[sel]] = batch.mark[sel]
        out[:, k] = cur
    return out


# ---------------------------------------------------------------------------
# intensity controls
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IntensityControl:
    """Intensity nu(k, history, marks) with eps <= nu <= nbar.

    ``fn`` receives the cell index, a ``History`` and an integer array of
    mark indices in the step-k action space; it returns an array of the same
    shape.  ``uses`` lists the history fields the function reads, which lets
    exact evaluators merge histories that the control cannot tell apart.
    """

    fn: Callable[[int, History, np.ndarray], np.ndarray]
    eps: float
    nbar: float
    kind: str = "V"
    cap: float | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)
    uses: frozenset = HISTORY_FIELDS

    def __post_init__(self) -> None:
        if not (0.0 < self.eps <= self.nbar < math.inf):
            raise ValueError(f"need 0 < eps <= nbar < inf, got eps={self.eps}, nbar={self.nbar}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown class tag {self.kind!r}")
        if self.kind == "V^n":
            if self.cap is None or self.nbar > self.cap * (1 + BOUND_TOL):
                raise ValueError("a restricted intensity needs nbar <= cap")
        if self.kind == "V_t" and ({"count", "last"} & set(self.uses)):
            raise ValueError("an intensity started afresh may not read pre-start events")
        object.__setattr__(self, "uses", frozenset(self.uses))
        bad = set(self.uses) - HISTORY_FIELDS
        if bad:
            raise ValueError(f"unknown history fields {sorted(bad)}")

    def __call__(self, k: int, hist: History, marks: np.ndarray) -> np.ndarray:
        marks = np.asarray(marks)
        v = np.broadcast_to(np.asarray(self.fn(k, hist, marks), dtype=float), marks.shape)
        lo, hi = self.eps * (1 - BOUND_TOL), self.nbar * (1 + BOUND_TOL)
        if not np.all(np.isfinite(v)) or v.min(initial=lo) < lo or v.max(initial=hi) > hi:
            raise ValueError(f"intensity {self.name} leaves [{self.eps}, {self.nbar}] at step {k}")
        return v

    def describe(self) -> dict:
        return {"name": self.name, "eps": self.eps, "nbar": self.nbar, "kind": self.kind,
                "cap": self.cap, "params": self.params}


def constant_intensity(c: float, eps: float | None = None, nbar: float | None = None,
                       cap: float | None = None) -> IntensityControl:
    eps = c if eps is None else eps
    nbar = c if nbar is None else nbar
    return IntensityControl(lambda k, h, m: np.full(np.shape(m), float(c)), eps, nbar,
                            kind="V^n" if cap is not None else "V", cap=cap,
                            name="constant", params={"c": c}, uses=frozenset())


def per_step_intensity(values: Sequence[float]) -> IntensityControl:
    vals = [float(v) for v in values]
    return IntensityControl(lambda k, h, m: np.full(np.shape(m), vals[k]), min(vals), max(vals),
                            name="per_step", params={"values": vals}, uses=frozenset())


def mark_parity_intensity(even: float, odd: float) -> IntensityControl:
    """Mark-dependent: ``even`` on even enumeration indices, ``odd`` otherwise."""
    return IntensityControl(lambda k, h, m: np.where(np.asarray(m) % 2 == 0, even, odd),
                            min(even, odd), max(even, odd), name="mark_parity",
                            params={"even": even, "odd": odd}, uses=frozenset())


def count_intensity(even: float, odd: float) -> IntensityControl:
    """History-dependent: depends on the parity of the number of past events."""
    return IntensityControl(lambda k, h, m: np.full(np.shape(m), even if h.count % 2 == 0 else odd),
                            min(even, odd), max(even, odd), name="count_parity",
                            params={"even": even, "odd": odd}, uses=frozenset({"count"}))


def node_intensity(values: Sequence[float], nb: int) -> IntensityControl:
    """Depends on the latest common-noise increment (``values[j]`` after increment j)."""
    vals = [float(v) for v in values]

    def fn(k, h, m):
        c = 1.0 if k == 0 else vals[h.node % nb]
        return np.full(np.shape(m), c)
    return IntensityControl(fn, min(vals + [1.0]), max(vals + [1.0]), name="node",
                            params={"values": vals}, uses=frozenset({"node"}))


def table_intensity(tables: Sequence[np.ndarray], spaces, nb: int, eps: float, nbar: float,
                    kind: str = "V", cap: float | None = None, name: str = "table") -> IntensityControl:
    """Intensity read from per-level tables indexed by action-history tree nodes.

    ``tables[k]`` has shape (nodes at level k, size of the step-k space); the
    node is recovered from the common-noise history and the folded grid
    controls, so the same object can be used on the tree and with samples.
    """
    tabs = [np.asarray(t, dtype=float) for t in tables]

    def fn(k, h, m):
        return tabs[k][tree_node_index(h.node, h.folded, spaces, nb, k), m]
    return IntensityControl(fn, eps, nbar, kind=kind, cap=cap, name=name,
                            uses=frozenset({"node", "folded"}))


def tree_node_index(b_node: int, folded: Sequence[int], spaces, nb: int, k: int) -> int:
    """Action-history tree index from a common-noise node and previous grid controls."""
    digits = []
    b = int(b_node)
    for _ in range(k):
        b, j = divmod(b, nb)
        digits.append(j)
    digits.reverse()
    idx = 0
    for j in range(k):
        idx = (idx * spaces[j].size + int(folded[j])) * nb + digits[j]
    return idx


# ---------------------------------------------------------------------------
# Girsanov weights
# ---------------------------------------------------------------------------


def _history_at(k: int, tree: ScenarioTree, mpp: MarkedPointProcess, b_path: Sequence[int],
                folded: list[DecomposedAction] | None, lam: LambdaFamily) -> History:
    edge = tree.time(k)
    past = [i for i, tau in enumerate(mpp.times) if tau <= edge + 1e-12]
    last = None
    if past:
        m = mpp.marks[past[-1]]
        last = (m.step, int(lam.spaces[m.step].index(m.values)))
    fold = None
    if folded is not None:
        fold = tuple(int(lam.spaces[j].index(folded[j].values)) for j in range(k))
    return History(tree.node_index(tuple(b_path[:k])), len(past), last, fold)


def girsanov_weight(nu: IntensityControl, mpp: MarkedPointProcess, lam: LambdaFamily,
                    tree: ScenarioTree, b_path: Sequence[int], upto: float | None = None,
                    start: float | None = None, alpha_t: DecomposedAction | None = None) -> float:
    """Doleans-Dade exponential of the intensity change on (start, upto].

    L = prod over events of nu(event) * exp(-int sum_a (nu - 1) lam_k(a) ds),
    with exact piecewise-constant quadrature.  ``alpha_t`` is needed only for
    controls that read the folded grid controls.
    """
    start = mpp.start if start is None else float(start)
    upto = mpp.end if upto is None else float(upto)
    if upto < start:
        raise ValueError("upto precedes start")
    mpp.validate(tree)
    folded = _grid_marks(alpha_t, mpp, tree, "end") if alpha_t is not None else None
    log_l = 0.0
    for k in range(tree.M):
        lo, hi = max(tree.time(k), start), min(tree.time(k + 1), upto)
        if hi <= lo:
            continue
        hist = _history_at(k, tree, mpp, b_path, folded, lam)
        marks = np.arange(lam.spaces[k].size)
        nu_k = nu(k, hist, marks)
        if hi > lo:
            log_l -= float((nu_k - 1.0) @ lam.masses[k]) * (hi - lo)
        for tau, mark in zip(mpp.times, mpp.marks):
            if lo < tau <= hi:
                a = mark.lift(tree, k) if mark.step < k else mark
                v = float(nu_k[int(lam.spaces[k].index(a.values))])
                if v <= 0.0:
                    raise ValueError(f"nonpositive intensity at event time {tau}")
                log_l += math.log(v)
    return math.exp(log_l)


def girsanov_weights(nu: IntensityControl, batch: PPPBatch, lam: LambdaFamily, tree: ScenarioTree,
                     alpha_idx: int = 0) -> np.ndarray:
    """Vectorised L_T for every replication of a batch (same formula as ``girsanov_weight``).

    Histories are grouped so that ``nu`` is called once per distinct history.
    """
    n = batch.n_reps
    log_l = np.zeros(n)
    folded = folded_indices(alpha_idx, batch, tree, lam) if "folded" in nu.uses else None
    count = np.zeros(n, dtype=np.int64)
    last_step = np.full(n, -1, dtype=np.int64)
    last_idx = np.full(n, -1, dtype=np.int64)
    b_nodes = batch.b_nodes if batch.b_nodes is not None else np.zeros((n, tree.M + 1), dtype=np.int64)
    for k in range(tree.M):
        cols = [b_nodes[:, k] if "node" in nu.uses else np.zeros(n, dtype=np.int64),
                count if "count" in nu.uses else np.zeros(n, dtype=np.int64),
                last_step if "last" in nu.uses else np.zeros(n, dtype=np.int64),
                last_idx if "last" in nu.uses else np.zeros(n, dtype=np.int64)]
        if folded is not None:
            cols += [folded[:, j] for j in range(k)]
        keys = np.stack(cols, axis=1)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        marks = np.arange(lam.spaces[k].size)
        table = np.empty((uniq.shape[0], marks.size))
        for u, row in enumerate(uniq):
            last = None if row[2] < 0 else (int(row[2]), int(row[3]))
            fold = tuple(int(x) for x in row[4:]) if folded is not None else None
            table[u] = nu(k, History(int(row[0]), int(row[1]), last, fold), marks)
        log_l -= ((table - 1.0) @ lam.masses[k])[inv] * tree.dt(k)
        sel = np.flatnonzero(batch.step == k)
        vals = table[inv[batch.rep[sel]], batch.mark[sel]]
        np.add.at(log_l, batch.rep[sel], np.log(vals))
        np.add.at(count, batch.rep[sel], 1)
        last_step[batch.rep[sel]] = k
        last_idx[batch.rep[sel]] = batch.mark[sel]
    return np.exp(log_l)


def expected_weight_exact(nu: IntensityControl, lam: LambdaFamily, tree: ScenarioTree,
                          alpha_idx: int = 0, tail: float = 1e-18) -> float:
    """E[L_T] by exact summation over common-noise paths and event counts.

    Given a frozen history on cell k with total mass Lam and S = sum nu*lam,
    m events ending with mark l carry weight
    Pois(m; Lam dt) (S/Lam)^(m-1) nu_l lam_l / Lam * exp(-(S - Lam) dt).
    Counts are summed in closed form when ``nu`` ignores them, otherwise the
    series is truncated once its terms fall below ``tail``.
    """
    uses = nu.uses
    state = {(0, 0, None, () if "folded" in uses else None): 1.0}
    for k in range(tree.M):
        lamk = lam.masses[k]
        big = float(lamk.sum())
        dt = tree.dt(k)
        marks = np.arange(lamk.size)
        lift = lift_index(tree, lam.spaces[k - 1], lam.spaces[k]) if k > 0 else None
        new: dict = {}

        def add(key, w):
            new[key] = new.get(key, 0.0) + w
        for (node, cnt, last, fold), w in state.items():
            hist = History(node if "node" in uses else 0, cnt, last, fold)
            v = nu(k, hist, marks)
            s = float(v @ lamk)
            base = w * math.exp(-(s - big) * dt)
            if fold is not None:
                prev = fold[-1] if k > 0 else alpha_idx
                cur = int(lift[prev]) if k > 0 else prev
            p0 = math.exp(-big * dt)
            # no event in the cell
            for j in range(tree.nb):
                child = node * tree.nb + j
                add((child, cnt, last, None if fold is None else fold + (cur,)),
                    base * p0 * tree.lat_b.probs[j])
            if big <= 0.0:
                continue
            share = v * lamk / s                       # law of the last mark under the tilt
            if "count" in uses:
                ms, terms, m = [], [], 1
                term = p0 * big * dt                   # Pois(1) * (s/big)^0
                while True:
                    ms.append(m)
                    terms.append(term)
                    m += 1
                    term *= s * dt / m
                    if term < tail and m > s * dt:
                        break
                ms_terms = list(zip(ms, terms))
            else:
                ms_terms = [(0, p0 * math.expm1(s * dt))]
            keep_last = "last" in uses or fold is not None
            for m, tm in ms_terms:
                tot = base * tm * s / big if "count" in uses else base * tm
                if not keep_last:
                    for j in range(tree.nb):
                        add((node * tree.nb + j, cnt + m, None, None), tot * tree.lat_b.probs[j])
                    continue
                for ell in np.flatnonzero(share > 0):
                    wl = tot * float(share[ell])
                    lt = (k, int(ell)) if "last" in uses else None
                    for j in range(tree.nb):
                        add((node * tree.nb + j, cnt + m, lt,
                             None if fold is None else fold + (int(ell),)),
                            wl * tree.lat_b.probs[j])
        state = new
    return float(sum(state.values()))


# ---------------------------------------------------------------------------
# control approximation by tilted point processes
# ---------------------------------------------------------------------------


@dataclass
class PPPApproximation:
    """Tilted point process steering the folded control towards a target control."""

    tree: ScenarioTree
    lam: LambdaFamily
    actions: ActionSet
    target: list[np.ndarray]          # per step, (nodes,) index in the step-k space
    rates: np.ndarray                 # boosted rate per step
    nu: IntensityControl
    delta: float
    seed: int

    def sample(self, n_reps: int, rng: np.random.Generator) -> PPPBatch:
        """Draw ``n_reps`` processes under the tilted intensity nu * lam."""
        tree, lam = self.tree, self.lam
        b_nodes = sample_b_nodes(tree, n_reps, rng)
        reps, times, steps, marks = [], [], [], []
        for k in range(tree.M):
            dt = tree.dt(k)
            tgt = self.target[k][b_nodes[:, k]]
            lamk = lam.masses[k]
            stray = self.nu.eps * (lamk.sum() - lamk[tgt])
            boost = np.maximum(self.rates[k], self.nu.eps * lamk[tgt])
            total = boost + stray
            cnt = rng.poisson(total * dt)
            rep = np.repeat(np.arange(n_reps), cnt)
            n = rep.size
            t = tree.time(k) + dt * (1.0 - rng.random(n))
            hit = rng.random(n) * total[rep] < boost[rep]
            # strays: draw proportional to lam with the target removed
            cdf = np.cumsum(np.broadcast_to(lamk, (n, lamk.size)).copy()
                            * (np.arange(lamk.size)[None, :] != tgt[rep][:, None]), axis=1)
            u = rng.random(n) * cdf[:, -1] if n else np.zeros(0)
            stray_mark = np.minimum((cdf <= u[:, None]).sum(axis=1), lamk.size - 1)
            mk = np.where(hit, tgt[rep], stray_mark)
            reps.append(rep)
            times.append(t)
            steps.append(np.full(n, k, dtype=np.int64))
            marks.append(mk.astype(np.int64))
        return _sort_batch(n_reps, reps, times, steps, marks, b_nodes)

    def distances(self, batch: PPPBatch) -> np.ndarray:
        """Continuous-time integral of the decomposed-action distance, per replication."""
        tree, lam = self.tree, self.lam
        n = batch.n_reps
        out = np.zeros(n)
        cur = np.full(n, int(self.target[0][0]), dtype=np.int64)
        for k in range(tree.M):
            if k > 0:
                cur = lift_index(tree, lam.spaces[k - 1], lam.spaces[k])[cur]
            D = rho_hat_matrix(lam.spaces[k], tree.atom_weights(k), self.actions)
            tgt = self.target[k][batch.b_nodes[:, k]]
            t0, t1 = tree.time(k), tree.time(k + 1)
            sel = np.flatnonzero(batch.step == k)
            er, et, em = batch.rep[sel], batch.time[sel], batch.mark[sel]
            first = np.full(n, t1)
            if sel.size:
                is_first = np.r_[True, er[1:] != er[:-1]]
                first[er[is_first]] = et[is_first]
                nxt_same = np.r_[er[1:] == er[:-1], False]
                seg_end = np.where(nxt_same, np.r_[et[1:], t1], t1)
                np.add.at(out, er, D[tgt[er], em] * (seg_end - et))
            out += D[tgt, cur] * (first - t0)
            cur[er] = em
        return out

    def estimate(self, n_reps: int, rng: np.random.Generator) -> tuple[float, float]:
        d = self.distances(self.sample(n_reps, rng))
        return float(d.mean()), float(d.std(ddof=1) / math.sqrt(n_reps))


def approximate_control_by_ppp(ahat: DecomposedControl, delta: float, lam: LambdaFamily,
                               tree: ScenarioTree, actions: ActionSet, seed: int = 0,
                               eps: float = 0.1, nbar: float = 1e6) -> PPPApproximation:
    """Intensity boosting the mark equal to the target control on each step.

    On step k the target mark gets rate R_k = nu * lam_k(target) with
    R >= max(log(2/delta)/dt_min, 2 rho_max sum_k (1 + stray_k dt_k) / delta),
    where stray_k = eps * mass_k bounds the floor-rate switches to other
    marks.  Every switch away from the target lasts 1/R in expectation, so the
    expected distance is at most delta / 2.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    lam.check(tree)
    ahat.validate(tree, actions.size)
    target = [lam.spaces[k].index(ahat.maps[k]) for k in range(tree.M)]
    rho_max = float(actions.rho.max())
    dts = np.array([tree.dt(k) for k in range(tree.M)])
    strays = np.array([eps * lam.total_mass(k) for k in range(tree.M)])
    need = max(math.log(2.0 / delta) / dts.min(), 2.0 * rho_max * float(np.sum(1.0 + strays * dts)) / delta)
    rates = np.full(tree.M, need)
    lam_min = min(float(lam.masses[k][target[k]].min()) for k in range(tree.M))
    top = need / lam_min
    if top > nbar:
        # invert the rate requirement at the ceiling to report what is reachable
        reach = nbar * lam_min
        best = max(2.0 / math.exp(reach * dts.min()),
                   2.0 * rho_max * float(np.sum(1.0 + strays * dts)) / reach)
        raise ValueError(f"delta={delta} needs intensity {top:.3g} above the ceiling {nbar:.3g}; "
                         f"smallest reachable delta is about {best:.3g}")
    def fn(k, h, m):
        tg = target[k][h.node]
        return np.where(np.asarray(m) == tg, max(need / lam.masses[k][tg], eps), eps)
    nu = IntensityControl(fn, eps, max(top, eps), name="approximation",
                          params={"delta": delta, "rate": need}, uses=frozenset({"node"}))
    return PPPApproximation(tree, lam, actions, target, rates, nu, delta, seed)
