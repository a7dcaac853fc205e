"""Problem data: empirical measures, Wasserstein-2, coefficients, rewards and initial conditions.

Coefficient and reward callables are vectorised.  They receive

* ``t``: a float,
* ``x``: states of shape ``(..., n, d)``,
* ``law``: an :class:`EmpiricalMeasure` whose points have shape ``(..., K, d)``
  (one measure per leading batch index, shared by the ``n`` states),
* ``a``: action values of shape ``(..., n, p)``,

and return arrays with the matching leading shape.  Drift returns
``(..., n, d)``, the diffusions ``(..., n, d, m)`` and ``(..., n, d, n_B)``,
rewards ``(..., n)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np
from scipy.optimize import linprog

from .scenario import AtomSpace, TimeGrid

WEIGHT_TOL = 1e-12
POINT_TOL = 1e-12
W2_LP_CAP = 64


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Finitely supported measure, possibly batched over leading axes of ``points``."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size != pts.shape[-2]:
            raise ValueError("weights must be a vector matching the support size")
        if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def dirac(cls, x: Sequence[float] | float) -> "EmpiricalMeasure":
        return cls(np.atleast_1d(np.asarray(x, dtype=float))[None, :], np.ones(1))

    @property
    def dim(self) -> int:
        return self.points.shape[-1]

    @property
    def size(self) -> int:
        return self.weights.size

    def mean(self) -> np.ndarray:
        return np.einsum("...kd,k->...d", self.points, self.weights)

    def second_moment(self) -> np.ndarray:
        return np.einsum("...kd,...kd,k->...", self.points, self.points, self.weights)

    def variance(self) -> np.ndarray:
        m = self.mean()
        return self.second_moment() - np.einsum("...d,...d->...", m, m)

    def take(self, idx) -> "EmpiricalMeasure":
        """Select one measure out of a batch."""
        return EmpiricalMeasure(self.points[idx], self.weights)

    def expand(self) -> "EmpiricalMeasure":
        """Add a leading batch axis of length one."""
        return EmpiricalMeasure(self.points[None], self.weights)

    def compact(self, tol: float = POINT_TOL) -> "EmpiricalMeasure":
        """Merge coincident support points and drop zero weights (unbatched only)."""
        if self.points.ndim != 2:
            raise ValueError("compact applies to a single measure")
        pts, w = self.points, self.weights
        keep = w > 0
        pts, w = pts[keep], w[keep]
        order = np.lexsort(pts.T[::-1])
        pts, w = pts[order], w[order]
        out_p, out_w = [pts[0]], [w[0]]
        for p, wi in zip(pts[1:], w[1:]):
            if np.max(np.abs(p - out_p[-1])) <= tol:
                out_w[-1] += wi
            else:
                out_p.append(p)
                out_w.append(wi)
        return EmpiricalMeasure(np.array(out_p), np.array(out_w))

    def same_as(self, other: "EmpiricalMeasure", tol: float = 1e-12) -> bool:
        a, b = self.compact(), other.compact()
        return (a.size == b.size and np.max(np.abs(a.points - b.points)) <= tol
                and np.max(np.abs(a.weights - b.weights)) <= tol)


def wasserstein2(mu: EmpiricalMeasure, nu: EmpiricalMeasure, cap: int = W2_LP_CAP) -> float:
    """Quadratic Wasserstein distance between two finitely supported measures.

    One-dimensional measures use the quantile coupling; higher dimensions
    solve the transport linear program (HiGHS) for supports up to ``cap``.
    """
    if mu.points.ndim != 2 or nu.points.ndim != 2:
        raise ValueError("wasserstein2 expects unbatched measures")
    if mu.dim != nu.dim:
        raise ValueError("measures live in different dimensions")
    if mu.dim == 1:
        return float(np.sqrt(max(_w2sq_quantile(mu, nu), 0.0)))
    if mu.size > cap or nu.size > cap:
        raise ValueError(
            f"support sizes ({mu.size}, {nu.size}) exceed the transport cap {cap}; "
            "use d = 1 or shrink the supports"
        )
    return float(np.sqrt(max(_w2sq_lp(mu, nu), 0.0)))


def _w2sq_quantile(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    xa, wa = mu.points[:, 0], mu.weights
    xb, wb = nu.points[:, 0], nu.weights
    ia, ib = np.argsort(xa, kind="stable"), np.argsort(xb, kind="stable")
    xa, wa, xb, wb = xa[ia], wa[ia], xb[ib], wb[ib]
    ca, cb = np.cumsum(wa), np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    cuts = np.union1d(ca, cb)
    lo = np.concatenate([[0.0], cuts[:-1]])
    mid = 0.5 * (lo + cuts)
    qa = xa[np.minimum(np.searchsorted(ca, mid, side="left"), xa.size - 1)]
    qb = xb[np.minimum(np.searchsorted(cb, mid, side="left"), xb.size - 1)]
    return float(np.sum((cuts - lo) * (qa - qb) ** 2))


def _w2sq_lp(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    n, m = mu.size, nu.size
    cost = ((mu.points[:, None, :] - nu.points[None, :, :]) ** 2).sum(-1)
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([mu.weights, nu.weights])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


@dataclass(frozen=True)
class InitialCondition:
    """States assigned to the root atoms of a scenario tree."""

    atoms: AtomSpace
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != len(self.atoms):
            raise ValueError("initial condition must assign a state to every root atom")
        if not np.all(np.isfinite(v)):
            raise ValueError("initial states must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def law(self) -> EmpiricalMeasure:
        return law_of(self)

    def permuted(self, perm: Sequence[int]) -> "InitialCondition":
        """Reassign states by ``values[perm]``; requires the permutation to keep weights."""
        perm = np.asarray(perm)
        if np.max(np.abs(self.atoms.probs[perm] - self.atoms.probs)) > WEIGHT_TOL:
            raise ValueError("permutation must preserve atom weights")
        return InitialCondition(self.atoms, self.values[perm])


def law_of(xi: InitialCondition) -> EmpiricalMeasure:
    """Law of an initial condition with coincident states aggregated."""
    return EmpiricalMeasure(xi.values, xi.atoms.probs).compact()


# ---------------------------------------------------------------------------
# coefficients and rewards
# ---------------------------------------------------------------------------

Drift = Callable[[float, np.ndarray, EmpiricalMeasure, np.ndarray], np.ndarray]
RunningReward = Callable[[float, np.ndarray, EmpiricalMeasure, np.ndarray], np.ndarray]
TerminalReward = Callable[[np.ndarray, EmpiricalMeasure], np.ndarray]


@dataclass(frozen=True)
class Coefficients:
    b: Drift
    sigma: Drift
    sigma0: Drift
    L: float
    M: float
    d: int = 1
    m: int = 1
    n: int = 1
    name: str = "custom"

    def spot_check(self, actions: np.ndarray, rng: np.random.Generator, samples: int = 200,
                   rtol: float = 1e-8) -> float:
        """Largest observed ratio of increments to the declared Lipschitz bound.

        Raises if the declared constants ``L`` or ``M`` are contradicted on the
        sampled inputs.  Returns the worst ratio (at most ``1 + rtol``).
        """
        actions = _as_action_array(actions)
        worst = 0.0
        for _ in range(samples):
            t = float(rng.uniform(0.0, 1.0))
            x, y = rng.normal(size=(2, 1, 1, self.d)) * 2.0
            mu = _random_measure(rng, self.d)
            nu = _random_measure(rng, self.d)
            a = actions[rng.integers(actions.shape[0])][None, None, :]
            lhs = 0.0
            for fn in (self.b, self.sigma, self.sigma0):
                u = np.asarray(fn(t, x[None], mu.expand(), a), dtype=float)
                v = np.asarray(fn(t, y[None], nu.expand(), a), dtype=float)
                if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                    raise ValueError("coefficient returned a non-finite value")
                lhs += float(np.linalg.norm(u - v))
            rhs = self.L * (float(np.linalg.norm(x - y)) + wasserstein2(mu, nu))
            if lhs > rhs * (1.0 + rtol) + 1e-14:
                raise ValueError(f"declared Lipschitz constant {self.L} violated: {lhs} > {rhs}")
            if rhs > 0:
                worst = max(worst, lhs / rhs)
            zero = np.zeros((1, 1, self.d))
            growth = sum(
                float(np.linalg.norm(fn(t, zero, EmpiricalMeasure.dirac(np.zeros(self.d)).expand(), a)))
                for fn in (self.b, self.sigma, self.sigma0)
            )
            if growth > self.M * (1.0 + rtol) + 1e-14:
                raise ValueError(f"declared bound {self.M} violated at the origin: {growth}")
        return worst

    def second_moment_bound(self, grid: TimeGrid, m0: float) -> float:
        """Gronwall-type ceiling for E[max_k |X_k|^2] of the explicit scheme.

        Uses |b|, |sigma|, |sigma0| <= M + L(|x| + W2(mu, delta_0)) and the
        recursion sqrt(m_{k+1}) <= sqrt(m_k) + dt*c_k plus the two diffusion
        contributions, with c_k = M + 2 L sqrt(m_k).  The maximum over steps is
        bounded by the sum of the per-step second moments.
        """
        mk = float(m0)
        total = mk
        for dt in grid.dt:
            c = self.M + 2.0 * self.L * np.sqrt(mk)
            mk = (np.sqrt(mk) + dt * c) ** 2 + 2.0 * dt * c**2
            total += mk
        return float(total)


@dataclass(frozen=True)
class Reward:
    f: RunningReward
    g: TerminalReward
    M: float = float("inf")
    name: str = "custom"

    def spot_check(self, actions: np.ndarray, d: int, rng: np.random.Generator,
                   samples: int = 200) -> float:
        """Worst observed ratio (|f| + |g|) / (M (1 + |x| + second moment^{1/2}))."""
        actions = _as_action_array(actions)
        worst = 0.0
        for _ in range(samples):
            t = float(rng.uniform(0.0, 1.0))
            x = rng.normal(size=(1, 1, d)) * 3.0
            mu = _random_measure(rng, d)
            a = actions[rng.integers(actions.shape[0])][None, None, :]
            lhs = abs(float(np.asarray(self.f(t, x, mu.expand(), a)).ravel()[0]))
            lhs += abs(float(np.asarray(self.g(x, mu.expand())).ravel()[0]))
            scale = 1.0 + float(np.linalg.norm(x)) + float(np.sqrt(mu.second_moment()))
            ratio = lhs / scale
            if np.isfinite(self.M) and ratio > self.M * (1.0 + 1e-8):
                raise ValueError(f"declared growth constant {self.M} violated: ratio {ratio}")
            worst = max(worst, ratio)
        return worst


def _random_measure(rng: np.random.Generator, d: int, max_size: int = 4) -> EmpiricalMeasure:
    k = int(rng.integers(1, max_size + 1))
    w = rng.uniform(0.1, 1.0, size=k)
    return EmpiricalMeasure(rng.normal(size=(k, d)) * 2.0, w / w.sum())


def _as_action_array(actions: Any) -> np.ndarray:
    a = np.asarray(actions, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def _mean(law: EmpiricalMeasure) -> np.ndarray:
    """Law mean broadcast against states of shape (..., n, d)."""
    return law.mean()[..., None, :]


def _mat(v: Any, rows: int, cols: int) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        return a * np.eye(rows, cols)
    return a.reshape(rows, cols)


# ---------------------------------------------------------------------------
# parametric families
# ---------------------------------------------------------------------------

COEFFICIENT_FAMILIES: dict[str, Callable[..., Coefficients]] = {}
REWARD_FAMILIES: dict[str, Callable[..., Reward]] = {}


def register_coefficients(name: str):
    def deco(factory):
        COEFFICIENT_FAMILIES[name] = factory
        return factory
    return deco


def register_reward(name: str):
    def deco(factory):
        REWARD_FAMILIES[name] = factory
        return factory
    return deco


def make_coefficients(name: str, **params) -> Coefficients:
    if name not in COEFFICIENT_FAMILIES:
        raise KeyError(f"unknown coefficient family {name!r}")
    return COEFFICIENT_FAMILIES[name](**params)


def make_reward(name: str, **params) -> Reward:
    if name not in REWARD_FAMILIES:
        raise KeyError(f"unknown reward family {name!r}")
    return REWARD_FAMILIES[name](**params)


@register_coefficients("linear")
def linear_coefficients(bx=0.0, bm=0.0, ba=1.0, b0=0.0, sigma=0.0, sx=0.0, sigma0=0.0,
                        d: int = 1, m: int = 1, n: int = 1, p: int = 1,
                        action_bound: float = 1.0) -> Coefficients:
    """b = bx x + bm E[mu] + ba a + b0;  sigma = S + sx x E;  sigma0 constant.

    Scalars are read as multiples of the identity.  The returned Lipschitz
    constant uses |E_mu - E_nu| <= W2(mu, nu); ``action_bound`` bounds |a| in
    the growth constant.
    """
    Bx, Bm, Ba = _mat(bx, d, d), _mat(bm, d, d), _mat(ba, d, p)
    B0 = np.broadcast_to(np.asarray(b0, dtype=float), (d,)).copy()
    S, S0 = _mat(sigma, d, m), _mat(sigma0, d, n)
    E = np.eye(d, m)
    sx = float(sx)

    def b(t, x, law, a):
        return x @ Bx.T + _mean(law) @ Bm.T + a @ Ba.T + B0

    def sig(t, x, law, a):
        return S + sx * x[..., :, None] * E

    def sig0(t, x, law, a):
        shape = np.broadcast_shapes(x.shape[:-1], a.shape[:-1])
        return np.broadcast_to(S0, shape + S0.shape)

    nrm = lambda A: float(np.linalg.norm(A, 2)) if A.size else 0.0
    L = nrm(Bx) + nrm(Bm) + abs(sx) * nrm(E)
    M = nrm(Ba) * action_bound + float(np.linalg.norm(B0)) + float(np.linalg.norm(S)) \
        + float(np.linalg.norm(S0))
    return Coefficients(b, sig, sig0, L=max(L, 1e-300), M=max(M, 1e-300), d=d, m=m, n=n,
                        name="linear")


@register_coefficients("intro")
def intro_coefficients() -> Coefficients:
    """dX = (a + E[X]) dt without noise, one-dimensional."""
    zero = np.zeros((1, 1))

    def b(t, x, law, a):
        return a + _mean(law)

    def sig(t, x, law, a):
        shape = np.broadcast_shapes(x.shape[:-1], a.shape[:-1])
        return np.broadcast_to(zero, shape + (1, 1))

    return Coefficients(b, sig, sig, L=1.0, M=1.0, d=1, m=1, n=1, name="intro")


@register_reward("tracking")
def tracking_reward(cx=0.0, cm=0.0, ca=0.0, gx=1.0, gm=0.0, target=0.0,
                    action_bound: float = 1.0) -> Reward:
    """f = -cx|x - target| - cm|x - E mu| - ca|a|,  g = -gx|x - target| - gm|x - E mu|."""
    tgt = np.asarray(target, dtype=float)

    def f(t, x, law, a):
        return -(cx * np.linalg.norm(x - tgt, axis=-1)
                 + cm * np.linalg.norm(x - _mean(law), axis=-1)
                 + ca * np.linalg.norm(a, axis=-1))

    def g(x, law):
        return -(gx * np.linalg.norm(x - tgt, axis=-1) + gm * np.linalg.norm(x - _mean(law), axis=-1))

    tn = float(np.linalg.norm(tgt))
    M = (abs(cx) + abs(gx)) * max(1.0, tn) + 2 * (abs(cm) + abs(gm)) + abs(ca) * action_bound
    return Reward(f, g, M=max(M, 1e-300), name="tracking")


@register_reward("lq")
def lq_reward(qx=0.0, qm=0.0, r=0.0, gx=1.0, gm=0.0, target=0.0) -> Reward:
    """Quadratic running and terminal penalties; not of linear growth (M = inf)."""
    tgt = np.asarray(target, dtype=float)

    def f(t, x, law, a):
        return -(qx * ((x - tgt) ** 2).sum(-1) + qm * ((x - _mean(law)) ** 2).sum(-1)
                 + r * (a**2).sum(-1))

    def g(x, law):
        return -(gx * ((x - tgt) ** 2).sum(-1) + gm * ((x - _mean(law)) ** 2).sum(-1))

    return Reward(f, g, M=float("inf"), name="lq")


def negative_part(y: np.ndarray, convention: str) -> np.ndarray:
    """(y)_- under the two readings: ``"min"`` gives min(y, 0), ``"max"`` gives max(-y, 0)."""
    if convention == "min":
        return np.minimum(y, 0.0)
    if convention == "max":
        return np.maximum(-y, 0.0)
    raise ValueError(f"unknown negative-part convention {convention!r}")


@register_reward("intro")
def intro_reward(convention: str = "min") -> Reward:
    """No running reward; g(x) = (x - 1)_+ + (x - 5/2)_-."""
    negative_part(np.zeros(1), convention)

    def f(t, x, law, a):
        return np.zeros(np.broadcast_shapes(x.shape[:-1], a.shape[:-1]))

    def g(x, law):
        y = x[..., 0]
        return np.maximum(y - 1.0, 0.0) + negative_part(y - 2.5, convention)

    return Reward(f, g, M=3.5, name=f"intro-{convention}")
