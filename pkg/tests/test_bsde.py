import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfcrand.bsde import (bellman_limit, is_supersolution, martingale_residual, penalised_fixed_point,
                          penalty_residual, representation_check, solve_constrained_limit,
                          solve_penalised, supersolution_from_bumps, tilted_values, bang_bang_tables,
                          export_csv)
from mfcrand.controls import default_lambda_family
from mfcrand.dynamics import expand_mark_tree
from mfcrand.model import make_reward

LEVELS = [2.0**j for j in range(9)]


@pytest.fixture(scope="module")
def setup(small):
    lam = default_lambda_family(small.tree, small.actions.size)
    mt = expand_mark_tree(small.tree, small.coeffs, small.reward, small.xi.values, small.actions)
    return mt, lam


def test_scalar_fixed_point_by_hand():
    # Yhat = 0, one alternative with value 1 and weight c: Y = c / (1 + c)
    for c, want in ((1.0, 0.5), (10.0, 10 / 11), (100.0, 100 / 101)):
        y = penalised_fixed_point(np.array([0.0]), np.array([[0.0, 1.0]]), np.array([0.0, c]))
        assert y[0] == pytest.approx(want, abs=1e-15)


@settings(max_examples=60)
@given(st.integers(0, 2**16), st.integers(1, 6))
def test_fixed_point_solves_equation_and_is_monotone(seed, A):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(4, A))
    yh = g[:, 0]
    c = rng.uniform(0, 3, size=A)
    y = penalised_fixed_point(yh, g, c)
    resid = y - yh - np.maximum(g - y[:, None], 0.0) @ c
    assert np.max(np.abs(resid)) < 1e-12
    y2 = penalised_fixed_point(yh, g, 2 * c)
    assert np.all(y2 >= y - 1e-14)
    assert np.all(y <= np.maximum(yh, g.max(axis=1)) + 1e-14)


def test_zero_reward_gives_zero_solution(small):
    zero = make_reward("tracking", gx=0.0)
    lam = default_lambda_family(small.tree, small.actions.size)
    mt = expand_mark_tree(small.tree, small.coeffs, zero, small.xi.values, small.actions)
    lim = solve_constrained_limit(mt, lam, LEVELS)
    assert all(np.all(y == 0) for y in lim.Y)
    assert all(np.all(k == 0) for k in lim.K)


def test_monotone_in_level_and_below_limit(setup):
    mt, lam = setup
    lim = solve_constrained_limit(mt, lam, LEVELS)
    sweep = lim.info["sweep"]
    for lo, hi in zip(sweep, sweep[1:]):
        assert all(np.all(h >= l - 1e-12) for l, h in zip(lo.Y, hi.Y))
    assert all(np.all(lim.Y[k] >= sweep[-1].Y[k] - 1e-12) for k in range(mt.M + 1))
    gaps = lim.info["gap"]
    assert all(b <= a + 1e-15 for a, b in zip(gaps, gaps[1:]))


def test_limit_constraint_and_residuals(setup):
    mt, lam = setup
    sol = solve_penalised(64.0, mt, lam)
    assert martingale_residual(sol, mt) < 1e-12
    assert penalty_residual(sol, mt, lam) < 1e-12
    lim = bellman_limit(mt, lam)
    assert martingale_residual(lim, mt) < 1e-12
    assert max(float(np.max(u)) for u in lim.U) <= 1e-9


def test_huge_levels_approach_limit(setup):
    mt, lam = setup
    lim = bellman_limit(mt, lam)
    top = solve_penalised(1e13, mt, lam)
    assert abs(top.y0 - lim.y0) < 1e-6


def test_minimality_against_bumped_supersolutions(setup):
    mt, lam = setup
    lim = bellman_limit(mt, lam)
    rng = np.random.default_rng(0)
    for _ in range(5):
        bumps = [rng.uniform(0, 0.3, size=mt.n_nodes(k)) for k in range(mt.M + 1)]
        sup = supersolution_from_bumps(mt, lam, bumps)
        assert is_supersolution(sup, mt, lam)
        assert all(np.all(s >= y - 1e-12) for s, y in zip(sup, lim.Y))


def test_representation_grid(setup):
    mt, lam = setup
    n = 1e3
    sol = solve_penalised(n, mt, lam)
    grid = [[np.ones((mt.n_nodes(k), mt.spaces[k].size)) for k in range(mt.M)]]
    grid += [bang_bang_tables(sol, n, 10.0**-j) for j in range(1, 7)]
    rep = representation_check(sol, mt, lam, grid)
    assert rep["ok"]
    vals = rep["root_values"][1:]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
    assert rep["gap_to_Y"] < 1e-5


def test_tilted_value_with_unit_intensity_below_penalised(setup):
    mt, lam = setup
    J = tilted_values(mt, lam, 1.0)
    sol = solve_penalised(1.0, mt, lam)
    assert all(np.all(j <= y + 1e-12) for j, y in zip(J, sol.Y))


def test_csv_export_columns(setup):
    mt, lam = setup
    text = export_csv([solve_penalised(2.0, mt, lam), bellman_limit(mt, lam)])
    lines = text.splitlines()
    assert lines[0] == "n,step,node,mark,Y,K,maxU+"
    assert any(line.startswith("inf,") for line in lines)
    assert all(len(line.split(",")) == 7 for line in lines)


def test_level_order_is_validated(setup):
    mt, lam = setup
    with pytest.raises(ValueError):
        solve_constrained_limit(mt, lam, [2.0, 1.0])
    assert math.isinf(bellman_limit(mt, lam).n)
