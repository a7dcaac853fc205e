import numpy as np
import pytest

from mfcrand.controls import ActionSet, default_lambda_family, random_lambda_family
from mfcrand.instances import build_instance
from mfcrand.model import InitialCondition, make_coefficients, make_reward
from mfcrand.scenario import AtomSpace, NoiseLattice, TimeGrid, build_tree
from mfcrand.value import (continuity_check, dpp_check, interior_consistency, law_invariance_check,
                           mc_tree_consistency, restriction_check, value_direct, value_randomised_bsde,
                           value_randomised_mc, value_report)
from mfcrand.randomisation import constant_intensity, per_step_intensity
from mfcrand.controls import DecomposedControl

LEVELS = [2.0**j for j in range(9)]


def _one_step(g_reward, acts):
    tree = build_tree(TimeGrid.uniform(1.0, 1), NoiseLattice.binary(), NoiseLattice.binary(),
                      AtomSpace.uniform(2))
    return tree, make_coefficients("linear", ba=1.0), g_reward, ActionSet.bounded(acts)


def test_constant_terminal_reward():
    tree, co, _, acts = _one_step(None, [0.0, 1.0])
    rw = make_reward("lq", gx=0.0)
    xi = InitialCondition(AtomSpace.uniform(2), np.array([0.0, 0.0]))
    assert value_direct(tree, co, rw, xi, acts) == 0.0


def test_linear_terminal_reward_picks_the_larger_action():
    tree, co, _, acts = _one_step(None, [0.0, 1.0])
    # g(x) = -|x - 10| is increasing on the reachable states
    rw = make_reward("tracking", gx=1.0, target=10.0)
    xi = InitialCondition(AtomSpace.uniform(2), np.array([0.0, 0.0]))
    assert value_direct(tree, co, rw, xi, acts) == pytest.approx(-9.0)


def test_two_atom_spread_enumeration():
    # g = -(x - E mu)^2, b = a in {-1, 1}; by hand the four maps give -1, -4, 0, -1
    tree, co, _, acts = _one_step(None, [-1.0, 1.0])
    rw = make_reward("lq", gx=0.0, gm=1.0)
    xi = InitialCondition(AtomSpace.uniform(2), np.array([-1.0, 1.0]))
    assert value_direct(tree, co, rw, xi, acts) == pytest.approx(0.0, abs=1e-14)
    lam = default_lambda_family(tree, 2)
    for a in range(4):
        assert value_randomised_bsde(tree, co, rw, xi, acts, a, lam, LEVELS) == pytest.approx(0.0, abs=1e-8)


def test_zero_reward_randomised():
    tree, co, _, acts = _one_step(None, [-1.0, 1.0])
    rw = make_reward("tracking", gx=0.0)
    xi = InitialCondition(AtomSpace.uniform(2), np.array([-1.0, 1.0]))
    lam = default_lambda_family(tree, 2)
    assert value_randomised_bsde(tree, co, rw, xi, acts, 0, lam, LEVELS) == 0.0


def test_equivalence_and_family_independence(small):
    args = (small.tree, small.coeffs, small.reward, small.xi, small.actions)
    vd = value_direct(*args)
    lam1 = default_lambda_family(small.tree, 2)
    lam2 = random_lambda_family(small.tree, 2, np.random.default_rng(1))
    for lam in (lam1, lam2):
        for a in range(lam.spaces[0].size):
            assert value_randomised_bsde(*args, a, lam, LEVELS) == pytest.approx(vd, abs=1e-8)


def test_dpp_endpoints_and_interior(small):
    args = (small.tree, small.coeffs, small.reward, small.xi, small.actions)
    assert dpp_check(*args, 0)["residual"] <= 1e-12
    assert dpp_check(*args, small.tree.M)["residual"] <= 1e-8
    assert dpp_check(*args, 1)["residual"] <= 1e-6
    with pytest.raises(ValueError):
        dpp_check(*args, 5)


def test_law_invariance_examples(small):
    args = (small.tree, small.coeffs, small.reward)
    xi = small.xi
    assert law_invariance_check(*args, xi, xi.permuted([1, 0]), small.actions) <= 1e-10
    other = InitialCondition(xi.atoms, np.array([0.0, 0.5]))
    with pytest.raises(ValueError):
        law_invariance_check(*args, xi, other, small.actions)


def test_merged_atoms_without_mixing_benefit():
    # identical states on two atoms against one atom carrying all the weight
    kw = dict(coeffs={"family": "linear", "bx": -0.3, "ba": 1.0, "sigma": 0.2, "sigma0": 0.1},
              reward={"family": "tracking", "gx": 1.0, "target": 0.3})
    two = build_instance("two", 2, 1.0, [-1.0, 1.0], xi_values=[0.4, 0.4], **kw)
    one = build_instance("one", 2, 1.0, [-1.0, 1.0], xi_values=[0.4], **kw)
    r = law_invariance_check(two.tree, two.coeffs, two.reward, two.xi, one.xi, two.actions, one.tree)
    assert r <= 1e-10


def test_restriction_interior(small):
    args = (small.tree, small.coeffs, small.reward, small.xi, small.actions)
    for s in (0, 1):
        assert restriction_check(*args, s)["residual"] <= 1e-8


def test_interior_consistency_and_continuity(small):
    args = (small.tree, small.coeffs, small.reward, small.xi, small.actions)
    assert interior_consistency(*args, 1) <= 1e-10
    c = continuity_check(*args)
    assert c["max_ratio"] < 10.0


def test_mc_is_lower_bound_and_family_enlargement(small):
    args = (small.tree, small.coeffs, small.reward, small.xi, small.actions)
    lam = default_lambda_family(small.tree, 2)
    vd = value_direct(*args)
    base = value_randomised_mc(*args, 0, lam, [constant_intensity(1.0)], 1, 100, 100, seed=3)
    big = value_randomised_mc(*args, 0, lam, [constant_intensity(1.0), per_step_intensity([4.0, 0.5])],
                              2, 100, 100, seed=3)
    assert base["estimate"] <= vd + 3 * base["se"]
    assert big["estimate"] >= base["estimate"]
    with pytest.raises(ValueError):
        value_randomised_mc(*args, 0, lam, [constant_intensity(1.0)], 0, 10, 10, seed=3)


def test_mc_consistency_thread_independent(small):
    args = (small.tree, small.coeffs, small.reward, small.xi, small.actions)
    c = DecomposedControl.constant(small.tree, 1)
    a = mc_tree_consistency(*args, c, 500, 30, seed=8, threads=1)
    b = mc_tree_consistency(*args, c, 500, 30, seed=8, threads=3)
    assert a == b


def test_report_hides_timings(small):
    rep = value_report(small.tree, small.coeffs, small.reward, small.xi, small.actions,
                       small.describe())
    assert "timings" not in rep.to_json()
    assert abs(rep.v_direct - rep.v_bsde["limit"]) <= 1e-8
