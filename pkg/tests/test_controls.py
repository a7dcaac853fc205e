import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfcrand.controls import (ActionSet, DecomposedAction, DecomposedControl, FlatControl,
                              control_distance, default_lambda_family, enumerate_action_space,
                              identify_decomposed_to_flat, identify_flat_to_decomposed, lift_index,
                              random_decomposed_control, random_lambda_family, rho_hat,
                              rho_hat_matrix)
from mfcrand.scenario import AtomSpace, BudgetExceeded, NoiseLattice, TimeGrid, build_tree


@pytest.fixture(scope="module")
def tree():
    return build_tree(TimeGrid.uniform(1.0, 3), NoiseLattice.binary(), NoiseLattice.binary(),
                      AtomSpace.uniform(2))


def test_action_set_metric_validation():
    acts = ActionSet.bounded([-1.0, 0.0, 1.0])
    assert acts.rho.max() < 1.0
    with pytest.raises(ValueError):
        ActionSet(np.array([0.0, 1.0]), np.array([[0.0, 1.5], [1.5, 0.0]]))
    with pytest.raises(ValueError):
        ActionSet(np.array([0.0, 1.0]), np.array([[0.0, 0.0], [0.0, 0.0]]))


def test_enumeration_is_lexicographic_and_capped(tree):
    sp = enumerate_action_space(tree, 1, 2)
    assert sp.size == 2**4
    np.testing.assert_array_equal(sp.index(sp.table), np.arange(sp.size))
    with pytest.raises(BudgetExceeded):
        enumerate_action_space(tree, 3, 3)


def test_lift_preserves_the_random_variable(tree):
    s1, s2 = enumerate_action_space(tree, 1, 2), enumerate_action_space(tree, 2, 2)
    idx = lift_index(tree, s1, s2)
    for i in range(s1.size):
        lifted = s1.element(i).lift(tree, 2)
        assert s2.element(int(idx[i])) == lifted
        assert lifted.measurable_at(tree, 1)
        assert lifted.restrict(tree, 1) == s1.element(i)


def test_rho_hat_hand_value():
    acts = ActionSet.discrete([0.0, 1.0], c=0.5)
    a, b = DecomposedAction(0, [0, 1]), DecomposedAction(0, [1, 1])
    assert rho_hat(a, b, np.array([0.25, 0.75]), acts) == pytest.approx(0.125)
    with pytest.raises(ValueError, match="time index"):
        rho_hat(a, DecomposedAction(1, [0, 1]), np.array([0.5, 0.5]), acts)


def test_rho_hat_matrix_is_a_metric(tree):
    acts = ActionSet.bounded([-1.0, 1.0])
    sp = enumerate_action_space(tree, 1, 2)
    m = rho_hat_matrix(sp, tree.atom_weights(1), acts)
    np.testing.assert_allclose(m, m.T)
    assert np.all(np.diag(m) == 0)
    assert np.all(m[:, :, None] <= m[:, None, :].transpose(0, 2, 1) + m[None, :, :] + 1e-15)


@settings(max_examples=30)
@given(st.integers(0, 2**16))
def test_identification_round_trip_and_isometry(tree, seed):
    rng = np.random.default_rng(seed)
    acts = ActionSet.bounded([-1.0, 0.5, 1.0])
    a, b = (random_decomposed_control(tree, 3, rng) for _ in range(2))
    fa, fb = identify_decomposed_to_flat(a, tree), identify_decomposed_to_flat(b, tree)
    back = identify_flat_to_decomposed(fa, tree)
    assert all(np.array_equal(x, y) for x, y in zip(back.maps, a.maps))
    assert control_distance(fa, fb, tree, acts) == pytest.approx(
        control_distance(a, b, tree, acts), abs=1e-12)


def test_non_predictable_flat_control_rejected(tree):
    c = identify_decomposed_to_flat(DecomposedControl.constant(tree, 0), tree)
    vals = [v.copy() for v in c.values]
    vals[0][-1, -1] = 1
    with pytest.raises(ValueError, match="not predictable"):
        identify_flat_to_decomposed(FlatControl(tuple(vals)), tree)


@pytest.mark.parametrize("maker", ["default", "random"])
def test_lambda_family_full_support_and_nesting(tree, maker):
    lam = (default_lambda_family(tree, 2) if maker == "default"
           else random_lambda_family(tree, 2, np.random.default_rng(3)))
    lam.check(tree)
    masses = [lam.total_mass(k) for k in range(tree.M)]
    assert all(m > 0 and np.isfinite(m) for m in masses)
    assert lam.max_total_mass() <= 1.0 + 1e-12


def test_lambda_weights_follow_enumeration(tree):
    lam = default_lambda_family(tree, 2, mass=1.0)
    # kappa_k enters with weight 2^-(k+1); everything enumerated by step k lifts into step k
    expected = [sum(2.0 ** -(j + 1) for j in range(k + 1)) for k in range(tree.M)]
    np.testing.assert_allclose([lam.total_mass(k) for k in range(tree.M)], expected)
