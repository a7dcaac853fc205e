import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linear_sum_assignment

from mfcrand.model import (EmpiricalMeasure, InitialCondition, law_of, make_coefficients, make_reward,
                           negative_part, wasserstein2)
from mfcrand.scenario import AtomSpace


def _assignment_w2(x, y):
    """Oracle: equal-weight supports of equal size, optimal assignment."""
    cost = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    r, c = linear_sum_assignment(cost)
    return np.sqrt(cost[r, c].mean())


@settings(max_examples=40)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(0, 2**16))
def test_w2_matches_assignment_oracle(d, n, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    w = np.full(n, 1.0 / n)
    got = wasserstein2(EmpiricalMeasure(x, w), EmpiricalMeasure(y, w))
    assert got == pytest.approx(_assignment_w2(x, y), abs=1e-7)


@settings(max_examples=30)
@given(st.integers(0, 2**16))
def test_w2_metric_properties(seed):
    rng = np.random.default_rng(seed)
    ms = [EmpiricalMeasure(rng.normal(size=(3, 1)), rng.dirichlet(np.ones(3))) for _ in range(3)]
    a, b, c = ms
    assert wasserstein2(a, a) == pytest.approx(0.0, abs=1e-12)
    assert wasserstein2(a, b) == pytest.approx(wasserstein2(b, a), abs=1e-12)
    assert wasserstein2(a, c) <= wasserstein2(a, b) + wasserstein2(b, c) + 1e-12


def test_w2_lp_cap():
    big = EmpiricalMeasure(np.zeros((65, 2)), np.full(65, 1 / 65))
    with pytest.raises(ValueError, match="cap"):
        wasserstein2(big, big)


def test_dirac_distance_is_euclidean():
    assert wasserstein2(EmpiricalMeasure.dirac([0.0, 0.0]),
                        EmpiricalMeasure.dirac([3.0, 4.0])) == pytest.approx(5.0)


def test_compact_merges_coincident_points():
    m = EmpiricalMeasure(np.array([[1.0], [1.0], [2.0]]), np.array([0.25, 0.25, 0.5])).compact()
    assert m.size == 2
    np.testing.assert_allclose(m.weights, [0.5, 0.5])


def test_law_of_initial_condition():
    xi = InitialCondition(AtomSpace.uniform(2), np.array([0.3, 0.3]))
    assert law_of(xi).size == 1
    with pytest.raises(ValueError):
        InitialCondition(AtomSpace.uniform(2), np.array([0.3]))


def test_negative_part_conventions():
    x = np.array([-2.0, 3.0])
    np.testing.assert_allclose(negative_part(x, "min"), [-2.0, 0.0])
    np.testing.assert_allclose(negative_part(x, "max"), [2.0, 0.0])


def test_linear_coefficients_and_tracking_reward():
    co = make_coefficients("linear", bx=-0.5, bm=0.3, ba=1.0, b0=0.1, sigma=0.2, sigma0=0.1)
    law = EmpiricalMeasure(np.array([[1.0], [3.0]]), np.array([0.5, 0.5]))
    x = np.array([[1.0]])
    drift = co.b(0.0, x, law, np.array([[2.0]]))
    assert float(np.ravel(drift)[0]) == pytest.approx(-0.5 + 0.3 * 2.0 + 2.0 + 0.1)
    rw = make_reward("tracking", cx=1.0, gx=1.0, target=0.0)
    assert np.all(np.asarray(rw.g(x, law)) <= 0.0)
    with pytest.raises(KeyError):
        make_coefficients("no-such-family")
