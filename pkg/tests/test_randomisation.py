import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfcrand.controls import DecomposedAction, default_lambda_family, random_decomposed_control
from mfcrand.dynamics import stream
from mfcrand.randomisation import (MarkedPointProcess, approximate_control_by_ppp, cell_index,
                                   constant_intensity, count_intensity, expected_weight_exact,
                                   folded_indices, girsanov_weight, girsanov_weights,
                                   mark_parity_intensity, per_step_intensity, sample_ppp,
                                   sample_ppp_batch, step_control)


def test_cell_index_uses_right_closed_cells(small):
    tree = small.tree
    assert cell_index(tree, 0.5) == 0
    assert cell_index(tree, 0.5 + 1e-9) == 1
    assert cell_index(tree, 1.0) == 1
    with pytest.raises(ValueError):
        cell_index(tree, 0.0)


def test_mpp_validation_and_json_round_trip(small):
    tree = small.tree
    a1 = DecomposedAction(1, [1, 0, 0, 1])
    mpp = MarkedPointProcess(0.0, 1.0, [0.7], [a1])
    mpp.validate(tree)
    assert MarkedPointProcess.from_json(mpp.to_json()) == mpp
    with pytest.raises(ValueError, match="measurable"):
        MarkedPointProcess(0.0, 1.0, [0.2], [a1]).validate(tree)
    with pytest.raises(ValueError):
        MarkedPointProcess(0.0, 1.0, [0.5, 0.5], [a1, a1])


def test_step_control_hand_example(small):
    tree = small.tree
    alpha = DecomposedAction(0, [0, 0])
    mark = DecomposedAction(0, [1, 0])
    mpp = MarkedPointProcess(0.0, 1.0, [0.3], [mark])
    end = step_control(alpha, mpp, tree, "end")
    left = step_control(alpha, mpp, tree, "left")
    np.testing.assert_array_equal(end.maps[0][0], [1, 0])
    np.testing.assert_array_equal(left.maps[0][0], [0, 0])
    np.testing.assert_array_equal(left.maps[1][0], [1, 1, 0, 0])


def test_batch_counts_have_poisson_moments(small):
    tree = small.tree
    lam = default_lambda_family(tree, 2, mass=2.0)
    batch = sample_ppp_batch(lam, tree, 40_000, stream(1, 0))
    counts = np.bincount(batch.rep, minlength=batch.n_reps)
    mean = sum(lam.total_mass(k) * tree.dt(k) for k in range(tree.M))
    assert abs(counts.mean() - mean) < 4 * math.sqrt(mean / batch.n_reps)
    assert abs(counts.var() - mean) < 0.05 * mean


def test_thinning_sampler_matches_batch_mean(small):
    tree = small.tree
    lam = default_lambda_family(tree, 2, mass=2.0)
    rng = stream(2, 0)
    n = [len(sample_ppp(lam, tree, rng)) for _ in range(4000)]
    mean = sum(lam.total_mass(k) * tree.dt(k) for k in range(tree.M))
    assert abs(np.mean(n) - mean) < 4 * math.sqrt(mean / 4000)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**16), st.sampled_from(["constant", "per_step", "parity", "count"]))
def test_scalar_and_vector_weights_agree(small, seed, kind):
    tree = small.tree
    lam = default_lambda_family(tree, 2, mass=1.5)
    nu = {"constant": constant_intensity(2.0), "per_step": per_step_intensity([0.5, 3.0]),
          "parity": mark_parity_intensity(0.3, 4.0), "count": count_intensity(2.0, 0.5)}[kind]
    batch = sample_ppp_batch(lam, tree, 20, stream(seed, 1))
    vec = girsanov_weights(nu, batch, lam, tree)
    for r in range(batch.n_reps):
        one = girsanov_weight(nu, batch.process(r, tree, lam), lam, tree, batch.b_path(r, tree.nb))
        assert one == pytest.approx(vec[r], rel=1e-12)


def test_constant_weight_closed_form(small):
    tree = small.tree
    lam = default_lambda_family(tree, 2)
    a = lam.spaces[0].element(1)
    mpp = MarkedPointProcess(0.0, 1.0, [0.25], [a])
    mass = sum(lam.total_mass(k) * tree.dt(k) for k in range(tree.M))
    got = girsanov_weight(constant_intensity(3.0), mpp, lam, tree, (0, 0))
    assert got == pytest.approx(3.0 * math.exp(-2.0 * mass))


@pytest.mark.parametrize("nu", [constant_intensity(0.1), per_step_intensity([10.0, 0.1]),
                                mark_parity_intensity(0.1, 10.0), count_intensity(10.0, 0.1)])
def test_exact_expectation_is_one(small, nu):
    lam = default_lambda_family(small.tree, 2, mass=0.5)
    assert expected_weight_exact(nu, lam, small.tree) == pytest.approx(1.0, abs=1e-10)


def test_folded_indices_follow_last_event(small):
    tree = small.tree
    lam = default_lambda_family(tree, 2, mass=3.0)
    batch = sample_ppp_batch(lam, tree, 50, stream(5, 0))
    fold = folded_indices(1, batch, tree, lam)
    for r in range(batch.n_reps):
        ctrl = step_control(lam.spaces[0].element(1), batch.process(r, tree, lam), tree, "end")
        for k in range(tree.M):
            assert lam.spaces[k].index(ctrl.maps[k][0]) == fold[r, k]


def test_approximation_reports_reachable_delta(small):
    tree, acts = small.tree, small.actions
    lam = default_lambda_family(tree, acts.size)
    c = random_decomposed_control(tree, acts.size, np.random.default_rng(0))
    with pytest.raises(ValueError, match="smallest reachable delta"):
        approximate_control_by_ppp(c, 0.1, lam, tree, acts, nbar=10.0)
    ap = approximate_control_by_ppp(c, 0.2, lam, tree, acts)
    mean, se = ap.estimate(2000, stream(0, 9))
    assert mean + 3 * se < 0.2
