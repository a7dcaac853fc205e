import math

import numpy as np
import pytest

from mfcrand.intro import (CLAIMED, _linear_parts, euler_terminal, intro_example, switch_family,
                           terminal_reward)


def test_family_size_and_shape():
    fam = switch_family(100)
    assert fam.shape == (404, 100)
    assert set(np.unique(fam)) == {-1.0, 1.0}


def test_linear_decomposition_matches_euler():
    M = 120
    fam = switch_family(M)
    own, mean_part = _linear_parts(fam, M)
    rng = np.random.default_rng(0)
    for _ in range(20):
        i, j = rng.integers(len(fam), size=2)
        x = euler_terminal(np.array([-1.0, 1.0]), np.stack([fam[i], fam[j]]), M)
        shared = 0.5 * (mean_part[i] + mean_part[j])
        np.testing.assert_allclose(x, [-1.0 + own[i] + shared, 1.0 + own[j] + shared], atol=1e-12)


def test_terminal_reward_conventions():
    x = np.array([0.0, 2.0, 3.0])
    np.testing.assert_allclose(terminal_reward(x, "min"), [-2.5, 0.5, 2.0])
    np.testing.assert_allclose(terminal_reward(x, "max"), [2.5, 1.5, 2.0])


@pytest.mark.parametrize("conv", ["min", "max"])
def test_report_is_internally_consistent(conv):
    rep = intro_example(200, conv)
    assert rep.euler_check <= 1e-9
    for vm, vp in rep.decoupled.values():
        assert 0.5 * (vm + vp) <= rep.V + 1e-12
    assert rep.to_json()["claimed"]["V"] == pytest.approx(0.5 * (math.e - 1))


def test_claimed_values_are_reported_not_asserted():
    assert CLAIMED["V_minus"] == pytest.approx(math.e - 2.5)
    rep = intro_example(200, "min")
    assert abs(rep.V - CLAIMED["V"]) > 0.1


def test_small_grids_rejected():
    with pytest.raises(ValueError):
        intro_example(50)
