import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfcrand.scenario import AtomSpace, NoiseLattice, TimeGrid, build_tree


def _tree(M=3, g=2):
    return build_tree(TimeGrid.uniform(1.0, M), NoiseLattice.binary(), NoiseLattice.binary(),
                      AtomSpace.uniform(g))


def test_grid_rejects_non_increasing_times():
    with pytest.raises(ValueError):
        TimeGrid((0.0, 0.5, 0.5, 1.0))


def test_lattice_moment_checks():
    with pytest.raises(ValueError):
        NoiseLattice(np.array([[0.0], [2.0]]), np.array([0.5, 0.5]))
    tri = NoiseLattice.trinomial()
    assert tri.branching == 3
    assert np.isclose(tri.probs @ tri.points[:, 0] ** 2, 1.0)


@given(st.integers(1, 4), st.integers(1, 3))
def test_weights_and_probabilities_sum_to_one(M, g):
    tree = _tree(M, g)
    for k in range(M + 1):
        assert np.isclose(tree.atom_weights(k).sum(), 1.0)
        assert np.isclose(tree.node_probs(k).sum(), 1.0)
        assert tree.n_atoms(k) == g * 2**k and tree.n_nodes(k) == 2**k


def test_cond_expect_against_hand_enumeration():
    tree = _tree(2, 1)
    payoff = np.arange(tree.n_atoms(2), dtype=float)
    assert tree.cond_expect((2, 0), payoff) == pytest.approx(payoff.mean())
    with pytest.raises(KeyError):
        tree.cond_expect((2, 7), payoff)
    with pytest.raises(KeyError):
        tree.cond_expect((2, 0), payoff[:2])


@settings(max_examples=25)
@given(st.integers(0, 2**16))
def test_project_matches_loop(seed):
    tree = _tree(2, 2)
    rng = np.random.default_rng(seed)
    nxt = rng.normal(size=(tree.n_nodes(2), tree.n_atoms(2)))
    got = tree.project(1, nxt)
    want = np.zeros((tree.n_nodes(1), tree.n_atoms(1)))
    for b in range(tree.n_nodes(1)):
        for a in range(tree.n_atoms(1)):
            for j in range(2):
                for w in range(2):
                    want[b, a] += 0.25 * nxt[b * 2 + j, a * 2 + w]
    np.testing.assert_allclose(got, want, atol=1e-14)


def test_subtree_keeps_absolute_time_and_atoms():
    tree = _tree(3, 2)
    sub = tree.subtree(1)
    assert sub.M == 2
    assert sub.t_offset == pytest.approx(tree.time(1))
    assert sub.n_atoms(0) == tree.n_atoms(1)
    np.testing.assert_allclose(sub.atom_weights(1), tree.atom_weights(2))


def test_labels_and_paths_round_trip():
    tree = _tree(3, 2)
    for idx in range(tree.n_nodes(3)):
        assert tree.node_index(tree.node_path(3, idx)) == idx
    assert len(set(tree.atom_labels(2))) == tree.n_atoms(2)
