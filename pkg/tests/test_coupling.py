import time

import numpy as np
import pytest

from mastrack.coupling import BETA_SAFETY, CouplingWeights, beta_bound, coupling_gains, weight_chain
from mastrack.errors import NoSpanningTreeError
from mastrack.graph import build_topology, random_spanning_tree_topology
from mastrack.scenarios import EXAMPLE_PARAMETERS


def _weights_with_lambda(lam):
    n = lam.shape[0]
    I = np.eye(n)
    return CouplingWeights(gamma=I, xi=I, pi=I, phi=lam, lam=lam)


def test_identity_pinned_gives_identity_gamma():
    top = build_topology(np.zeros((3, 3)), np.ones(3))
    np.testing.assert_array_equal(coupling_gains(top), np.eye(3))


def test_two_agent_gamma():
    top = build_topology([[0, 0], [1, 0]], [1, 0])
    np.testing.assert_allclose(coupling_gains(top), [[1, 0], [1, 1]], atol=1e-15)


def test_no_tree_raises():
    top = build_topology([[0, 0], [0, 0]], [1, 0])
    with pytest.raises(NoSpanningTreeError):
        coupling_gains(top)


def test_identity_weight_chain():
    top = build_topology(np.zeros((2, 2)), np.ones(2))
    w = weight_chain(top, coupling_gains(top))
    np.testing.assert_allclose(w.xi, np.eye(2))
    np.testing.assert_allclose(w.lam, 2 * np.eye(2), atol=1e-12)
    np.testing.assert_allclose(w.phi, 2 * w.pi_xi, atol=1e-12)


def test_beta_bound_examples():
    assert beta_bound([_weights_with_lambda(2 * np.eye(2))]) == pytest.approx(1.98)
    two = [_weights_with_lambda(2 * np.eye(2)), _weights_with_lambda(np.diag([0.5, 3.0]))]
    assert beta_bound(two) == pytest.approx(0.495)


def test_example_beta_admissible(weights):
    assert beta_bound(list(weights.values())) >= EXAMPLE_PARAMETERS["beta"]


def test_random_spanning_trees(rng):
    for _ in range(100):
        n = int(rng.integers(1, 9))
        top = random_spanning_tree_topology(n, rng)
        gamma = coupling_gains(top)
        assert np.abs(top.pinned @ gamma - np.eye(n)).max() <= 1e-10
        w = weight_chain(top, gamma)
        lhat = top.pinned @ gamma
        s = w.pi_xi @ lhat + lhat.T @ w.pi_xi
        assert np.linalg.eigvalsh(s)[0] > 0
        assert np.abs(w.lam - w.lam.T).max() <= 1e-12
        assert w.lambda_min >= w.beta / BETA_SAFETY - 1e-9
        # certificate of the pinned matrix itself
        cert = w.xi @ top.pinned + top.pinned.T @ w.xi
        assert np.linalg.eigvalsh(cert)[0] > 0


def test_weight_chain_deterministic(rng):
    top = random_spanning_tree_topology(6, rng)
    a = weight_chain(top, coupling_gains(top))
    b = weight_chain(top, coupling_gains(top))
    for name in ("gamma", "xi", "pi", "phi", "lam"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_gamma_is_fast():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    for _ in range(200):
        top = random_spanning_tree_topology(8, rng)
        weight_chain(top, coupling_gains(top))
    assert time.perf_counter() - start < 20
