import json

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from spreadmpc.errors import DomainError
from spreadmpc.network import (RateState, SpreadingNetwork, admissibility_margins,
                               bound_matrices, build_system_matrix, check_assumption1,
                               check_rates, rate_bound_violation, spectral_radius,
                               stability_certificate)

from conftest import random_network, scalar_network, two_node_network


def test_scalar_system_matrix():
    A = build_system_matrix(scalar_network(), RateState([], [0.5]))
    assert A.toarray().tolist() == [[0.5]]


def test_two_node_system_matrix(two_node_net):
    A = build_system_matrix(two_node_net, two_node_net.unmodified_rates())
    np.testing.assert_array_equal(A.toarray(), [[0.5, 0.0], [0.4, 0.5]])


def test_smaller_step_rescales_matrix(rng):
    net = random_network(rng, n=6)
    rates = net.unmodified_rates()
    A1 = build_system_matrix(net, rates).toarray()
    half = SpreadingNetwork(**{**net._fields(), "h": net.h / 2})
    A2 = build_system_matrix(half, rates).toarray()
    off = ~np.eye(net.n, dtype=bool)
    np.testing.assert_allclose(A2[off], A1[off] / 2)
    assert np.all(np.diag(A2) > np.diag(A1))
    np.testing.assert_allclose(np.diag(A2), 1 - half.h * rates.delta)


def test_out_of_bounds_rates_name_the_entry(two_node_net):
    with pytest.raises(DomainError, match=r"beta\[\(1, 0\)\]"):
        build_system_matrix(two_node_net, RateState([0.5], [0.5, 0.5]))
    with pytest.raises(DomainError, match=r"delta\[1\]"):
        check_rates(two_node_net, RateState([0.4], [0.5, 0.95]))


@pytest.mark.parametrize("kwargs, message", [
    (dict(beta_lower=[0.5]), "beta_lower <= beta_upper"),
    (dict(cost=[1.0, 0.0]), "cost must be positive"),
    (dict(delta_upper=[0.9, 1.0]), "delta_upper < delta_cap"),
    (dict(h=2.0), "h \\* delta_upper"),
    (dict(alpha=1.5), "alpha"),
    (dict(rows=[0], cols=[0]), "self-loop"),
])
def test_invalid_networks_rejected(kwargs, message):
    base = two_node_network()._fields()
    with pytest.raises(DomainError, match=message):
        SpreadingNetwork(**{**base, **kwargs})


def test_step_size_column_sum_rejected():
    base = two_node_network()._fields()
    with pytest.raises(DomainError, match="is not < 1"):
        SpreadingNetwork(**{**base, "beta_upper": [1.0], "beta_lower": [0.1]})


def test_bound_matrices_sandwich(rng):
    for _ in range(20):
        net = random_network(rng)
        lo, up = bound_matrices(net)
        t = rng.random()
        rates = RateState(net.beta_lower + t * (net.beta_upper - net.beta_lower),
                          net.delta_lower + t * (net.delta_upper - net.delta_lower))
        A = build_system_matrix(net, rates)
        assert np.all(lo.toarray() <= A.toarray() + 1e-15)
        assert np.all(A.toarray() <= up.toarray() + 1e-15)


@pytest.mark.parametrize("A, rho", [
    (np.eye(4), 1.0),
    ([[0.5, 0.0], [0.4, 0.5]], 0.5),
    ([[0.0, 1.0], [1.0, 0.0]], 1.0),
    (np.zeros((3, 3)), 0.0),
])
def test_spectral_radius_examples(A, rho):
    assert spectral_radius(np.array(A, dtype=float)) == pytest.approx(rho, rel=1e-10, abs=1e-14)


def test_spectral_radius_matches_dense_eig(rng):
    for _ in range(30):
        n = int(rng.integers(2, 30))
        M = sp.random(n, n, density=0.2, random_state=rng, data_rvs=rng.random).toarray()
        expect = np.abs(np.linalg.eigvals(M)).max()
        assert spectral_radius(M) == pytest.approx(expect, rel=1e-8, abs=1e-12)


def test_spectral_radius_periodic_block():
    # a directed cycle is irreducible but not primitive
    n = 7
    M = np.roll(np.eye(n), 1, axis=1) * 0.3
    assert spectral_radius(M) == pytest.approx(0.3, rel=1e-10)


def test_spectral_radius_rejects_negative():
    with pytest.raises(DomainError):
        spectral_radius(np.array([[0.0, -1.0], [1.0, 0.0]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_spectral_radius_monotone(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 12))
    A = rng.random((n, n)) * (rng.random((n, n)) < 0.4)
    B = A + rng.random((n, n)) * (rng.random((n, n)) < 0.2)
    assert spectral_radius(A) <= spectral_radius(B) * (1 + 1e-9) + 1e-12


def test_assumption1_margins():
    assert check_assumption1(scalar_network(alpha=0.5)) == pytest.approx(0.75)
    # alpha = 1 with rho = 1: A = 1 - h delta = 1 needs delta = 0, so use a 2-cycle instead
    cyc = SpreadingNetwork(n=2, rows=[0, 1], cols=[1, 0], beta_lower=[0.1, 0.1],
                           beta_upper=[0.5, 0.5], delta_lower=[0.5, 0.5],
                           delta_upper=[0.9, 0.9], delta_cap=[1.0, 1.0], cost=[1.0, 1.0],
                           edge_weight=[1.0, 1.0], node_weight=[1.0, 1.0], h=1.0, alpha=1.0)
    # A_upper = [[0.5, 0.5], [0.5, 0.5]] has rho = 1
    assert check_assumption1(cyc) == pytest.approx(0.0, abs=1e-12)


def test_assumption1_margin_with_standard_alpha(rng):
    net = random_network(rng, n=6, margin=0.05)
    rho = spectral_radius(bound_matrices(net)[1])
    if net.alpha < 1:
        assert check_assumption1(net) == pytest.approx(0.05 / (0.05 + rho), rel=1e-9)


def test_admissibility_margins_examples():
    iso = scalar_network()
    np.testing.assert_allclose(admissibility_margins(iso, iso.unmodified_rates()), [0.5])
    net = two_node_network(beta=0.6)
    np.testing.assert_allclose(admissibility_margins(net, RateState([0.4], [0.5, 0.5])),
                               [0.1, 0.5])
    np.testing.assert_allclose(admissibility_margins(net, net.unmodified_rates()), [-0.1, 0.5])


def test_stability_certificate_examples():
    net = scalar_network(alpha=0.5)
    np.testing.assert_allclose(stability_certificate(net, net.unmodified_rates()), [1 / 3])
    one = scalar_network(alpha=1.0)
    np.testing.assert_allclose(stability_certificate(one, one.unmodified_rates()), one.cost)


def test_admissible_rates_certify_stability(rng):
    checked = 0
    for _ in range(200):
        net = random_network(rng, n=int(rng.integers(2, 11)))
        floor = net.floor_rates()
        if np.all(admissibility_margins(net, floor) > 0):
            assert np.all(stability_certificate(net, floor) > 0)
            checked += 1
    assert checked > 10


def test_rate_bound_violation(two_node_net):
    assert rate_bound_violation(two_node_net, two_node_net.unmodified_rates()) == 0.0
    assert rate_bound_violation(two_node_net, RateState([0.05], [0.5, 0.5])) == pytest.approx(0.05)


def test_json_round_trip(tmp_path, rng):
    net = random_network(rng, n=5)
    path = tmp_path / "net.json"
    net.save(path)
    back = SpreadingNetwork.load(path)
    for name, val in net._fields().items():
        np.testing.assert_array_equal(np.asarray(getattr(back, name)), np.asarray(val))
    d = json.loads(path.read_text())
    assert set(d) == {"n", "h", "alpha", "nodes", "edges", "node_weights"}


def test_json_missing_field():
    with pytest.raises(DomainError, match="missing field"):
        SpreadingNetwork.from_dict({"n": 1, "nodes": [{}], "edges": [], "h": 1, "alpha": 1})
