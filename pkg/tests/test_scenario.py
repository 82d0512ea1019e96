import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spreadmpc.errors import DomainError
from spreadmpc.network import (SpreadingNetwork, bound_matrices, build_system_matrix,
                               spectral_radius)
from spreadmpc.scenario import (NEIGHBOURS, Landscape, WildfireParams, Wind, build_wildfire_network,
                                generate_landscape, seed_outbreak, wind_factor)

P = WildfireParams()


def _edge_map(net):
    return {(int(i), int(j)): float(b) for i, j, b in zip(net.rows, net.cols, net.beta_upper)}


@pytest.mark.parametrize("theta", [0.0, 45.0, 137.0, 180.0, 300.0])
def test_calm_wind_is_neutral(theta):
    assert wind_factor(P, theta, Wind(0.0, 30.0)) == 1.0


def test_wind_extremes():
    V = 4.0
    wind = Wind(V, 45.0)          # blows towards 225 degrees
    down = wind_factor(P, 225.0, wind)
    up = wind_factor(P, 45.0, wind)
    assert down == pytest.approx(math.exp(V * P.c1), rel=1e-14)
    assert up == pytest.approx(math.exp(V * (P.c1 - 2 * P.c2)), rel=1e-14)
    grid = [wind_factor(P, t, wind) for t in np.linspace(0, 360, 721)]
    assert max(grid) == pytest.approx(down) and min(grid) == pytest.approx(up)


def test_one_by_two_grass_no_wind():
    land = Landscape(("GG",), Wind(0.0, 0.0))
    net = build_wildfire_network(land)
    assert _edge_map(net) == {(1, 0): 0.5, (0, 1): 0.5}


def test_grass_to_desert_edge():
    land = Landscape(("GD",), Wind(0.0, 0.0))
    net = build_wildfire_network(land)
    edges = _edge_map(net)
    assert edges[(1, 0)] == pytest.approx(0.5 * 0.1)
    assert edges[(0, 1)] == pytest.approx(0.5 * 1.0)


def test_diagonal_factor():
    land = Landscape(("GG", "GG"), Wind(0.0, 0.0))
    edges = _edge_map(build_wildfire_network(land))
    assert edges[(3, 0)] == pytest.approx(0.5 * P.diagonal_factor)
    assert edges[(1, 0)] == pytest.approx(0.5)
    assert len(edges) == 12


def test_water_cells_are_isolated():
    land = Landscape(("GWG", "GWG", "GGG"), Wind(2.0, 90.0))
    net = build_wildfire_network(land)
    water = [land.node(0, 1), land.node(1, 1)]
    for w in water:
        assert w not in net.rows and w not in net.cols
    assert net.n == 9


def test_costs_and_rate_bounds():
    land = generate_landscape(8, 8)
    net = build_wildfire_network(land)
    codes = np.array([land.code(i) for i in range(net.n)])
    np.testing.assert_array_equal(net.cost, np.where(codes == "C", 1.0, 0.001))
    np.testing.assert_allclose(net.beta_lower, P.beta_lower_fraction * net.beta_upper)
    np.testing.assert_array_equal(net.delta_lower, np.full(net.n, 0.5))
    assert np.all(net.edge_weight == 1) and np.all(net.node_weight == 1)


def test_step_size_violation_is_reported():
    land = Landscape(("EEE", "EEE", "EEE"), Wind(0.0, 0.0), params={"h": 0.5})
    with pytest.raises(DomainError, match="step size too large"):
        build_wildfire_network(land)


def test_wind_reversal_swaps_opposite_edges():
    cells = ("GGGG", "GGGG", "GGGG")
    a = _edge_map(build_wildfire_network(Landscape(cells, Wind(4.0, 30.0))))
    b = _edge_map(build_wildfire_network(Landscape(cells, Wind(4.0, 210.0))))
    for (i, j), v in a.items():
        assert b[(j, i)] == pytest.approx(v, rel=1e-13)


def test_calm_wind_symmetric_on_uniform_fuel():
    cells = ("GGGG", "GGGG", "GGGG")
    a = _edge_map(build_wildfire_network(Landscape(cells, Wind(0.0, 0.0))))
    for (i, j), v in a.items():
        assert a[(j, i)] == v


def test_seeding_modes():
    land = generate_landscape(10, 10)
    n_land = sum(land.code(i) != "W" for i in range(land.n))
    assert seed_outbreak(land, []).sum() == 0
    full = seed_outbreak(land, 1.0)
    assert full.sum() == n_land
    assert all(full[i] == 0 for i in range(land.n) if land.code(i) == "W")
    quarter = seed_outbreak(land, 0.25, seed=3)
    assert quarter.sum() == math.ceil(0.25 * land.n)
    np.testing.assert_array_equal(quarter, seed_outbreak(land, 0.25, seed=3))
    cells = seed_outbreak(land, [(0, 0), (9, 0)])
    assert cells[land.node(0, 0)] == 1 and cells[land.node(9, 0)] == 1 and cells.sum() == 2


def test_fraction_on_thousand_nodes():
    land = generate_landscape(25, 40)
    assert land.n == 1000
    x = seed_outbreak(land, 0.25)
    assert x.sum() == 250


def test_seeding_errors():
    land = Landscape(("GW",))
    with pytest.raises(DomainError, match="water"):
        seed_outbreak(land, [(0, 1)])
    with pytest.raises(DomainError):
        seed_outbreak(land, [(3, 0)])
    with pytest.raises(DomainError):
        seed_outbreak(land, 0.0)
    with pytest.raises(DomainError, match="water"):
        Landscape(("GW",), seeds=((0, 1),))


def test_landscape_validation():
    with pytest.raises(DomainError):
        Landscape(())
    with pytest.raises(DomainError):
        Landscape(("GG", "G"))
    with pytest.raises(DomainError, match="unknown cell codes"):
        Landscape(("GX",))
    with pytest.raises(DomainError):
        Landscape(("GG",), Wind(-1.0, 0.0))


def test_params_validation():
    with pytest.raises(DomainError):
        WildfireParams(h=0.0)
    with pytest.raises(DomainError):
        WildfireParams(delta=0.95)
    with pytest.raises(DomainError, match="unknown"):
        WildfireParams().with_overrides({"nope": 1})
    assert WildfireParams().with_overrides({"beta_veg": {"desert": 0.2}}).beta_veg["grassland"] == 1.0


def test_landscape_json_round_trip(tmp_path):
    land = generate_landscape(9, 11, seed=4, seed_fraction=0.1)
    path = tmp_path / "land.json"
    land.save(path)
    back = Landscape.load(path)
    assert back == land
    with pytest.raises(DomainError, match="disagree"):
        Landscape.from_dict({**land.to_dict(), "rows": 3})


def test_generated_landscape_is_deterministic():
    a, b = generate_landscape(20, 20), generate_landscape(20, 20)
    assert a == b
    codes = set("".join(a.cells))
    assert {"C", "W", "G", "E", "D"} <= codes
    seeds = seed_outbreak(a)
    assert seeds.sum() >= 1


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 16), st.integers(4, 16), st.integers(0, 1000),
       st.floats(0, 8), st.floats(0, 360))
def test_generated_networks_validate(rows, cols, seed, speed, bearing):
    land = generate_landscape(rows, cols, seed=seed, wind=Wind(speed, bearing))
    net = build_wildfire_network(land)
    # rebuilding through the validating constructor must succeed
    SpreadingNetwork(**net._fields())
    assert np.all(net.beta_upper > 0)
    assert net.h * np.bincount(net.cols, weights=net.beta_upper, minlength=net.n).max() < 1
    A = build_system_matrix(net, net.unmodified_rates())
    assert A.min() >= 0
    # discount chosen so that alpha * rho(upper bound) < 1
    assert net.alpha * spectral_radius(bound_matrices(net)[1]) < 1


def test_neighbourhood_has_eight_directions():
    assert len(set(NEIGHBOURS)) == 8 and (0, 0) not in NEIGHBOURS
