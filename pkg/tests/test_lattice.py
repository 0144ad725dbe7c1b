"""Geometry, rates, and the gradient current decomposition."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdex.lattice import (
    BoundaryProfile,
    Lattice,
    ModelParams,
    apply_exchange,
    apply_flip,
    boundary_flip_rate,
    bulk_jump_rate,
    current_terms,
    enumerate_transitions,
    instantaneous_current,
    read_snapshot,
    write_snapshot,
)


def test_site_count():
    for d, N in [(1, 2), (1, 5), (2, 3), (3, 2)]:
        lat = Lattice(d=d, N=N)
        assert lat.n_sites == (2 * N - 1) * N ** (d - 1)
        assert len(list(lat.sites())) == lat.n_sites


@given(st.integers(1, 3), st.integers(2, 4), st.data())
@settings(max_examples=60, deadline=None)
def test_site_index_round_trip(d, N, data):
    lat = Lattice(d=d, N=N)
    idx = data.draw(st.integers(0, lat.n_sites - 1))
    assert lat.site_index(lat.site_coords(idx)) == idx


def test_neighbor_walls_and_wrap():
    lat = Lattice(d=2, N=3)
    # direction 1 stops at the walls
    assert lat.neighbor((2, 0), 1, +1) is None
    assert lat.neighbor((-2, 1), 1, -1) is None
    assert lat.neighbor((1, 0), 1, +1) == (2, 0)
    # direction 2 wraps around the torus
    assert lat.neighbor((0, 2), 2, +1) == (0, 0)
    assert lat.neighbor((0, 0), 2, -1) == (0, 2)


def test_bond_count():
    # direction-1 bonds between consecutive layers, transverse bonds per layer
    lat = Lattice(d=2, N=3)
    bonds = list(lat.bonds())
    n_layers = 2 * lat.N - 1
    expected = (n_layers - 1) * lat.N + n_layers * lat.N
    assert len(bonds) == expected
    assert len(set((x, y) for x, y, _ in bonds)) == len(bonds)


def test_boundary_sites_are_the_two_wall_layers():
    lat = Lattice(d=2, N=4)
    walls = list(lat.boundary_sites())
    assert len(walls) == 2 * lat.N
    assert all(abs(x[0]) == lat.N - 1 for x in walls)


def test_d1_is_supported():
    lat = Lattice(d=1, N=3)
    assert lat.n_sites == 5
    assert list(lat.boundary_sites()) == [(-2,), (2,)]


def test_boundary_profile_constant_and_modes():
    b = BoundaryProfile(0.5, modes=[((1,), 0.1, 0.05)])
    v = np.array([[0.0], [0.25]])
    got = b(v)
    want = 0.5 + 0.1 * np.cos(2 * np.pi * 0.0) + 0.05 * np.sin(2 * np.pi * 0.0)
    assert got[0] == pytest.approx(want)
    assert BoundaryProfile.from_dict(b.to_dict()).to_dict() == b.to_dict()
    assert BoundaryProfile(0.3).is_constant()
    assert not b.is_constant()


def test_params_reject_bad_interaction():
    with pytest.raises(ValueError):
        ModelParams(a=-0.5, b_minus=0.5, b_plus=0.5)
    with pytest.raises(ValueError):
        ModelParams(a=-0.6, b_minus=0.5, b_plus=0.5)


def test_wall_values_must_stay_inside_open_interval():
    lat = Lattice(d=1, N=3)
    with pytest.raises(ValueError):
        ModelParams(a=0.0, b_minus=1.0, b_plus=0.5).wall_values(lat)
    bm, bp = ModelParams(a=0.0, b_minus=0.9, b_plus=0.1).wall_values(lat)
    assert bm.shape == bp.shape == (1,)


def test_bulk_rate_interior_flanks():
    lat = Lattice(d=1, N=3)
    par = ModelParams(a=0.5, b_minus=0.8, b_plus=0.2)
    # sites -2..2; bond (-1, 0) has flanks -2 and 1, both on the slab
    eta = np.array([1, 0, 0, 1, 0], dtype=np.uint8)
    assert bulk_jump_rate(lat, par, eta, (-1,), 1) == pytest.approx(1.0 + 0.5 * (1 + 1))
    eta = np.zeros(5, dtype=np.uint8)
    assert bulk_jump_rate(lat, par, eta, (-1,), 1) == pytest.approx(1.0)


def test_bulk_rate_boundary_substitution():
    # extreme direction-1 bonds read the reservoir density for the
    # missing flank; all other bonds never do
    lat = Lattice(d=1, N=3)
    par = ModelParams(a=0.5, b_minus=0.8, b_plus=0.2)
    eta = np.zeros(5, dtype=np.uint8)
    # bond (-2, -1): flank -3 is off the slab, replaced by b_minus
    assert bulk_jump_rate(lat, par, eta, (-2,), 1) == pytest.approx(1.0 + 0.5 * 0.8)
    # bond (1, 2): flank 3 is off the slab, replaced by b_plus
    assert bulk_jump_rate(lat, par, eta, (1,), 1) == pytest.approx(1.0 + 0.5 * 0.2)


def test_transverse_bonds_never_substitute():
    lat = Lattice(d=2, N=2)
    par = ModelParams(a=0.7, b_minus=0.9, b_plus=0.1)
    eta = np.zeros(lat.n_sites, dtype=np.uint8)
    # transverse bond at the wall layer wraps, flanks are lattice sites
    assert bulk_jump_rate(lat, par, eta, (1, 0), 2) == pytest.approx(1.0)


def test_flip_rate_values():
    lat = Lattice(d=1, N=2)
    par = ModelParams(a=0.0, b_minus=0.8, b_plus=0.2)
    eta = np.array([0, 0, 1], dtype=np.uint8)
    assert boundary_flip_rate(lat, par, eta, (-1,)) == pytest.approx(0.8)
    assert boundary_flip_rate(lat, par, eta, (1,)) == pytest.approx(0.8)
    with pytest.raises(ValueError):
        boundary_flip_rate(lat, par, eta, (0,))


def test_apply_exchange_swaps_and_conserves():
    lat = Lattice(d=2, N=2)
    eta = np.array([1, 0, 1, 1, 0, 0], dtype=np.uint8)
    out = apply_exchange(lat, eta, (0, 0), (0, 1))
    assert out.sum() == eta.sum()
    assert out[lat.site_index((0, 0))] == eta[lat.site_index((0, 1))]
    back = apply_exchange(lat, out, (0, 0), (0, 1))
    assert np.array_equal(back, eta)


def test_apply_flip_changes_one_site():
    lat = Lattice(d=1, N=2)
    eta = np.array([0, 1, 0], dtype=np.uint8)
    out = apply_flip(lat, eta, (1,))
    assert out[2] == 1 and np.array_equal(out[:2], eta[:2])
    with pytest.raises(ValueError):
        apply_flip(lat, eta, (0,))


@pytest.mark.parametrize("a", [-0.4, 0.0, 0.7])
def test_gradient_identity_exhaustive(a):
    """W(x, x+e) from the (h, g) terms equals rate * occupancy difference.

    Exhausts all 16 assignments of the four sites the bond rate can see.
    """
    lat = Lattice(d=1, N=3)
    par = ModelParams(a=a, b_minus=0.5, b_plus=0.5)
    for occ in itertools.product((0, 1), repeat=4):
        eta = np.zeros(5, dtype=np.uint8)
        eta[0:4] = occ          # sites -2, -1, 0, 1; bond (-1, 0)
        w = instantaneous_current(lat, par, eta, (-1,), 1)
        r = bulk_jump_rate(lat, par, eta, (-1,), 1)
        direct = r * (float(eta[1]) - float(eta[2]))
        assert w == pytest.approx(direct, abs=1e-15)


@given(st.integers(0, 2 ** 12 - 1))
@settings(max_examples=40, deadline=None)
def test_gradient_identity_d2(bits):
    lat = Lattice(d=2, N=2)
    par = ModelParams(a=0.7, b_minus=0.6, b_plus=0.4)
    eta = np.array([(bits >> k) & 1 for k in range(lat.n_sites)], dtype=np.uint8)
    # transverse bond: all four window sites always on the torus
    for x in [(0, 0), (-1, 1), (1, 0)]:
        w = instantaneous_current(lat, par, eta, x, 2)
        y = lat.neighbor(x, 2, +1)
        r = bulk_jump_rate(lat, par, eta, x, 2)
        diff = float(eta[lat.site_index(x)]) - float(eta[lat.site_index(y)])
        assert w == pytest.approx(r * diff, abs=1e-14)


def test_current_terms_need_both_neighbors():
    lat = Lattice(d=1, N=2)
    par = ModelParams(a=0.5, b_minus=0.5, b_plus=0.5)
    eta = np.zeros(3, dtype=np.uint8)
    with pytest.raises(ValueError):
        current_terms(lat, par, eta, (-1,), 1)  # needs site -2, off the slab


def test_enumerate_transitions_counts():
    lat = Lattice(d=2, N=2)
    par = ModelParams(a=0.3, b_minus=0.7, b_plus=0.3)
    eta = np.zeros(lat.n_sites, dtype=np.uint8)
    trans = enumerate_transitions(lat, par, eta)
    n_bonds = len(list(lat.bonds()))
    n_walls = len(list(lat.boundary_sites()))
    assert len(trans) == n_bonds + n_walls
    assert all(r >= 0 for _, r in trans)


@given(st.integers(2, 4), st.integers(0, 2 ** 10))
@settings(max_examples=30, deadline=None)
def test_transition_rates_positive(N, seed):
    lat = Lattice(d=1, N=N)
    par = ModelParams(a=-0.4, b_minus=0.6, b_plus=0.4)
    rng = np.random.default_rng(seed)
    eta = rng.integers(0, 2, lat.n_sites).astype(np.uint8)
    for _, r in enumerate_transitions(lat, par, eta):
        assert r > 0.0  # flips have rate in {b, 1-b}, exchanges >= 1 - 2|a|


def test_snapshot_round_trip(tmp_path):
    lat = Lattice(d=2, N=3)
    eta = np.random.default_rng(5).integers(0, 2, lat.n_sites).astype(np.uint8)
    path = tmp_path / "snap.txt"
    write_snapshot(path, lat, 0.5, eta)
    lat2, a2, eta2 = read_snapshot(path)
    assert lat2 == lat and a2 == 0.5
    assert np.array_equal(eta2, eta)
