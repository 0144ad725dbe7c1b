"""Path functionals: energy, test-field pairing, control recovery, rate."""

import json

import numpy as np
import pytest

from bdex import ldp, pde
from bdex.lattice import Lattice
from bdex.simulate import sample_bernoulli_profile


def _linear_traj():
    g = pde.Grid(1, 3)
    f = g.evaluate(lambda p: (p[:, 0] + 1.0) / 2.0)
    fields = np.stack([f, f])
    return pde.Trajectory(g, np.array([0.0, 1.0]), fields, dt=1.0)


def test_energy_linear_profile_by_hand():
    # gradient 1/2 on every one of the M1+1 faces, node weight h1 = 1/2:
    # 4 faces * (1/2)^2 * 1/2 = 1/2 per unit time
    traj = _linear_traj()
    assert ldp.energy_Q(traj) == pytest.approx(0.5, abs=1e-15)


def test_weighted_energy_with_unit_weight_matches():
    g = pde.Grid(1, 24)
    traj = pde.solve_parabolic(g, 0.5, 0.8, 0.2, 0.5, T=0.05, store_every=3)
    assert ldp.weighted_gradient_energy(traj, lambda r: np.ones_like(r)) == \
        pytest.approx(ldp.energy_Q(traj), rel=1e-12)


def test_j_functional_nonpositive_on_solution_paths():
    g = pde.Grid(1, 19)
    traj = pde.solve_parabolic(g, 0.5, 0.8, 0.2, 0.5, T=0.1)
    gamma = traj.fields[0]
    for G in ldp.default_dictionary(g, 0.1, n_space=3, n_time=2):
        assert ldp.j_functional(traj, gamma, G, 0.5) <= 1e-10


def test_j_functional_rejects_fields_with_wall_values():
    traj = _linear_traj()
    bad = lambda t, pts: np.ones(pts.shape[0])
    with pytest.raises(ValueError):
        ldp.j_functional(traj, traj.fields[0], bad, 0.0)


def test_rate_vanishes_on_parabolic_path():
    g = pde.Grid(1, 23)
    traj = pde.solve_parabolic(g, 0.5, 0.8, 0.2,
                               lambda p: 0.5 + 0.2 * np.sin(np.pi * p[:, 0]),
                               T=0.1, store_every=1)
    rep = ldp.evaluate_rate(traj, traj.fields[0], 0.5)
    assert rep.reason is None
    assert rep.I <= 1e-20
    assert rep.Q == pytest.approx(ldp.energy_Q(traj), rel=1e-12)


@pytest.mark.parametrize("amp,mode", [(0.25, 1), (0.2, 2)])
def test_round_trip_recovers_field_norm(amp, mode):
    # drive with a known H, then the rate must be half its sigma-norm
    g = pde.Grid(1, 31)
    a = 0.5
    H = lambda p: amp * np.sin(mode * np.pi * (p[:, 0] + 1.0) / 2.0)
    rho0 = pde.solve_hydrostatic(g, a, 0.8, 0.2)
    traj = pde.solve_controlled(g, a, 0.8, 0.2, rho0, T=0.3, H=H,
                                store_every=1, drift_bound=2.0)
    rep = ldp.evaluate_rate(traj, traj.fields[0], a)
    H_full = g.evaluate(H)
    direct = 0.0
    for k in range(traj.times.size - 1):
        dt = traj.times[k + 1] - traj.times[k]
        w1, wt, _ = ldp._sigma_faces(g, traj.fields[k], a, floor=False)
        direct += 0.5 * dt * ldp._face_energy(g, H_full, w1, wt)
    assert rep.I == pytest.approx(direct, rel=0.05)
    assert rep.I > 1e-5


def test_recovered_control_matches_driver_pointwise():
    g = pde.Grid(1, 31)
    a = 0.3
    H = lambda p: 0.3 * np.sin(np.pi * (p[:, 0] + 1.0) / 2.0)
    rho0 = pde.solve_hydrostatic(g, a, 0.7, 0.3)
    traj = pde.solve_controlled(g, a, 0.7, 0.3, rho0, T=0.1, H=H,
                                store_every=1, drift_bound=2.0)
    ctrl = ldp.recover_control(traj, a)
    want = g.evaluate(H)[1:-1]
    err = np.abs(ctrl.fields - want).max()
    assert err < 0.03 * np.abs(want).max()
    # norm_sq is the same quadrature evaluate_rate integrates
    rep = ldp.evaluate_rate(traj, traj.fields[0], a)
    assert rep.I == pytest.approx(0.5 * ctrl.norm_sq(), rel=1e-12)


def test_perturbed_path_pays_rate():
    g = pde.Grid(1, 19)
    traj = pde.solve_parabolic(g, 0.5, 0.8, 0.2, 0.5, T=0.1, store_every=1)
    base = ldp.rate_I(traj, traj.fields[0], 0.5)
    bump = g.evaluate(lambda p: 0.05 * np.sin(np.pi * (p[:, 0] + 1.0) / 2.0))
    T = traj.times[-1]
    pert = traj.fields + np.sin(np.pi * traj.times / T)[:, None] * bump[None]
    ptraj = pde.Trajectory(g, traj.times, np.clip(pert, 0.0, 1.0), traj.dt)
    worse = ldp.rate_I(ptraj, ptraj.fields[0], 0.5)
    assert base <= 1e-20
    assert worse > 1e-4 and worse > 10 * max(base, 1e-30)


def test_reason_codes():
    g = pde.Grid(1, 7)
    traj = pde.solve_parabolic(g, 0.0, 0.6, 0.4, 0.5, T=0.05, store_every=4)
    gamma = traj.fields[0]

    broken = traj.fields.copy()
    broken[1, 3] = np.nan
    rep = ldp.evaluate_rate(pde.Trajectory(g, traj.times, broken, traj.dt),
                            gamma, 0.0)
    assert rep.reason == "infinite energy" and rep.I == np.inf

    high = traj.fields.copy()
    high[1, 3] = 1.2
    rep = ldp.evaluate_rate(pde.Trajectory(g, traj.times, high, traj.dt),
                            gamma, 0.0)
    assert rep.reason == "mass violation" and rep.I == np.inf

    rep = ldp.evaluate_rate(traj, np.zeros(g.shape_full), 0.0)
    assert rep.reason == "bad initial slice" and rep.I == np.inf


def test_h_minus1_norm_round_trip():
    # feed -Lap U for a known wall-vanishing U and get |grad U|^2 back
    g = pde.Grid(2, 15, 8)
    U = g.evaluate(lambda p: np.sin(np.pi * (p[:, 0] + 1.0) / 2.0)
                   * (1.0 + 0.5 * np.cos(2 * np.pi * p[:, 1])))
    U[0] = U[-1] = 0.0
    v = -pde.laplacian_interior(g, U)
    got = ldp.h_minus1_norm(g, v)
    want = ldp._face_energy(g, U)
    assert got == pytest.approx(want, rel=1e-10)


def test_h_minus1_norm_shape_check():
    g = pde.Grid(1, 9)
    with pytest.raises(ValueError):
        ldp.h_minus1_norm(g, np.zeros(5))


def test_linear_equation_superposes_but_nonlinear_does_not():
    g = pde.Grid(1, 19)
    r0 = lambda p: 0.5 + 0.3 * np.sin(np.pi * (p[:, 0] + 1.0) / 2.0)
    r1 = lambda p: np.full(p.shape[0], 0.4)
    for a, bound, expect_free in ((0.0, 1e-18, True), (0.5, 1e-9, False)):
        t0 = pde.solve_parabolic(g, a, 0.7, 0.3, r0, T=0.05, store_every=1)
        t1 = pde.solve_parabolic(g, a, 0.7, 0.3, r1, T=0.05, store_every=1)
        mix = pde.Trajectory(g, t0.times, 0.5 * (t0.fields + t1.fields), t0.dt)
        I = ldp.rate_I(mix, mix.fields[0], a)
        if expect_free:
            assert I <= bound
        else:
            assert I > bound


def test_rate_report_json_round_trip(tmp_path):
    g = pde.Grid(1, 11)
    traj = pde.solve_parabolic(g, 0.5, 0.8, 0.2, 0.5, T=0.02, store_every=1)
    rep = ldp.evaluate_rate(traj, traj.fields[0], 0.5)
    p = tmp_path / "rate.json"
    ldp.save_rate_report(rep, p)
    data = json.loads(p.read_text())
    assert data["I_T"] == rep.I
    assert data["reason"] is None
    assert len(data["per_slice_norm_sq"]) == traj.times.size - 1

    bad = ldp.evaluate_rate(traj, np.zeros(g.shape_full), 0.5)
    ldp.save_rate_report(bad, p)
    data = json.loads(p.read_text())
    assert data["I_T"] == "inf" and data["reason"] == "bad initial slice"


def test_dictionary_sup_is_tight_lower_bound():
    # the driver lives in the dictionary span, so the sup should land on
    # the rate itself (and never exceed it by more than roundoff)
    g = pde.Grid(1, 15)
    a = 0.5
    H = lambda p: 0.3 * np.sin(np.pi * (p[:, 0] + 1.0) / 2.0)
    rho0 = pde.solve_hydrostatic(g, a, 0.8, 0.2)
    traj = pde.solve_controlled(g, a, 0.8, 0.2, rho0, T=0.2, H=H,
                                store_every=1, drift_bound=2.0)
    I = ldp.rate_I(traj, traj.fields[0], a)
    sup = ldp.dictionary_sup(traj, traj.fields[0], a,
                             bc_minus=0.8, bc_plus=0.2)
    assert sup <= I * (1.0 + 1e-6) + 1e-12
    assert sup >= 0.9 * I


def test_trajectory_from_snapshots_shapes_and_range():
    lat = Lattice(d=2, N=8)
    e0 = sample_bernoulli_profile(lat, 0.9, seed=0)
    e1 = sample_bernoulli_profile(lat, 0.2, seed=1)
    traj = ldp.trajectory_from_snapshots(lat, [(0.0, e0), (0.3, e1)], eps=1.5 / 8)
    assert traj.grid == pde.Grid.matched(lat)
    assert traj.times.tolist() == [0.0, 0.3]
    assert traj.fields.shape == (2,) + traj.grid.shape_full
    assert traj.fields.min() >= 0.0 and traj.fields.max() <= 1.0


def test_check_boundary_trace():
    g = pde.Grid(1, 9)
    traj = pde.solve_parabolic(g, 0.0, 0.8, 0.2, 0.5, T=0.05, store_every=2)
    assert ldp.check_boundary_trace(traj, 0.8, 0.2, tol=1e-12) == 0.0
    with pytest.raises(ValueError):
        ldp.check_boundary_trace(traj, 0.7, 0.2, tol=1e-3)
