"""Exact reference computations on tiny systems.

For lattices with at most 20 sites the full state space {0,1}^sites is
enumerable, so the generator is an explicit sparse matrix and stationary
expectations come from linear algebra instead of Monte Carlo.  Everything
here works on the *unspeeded* chain: the diffusive time rescaling leaves
the stationary law untouched.

State indexing: state s encodes the configuration whose occupation at
flat site j is bit j of s, i.e. eta(j) = (s >> j) & 1.  This matches the
site ordering of :mod:`bdex.lattice` so fixtures are reproducible.
"""

from __future__ import annotations

import json

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .lattice import BoundaryProfile, Lattice, ModelParams

MAX_SITES = 20

__all__ = [
    "enumerate_states",
    "build_generator",
    "stationary_distribution",
    "check_detailed_balance",
    "exact_expectation",
    "site_density_profile",
    "bond_current_values",
    "gradient_current_values",
    "scaled_slice_current",
    "fixture_dict",
    "write_fixture",
    "load_fixture",
]


def _check_size(lat: Lattice):
    if lat.n_sites > MAX_SITES:
        raise ValueError(
            "state space 2^%d is too large for exact treatment" % lat.n_sites
        )


def enumerate_states(lat: Lattice) -> np.ndarray:
    """Occupancy matrix of every configuration, shape (2^n, n) uint8."""
    _check_size(lat)
    states = np.arange(1 << lat.n_sites, dtype=np.int64)
    cols = [(states >> j) & 1 for j in range(lat.n_sites)]
    return np.stack(cols, axis=1).astype(np.uint8)


def state_index(eta) -> int:
    """Index of a configuration under the bit encoding."""
    eta = np.asarray(eta, dtype=np.int64)
    return int((eta << np.arange(eta.size, dtype=np.int64)).sum())


def _bit(states, j):
    return (states >> j) & 1


def build_generator(lat: Lattice, params: ModelParams) -> sp.csr_matrix:
    """Sparse generator Q of the unspeeded chain (row sums exactly zero).

    Off-diagonal entries are the exchange and flip rates; exchanges that
    swap equal occupations map a state to itself and cancel out of Q, so
    they are skipped here (they matter for the simulator's event clock,
    not for the law of the chain).
    """
    _check_size(lat)
    n_states = 1 << lat.n_sites
    states = np.arange(n_states, dtype=np.int64)
    bm, bp = params.wall_values(lat)

    rows, cols, vals = [], [], []

    for x, y, i in lat.bonds():
        ix, iy = lat.site_index(x), lat.site_index(y)
        lo = lat.neighbor(x, i, -1)
        hi = lat.neighbor(y, i, +1)
        t = lat.transverse_index(x)
        v_lo = _bit(states, lat.site_index(lo)).astype(float) if lo is not None else bm[t]
        v_hi = _bit(states, lat.site_index(hi)).astype(float) if hi is not None else bp[t]
        rate = 1.0 + params.a * (v_lo + v_hi)
        moved = _bit(states, ix) != _bit(states, iy)
        target = states ^ ((1 << ix) | (1 << iy))
        rows.append(states[moved])
        cols.append(target[moved])
        vals.append(np.broadcast_to(rate, states.shape)[moved])

    for x in lat.boundary_sites():
        ix = lat.site_index(x)
        side = lat.boundary_side(x)
        t = lat.transverse_index(x)
        b = bm[t] if side == -1 else bp[t]
        occ = _bit(states, ix).astype(float)
        rate = occ * (1.0 - b) + (1.0 - occ) * b
        rows.append(states)
        cols.append(states ^ (1 << ix))
        vals.append(rate)

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    Q = sp.coo_matrix((vals, (rows, cols)), shape=(n_states, n_states)).tocsr()
    Q = Q - sp.diags(np.asarray(Q.sum(axis=1)).ravel())
    return Q.tocsr()


def stationary_distribution(Q: sp.spmatrix) -> np.ndarray:
    """The probability vector mu with mu Q = 0.

    Solved as a sparse linear system: transpose Q, overwrite one row with
    the normalisation constraint, and LU-solve.  Raises if the residual
    of mu Q exceeds 1e-12 (that would contradict irreducibility or signal
    a conditioning problem worth seeing).
    """
    n = Q.shape[0]
    A = Q.transpose().tolil()
    A[n - 1, :] = 1.0
    rhs = np.zeros(n)
    rhs[n - 1] = 1.0
    mu = sla.spsolve(A.tocsc(), rhs)
    if mu.min() < -1e-13:
        raise RuntimeError("stationary solve produced negative mass %g" % mu.min())
    mu = np.clip(mu, 0.0, None)
    mu /= mu.sum()
    residual = np.abs(mu @ Q).max()
    if residual > 1e-12:
        raise RuntimeError("stationary residual %g exceeds 1e-12" % residual)
    return mu


def check_detailed_balance(Q: sp.spmatrix, mu) -> float:
    """Largest violation max |mu(s) q(s,s') - mu(s') q(s',s)|."""
    F = sp.diags(np.asarray(mu, dtype=float)) @ Q
    D = (F - F.transpose()).tocoo()
    # the diagonal part of F is symmetric by construction; any entry left
    # in D measures a genuinely irreversible flow
    return float(np.abs(D.data).max()) if D.nnz else 0.0


def exact_expectation(mu, observable, lat: Lattice | None = None) -> float:
    """E_mu[observable].

    ``observable`` is either an array of per-state values, or a callable
    applied to the (2^n, n) occupancy matrix (vectorised), or a callable
    on single configurations as a fallback.
    """
    mu = np.asarray(mu, dtype=float)
    if callable(observable):
        if lat is None:
            raise ValueError("callable observables need the lattice")
        occ = enumerate_states(lat)
        try:
            values = np.asarray(observable(occ), dtype=float)
            if values.shape != (occ.shape[0],):
                raise TypeError
        except TypeError:
            values = np.array([float(observable(occ[s])) for s in range(occ.shape[0])])
    else:
        values = np.asarray(observable, dtype=float)
    return float(mu @ values)


# -- standard observables ----------------------------------------------


def site_density_profile(lat: Lattice, mu) -> np.ndarray:
    """Stationary occupation probability of every site."""
    occ = enumerate_states(lat)
    return occ.T.astype(float) @ np.asarray(mu, dtype=float)


def bond_current_values(lat: Lattice, params: ModelParams, x, i: int) -> np.ndarray:
    """Per-state net current r(x, x+e_i) (eta(x) - eta(x+e_i)).

    This jump-counting form of the current is defined on every bond,
    including the two extreme layers where the gradient decomposition
    is not.
    """
    x = tuple(int(c) for c in x)
    y = lat.neighbor(x, i, +1)
    if y is None:
        raise ValueError("not a bond")
    lo = lat.neighbor(x, i, -1)
    hi = lat.neighbor(y, i, +1)
    bm, bp = params.wall_values(lat)
    t = lat.transverse_index(x)
    states = np.arange(1 << lat.n_sites, dtype=np.int64)
    v_lo = _bit(states, lat.site_index(lo)).astype(float) if lo is not None else bm[t]
    v_hi = _bit(states, lat.site_index(hi)).astype(float) if hi is not None else bp[t]
    rate = 1.0 + params.a * (v_lo + v_hi)
    diff = _bit(states, lat.site_index(x)).astype(float) - _bit(
        states, lat.site_index(y)
    ).astype(float)
    return rate * diff


def gradient_current_values(lat: Lattice, params: ModelParams, x, i: int) -> np.ndarray:
    """Per-state value of the gradient decomposition of the current.

    (h_{i,x} - h_{i,x+e_i}) + (g_{i,x} - g_{i,x+2e_i}); requires x-e_i
    and x+2e_i on the slab.
    """
    x = tuple(int(c) for c in x)
    y = lat.neighbor(x, i, +1)
    xm = lat.neighbor(x, i, -1)
    y2 = lat.neighbor(y, i, +1) if y is not None else None
    if y is None or xm is None or y2 is None:
        raise ValueError("gradient current needs x-e_i and x+2e_i on the slab")
    states = np.arange(1 << lat.n_sites, dtype=np.int64)
    a = params.a
    e = lambda z: _bit(states, lat.site_index(z)).astype(float)
    h_x = e(x) - a * e(y) * e(xm)
    h_y = e(y) - a * e(y2) * e(x)
    g_x = a * e(xm) * e(x)
    g_y2 = a * e(y) * e(y2)
    return (h_x - h_y) + (g_x - g_y2)


def scaled_slice_current(lat: Lattice, params: ModelParams, mu, x1: int) -> float:
    """Exact E[(2N / N^{d-1}) sum over transverse bonds of the current]
    across the slice between layers x1 and x1+1."""
    if not (-lat.N + 1 <= x1 <= lat.N - 2):
        raise ValueError("slice outside the slab")
    total = 0.0
    for t in range(lat.n_trans):
        x = lat.site_coords((x1 + lat.N - 1) * lat.n_trans + t)
        total += exact_expectation(mu, bond_current_values(lat, params, x, 1))
    return 2.0 * lat.N / lat.N ** (lat.d - 1) * total


# -- regression fixtures -------------------------------------------------


def fixture_dict(lat: Lattice, params: ModelParams) -> dict:
    """Exact stationary summary used as a committed regression baseline."""
    Q = build_generator(lat, params)
    mu = stationary_distribution(Q)
    density = site_density_profile(lat, mu)
    slice_currents = [
        [x1, scaled_slice_current(lat, params, mu, x1)]
        for x1 in range(-lat.N + 1, lat.N - 1)
    ]
    bond_currents = []
    for x1 in range(-lat.N + 1, lat.N - 1):
        for t in range(lat.n_trans):
            x = lat.site_coords((x1 + lat.N - 1) * lat.n_trans + t)
            val = exact_expectation(mu, bond_current_values(lat, params, x, 1))
            bond_currents.append([list(x), val])
    return {
        "d": lat.d,
        "N": lat.N,
        "a": params.a,
        "b_minus": params.b_minus.to_dict(),
        "b_plus": params.b_plus.to_dict(),
        "density": density.tolist(),
        "bond_current": bond_currents,
        "scaled_slice_current": slice_currents,
        "detailed_balance_max": check_detailed_balance(Q, mu),
    }


def write_fixture(path, lat: Lattice, params: ModelParams) -> dict:
    fx = fixture_dict(lat, params)
    with open(path, "w") as fh:
        json.dump(fx, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return fx


def load_fixture(path):
    """Read a fixture file back as (lattice, params, dict)."""
    with open(path) as fh:
        fx = json.load(fh)
    lat = Lattice(fx["d"], fx["N"])
    params = ModelParams(
        fx["a"],
        BoundaryProfile.from_dict(fx["b_minus"]),
        BoundaryProfile.from_dict(fx["b_plus"]),
    )
    return lat, params, fx
