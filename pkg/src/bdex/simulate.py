"""Running the speeded-up chain and measuring its empirical observables.

`run_ctmc` drives the event kernel of :mod:`bdex._engine` between probe
times and collects per-site occupation time integrals, signed slice
crossing counts, and configuration snapshots.  The remaining functions
turn configurations into the macroscopic objects the particle system is
compared against: empirical measures, block averages, box-smoothed
density fields, stationary current estimates, and the local-equilibrium
residual statistic.

An engine instance is strictly single threaded.  Replicas with distinct
seeds share nothing and may run concurrently (`run_replicas` fans them
out over a thread pool; the kernel releases the GIL); their accumulators
merge associatively afterwards.
"""

from __future__ import annotations

import json
import os
import subprocess
import time as _time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _engine
from .lattice import Lattice, ModelParams

_trapz = getattr(np, "trapezoid", None) or np.trapz

__all__ = [
    "TiltField",
    "Accumulators",
    "RunResult",
    "run_ctmc",
    "run_replicas",
    "merge_accumulators",
    "total_event_rate",
    "empirical_measure",
    "EmpiricalMeasure",
    "block_average",
    "block_average_field",
    "smooth_measure",
    "SmoothedDensity",
    "slice_current_by_layer",
    "slice_current_estimator",
    "slice_current_profile",
    "local_equilibrium_residual",
    "equilibrium_mean",
    "sample_bernoulli_profile",
    "dump_density_csv",
    "dump_current_csv",
    "append_run_log",
]


def site_positions(lat: Lattice) -> np.ndarray:
    """Macroscopic positions x/N of all sites, shape (n_sites, d)."""
    pos = np.empty((lat.n_sites, lat.d))
    for i in range(lat.n_sites):
        pos[i] = np.asarray(lat.site_coords(i), dtype=float) / lat.N
    return pos


class TiltField:
    """External driving field H, vanishing on the walls u1 = +-1.

    Parameters
    ----------
    fn : callable
        Static field: fn(points) with points an (n, d) array of
        macroscopic positions, returning n values.  Time dependent:
        fn(t, points).
    time_dependent : bool
        Whether fn takes the macroscopic time as first argument.
    """

    def __init__(self, fn, time_dependent: bool = False):
        self.fn = fn
        self.time_dependent = bool(time_dependent)

    def values(self, points, t: float = 0.0) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        out = self.fn(t, points) if self.time_dependent else self.fn(points)
        return np.asarray(out, dtype=float).reshape(points.shape[0])

    def check_walls(self, d: int, t_grid=(0.0,), tol: float = 1e-9):
        """Raise unless H vanishes at u1 = +-1 (sampled transversally)."""
        m = 33
        pts = []
        for u1 in (-1.0, 1.0):
            grid = np.stack(np.meshgrid(*([np.linspace(0, 1, m, endpoint=False)] * (d - 1)
                                          or [np.zeros(1)]), indexing="ij"), axis=-1)
            flat = grid.reshape(-1, max(d - 1, 1))[:, : d - 1]
            block = np.concatenate([np.full((flat.shape[0], 1), u1), flat], axis=1)
            pts.append(block)
        pts = np.concatenate(pts, axis=0)
        worst = 0.0
        for t in t_grid:
            worst = max(worst, float(np.abs(self.values(pts, t)).max()))
        if worst > tol:
            raise ValueError("tilt field does not vanish on the walls (max %g)" % worst)


@dataclass
class Accumulators:
    """Time-integrated observables of one run (or a merged family)."""

    occ_time: np.ndarray        # per site, integral of eta dt after burn-in
    crossings: np.ndarray       # per direction-1 slice, signed jump counts
    duration: float             # accumulated macroscopic averaging time
    counters: np.ndarray        # events, moves, flips, thin rejects, net created

    def density(self) -> np.ndarray:
        """Per-site time-averaged occupation."""
        if self.duration <= 0:
            raise ValueError("zero averaging duration")
        return self.occ_time / self.duration


def merge_accumulators(parts) -> Accumulators:
    """Associative merge: sums of integrals, counts, and durations."""
    parts = list(parts)
    return Accumulators(
        occ_time=sum(p.occ_time for p in parts),
        crossings=sum(p.crossings for p in parts),
        duration=sum(p.duration for p in parts),
        counters=sum(p.counters for p in parts),
    )


@dataclass
class RunResult:
    lat: Lattice
    params: ModelParams
    acc: Accumulators
    final: np.ndarray
    snapshots: list = field(default_factory=list)   # [(t, eta), ...]
    audits: list = field(default_factory=list)      # [(t, rel_error), ...]
    seed: int = 0
    replica: int = 0


class _Tables:
    """Flat event tables feeding the kernel (built once per run)."""

    def __init__(self, lat: Lattice, params: ModelParams, tilt_mode: int,
                 h_static=None):
        bonds = lat.bonds()
        nb = len(bonds)
        self.n_bonds = nb
        self.bond_x = np.empty(nb, np.int64)
        self.bond_y = np.empty(nb, np.int64)
        self.bond_lo = np.empty(nb, np.int64)
        self.bond_hi = np.empty(nb, np.int64)
        self.bond_lo_b = np.zeros(nb)
        self.bond_hi_b = np.zeros(nb)
        self.bond_slice = np.full(nb, -1, np.int64)
        bm, bp = params.wall_values(lat)
        for e, (x, y, i) in enumerate(bonds):
            self.bond_x[e] = lat.site_index(x)
            self.bond_y[e] = lat.site_index(y)
            lo = lat.neighbor(x, i, -1)
            hi = lat.neighbor(y, i, +1)
            t = lat.transverse_index(x)
            self.bond_lo[e] = lat.site_index(lo) if lo is not None else -1
            self.bond_hi[e] = lat.site_index(hi) if hi is not None else -1
            if lo is None:
                self.bond_lo_b[e] = bm[t]
            if hi is None:
                self.bond_hi_b[e] = bp[t]
            if i == 1:
                self.bond_slice[e] = x[0] + lat.N - 1
        wall = lat.boundary_sites()
        nf = len(wall)
        self.flip_site = np.empty(nf, np.int64)
        self.flip_b = np.empty(nf)
        for f, x in enumerate(wall):
            self.flip_site[f] = lat.site_index(x)
            self.flip_b[f] = (bm if lat.boundary_side(x) == -1 else bp)[
                lat.transverse_index(x)]
        self.n_events = nb + nf
        self.n_slices = 2 * lat.N - 2

        # per-site dependency lists: events whose rate reads the site.
        # Bond rates read the two flanking sites always, and the two
        # endpoints when a static tilt makes the factor occupancy aware.
        deps = [set() for _ in range(lat.n_sites)]
        for e in range(nb):
            for z in (self.bond_lo[e], self.bond_hi[e]):
                if z >= 0:
                    deps[z].add(e)
            if tilt_mode == 1:
                deps[self.bond_x[e]].add(e)
                deps[self.bond_y[e]].add(e)
        for f in range(nf):
            deps[self.flip_site[f]].add(nb + f)
        self.dep_ptr = np.zeros(lat.n_sites + 1, np.int64)
        flat = []
        for z in range(lat.n_sites):
            ordered = sorted(deps[z])
            self.dep_ptr[z + 1] = self.dep_ptr[z] + len(ordered)
            flat.extend(ordered)
        self.dep_idx = np.asarray(flat, np.int64)

        # tilt factor tables (mode 1) and envelope placeholder (mode 2)
        if tilt_mode == 1:
            dh = h_static[self.bond_y] - h_static[self.bond_x]
            self.fac_pos = np.exp(dh)
            self.fac_neg = np.exp(-dh)
        else:
            self.fac_pos = np.ones(nb)
            self.fac_neg = np.ones(nb)
        self.bond_env = np.ones(nb)

        P = 1
        while P < self.n_events:
            P *= 2
        self.P = P


def total_event_rate(lat, params, eta, tables: _Tables | None = None,
                     tilt_mode: int = 0, h_site=None) -> float:
    """Fresh unspeeded total rate, recomputed from scratch (audit path)."""
    tb = tables or _Tables(lat, params, 0)
    eta = np.asarray(eta, dtype=np.uint8)
    v_lo = np.where(tb.bond_lo >= 0, eta[np.maximum(tb.bond_lo, 0)], tb.bond_lo_b)
    v_hi = np.where(tb.bond_hi >= 0, eta[np.maximum(tb.bond_hi, 0)], tb.bond_hi_b)
    rates = 1.0 + params.a * (v_lo + v_hi)
    if tilt_mode == 1:
        diff = eta[tb.bond_x].astype(float) - eta[tb.bond_y].astype(float)
        dh = h_site[tb.bond_y] - h_site[tb.bond_x]
        rates = rates * np.exp(diff * dh)
    elif tilt_mode == 2:
        rates = rates * tb.bond_env
    occ = eta[tb.flip_site].astype(float)
    flips = occ * (1.0 - tb.flip_b) + (1.0 - occ) * tb.flip_b
    return float(rates.sum() + flips.sum())


def run_ctmc(lat: Lattice, params: ModelParams, initial, T: float, seed: int,
             tilt: TiltField | None = None, probes=(), burn_in: float = 0.0,
             replica: int = 0, audit: bool = False, tilt_dt: float = 0.01,
             tilt_window: float = 0.05) -> RunResult:
    """Exact-in-law Gillespie run of the N^2-speeded chain up to time T.

    Parameters
    ----------
    initial : array_like
        Starting configuration (flat uint8).
    T : float
        Final macroscopic time.
    seed, replica : int
        Together they determine the random stream; identical inputs give
        an identical event sequence.
    tilt : TiltField, optional
        External field; must vanish at u1 = +-1.  Static fields enter
        the event rates exactly; time-dependent fields are handled by
        thinning inside windows of length `tilt_window`, with H sampled
        every `tilt_dt` and linearly interpolated in time.
    probes : sequence of float
        Macroscopic times at which to record configuration snapshots.
    burn_in : float
        Accumulators (occupation integrals, crossings) restart here.

    Returns
    -------
    RunResult
    """
    if T <= 0:
        if T < 0:
            raise ValueError("T must be nonnegative")
        eta = np.array(initial, dtype=np.uint8, copy=True)
        acc = Accumulators(np.zeros(lat.n_sites), np.zeros(2 * lat.N - 2, np.int64),
                           0.0, np.zeros(5, np.int64))
        snaps = [(0.0, eta.copy())] if 0.0 in set(float(p) for p in probes) else []
        return RunResult(lat, params, acc, eta, snaps, [], seed, replica)

    eta = np.array(initial, dtype=np.uint8, copy=True)
    if eta.shape != (lat.n_sites,) or eta.max(initial=0) > 1:
        raise ValueError("invalid initial configuration")
    if not 0.0 <= burn_in < T + 1e-15:
        raise ValueError("burn_in must lie in [0, T]")

    tilt_mode = 0
    h_site = None
    pos = None
    if tilt is not None:
        pos = site_positions(lat)
        t_check = np.linspace(0.0, T, 9) if tilt.time_dependent else (0.0,)
        tilt.check_walls(lat.d, t_grid=t_check)
        if tilt.time_dependent:
            tilt_mode = 2
        else:
            tilt_mode = 1
            h_site = tilt.values(pos)

    tb = _Tables(lat, params, tilt_mode, h_static=h_site)
    nsq = float(lat.N ** 2)
    a = float(params.a)

    probes = sorted(set(float(p) for p in probes))
    if any(p < 0 or p > T + 1e-12 for p in probes):
        raise ValueError("probes must lie in [0, T]")
    cuts = sorted(set([burn_in, T] + probes) - {0.0})

    # mode-2 efficiency: bound the envelope over short sub-windows
    if tilt_mode == 2:
        refined = []
        prev = 0.0
        for c in cuts:
            k = max(1, int(np.ceil((c - prev) / tilt_window)))
            refined.extend(prev + (c - prev) * np.arange(1, k + 1) / k)
            prev = c
        windows = refined
    else:
        windows = cuts

    tree = np.zeros(2 * tb.P)
    rng = _engine.seed_stream(seed, replica)
    occ_time = np.zeros(lat.n_sites)
    last_t = np.zeros(lat.n_sites)
    crossings = np.zeros(tb.n_slices, np.int64)
    counters = np.zeros(5, np.int64)

    snaps = []
    audits = []
    probe_set = set(probes)
    if 0.0 in probe_set:
        snaps.append((0.0, eta.copy()))

    dummy_h = np.zeros((2, 1))
    dummy_t = np.array([0.0, 1.0])
    t = 0.0
    for t_next in windows:
        if tilt_mode == 2:
            nt = max(2, int(np.ceil((t_next - t) / tilt_dt)) + 1)
            t_samp = np.linspace(t, t_next, nt)
            h_samp = np.empty((nt, lat.n_sites))
            for k in range(nt):
                h_samp[k] = tilt.values(pos, t_samp[k])
            dh = np.abs(h_samp[:, tb.bond_y] - h_samp[:, tb.bond_x]).max(axis=0)
            tb.bond_env = np.exp(dh)
        else:
            t_samp, h_samp = dummy_t, dummy_h
        _engine.fill_tree(tree, tb.P, tb.n_events, tb.n_bonds, eta, a,
                          tb.bond_x, tb.bond_y, tb.bond_lo, tb.bond_hi,
                          tb.bond_lo_b, tb.bond_hi_b, tb.flip_site, tb.flip_b,
                          tilt_mode, tb.fac_pos, tb.fac_neg, tb.bond_env)
        _engine.run_window(eta, t, t_next, nsq, a,
                           tb.bond_x, tb.bond_y, tb.bond_lo, tb.bond_hi,
                           tb.bond_lo_b, tb.bond_hi_b, tb.bond_slice,
                           tb.flip_site, tb.flip_b, tb.dep_ptr, tb.dep_idx,
                           tilt_mode, tb.fac_pos, tb.fac_neg, tb.bond_env,
                           h_samp, t_samp, tree, tb.P, rng,
                           occ_time, last_t, crossings, counters)
        t = t_next
        if audit:
            fresh = total_event_rate(lat, params, eta, tb, tilt_mode, h_site)
            audits.append((t, abs(fresh - tree[1]) / fresh))
        if abs(t - burn_in) < 1e-12 and burn_in > 0:
            occ_time[:] = 0.0
            crossings[:] = 0
        if any(abs(t - p) < 1e-12 for p in probe_set):
            snaps.append((t, eta.copy()))

    acc = Accumulators(occ_time, crossings, T - burn_in, counters)
    return RunResult(lat, params, acc, eta, snaps, audits, seed, replica)


def _n_workers() -> int:
    env = os.environ.get("BDEX_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def run_replicas(lat, params, initial, T, seed, n_replicas, **kwargs):
    """Fan independent replicas out over worker threads.

    ``initial`` is a fixed configuration or a callable replica -> eta.
    Returns the list of per-replica RunResults (index order, so the
    merge order is deterministic).
    """
    def make(r):
        eta0 = initial(r) if callable(initial) else initial
        return run_ctmc(lat, params, eta0, T, seed, replica=r, **kwargs)

    with ThreadPoolExecutor(max_workers=_n_workers()) as ex:
        return list(ex.map(make, range(n_replicas)))


# -- empirical objects ---------------------------------------------------


@dataclass
class EmpiricalMeasure:
    """Atoms of mass N^{-d} at the occupied macroscopic positions."""

    positions: np.ndarray   # (n_atoms, d)
    weight: float           # N^{-d}

    @property
    def total_mass(self) -> float:
        return self.weight * self.positions.shape[0]


def empirical_measure(lat: Lattice, eta) -> EmpiricalMeasure:
    eta = np.asarray(eta, dtype=np.uint8)
    pos = site_positions(lat)[eta.astype(bool)]
    return EmpiricalMeasure(pos, float(lat.N) ** (-lat.d))


def block_average_field(lat: Lattice, values, l: int) -> np.ndarray:
    """Mean of ``values`` over the box of radius l around every site.

    The box is the sup-norm ball intersected with the slab: clipped at
    the walls in direction 1, wrapped transversally.  Returns a flat
    per-site array; works on occupancies or any per-site weights.
    """
    if l < 0:
        raise ValueError("block radius must be >= 0")
    shape = (lat.n_layers,) + (lat.N,) * (lat.d - 1)
    arr = np.asarray(values, dtype=float).reshape(shape)
    cnt = np.ones(shape)
    for axis in range(1, lat.d):
        w = min(2 * l + 1, lat.N)
        arr = sum(np.roll(arr, o, axis=axis) for o in range(-l, l + 1)) if w < lat.N \
            else np.repeat(arr.sum(axis=axis, keepdims=True), lat.N, axis=axis)
        cnt = cnt * w
    # direction 1: clipped window sum via padded cumulative sums
    c = np.concatenate([np.zeros((1,) + arr.shape[1:]), np.cumsum(arr, axis=0)], axis=0)
    n1 = lat.n_layers
    j = np.arange(n1)
    hi = np.minimum(j + l, n1 - 1)
    lo = np.maximum(j - l, 0)
    arr = c[hi + 1] - c[lo]
    cnt = cnt * (hi - lo + 1).reshape((n1,) + (1,) * (lat.d - 1))
    return (arr / cnt).reshape(lat.n_sites)


def block_average(lat: Lattice, eta, x, l: int) -> float:
    """Empirical mean density over the box of radius l around site x."""
    return float(block_average_field(lat, np.asarray(eta, dtype=float), l)[
        lat.site_index(x)])


class SmoothedDensity:
    """Box-smoothed density of an empirical measure.

    density(u) = pi(Lambda_eps(u)) / (U_eps |Lambda_eps(u)|) with
    Lambda_eps(u) the sup-norm eps-box around u clipped to the domain
    (walls cut it in direction 1, the torus wraps transversally) and
    U_eps = 1 + eps, a normalising constant above 1 so the density stays
    below 1 once boxes hold enough sites.
    """

    def __init__(self, lat: Lattice, weights, eps: float):
        if eps <= 0:
            raise ValueError("smoothing width must be positive")
        self.lat = lat
        self.eps = float(eps)
        self.u_eps = 1.0 + self.eps
        shape = (lat.n_layers,) + (lat.N,) * (lat.d - 1)
        self._w = np.asarray(weights, dtype=float).reshape(shape)
        self._mass_scale = float(lat.N) ** (-lat.d)
        # site coordinate values along each axis
        self._ax1 = np.arange(-lat.N + 1, lat.N) / lat.N
        self._axt = np.arange(lat.N) / lat.N

    def _axis_indicator(self, queries, axis_coords, wrap: bool) -> np.ndarray:
        q = np.asarray(queries, dtype=float).reshape(-1, 1)
        x = axis_coords.reshape(1, -1)
        if wrap:
            dist = np.abs(q - x)
            dist = np.minimum(dist, 1.0 - dist)
        else:
            dist = np.abs(q - x)
        return (dist <= self.eps + 1e-12).astype(float)

    def on_axes(self, u1, *trans):
        """Density on the product grid u1 x trans[0] x ... (full arrays)."""
        if len(trans) != self.lat.d - 1:
            raise ValueError("need one transverse axis per transverse dimension")
        count = self._w
        mats = [self._axis_indicator(u1, self._ax1, wrap=False)]
        mats += [self._axis_indicator(tr, self._axt, wrap=True) for tr in trans]
        for axis, m in enumerate(mats):
            count = np.tensordot(m, count, axes=([1], [axis]))
            count = np.moveaxis(count, 0, axis)
        vol = self._box_volume(u1, *trans)
        return self._mass_scale * count / (self.u_eps * vol)

    def _box_volume(self, u1, *trans):
        u1 = np.asarray(u1, dtype=float)
        len1 = np.minimum(1.0, u1 + self.eps) - np.maximum(-1.0, u1 - self.eps)
        vol = len1.reshape((-1,) + (1,) * (self.lat.d - 1))
        width_t = min(2.0 * self.eps, 1.0)
        for k, tr in enumerate(trans):
            n = np.asarray(tr).size
            shape = [1] * (self.lat.d)
            shape[k + 1] = n
            vol = vol * np.full(shape, width_t)
        return vol

    def at(self, points) -> np.ndarray:
        """Density at an arbitrary (n, d) array of points."""
        points = np.asarray(points, dtype=float)
        out = np.empty(points.shape[0])
        for i, p in enumerate(points):
            m1 = self._axis_indicator(p[:1], self._ax1, wrap=False)[0]
            count = np.tensordot(m1, self._w, axes=([0], [0]))
            for k in range(1, self.lat.d):
                mt = self._axis_indicator(p[k:k + 1], self._axt, wrap=True)[0]
                count = np.tensordot(mt, count, axes=([0], [0]))
            vol = float(self._box_volume(p[:1], *[p[k:k + 1] for k in range(1, self.lat.d)]).ravel()[0])
            out[i] = self._mass_scale * float(count) / (self.u_eps * vol)
        return out


def smooth_measure(lat: Lattice, weights, eps: float) -> SmoothedDensity:
    """Smooth per-site weights (an occupancy, or any time average).

    The weights are the atom masses in units of N^{-d}: pass a
    configuration to smooth its empirical measure.
    """
    return SmoothedDensity(lat, weights, eps)


# -- stationary current --------------------------------------------------


def slice_current_by_layer(lat: Lattice, acc: Accumulators, x1: int) -> float:
    """Scaled net current across the bond layer (x1, x1 + 1).

    Net signed crossings per unit macroscopic time, times 2N/N^{d-1};
    the N^2 divisor undoes the clock speedup so the value estimates the
    unspeeded expected current summed over the slice.
    """
    if acc.duration <= 0:
        raise ValueError("zero averaging duration")
    if not -lat.N + 1 <= x1 <= lat.N - 2:
        raise ValueError("no bond layer at x1 = %d" % x1)
    s = x1 + lat.N - 1
    scale = 2.0 * lat.N / lat.N ** (lat.d - 1)
    return scale * acc.crossings[s] / (lat.N ** 2 * acc.duration)


def slice_current_estimator(lat: Lattice, acc: Accumulators, u: float) -> float:
    """Current estimate at macroscopic height u, kept away from the walls.

    Uses the bond layer ([uN], [uN] + 1) and requires |[uN]| <= N - 3 so
    both bond endpoints sit strictly inside the slab.
    """
    x1 = int(np.floor(u * lat.N))
    if abs(x1) > lat.N - 3:
        raise ValueError("slice too close to the walls; need |[uN]| <= N-3")
    return slice_current_by_layer(lat, acc, x1)


def slice_current_profile(lat: Lattice, acc: Accumulators):
    """(x1 layers, estimates) for every bond layer of the slab."""
    xs = np.arange(-lat.N + 1, lat.N - 1)
    vals = np.array([slice_current_by_layer(lat, acc, x1) for x1 in xs])
    return xs, vals


# -- local equilibrium ---------------------------------------------------


def _shift(arr, axis: int, step: int, lat: Lattice):
    """eta(x + step e_axis) as a field; None mask where it leaves the slab."""
    if axis == 0:
        out = np.full(arr.shape, np.nan)
        if step > 0:
            out[:-step or None] = arr[step:]
        elif step < 0:
            out[-step:] = arr[:step]
        else:
            out = arr.copy()
        return out
    return np.roll(arr, -step, axis=axis)


def _cylinder_field(lat: Lattice, params: ModelParams, eta, kind: str, i: int):
    """tau_x Psi(eta) for Psi in {h_i, g_i, eta(0)}; NaN off the support."""
    shape = (lat.n_layers,) + (lat.N,) * (lat.d - 1)
    arr = np.asarray(eta, dtype=float).reshape(shape)
    a = params.a
    ax = i - 1
    if kind == "eta":
        return arr.reshape(lat.n_sites)
    em = _shift(arr, ax, -1, lat)
    ep = _shift(arr, ax, +1, lat)
    if kind == "h":
        out = arr + a * (arr * (em + ep) - em * ep)
    elif kind == "g":
        e2 = _shift(arr, ax, +2, lat)
        rate = 1.0 + a * (em + e2)
        out = rate * (ep - arr) ** 2
    else:
        raise ValueError("kind must be 'h', 'g', or 'eta'")
    return out.reshape(lat.n_sites)


def equilibrium_mean(kind: str, alpha, a: float):
    """Expectation of the cylinder function under product Bernoulli(alpha).

    h: alpha + a alpha^2; g: 2 alpha (1-alpha)(1+2 a alpha); eta: alpha.
    """
    alpha = np.asarray(alpha, dtype=float)
    if kind == "h":
        return alpha + a * alpha ** 2
    if kind == "g":
        return 2.0 * alpha * (1.0 - alpha) * (1.0 + 2.0 * a * alpha)
    if kind == "eta":
        return alpha
    raise ValueError("kind must be 'h', 'g', or 'eta'")


def local_equilibrium_residual(lat: Lattice, params: ModelParams, snapshots,
                               G, kind: str, eps: float, i: int = 1) -> float:
    """Time integral of the block-replacement residual

        N^{-d} sum_x G(t, x/N) [ tau_x Psi(eta_t) - Psi_eq(eta^{eps N}(x)) ]

    over the snapshot times (trapezoidal in t).  Psi is the direction-i
    cylinder function picked by ``kind`` ('h', 'g', or 'eta'); sites
    whose translated support leaves the slab are skipped.
    """
    l = int(np.floor(eps * lat.N))
    if l < 1:
        raise ValueError("need eps * N >= 1")
    pos = site_positions(lat)
    times = np.array([t for t, _ in snapshots])
    vals = np.empty(times.size)
    for k, (t, eta) in enumerate(snapshots):
        tau = _cylinder_field(lat, params, eta, kind, i)
        blocks = block_average_field(lat, eta, l)
        diff = tau - equilibrium_mean(kind, blocks, params.a)
        g = np.asarray(G(t, pos), dtype=float)
        ok = ~np.isnan(diff)
        vals[k] = float((g[ok] * diff[ok]).sum()) / lat.N ** lat.d
    if times.size == 1:
        return float(vals[0])
    return float(_trapz(vals, times))


# -- initial conditions --------------------------------------------------


def sample_bernoulli_profile(lat: Lattice, rho, seed: int) -> np.ndarray:
    """Independent occupancies with P[eta(x) = 1] = rho(x/N).

    ``rho`` is a callable on (n, d) position arrays, a scalar, or a
    per-site array; values must lie in [0, 1].
    """
    if callable(rho):
        p = np.asarray(rho(site_positions(lat)), dtype=float).reshape(lat.n_sites)
    else:
        p = np.broadcast_to(np.asarray(rho, dtype=float), (lat.n_sites,)).copy()
    if p.min() < 0 or p.max() > 1:
        raise ValueError("profile must take values in [0, 1]")
    rng = np.random.default_rng(seed)
    return (rng.random(lat.n_sites) < p).astype(np.uint8)


# -- dumps ---------------------------------------------------------------


def dump_density_csv(path, lat: Lattice, acc: Accumulators) -> None:
    """CSV of per-site time-averaged densities (site_index, coords..., value)."""
    dens = acc.density()
    cols = ["site_index"] + [f"x{k}" for k in range(1, lat.d + 1)] + ["time_avg_density"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for idx in range(lat.n_sites):
            coords = lat.site_coords(idx)
            fh.write(",".join([str(idx)] + [str(c) for c in coords] + [repr(float(dens[idx]))]) + "\n")


def dump_current_csv(path, lat: Lattice, acc: Accumulators) -> None:
    """CSV of scaled current estimates per admissible slice."""
    xs, vals = slice_current_profile(lat, acc)
    with open(path, "w") as fh:
        fh.write("slice,scaled_current\n")
        for x1, v in zip(xs, vals):
            fh.write(f"{x1},{float(v)!r}\n")


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    return None


def append_run_log(path, seed, params: ModelParams, lat: Lattice, extra=None) -> None:
    """Append one JSON line describing a run (seed, params, code version)."""
    from . import __version__

    entry = {
        "seed": int(seed),
        "d": lat.d,
        "N": lat.N,
        "a": params.a,
        "b_minus": params.b_minus.to_dict(),
        "b_plus": params.b_plus.to_dict(),
        "version": __version__,
        "git": _git_describe(),
        "walltime": _time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        entry.update(extra)
    with open(path, "a") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")
