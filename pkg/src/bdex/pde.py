"""Finite-difference solvers for the macroscopic density evolution.

The bulk equation is the nonlinear diffusion d_t rho = Lap phi(rho) with
phi(r) = r(1 + a r), posed on the slab [-1, 1] x T^{d-1} with Dirichlet
values on the two walls and periodic transverse directions.  The
controlled variant adds the drift -div(sigma(rho) grad H) produced by an
external field H that vanishes on the walls.

Grids keep one layer of wall nodes at u1 = -1 and u1 = +1 holding the
boundary data; all stencils are the standard second-order ones on a
uniform (possibly anisotropic) mesh.  `Grid.matched` places the interior
nodes exactly on the particle positions x/N, which lets fields be
compared per node with no interpolation.

Time stepping is explicit Euler under a diffusive CFL bound, with a
post-step clamp to [0, 1] whose activations are counted and reported
(a healthy run never clamps).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "phi", "phi_prime", "phi_inverse", "chi", "sigma", "mobility_floor",
    "Grid", "Trajectory",
    "cfl_time_step", "solve_parabolic", "solve_controlled",
    "solve_hydrostatic", "l1_distance",
    "trajectory_to_csv", "trajectory_from_csv",
]


def phi(rho, a: float):
    """Bulk diffusion nonlinearity r (1 + a r)."""
    rho = np.asarray(rho, dtype=float)
    return rho * (1.0 + a * rho)


def phi_prime(rho, a: float):
    rho = np.asarray(rho, dtype=float)
    return 1.0 + 2.0 * a * rho


def phi_inverse(psi, a: float):
    """Inverse of phi on [0, 1]; the root with 1 + 2 a rho > 0.

    Written as 2 psi / (1 + sqrt(1 + 4 a psi)), which stays accurate
    as a -> 0 where the textbook quadratic formula cancels.
    """
    psi = np.asarray(psi, dtype=float)
    disc = 1.0 + 4.0 * a * psi
    disc = np.maximum(disc, 0.0)
    return 2.0 * psi / (1.0 + np.sqrt(disc))


def chi(rho):
    """Static compressibility r (1 - r)."""
    rho = np.asarray(rho, dtype=float)
    return rho * (1.0 - rho)


def sigma(rho, a: float):
    """Mobility 2 chi(r) phi'(r)."""
    return 2.0 * chi(rho) * phi_prime(rho, a)


mobility_floor = 1e-10


class Grid:
    """Uniform slab grid: M1 interior layers plus walls, Mp transverse.

    Direction-1 nodes sit at u1 = -1 + j h1 for j = 0 .. M1+1 with
    h1 = 2/(M1+1); j = 0 and j = M1+1 are the wall layers.  Transverse
    nodes sit at k/Mp, k = 0 .. Mp-1, periodic.  Full fields carry the
    wall layers, shape (M1+2, Mp, ..., Mp).
    """

    def __init__(self, d: int, M1: int, Mp: int = 1):
        if d < 1:
            raise ValueError("need d >= 1")
        if M1 < 1 or (d > 1 and Mp < 1):
            raise ValueError("need at least one interior node per direction")
        self.d = d
        self.M1 = M1
        self.Mp = Mp if d > 1 else 1
        self.h1 = 2.0 / (M1 + 1)
        self.hp = 1.0 / Mp if d > 1 else 1.0
        self.shape_full = (M1 + 2,) + (Mp,) * (d - 1)
        self.shape_interior = (M1,) + (Mp,) * (d - 1)
        self.node_weight = self.h1 * self.hp ** (d - 1)

    @classmethod
    def matched(cls, lat) -> "Grid":
        """Grid whose interior nodes are exactly the positions x/N."""
        return cls(lat.d, 2 * lat.N - 1, lat.N)

    def axis1(self) -> np.ndarray:
        """Direction-1 node coordinates including the walls."""
        return -1.0 + self.h1 * np.arange(self.M1 + 2)

    def axis_t(self) -> np.ndarray:
        return self.hp * np.arange(self.Mp)

    def points_full(self) -> np.ndarray:
        """(n_nodes, d) coordinates of every node, C order of shape_full."""
        axes = [self.axis1()] + [self.axis_t()] * (self.d - 1)
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    def evaluate(self, fn, t=None) -> np.ndarray:
        """Sample a callable on all nodes; returns a full-shape array."""
        pts = self.points_full()
        vals = fn(pts) if t is None else fn(t, pts)
        return np.asarray(vals, dtype=float).reshape(self.shape_full)

    def boundary_array(self, bc) -> np.ndarray:
        """Normalise one wall's data to an array on the transverse grid.

        Accepts a scalar, an array of transverse shape, or a callable on
        (n, d-1) transverse coordinates (a BoundaryProfile works).
        """
        tshape = (self.Mp,) * (self.d - 1)
        if callable(bc):
            if self.d == 1:
                vals = np.asarray(bc(np.zeros((1, 0))), dtype=float).reshape(())
            else:
                axes = [self.axis_t()] * (self.d - 1)
                mesh = np.meshgrid(*axes, indexing="ij")
                pts = np.stack([m.reshape(-1) for m in mesh], axis=-1)
                vals = np.asarray(bc(pts), dtype=float).reshape(tshape)
        else:
            vals = np.broadcast_to(np.asarray(bc, dtype=float), tshape).copy()
        if vals.min() < 0.0 or vals.max() > 1.0:
            raise ValueError("boundary densities must lie in [0, 1]")
        return vals

    def __eq__(self, other):
        return (isinstance(other, Grid)
                and (self.d, self.M1, self.Mp) == (other.d, other.M1, other.Mp))

    def __repr__(self):
        return f"Grid(d={self.d}, M1={self.M1}, Mp={self.Mp})"


def laplacian_interior(grid: Grid, f_full: np.ndarray) -> np.ndarray:
    """Second-order Laplacian at the interior nodes of a full field."""
    lap = (f_full[2:] - 2.0 * f_full[1:-1] + f_full[:-2]) / grid.h1 ** 2
    fi = f_full[1:-1]
    for ax in range(1, grid.d):
        lap = lap + (np.roll(fi, 1, axis=ax) - 2.0 * fi
                     + np.roll(fi, -1, axis=ax)) / grid.hp ** 2
    return lap


def face_sigma_1(grid: Grid, rho_full: np.ndarray, a: float) -> np.ndarray:
    """Arithmetic-mean mobility on the M1+1 direction-1 faces."""
    s = sigma(rho_full, a)
    return 0.5 * (s[1:] + s[:-1])


def face_sigma_t(grid: Grid, rho_full: np.ndarray, a: float, ax: int) -> np.ndarray:
    """Mobility on transverse faces (between node k and k+1, wrapped)."""
    s = sigma(rho_full[1:-1], a)
    return 0.5 * (s + np.roll(s, -1, axis=ax))


def div_sigma_grad(grid: Grid, rho_full: np.ndarray, H_full: np.ndarray,
                   a: float) -> np.ndarray:
    """div(sigma(rho) grad H) at the interior nodes.

    Conservative form: face-centred mobilities times face gradients,
    differenced back to the nodes.  Wall faces use the wall layers of
    both fields, so a field with H = 0 at the walls still drives a flux
    through the first face.
    """
    flux1 = face_sigma_1(grid, rho_full, a) * (H_full[1:] - H_full[:-1]) / grid.h1
    out = (flux1[1:] - flux1[:-1]) / grid.h1
    Hi = H_full[1:-1]
    for ax in range(1, grid.d):
        fl = face_sigma_t(grid, rho_full, a, ax) * (
            np.roll(Hi, -1, axis=ax) - Hi) / grid.hp
        out = out + (fl - np.roll(fl, 1, axis=ax)) / grid.hp
    return out


def cfl_time_step(grid: Grid, a: float, safety: float = 0.4,
                  drift_bound: float = 0.0) -> float:
    """Stable explicit step: diffusion via max phi', plus optional drift.

    drift_bound should dominate max |sigma'(rho)| |grad H| when a control
    field is present; zero for the plain equation.
    """
    dmax = max(1.0, phi_prime(1.0, a), phi_prime(0.0, a))
    hmin = min(grid.h1, grid.hp) if grid.d > 1 else grid.h1
    dt = safety * hmin ** 2 / (2.0 * grid.d * dmax)
    if drift_bound > 0.0:
        dt = min(dt, safety * hmin / (2.0 * grid.d * drift_bound))
    return dt


@dataclass
class Trajectory:
    """Stored density path: times[k] paired with full-shape fields[k]."""

    grid: Grid
    times: np.ndarray            # (K+1,)
    fields: np.ndarray           # (K+1, *shape_full)
    dt: float                    # solver step actually used
    clamp_count: int = 0         # post-step clamps to [0, 1]

    def at_time(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 + 1e-6 * max(1.0, abs(t)):
            raise KeyError(f"time {t} not stored (nearest {self.times[k]})")
        return self.fields[k]


def _full_initial(grid: Grid, rho0, bm: np.ndarray, bp: np.ndarray) -> np.ndarray:
    if callable(rho0):
        full = grid.evaluate(rho0)
    else:
        rho0 = np.asarray(rho0, dtype=float)
        if rho0.ndim == 0:
            full = np.full(grid.shape_full, float(rho0))
        elif rho0.shape == grid.shape_full:
            full = rho0.copy()
        elif rho0.shape == grid.shape_interior:
            full = np.empty(grid.shape_full)
            full[1:-1] = rho0
        else:
            raise ValueError("initial data has wrong shape")
    full[0] = bm
    full[-1] = bp
    if full.min() < -1e-12 or full.max() > 1.0 + 1e-12:
        raise ValueError("initial density escapes [0, 1]")
    return np.clip(full, 0.0, 1.0)


def _march(grid, a, bm, bp, rho0, T, H_fn, dt, store_every, safety, drift_bound):
    if dt is None:
        dt = cfl_time_step(grid, a, safety, drift_bound)
    n_steps = max(1, int(np.ceil(T / dt - 1e-12)))
    dt = T / n_steps
    rho = _full_initial(grid, rho0, bm, bp)

    h_eval = None
    pts = None
    if H_fn is not None:
        h_eval = H_fn.values if hasattr(H_fn, "values") else H_fn
        pts = grid.points_full()
    static_H = None
    if h_eval is not None and not getattr(H_fn, "time_dependent", False):
        static_H = grid.evaluate(h_eval)

    times = [0.0]
    fields = [rho.copy()]
    clamps = 0
    for k in range(n_steps):
        rhs = laplacian_interior(grid, phi(rho, a))
        if h_eval is not None:
            if static_H is not None:
                Hf = static_H
            else:
                t_mid = (k + 0.5) * dt
                Hf = np.asarray(h_eval(t_mid, pts) if not hasattr(H_fn, "values")
                                else h_eval(pts, t_mid),
                                dtype=float).reshape(grid.shape_full)
            rhs = rhs - div_sigma_grad(grid, rho, Hf, a)
        new = rho[1:-1] + dt * rhs
        lo, hi = new.min(), new.max()
        if lo < 0.0 or hi > 1.0:
            clamps += int(np.count_nonzero((new < 0.0) | (new > 1.0)))
            new = np.clip(new, 0.0, 1.0)
        rho[1:-1] = new
        if (k + 1) % store_every == 0 or k + 1 == n_steps:
            times.append((k + 1) * dt)
            fields.append(rho.copy())
    return Trajectory(grid, np.array(times), np.stack(fields), dt, clamps)


def solve_parabolic(grid: Grid, a: float, bc_minus, bc_plus, rho0, T: float,
                    dt: float | None = None, store_every: int = 1,
                    safety: float = 0.4) -> Trajectory:
    """Explicit solution of d_t rho = Lap phi(rho) up to time T.

    bc_minus / bc_plus give the wall densities (scalar, transverse array,
    or callable on transverse coordinates); they may touch 0 and 1.
    Every store_every-th step is stored (the final state always is).
    """
    bm = grid.boundary_array(bc_minus)
    bp = grid.boundary_array(bc_plus)
    return _march(grid, a, bm, bp, rho0, T, None, dt, store_every, safety, 0.0)


def solve_controlled(grid: Grid, a: float, bc_minus, bc_plus, rho0, T: float,
                     H, dt: float | None = None, store_every: int = 1,
                     safety: float = 0.4, drift_bound: float = 0.0) -> Trajectory:
    """Controlled equation d_t rho = Lap phi(rho) - div(sigma(rho) grad H).

    H is a callable on (n, d) points (static), a callable values(points,
    t) object such as a TiltField, or any object with time_dependent set.
    With H identically zero the marching is bit-identical to
    solve_parabolic.
    """
    bm = grid.boundary_array(bc_minus)
    bp = grid.boundary_array(bc_plus)
    return _march(grid, a, bm, bp, rho0, T, H, dt, store_every, safety, drift_bound)


def solve_hydrostatic(grid: Grid, a: float, bc_minus, bc_plus) -> np.ndarray:
    """Stationary profile: solve Lap psi = 0, then rho = phi^{-1}(psi).

    psi = phi(rho) is harmonic with Dirichlet data phi(b) on the walls,
    so the stationary problem is linear regardless of a.  Returns the
    full-shape density field, walls holding the boundary data.
    """
    bm = grid.boundary_array(bc_minus)
    bp = grid.boundary_array(bc_plus)
    M1, Mp, d = grid.M1, grid.Mp, grid.d
    nt = Mp ** (d - 1)
    n = M1 * nt

    def idx(j, kflat):
        return (j - 1) * nt + kflat

    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    inv_h1 = 1.0 / grid.h1 ** 2
    inv_hp = 1.0 / grid.hp ** 2
    psi_m = phi(bm, a).reshape(-1)
    psi_p = phi(bp, a).reshape(-1)
    tshape = (Mp,) * (d - 1)
    for j in range(1, M1 + 1):
        for kflat in range(nt):
            row = idx(j, kflat)
            diag = -2.0 * inv_h1 - 2.0 * (d - 1) * inv_hp
            rows.append(row); cols.append(row); vals.append(diag)
            for j2, wall_val in ((j - 1, psi_m), (j + 1, psi_p)):
                if j2 == 0:
                    rhs[row] -= inv_h1 * wall_val[kflat]
                elif j2 == M1 + 1:
                    rhs[row] -= inv_h1 * wall_val[kflat]
                else:
                    rows.append(row); cols.append(idx(j2, kflat)); vals.append(inv_h1)
            if d > 1:
                k = np.unravel_index(kflat, tshape)
                for ax in range(d - 1):
                    for step in (-1, 1):
                        k2 = list(k)
                        k2[ax] = (k2[ax] + step) % Mp
                        rows.append(row)
                        cols.append(idx(j, int(np.ravel_multi_index(tuple(k2), tshape))))
                        vals.append(inv_hp)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    psi = spla.spsolve(A, rhs).reshape(grid.shape_interior)
    full = np.empty(grid.shape_full)
    full[1:-1] = phi_inverse(psi, a)
    full[0] = bm
    full[-1] = bp
    return np.clip(full, 0.0, 1.0)


def l1_distance(grid: Grid, f_full, g_full) -> float:
    """L1 distance between two full fields over the interior nodes."""
    f = np.asarray(f_full, dtype=float)[1:-1]
    g = np.asarray(g_full, dtype=float)[1:-1]
    return float(np.abs(f - g).sum() * grid.node_weight)


# -- trajectory serialisation ---------------------------------------------


def trajectory_to_csv(traj: Trajectory, directory) -> None:
    """One CSV per stored time plus an index file, under `directory`."""
    import os

    os.makedirs(directory, exist_ok=True)
    g = traj.grid
    with open(os.path.join(directory, "index.csv"), "w") as fh:
        fh.write("k,time,file\n")
        for k, t in enumerate(traj.times):
            fh.write(f"{k},{float(t)!r},field_{k:05d}.csv\n")
    with open(os.path.join(directory, "grid.csv"), "w") as fh:
        fh.write("d,M1,Mp,dt,clamp_count\n")
        fh.write(f"{g.d},{g.M1},{g.Mp},{float(traj.dt)!r},{traj.clamp_count}\n")
    pts = traj.grid.points_full()
    for k in range(traj.times.size):
        vals = traj.fields[k].reshape(-1)
        with open(os.path.join(directory, f"field_{k:05d}.csv"), "w") as fh:
            fh.write(",".join(f"u{i+1}" for i in range(g.d)) + ",density\n")
            for p, v in zip(pts, vals):
                fh.write(",".join(repr(float(c)) for c in p) + f",{float(v)!r}\n")


def trajectory_from_csv(directory) -> Trajectory:
    import csv
    import os

    with open(os.path.join(directory, "grid.csv")) as fh:
        rd = csv.DictReader(fh)
        meta = next(iter(rd))
    grid = Grid(int(meta["d"]), int(meta["M1"]), int(meta["Mp"]))
    with open(os.path.join(directory, "index.csv")) as fh:
        entries = list(csv.DictReader(fh))
    times = np.array([float(e["time"]) for e in entries])
    fields = np.empty((len(entries),) + grid.shape_full)
    for k, e in enumerate(entries):
        with open(os.path.join(directory, e["file"])) as fh:
            vals = [float(row["density"]) for row in csv.DictReader(fh)]
        fields[k] = np.asarray(vals).reshape(grid.shape_full)
    return Trajectory(grid, times, fields, float(meta["dt"]), int(meta["clamp_count"]))
