"""Discrete cylinder geometry, configurations, and exact jump rates.

The model lives on a slab of Z^d that is open in direction 1 and periodic
in the remaining d-1 directions: sites are x = (x1, ..., xd) with
x1 in {-N+1, ..., N-1} and xk in {0, ..., N-1} (mod N) for k >= 2.
Each site holds at most one particle (exclusion rule).  Particles hop to
nearest-neighbour empty sites; the two outermost layers x1 = -(N-1) and
x1 = N-1 are additionally coupled to reservoirs that create and destroy
particles so the local density tracks prescribed wall profiles
b(-1, .) and b(+1, .).

Bulk exchange across the bond (x, x + e_i) occurs at rate

    r(x, x + e_i) = 1 + a * (eta(x - e_i) + eta(x + 2 e_i)),   a > -1/2,

and when one of the two flanking sites falls outside the slab (possible
only for i = 1 at the extreme bonds) its occupation variable is replaced
by the reservoir density on that side evaluated at the transverse
position of the bond.  Reservoir flips at a wall site x run at rate
eta(x) (1 - b) + (1 - eta(x)) b, which makes Bernoulli(b) reversible for
the flip dynamics at that site.

Configurations are flat ``numpy`` ``uint8`` arrays in a fixed site order:
direction 1 varies slowest, transverse coordinates are row-major.  That
ordering is part of the snapshot file format and of the oracle's state
indexing, so it must never change.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Lattice",
    "BoundaryProfile",
    "ModelParams",
    "bulk_jump_rate",
    "boundary_flip_rate",
    "apply_exchange",
    "apply_flip",
    "current_terms",
    "instantaneous_current",
    "enumerate_transitions",
    "write_snapshot",
    "read_snapshot",
]


class Lattice:
    """Geometry of the discrete cylinder.

    Parameters
    ----------
    d : int
        Spatial dimension, at least 1.  (d = 1 has no transverse torus;
        it is supported as a cheap testing geometry.)
    N : int
        Half-width; the slab spans x1 = -N+1 .. N-1, so 2N-1 layers.
    """

    def __init__(self, d: int, N: int):
        if d < 1:
            raise ValueError("dimension must be >= 1")
        if N < 2:
            raise ValueError("half-width N must be >= 2")
        self.d = int(d)
        self.N = int(N)
        self.n_layers = 2 * N - 1
        self.n_trans = N ** (d - 1)
        self.n_sites = self.n_layers * self.n_trans
        # transverse strides for row-major raveling of (x2, ..., xd)
        self._tstrides = tuple(N ** (d - 1 - k) for k in range(1, d))

    # -- indexing ------------------------------------------------------

    def site_index(self, x) -> int:
        """Flat index of site x = (x1, x2, ..., xd)."""
        x = tuple(int(c) for c in x)
        if len(x) != self.d:
            raise ValueError("coordinate arity mismatch")
        if not (-self.N + 1 <= x[0] <= self.N - 1):
            raise ValueError("x1 outside the slab")
        t = 0
        for c, s in zip(x[1:], self._tstrides):
            t += (c % self.N) * s
        return (x[0] + self.N - 1) * self.n_trans + t

    def site_coords(self, idx: int) -> tuple:
        """Inverse of :meth:`site_index`."""
        layer, t = divmod(int(idx), self.n_trans)
        coords = [layer - (self.N - 1)]
        for s in self._tstrides:
            c, t = divmod(t, s)
            coords.append(c)
        return tuple(coords)

    def contains(self, x) -> bool:
        """Whether x lies on the cylinder (transverse wrap applied)."""
        return len(x) == self.d and -self.N + 1 <= x[0] <= self.N - 1

    def transverse_index(self, x) -> int:
        """Row-major rank of the transverse part of x, in [0, n_trans)."""
        t = 0
        for c, s in zip(x[1:], self._tstrides):
            t += (int(c) % self.N) * s
        return t

    def neighbor(self, x, i: int, sign: int):
        """Site x + sign*e_i, or None if it leaves the slab (i = 1 only)."""
        if not 1 <= i <= self.d:
            raise ValueError("direction out of range")
        x = tuple(int(c) for c in x)
        if i == 1:
            x1 = x[0] + sign
            if abs(x1) > self.N - 1:
                return None
            return (x1,) + x[1:]
        j = i - 1
        return x[:j] + ((x[j] + sign) % self.N,) + x[j + 1:]

    def bond_direction(self, x, y):
        """Return (i, sign) with y = x + sign*e_i, or None if not neighbours."""
        for i in range(1, self.d + 1):
            for sign in (+1, -1):
                if self.neighbor(x, i, sign) == tuple(int(c) for c in y):
                    return i, sign
        return None

    # -- site sets -----------------------------------------------------

    def sites(self):
        """All site coordinate tuples in flat-index order."""
        return [self.site_coords(i) for i in range(self.n_sites)]

    def boundary_side(self, x):
        """-1 / +1 for the left / right wall layer, None for bulk sites."""
        if x[0] == -(self.N - 1):
            return -1
        if x[0] == self.N - 1:
            return +1
        return None

    def boundary_sites(self):
        """Wall sites, left layer first, each layer in transverse order."""
        out = []
        for x1 in (-(self.N - 1), self.N - 1):
            for t in range(self.n_trans):
                out.append(self.site_coords((x1 + self.N - 1) * self.n_trans + t))
        return out

    def bonds(self):
        """Every oriented bond (x, y, i) with y = x + e_i, each listed once.

        Direction-1 bonds stop at the walls; transverse directions wrap,
        so a 2-site ring carries two distinct bonds between the same pair
        (both contribute to the generator sum).
        """
        out = []
        for idx in range(self.n_sites):
            x = self.site_coords(idx)
            for i in range(1, self.d + 1):
                y = self.neighbor(x, i, +1)
                if y is not None:
                    out.append((x, y, i))
        return out

    def transverse_positions(self) -> np.ndarray:
        """Macroscopic transverse coordinates x_check / N, shape (n_trans, d-1)."""
        pos = np.empty((self.n_trans, self.d - 1))
        for t in range(self.n_trans):
            coords = self.site_coords(t)  # layer 0 shares transverse layout
            pos[t] = np.asarray(coords[1:], dtype=float) / self.N
        return pos

    def __repr__(self):
        return f"Lattice(d={self.d}, N={self.N})"

    def __eq__(self, other):
        return isinstance(other, Lattice) and (self.d, self.N) == (other.d, other.N)

    def __hash__(self):
        return hash((self.d, self.N))


class BoundaryProfile:
    """Reservoir density on one wall as a function of the transverse torus.

    The profile is a constant plus optional low-order Fourier modes:

        b(v) = base + sum_k [ c_k cos(2 pi k.v) + s_k sin(2 pi k.v) ]

    where each k is an integer wave vector over the d-1 transverse
    coordinates v in [0,1)^{d-1}.  Range validation happens where the
    profile is bound to a lattice or grid, not here, because the PDE
    solvers accept the closed interval [0,1] while the particle system
    requires the open one.
    """

    def __init__(self, base: float, modes=()):
        self.base = float(base)
        self.modes = tuple(
            (tuple(int(k) for k in np.atleast_1d(kvec)), float(c), float(s))
            for kvec, c, s in modes
        )

    def __call__(self, v) -> np.ndarray:
        """Evaluate at transverse positions v, an array of shape (..., d-1)."""
        v = np.asarray(v, dtype=float)
        out = np.full(v.shape[:-1] if v.ndim else (), self.base)
        for kvec, c, s in self.modes:
            phase = 2.0 * np.pi * (v @ np.asarray(kvec, dtype=float))
            out = out + c * np.cos(phase) + s * np.sin(phase)
        return out

    def is_constant(self) -> bool:
        return all(c == 0.0 and s == 0.0 for _, c, s in self.modes)

    def to_dict(self):
        return {"base": self.base,
                "modes": [[list(k), c, s] for k, c, s in self.modes]}

    @classmethod
    def from_dict(cls, spec):
        if isinstance(spec, (int, float)):
            return cls(float(spec))
        return cls(spec["base"], [(tuple(k), c, s) for k, c, s in spec.get("modes", [])])

    def __repr__(self):
        if self.is_constant():
            return f"BoundaryProfile({self.base})"
        return f"BoundaryProfile({self.base}, modes={list(self.modes)})"


class ModelParams:
    """Interaction strength and the two reservoir profiles.

    a must exceed -1/2 so every exchange rate is at least min(1, 1+2a) > 0
    and the flux function phi(r) = r(1+ar) is strictly increasing on [0,1].
    """

    def __init__(self, a: float, b_minus, b_plus):
        a = float(a)
        if a <= -0.5:
            raise ValueError("interaction strength a must be > -1/2")
        self.a = a
        self.b_minus = _as_profile(b_minus)
        self.b_plus = _as_profile(b_plus)

    def b(self, side: int, v) -> np.ndarray:
        """Reservoir density b(side, v) for side = -1 or +1."""
        if side == -1:
            return self.b_minus(v)
        if side == +1:
            return self.b_plus(v)
        raise ValueError("side must be -1 or +1")

    def wall_values(self, lat: Lattice):
        """b evaluated at every transverse lattice position, both walls.

        Returns (b_minus_vals, b_plus_vals), each of shape (n_trans,).
        Raises if any value leaves the open interval (0,1): reservoir
        densities of 0 or 1 would freeze a wall site.
        """
        v = lat.transverse_positions()
        bm = np.atleast_1d(np.asarray(self.b_minus(v), dtype=float))
        bp = np.atleast_1d(np.asarray(self.b_plus(v), dtype=float))
        for vals in (bm, bp):
            if vals.min() <= 0.0 or vals.max() >= 1.0:
                raise ValueError("boundary density must lie strictly inside (0,1)")
        return bm, bp

    def __repr__(self):
        return f"ModelParams(a={self.a}, b_minus={self.b_minus}, b_plus={self.b_plus})"


def _as_profile(b) -> BoundaryProfile:
    if isinstance(b, BoundaryProfile):
        return b
    return BoundaryProfile(float(b))


# -- rates and moves ---------------------------------------------------


def _flank_value(lat, params, eta, z, side_if_missing, v):
    # occupation of a flanking site, or the reservoir density if the site
    # falls off the slab (only happens in direction 1)
    if z is not None:
        return float(eta[lat.site_index(z)])
    return float(params.b(side_if_missing, v))


def bulk_jump_rate(lat: Lattice, params: ModelParams, eta, x, i: int) -> float:
    """Exchange rate across the bond (x, x + e_i).

    Parameters
    ----------
    eta : array_like
        Flat occupancy array (uint8, one entry per site).
    x : tuple
        Left endpoint of the bond.
    i : int
        Bond direction, 1-based.

    Returns
    -------
    float
        1 + a*(v_lo + v_hi) where v_lo / v_hi are the occupations of
        x - e_i and x + 2 e_i, with the reservoir density substituted
        for whichever of the two (at most one) is off the slab.
    """
    x = tuple(int(c) for c in x)
    y = lat.neighbor(x, i, +1)
    if y is None:
        raise ValueError("bond leaves the slab; not a valid exchange bond")
    lo = lat.neighbor(x, i, -1)
    hi = lat.neighbor(y, i, +1)
    v = np.asarray(x[1:], dtype=float) / lat.N
    v_lo = _flank_value(lat, params, eta, lo, -1, v)
    v_hi = _flank_value(lat, params, eta, hi, +1, v)
    return 1.0 + params.a * (v_lo + v_hi)


def boundary_flip_rate(lat: Lattice, params: ModelParams, eta, x) -> float:
    """Reservoir flip rate at the wall site x.

    Returns eta(x)(1-b) + (1-eta(x))b with b the reservoir density of
    x's wall evaluated at its transverse position.
    """
    x = tuple(int(c) for c in x)
    side = lat.boundary_side(x)
    if side is None:
        raise ValueError("flips only occur on the two wall layers")
    v = np.asarray(x[1:], dtype=float) / lat.N
    b = float(params.b(side, v))
    occ = float(eta[lat.site_index(x)])
    return occ * (1.0 - b) + (1.0 - occ) * b


def apply_exchange(lat: Lattice, eta, x, y) -> np.ndarray:
    """Configuration with the occupations of neighbouring sites x, y swapped."""
    if lat.bond_direction(x, y) is None:
        raise ValueError("exchange requires nearest-neighbour sites")
    out = np.array(eta, dtype=np.uint8, copy=True)
    ix, iy = lat.site_index(x), lat.site_index(y)
    out[ix], out[iy] = out[iy], out[ix]
    return out


def apply_flip(lat: Lattice, eta, x) -> np.ndarray:
    """Configuration with the occupation at wall site x flipped."""
    if lat.boundary_side(x) is None:
        raise ValueError("flips only occur on the two wall layers")
    out = np.array(eta, dtype=np.uint8, copy=True)
    ix = lat.site_index(x)
    out[ix] = 1 - out[ix]
    return out


def current_terms(lat: Lattice, params: ModelParams, eta, x, i: int):
    """The two local current terms (h, g) attached to site x in direction i.

    h_{i,x} = eta(x) - a eta(x+e_i) eta(x-e_i) and
    g_{i,x} = a eta(x-e_i) eta(x); both require x +- e_i on the slab.
    """
    x = tuple(int(c) for c in x)
    xp = lat.neighbor(x, i, +1)
    xm = lat.neighbor(x, i, -1)
    if xp is None or xm is None:
        raise ValueError("current terms need both direction-i neighbours")
    e = lambda z: float(eta[lat.site_index(z)])
    h = e(x) - params.a * e(xp) * e(xm)
    g = params.a * e(xm) * e(x)
    return h, g


def instantaneous_current(lat: Lattice, params: ModelParams, eta, x, i: int) -> float:
    """Instantaneous net current over the bond (x, x + e_i).

    Computed through the gradient decomposition

        W = (h_{i,x} - h_{i,x+e_i}) + (g_{i,x} - g_{i,x+2e_i}),

    which is only defined when x - e_i and x + 2 e_i lie on the slab
    (always true transversally, a real restriction for i = 1).  It equals
    the rate-weighted occupation difference r(x, x+e_i) (eta(x) - eta(x+e_i)).
    """
    x = tuple(int(c) for c in x)
    y = lat.neighbor(x, i, +1)
    if y is None or lat.neighbor(x, i, -1) is None or lat.neighbor(y, i, +1) is None:
        raise ValueError("current decomposition needs x-e_i and x+2e_i on the slab")
    y2 = lat.neighbor(y, i, +1)
    h_x, g_x = current_terms(lat, params, eta, x, i)
    h_y, _ = current_terms(lat, params, eta, y, i)
    _, g_y2 = current_terms(lat, params, eta, y2, i)
    return (h_x - h_y) + (g_x - g_y2)


def enumerate_transitions(lat: Lattice, params: ModelParams, eta):
    """All one-step transitions from eta with their unspeeded rates.

    Lists one exchange per bond (including no-op exchanges between equal
    occupations, whose rates still enter the total) and one flip per wall
    site.  The diffusive N^2 speedup is the simulator clock's business,
    not the generator's.
    """
    eta = np.asarray(eta, dtype=np.uint8)
    out = []
    for x, y, i in lat.bonds():
        out.append((apply_exchange(lat, eta, x, y), bulk_jump_rate(lat, params, eta, x, i)))
    for x in lat.boundary_sites():
        out.append((apply_flip(lat, eta, x), boundary_flip_rate(lat, params, eta, x)))
    return out


# -- snapshot file format ----------------------------------------------
# line 1: "d N a", line 2: |Omega_N| characters '0'/'1' in flat site order


def write_snapshot(path, lat: Lattice, a: float, eta) -> None:
    """Write a configuration snapshot (header line then one 0/1 line)."""
    eta = np.asarray(eta, dtype=np.uint8)
    if eta.shape != (lat.n_sites,):
        raise ValueError("configuration length does not match the lattice")
    with open(path, "w") as fh:
        fh.write(f"{lat.d} {lat.N} {float(a)!r}\n")
        fh.write("".join("1" if v else "0" for v in eta) + "\n")


def read_snapshot(path):
    """Read a snapshot written by :func:`write_snapshot`.

    Returns (lattice, a, eta).
    """
    with open(path) as fh:
        header = fh.readline().split()
        body = fh.readline().strip()
    if len(header) != 3:
        raise ValueError("malformed snapshot header")
    d, N, a = int(header[0]), int(header[1]), float(header[2])
    lat = Lattice(d, N)
    if len(body) != lat.n_sites or set(body) - {"0", "1"}:
        raise ValueError("malformed snapshot body")
    eta = np.frombuffer(body.encode(), dtype=np.uint8) - ord("0")
    return lat, a, eta.astype(np.uint8)
