"""Event-driven kernel for the speeded-up exclusion chain.

Gillespie direct method over a binary sum tree of per-event rates.  The
event list is one exchange per bond (no-op exchanges between equal
occupations included, so the cached total always matches the generator's
total rate) plus one reservoir flip per wall site.  Each applied move
invalidates only the events whose rates read the changed sites, and a
tree update recomputes ancestors as sums of children, so the cached
total carries no floating drift.

Randomness is an explicit xoshiro256++ stream held in a 4-word uint64
array, seeded through splitmix64.  All integer work is uint64 with
wraparound, which numba compiles to plain machine ops, so a (seed,
replica) pair reproduces the same event sequence anywhere.

Three tilt modes:

* 0: no external field.
* 1: static field; the exchange rate across (x, y) carries the exact
  factor exp{(eta(x) - eta(y)) (H(y/N) - H(x/N))}, kept in the tree.
* 2: time-dependent field, handled by thinning: the tree holds the
  dominating envelope rate * exp(max_t |H(t,y/N) - H(t,x/N)|) over the
  current window, and each selected exchange is accepted with the ratio
  of the instantaneous tilted rate to its envelope.  H is evaluated by
  linear interpolation between the window's sample times, whose extremes
  also bound the interpolant, making the thinning exact.

Reservoir flips are never tilted: admissible fields vanish on the walls.
"""

import numpy as np
from numba import njit

_U = np.uint64
_GOLDEN = _U(0x9E3779B97F4A7C15)
_SM_A = _U(0xBF58476D1CE4E5B9)
_SM_B = _U(0x94D049BB133111EB)
_K11 = _U(11)
_K17 = _U(17)
_K23 = _U(23)
_K27 = _U(27)
_K30 = _U(30)
_K31 = _U(31)
_K41 = _U(41)
_K45 = _U(45)
_K19 = _U(19)
_INV53 = 1.0 / 9007199254740992.0  # 2^-53


@njit(cache=True, nogil=True, inline="always")
def _splitmix64(x):
    x = x + _GOLDEN
    z = x
    z = (z ^ (z >> _K30)) * _SM_A
    z = (z ^ (z >> _K27)) * _SM_B
    return x, z ^ (z >> _K31)


def seed_stream(seed: int, replica: int) -> np.ndarray:
    """Initial xoshiro256++ state for one replica (pure Python, cheap)."""
    state = np.empty(4, dtype=np.uint64)
    x = _U((int(seed) & 0xFFFFFFFFFFFFFFFF) ^ ((int(replica) + 1) * 0xD1342543DE82EF95 & 0xFFFFFFFFFFFFFFFF))
    mask = (1 << 64) - 1
    xi = int(x)
    for k in range(4):
        xi = (xi + 0x9E3779B97F4A7C15) & mask
        z = xi
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        state[k] = _U(z ^ (z >> 31))
    if not state.any():  # all-zero state would freeze the generator
        state[0] = _GOLDEN
    return state


@njit(cache=True, nogil=True, inline="always")
def _next_u64(rng):
    s0, s1, s2, s3 = rng[0], rng[1], rng[2], rng[3]
    t = s0 + s3
    result = ((t << _K23) | (t >> _K41)) + s0
    t = s1 << _K17
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = (s3 << _K45) | (s3 >> _K19)
    rng[0], rng[1], rng[2], rng[3] = s0, s1, s2, s3
    return result


@njit(cache=True, nogil=True, inline="always")
def _u01(rng):
    # in [0, 1); 53 random bits
    return np.float64(_next_u64(rng) >> _K11) * _INV53


@njit(cache=True, nogil=True, inline="always")
def _tree_set(tree, P, e, new):
    i = P + e
    if tree[i] == new:
        return
    tree[i] = new
    i >>= 1
    while i >= 1:
        tree[i] = tree[2 * i] + tree[2 * i + 1]
        i >>= 1


@njit(cache=True, nogil=True, inline="always")
def _tree_pick(tree, P, n_events, u):
    # u uniform in [0, tree[1]); descend to the leaf covering u
    i = 1
    while i < P:
        i <<= 1
        if u >= tree[i]:
            u -= tree[i]
            i += 1
    e = i - P
    if e >= n_events:  # float edge: u landed past the last live leaf
        e = n_events - 1
    return e


@njit(cache=True, nogil=True, inline="always")
def _bond_rate(e, occ, a, bond_x, bond_y, bond_lo, bond_hi, bond_lo_b, bond_hi_b,
               tilt_mode, fac_pos, fac_neg, bond_env):
    lo = bond_lo[e]
    v_lo = np.float64(occ[lo]) if lo >= 0 else bond_lo_b[e]
    hi = bond_hi[e]
    v_hi = np.float64(occ[hi]) if hi >= 0 else bond_hi_b[e]
    r = 1.0 + a * (v_lo + v_hi)
    if tilt_mode == 1:
        ox = occ[bond_x[e]]
        oy = occ[bond_y[e]]
        if ox > oy:
            r *= fac_pos[e]
        elif oy > ox:
            r *= fac_neg[e]
    elif tilt_mode == 2:
        r *= bond_env[e]
    return r


@njit(cache=True, nogil=True, inline="always")
def _event_rate(e, n_bonds, occ, a, bond_x, bond_y, bond_lo, bond_hi, bond_lo_b,
                bond_hi_b, flip_site, flip_b, tilt_mode, fac_pos, fac_neg, bond_env):
    if e < n_bonds:
        return _bond_rate(e, occ, a, bond_x, bond_y, bond_lo, bond_hi, bond_lo_b,
                          bond_hi_b, tilt_mode, fac_pos, fac_neg, bond_env)
    f = e - n_bonds
    z = flip_site[f]
    b = flip_b[f]
    return (1.0 - b) if occ[z] else b


@njit(cache=True, nogil=True)
def fill_tree(tree, P, n_events, n_bonds, occ, a, bond_x, bond_y, bond_lo, bond_hi,
              bond_lo_b, bond_hi_b, flip_site, flip_b, tilt_mode, fac_pos, fac_neg,
              bond_env):
    """Recompute every leaf from the configuration and rebuild the sums."""
    for i in range(2 * P):
        tree[i] = 0.0
    for e in range(n_events):
        tree[P + e] = _event_rate(e, n_bonds, occ, a, bond_x, bond_y, bond_lo,
                                  bond_hi, bond_lo_b, bond_hi_b, flip_site, flip_b,
                                  tilt_mode, fac_pos, fac_neg, bond_env)
    for i in range(P - 1, 0, -1):
        tree[i] = tree[2 * i] + tree[2 * i + 1]


@njit(cache=True, nogil=True, inline="always")
def _touch(z, occ, occ_time, last_t, t):
    if occ[z]:
        occ_time[z] += t - last_t[z]
    last_t[z] = t


@njit(cache=True, nogil=True)
def run_window(occ, t_start, t_end, nsq, a,
               bond_x, bond_y, bond_lo, bond_hi, bond_lo_b, bond_hi_b, bond_slice,
               flip_site, flip_b, dep_ptr, dep_idx,
               tilt_mode, fac_pos, fac_neg, bond_env, h_samp, t_samp,
               tree, P, rng,
               occ_time, last_t, crossings, counters):
    """Advance the chain from t_start to t_end (macroscopic time).

    Mutates occ, tree, rng and the accumulators in place; occupancy time
    integrals are flushed through t_end before returning.  counters:
    [0] events drawn, [1] particles moved, [2] flips applied,
    [3] thinning rejections, [4] net particles created.

    The dependency-refresh blocks below keep the rate formulas written
    out in the loop body: routing them through a helper costs more in
    argument passing than the arithmetic itself.  fill_tree holds the
    same formulas via _event_rate; they must stay in sync.
    """
    n_bonds = bond_x.shape[0]
    n_events = n_bonds + flip_site.shape[0]
    t = t_start
    while True:
        total = tree[1]
        dt = -np.log(1.0 - _u01(rng)) / (nsq * total)
        if t + dt > t_end:
            break
        t = t + dt
        e = _tree_pick(tree, P, n_events, _u01(rng) * total)
        counters[0] += 1
        if e < n_bonds:
            x = bond_x[e]
            y = bond_y[e]
            ox = occ[x]
            oy = occ[y]
            if tilt_mode == 2:
                # thin against the envelope using H at the event time
                if ox != oy:
                    nt = t_samp.shape[0]
                    dts = t_samp[1] - t_samp[0]
                    seg = int((t - t_samp[0]) / dts)
                    if seg < 0:
                        seg = 0
                    if seg > nt - 2:
                        seg = nt - 2
                    frac = (t - t_samp[seg]) / dts
                    if frac < 0.0:
                        frac = 0.0
                    if frac > 1.0:
                        frac = 1.0
                    dh = (1.0 - frac) * (h_samp[seg, y] - h_samp[seg, x]) + frac * (
                        h_samp[seg + 1, y] - h_samp[seg + 1, x])
                    fac = np.exp(dh) if ox > oy else np.exp(-dh)
                else:
                    fac = 1.0
                if _u01(rng) * bond_env[e] >= fac:
                    counters[3] += 1
                    continue
            if ox != oy:
                _touch(x, occ, occ_time, last_t, t)
                _touch(y, occ, occ_time, last_t, t)
                occ[x] = oy
                occ[y] = ox
                s = bond_slice[e]
                if s >= 0:
                    crossings[s] += 1 if ox else -1
                counters[1] += 1
                for z in (x, y):
                    for kd in range(dep_ptr[z], dep_ptr[z + 1]):
                        ev = dep_idx[kd]
                        if ev < n_bonds:
                            lo = bond_lo[ev]
                            v_lo = np.float64(occ[lo]) if lo >= 0 else bond_lo_b[ev]
                            hi = bond_hi[ev]
                            v_hi = np.float64(occ[hi]) if hi >= 0 else bond_hi_b[ev]
                            r = 1.0 + a * (v_lo + v_hi)
                            if tilt_mode == 1:
                                exo = occ[bond_x[ev]]
                                eyo = occ[bond_y[ev]]
                                if exo > eyo:
                                    r *= fac_pos[ev]
                                elif eyo > exo:
                                    r *= fac_neg[ev]
                            elif tilt_mode == 2:
                                r *= bond_env[ev]
                        else:
                            fz = flip_site[ev - n_bonds]
                            fb = flip_b[ev - n_bonds]
                            r = (1.0 - fb) if occ[fz] else fb
                        _tree_set(tree, P, ev, r)
        else:
            f = e - n_bonds
            z = flip_site[f]
            _touch(z, occ, occ_time, last_t, t)
            if occ[z]:
                occ[z] = 0
                counters[4] -= 1
            else:
                occ[z] = 1
                counters[4] += 1
            counters[2] += 1
            for kd in range(dep_ptr[z], dep_ptr[z + 1]):
                ev = dep_idx[kd]
                if ev < n_bonds:
                    lo = bond_lo[ev]
                    v_lo = np.float64(occ[lo]) if lo >= 0 else bond_lo_b[ev]
                    hi = bond_hi[ev]
                    v_hi = np.float64(occ[hi]) if hi >= 0 else bond_hi_b[ev]
                    r = 1.0 + a * (v_lo + v_hi)
                    if tilt_mode == 1:
                        exo = occ[bond_x[ev]]
                        eyo = occ[bond_y[ev]]
                        if exo > eyo:
                            r *= fac_pos[ev]
                        elif eyo > exo:
                            r *= fac_neg[ev]
                    elif tilt_mode == 2:
                        r *= bond_env[ev]
                else:
                    fz = flip_site[ev - n_bonds]
                    fb = flip_b[ev - n_bonds]
                    r = (1.0 - fb) if occ[fz] else fb
                _tree_set(tree, P, ev, r)
    for z in range(occ.shape[0]):
        _touch(z, occ, occ_time, last_t, t_end)
    return t_end
