"""Lattice geometry, quartic potential, forces, and energy observables.

Sites live on the box {-n..n}^d with free boundary conditions: only bonds
with both endpoints inside the box exist.  States are stored as flat
float64 arrays in row-major multi-index order; ``flat_index`` /
``site_at`` define the (public, stable) index map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import BlowUpError


@dataclass(frozen=True)
class LatticeSpec:
    """Box geometry and coupling: dimension d, box radius n, coupling K."""

    d: int
    n: int
    K: float

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"dimension d={self.d} unsupported (need 1, 2 or 3)")
        if not isinstance(self.n, int) or self.n < 1:
            raise ValueError(f"box radius n={self.n} must be an integer >= 1")
        if not self.K >= 0:
            raise ValueError(f"coupling K={self.K} must be >= 0")

    @property
    def side(self) -> int:
        return 2 * self.n + 1

    @property
    def nsites(self) -> int:
        return self.side**self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.side,) * self.d

    def as_site(self, site) -> tuple[int, ...]:
        """Normalize a site to a d-tuple (a bare int is accepted for d=1)."""
        if isinstance(site, (int, np.integer)):
            site = (int(site),)
        site = tuple(int(c) for c in site)
        if len(site) != self.d:
            raise IndexError(f"site {site} has wrong dimension for d={self.d}")
        return site

    def contains(self, site) -> bool:
        site = self.as_site(site)
        return all(-self.n <= c <= self.n for c in site)

    def flat_index(self, site) -> int:
        """Row-major flat index of a site (coordinates offset by +n)."""
        site = self.as_site(site)
        if not self.contains(site):
            raise IndexError(f"site {site} outside box of radius {self.n}")
        idx = 0
        for c in site:
            idx = idx * self.side + (c + self.n)
        return idx

    def site_at(self, flat: int) -> tuple[int, ...]:
        """Inverse of ``flat_index``."""
        if not 0 <= flat < self.nsites:
            raise IndexError(f"flat index {flat} out of range")
        coords = []
        for _ in range(self.d):
            coords.append(flat % self.side - self.n)
            flat //= self.side
        return tuple(reversed(coords))

    def sites(self) -> np.ndarray:
        """All site coordinates, shape (nsites, d), in flat order."""
        return _site_coords(self)


@lru_cache(maxsize=None)
def _site_coords(spec: LatticeSpec) -> np.ndarray:
    coords = np.indices(spec.shape).reshape(spec.d, -1).T - spec.n
    coords.setflags(write=False)
    return coords


@lru_cache(maxsize=None)
def _degree_grid(spec: LatticeSpec) -> np.ndarray:
    """Per-site count of in-box nearest neighbors, on the grid."""
    deg = np.zeros(spec.shape)
    for ax in range(spec.d):
        line = np.full(spec.side, 2.0)
        line[0] = line[-1] = 1.0
        shape = [1] * spec.d
        shape[ax] = spec.side
        deg = deg + line.reshape(shape)
    deg.setflags(write=False)
    return deg


@lru_cache(maxsize=None)
def _neighbor_flat(spec: LatticeSpec) -> tuple[tuple[int, ...], ...]:
    """Flat indices of in-box neighbors for every site, in flat order."""
    table = []
    for flat in range(spec.nsites):
        site = spec.site_at(flat)
        table.append(tuple(spec.flat_index(nb) for nb in neighbors(spec, site)))
    return tuple(table)


@dataclass(frozen=True)
class Potential:
    """One-body potential U(x) = a4*x^4 + a3*x^3 + a2*x^2 + a1*x + a0.

    Must be non-negative with a strictly positive leading coefficient;
    both are checked at construction (the minimum is located by solving
    U' = 0 exactly).
    """

    a0: float = 0.0
    a1: float = 0.0
    a2: float = 0.0
    a3: float = 0.0
    a4: float = 0.25

    def __post_init__(self):
        if not self.a4 > 0:
            raise ValueError(f"leading coefficient a4={self.a4} must be positive")
        crit = np.roots([4 * self.a4, 3 * self.a3, 2 * self.a2, self.a1])
        scale = max(1.0, *(abs(a) for a in (self.a0, self.a1, self.a2, self.a3, self.a4)))
        for root in crit:
            if abs(root.imag) > 1e-9 * (1 + abs(root.real)):
                continue
            if self.u(root.real) < -1e-9 * scale:
                raise ValueError(
                    f"potential is negative at x={root.real:.6g} "
                    f"(U={self.u(root.real):.6g}); U must be >= 0"
                )

    def u(self, x):
        return (((self.a4 * x + self.a3) * x + self.a2) * x + self.a1) * x + self.a0

    def du(self, x):
        return ((4 * self.a4 * x + 3 * self.a3) * x + 2 * self.a2) * x + self.a1

    def d2u(self, x):
        return (12 * self.a4 * x + 6 * self.a3) * x + 2 * self.a2


#: U(q) = q^4 / 4, the default one-body potential.
DEFAULT_POTENTIAL = Potential()


@dataclass
class PhaseState:
    """Positions q and momenta p, flat float64 arrays in site order."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.q.ndim != 1 or self.q.shape != self.p.shape:
            raise ValueError("q and p must be flat arrays of equal length")

    def copy(self) -> "PhaseState":
        return PhaseState(self.q.copy(), self.p.copy())

    def require_finite(self, context: str = "phase state"):
        for name, arr in (("q", self.q), ("p", self.p)):
            if not np.isfinite(arr).all():
                bad = int(np.flatnonzero(~np.isfinite(arr))[0])
                raise BlowUpError(
                    f"{context}: non-finite {name} at flat site {bad}", site=bad
                )


def zero_state(spec: LatticeSpec) -> PhaseState:
    return PhaseState(np.zeros(spec.nsites), np.zeros(spec.nsites))


@dataclass(frozen=True)
class Cube:
    """Cube of center ``center`` and side 2k+1 (k >= 1)."""

    center: tuple[int, ...]
    k: int

    def __post_init__(self):
        object.__setattr__(
            self,
            "center",
            (int(self.center),) if isinstance(self.center, (int, np.integer))
            else tuple(int(c) for c in self.center),
        )
        if self.k < 1:
            raise ValueError(f"cube radius k={self.k} must be >= 1")

    @property
    def volume(self) -> int:
        return (2 * self.k + 1) ** len(self.center)


def _check_cube(spec: LatticeSpec, cube: Cube):
    if len(cube.center) != spec.d:
        raise ValueError(f"cube center {cube.center} has wrong dimension for d={spec.d}")
    if max(abs(c) for c in cube.center) + cube.k > spec.n:
        raise ValueError(
            f"cube (center={cube.center}, k={cube.k}) not contained in box of radius {spec.n}"
        )


def _cube_slices(spec: LatticeSpec, cube: Cube) -> tuple[slice, ...]:
    return tuple(
        slice(c - cube.k + spec.n, c + cube.k + spec.n + 1) for c in cube.center
    )


def _axis_slice(ndim: int, ax: int, sl: slice) -> tuple[slice, ...]:
    full = [slice(None)] * ndim
    full[ax] = sl
    return tuple(full)


def neighbors(spec: LatticeSpec, site) -> list[tuple[int, ...]]:
    """Sites of the box at l1 distance 1 from ``site`` (free boundary)."""
    site = spec.as_site(site)
    if not spec.contains(site):
        raise IndexError(f"site {site} outside box of radius {spec.n}")
    out = []
    for ax in range(spec.d):
        for delta in (-1, 1):
            nb = list(site)
            nb[ax] += delta
            if abs(nb[ax]) <= spec.n:
                out.append(tuple(nb))
    return out


def force(spec: LatticeSpec, pot: Potential, state: PhaseState, site) -> float:
    """Acceleration -U'(q_i) - K*sum_nbr (q_i - q_j) on one site."""
    site = spec.as_site(site)
    flat = spec.flat_index(site)
    state.require_finite("force")
    qi = state.q[flat]
    val = -pot.du(qi)
    for j in _neighbor_flat(spec)[flat]:
        val -= spec.K * (qi - state.q[j])
    if not math.isfinite(val):
        raise BlowUpError(f"force overflow at site {site}", site=flat)
    return float(val)


def force_field(spec: LatticeSpec, pot: Potential, q: np.ndarray) -> np.ndarray:
    """Vectorized force on every site; ``q`` flat, result flat.

    Hot path used by the integrators; performs no finiteness checks.
    """
    qg = q.reshape(spec.shape)
    f = -pot.du(qg)
    for ax in range(spec.d):
        diff = np.diff(qg, axis=ax)
        f[_axis_slice(spec.d, ax, slice(None, -1))] += spec.K * diff
        f[_axis_slice(spec.d, ax, slice(1, None))] -= spec.K * diff
    return f.reshape(-1)


def hamiltonian(spec: LatticeSpec, pot: Potential, state: PhaseState) -> float:
    """Total energy sum_i [p_i^2/2 + U(q_i)] + (K/2) sum_bonds (q_i - q_j)^2."""
    state.require_finite("hamiltonian")
    qg = state.q.reshape(spec.shape)
    h = float(np.sum(state.p * state.p)) / 2.0
    h += float(np.sum(pot.u(qg)))
    for ax in range(spec.d):
        diff = np.diff(qg, axis=ax)
        h += 0.5 * spec.K * float(np.sum(diff * diff))
    if not math.isfinite(h):
        raise BlowUpError("hamiltonian overflow")
    return h


def local_energy(spec: LatticeSpec, pot: Potential, state: PhaseState, cube: Cube) -> float:
    """Cube energy W: per-site p^2/2 + U(q) + 1, plus K/4 per ordered bond pair.

    Each unordered bond inside the cube appears twice in the ordered-pair
    sum, so it contributes K/2 * (q_i - q_j)^2.
    """
    _check_cube(spec, cube)
    state.require_finite("local_energy")
    sl = _cube_slices(spec, cube)
    qs = state.q.reshape(spec.shape)[sl]
    ps = state.p.reshape(spec.shape)[sl]
    w = float(np.sum(ps * ps)) / 2.0 + float(np.sum(pot.u(qs))) + qs.size
    for ax in range(spec.d):
        diff = np.diff(qs, axis=ax)
        w += 0.5 * spec.K * float(np.sum(diff * diff))
    return w


def energy_flux(spec: LatticeSpec, state: PhaseState, cube: Cube) -> float:
    """Instantaneous dW/dt: -K * sum over boundary bonds of (q_i - q_j) p_i.

    The sum runs over sites i inside the cube and their in-box neighbors j
    outside it; U drops out, so no potential is needed.
    """
    _check_cube(spec, cube)
    state.require_finite("energy_flux")
    qg = state.q.reshape(spec.shape)
    pg = state.p.reshape(spec.shape)
    sl = list(_cube_slices(spec, cube))
    flux = 0.0
    for ax in range(spec.d):
        lo = cube.center[ax] - cube.k + spec.n
        hi = cube.center[ax] + cube.k + spec.n
        face_lo = sl.copy()
        if lo - 1 >= 0:
            face_lo[ax] = slice(lo, lo + 1)
            out = face_lo.copy()
            out[ax] = slice(lo - 1, lo)
            flux -= spec.K * float(
                np.sum((qg[tuple(face_lo)] - qg[tuple(out)]) * pg[tuple(face_lo)])
            )
        if hi + 1 <= spec.side - 1:
            face_hi = sl.copy()
            face_hi[ax] = slice(hi, hi + 1)
            out = face_hi.copy()
            out[ax] = slice(hi + 1, hi + 2)
            flux -= spec.K * float(
                np.sum((qg[tuple(face_hi)] - qg[tuple(out)]) * pg[tuple(face_hi)])
            )
    return flux


# ---------------------------------------------------------------------------
# Q statistic: sup over admissible cubes of W / volume.
# ---------------------------------------------------------------------------


def _padded_cumsum(arr: np.ndarray) -> np.ndarray:
    out = arr
    for ax in range(arr.ndim):
        out = np.cumsum(out, axis=ax)
    padded = np.zeros(tuple(s + 1 for s in arr.shape))
    padded[tuple(slice(1, None) for _ in range(arr.ndim))] = out
    return padded


def _box_sums(table: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Sums of the source array over index boxes [lo, hi] (inclusive, array coords)."""
    d = lo.shape[1]
    total = np.zeros(len(lo))
    for mask in range(1 << d):
        idx = []
        sign = 1.0
        for ax in range(d):
            if mask >> ax & 1:
                idx.append(lo[:, ax])
                sign = -sign
            else:
                idx.append(hi[:, ax] + 1)
        total += sign * table[tuple(idx)]
    return total


def cube_energies(
    spec: LatticeSpec,
    pot: Potential,
    state: PhaseState,
    centers: np.ndarray,
    ks: np.ndarray,
) -> np.ndarray:
    """W for many cubes at once via summed-area tables.

    ``centers`` is (m, d) in lattice coordinates, ``ks`` is (m,).  Cubes
    must already be contained in the box.
    """
    qg = state.q.reshape(spec.shape)
    pg = state.p.reshape(spec.shape)
    site_table = _padded_cumsum(pg * pg / 2.0 + pot.u(qg) + 1.0)
    lo = centers - ks[:, None] + spec.n
    hi = centers + ks[:, None] + spec.n
    w = _box_sums(site_table, lo, hi)
    for ax in range(spec.d):
        diff = np.diff(qg, axis=ax)
        bond_table = _padded_cumsum(0.5 * spec.K * diff * diff)
        hi_ax = hi.copy()
        hi_ax[:, ax] -= 1
        w += _box_sums(bond_table, lo, hi_ax)
    return w


@lru_cache(maxsize=8)
def _admissible_arrays(spec: LatticeSpec) -> tuple[np.ndarray, np.ndarray]:
    """Centers and radii of every admissible cube, in deterministic order.

    Admissible: k > log^(1/d)(e + |nu|) (natural log, l1 norm of the
    center) and the cube contained in the box.
    """
    coords = np.asarray(_site_coords(spec))
    l1 = np.abs(coords).sum(axis=1)
    kmin = np.floor(np.log(math.e + l1) ** (1.0 / spec.d)).astype(int) + 1
    kmax = spec.n - np.abs(coords).max(axis=1)
    counts = np.maximum(kmax - kmin + 1, 0)
    total = int(counts.sum())
    if total == 0:
        raise ValueError(
            f"no admissible cube fits inside the box (n={spec.n}); use a larger n"
        )
    centers = np.repeat(coords, counts, axis=0)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    ks = np.arange(total) - np.repeat(starts, counts) + np.repeat(kmin, counts)
    centers.setflags(write=False)
    ks.setflags(write=False)
    return centers, ks


def admissible_cubes(spec: LatticeSpec) -> list[Cube]:
    """All admissible cubes of the Q statistic (can be large for big boxes)."""
    centers, ks = _admissible_arrays(spec)
    return [Cube(tuple(c), int(k)) for c, k in zip(centers, ks)]


@dataclass(frozen=True)
class QStatistic:
    """Value of sup W/volume over admissible cubes and the maximizer."""

    value: float
    cube: Cube

    def boundary_saturated(self, spec: LatticeSpec) -> bool:
        """True if the maximizing cube touches the box boundary."""
        return max(abs(c) for c in self.cube.center) + self.cube.k == spec.n


def q_statistic(spec: LatticeSpec, pot: Potential, state: PhaseState) -> QStatistic:
    """Sup of W_{nu,k} / (2k+1)^d over admissible cubes inside the box."""
    state.require_finite("q_statistic")
    centers, ks = _admissible_arrays(spec)
    w = cube_energies(spec, pot, state, centers, ks)
    ratios = w / (2.0 * ks + 1.0) ** spec.d
    best = int(np.argmax(ratios))
    return QStatistic(float(ratios[best]), Cube(tuple(centers[best]), int(ks[best])))
