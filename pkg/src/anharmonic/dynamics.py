"""Time integration of the truncated lattice dynamics.

Velocity Verlet throughout: symplectic, time-reversible, one force pass
per step.  Any non-finite coordinate aborts the run with diagnostics;
nothing is clamped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BlowUpError
from .lattice import LatticeSpec, PhaseState, Potential, force_field, q_statistic


@dataclass(frozen=True)
class IntegratorConfig:
    """Step size, final time, and snapshot stride (in steps)."""

    dt: float
    t_end: float
    record_stride: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt={self.dt} must be positive")
        if self.t_end < 0:
            raise ValueError(f"t_end={self.t_end} must be >= 0")
        if self.record_stride < 1:
            raise ValueError(f"record_stride={self.record_stride} must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


@dataclass
class Trajectory:
    """Recorded snapshots along one run; times[0] = 0."""

    times: np.ndarray
    states: list[PhaseState]

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if len(self.times) != len(self.states):
            raise ValueError("times and states length mismatch")
        if len(self.times) == 0 or self.times[0] != 0.0:
            raise ValueError("trajectory must start at t=0")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.states)


def verlet_step(spec: LatticeSpec, pot: Potential, state: PhaseState, dt: float) -> PhaseState:
    """One velocity-Verlet step: half-kick, drift, half-kick.

    ``dt`` may be negative; the map with -dt is the exact inverse of the
    map with +dt, which is what the reversibility checks exercise.
    """
    if dt == 0:
        raise ValueError("dt must be nonzero")
    state.require_finite("verlet_step")
    q, p = _verlet_arrays(spec, pot, state.q, state.p, dt)
    out = PhaseState(q, p)
    out.require_finite("verlet_step result")
    return out


def _verlet_arrays(spec, pot, q, p, dt):
    p_half = p + (0.5 * dt) * force_field(spec, pot, q)
    q_new = q + dt * p_half
    p_new = p_half + (0.5 * dt) * force_field(spec, pot, q_new)
    return q_new, p_new


def evolve(spec: LatticeSpec, pot: Potential, state: PhaseState, cfg: IntegratorConfig) -> Trajectory:
    """Integrate and record a snapshot every ``record_stride`` steps.

    The final state is always recorded.  Raises BlowUpError with the step
    and time of failure if any coordinate becomes non-finite.
    """
    state.require_finite("evolve initial state")
    q = state.q.copy()
    p = state.p.copy()
    times = [0.0]
    states = [PhaseState(q.copy(), p.copy())]
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, cfg.n_steps + 1):
            q, p = _verlet_arrays(spec, pot, q, p, cfg.dt)
            if not (np.isfinite(q).all() and np.isfinite(p).all()):
                bad = int(np.flatnonzero(~np.isfinite(q) | ~np.isfinite(p))[0])
                raise BlowUpError(
                    f"blow-up at t={step * cfg.dt:.6g} (step {step}), flat site {bad}",
                    time=step * cfg.dt,
                    step=step,
                    site=bad,
                )
            if step % cfg.record_stride == 0 or step == cfg.n_steps:
                times.append(step * cfg.dt)
                states.append(PhaseState(q.copy(), p.copy()))
    return Trajectory(np.asarray(times), states)


def energy_drift(spec: LatticeSpec, pot: Potential, traj: Trajectory) -> np.ndarray:
    """Relative drift |H(t) - H(0)| / max(H(0), 1) at each snapshot."""
    from .lattice import hamiltonian

    h = np.array([hamiltonian(spec, pot, s) for s in traj.states])
    return np.abs(h - h[0]) / max(h[0], 1.0)


# ---------------------------------------------------------------------------
# Convergence of the truncated dynamics in the box radius.
# ---------------------------------------------------------------------------


def restrict_state(spec_from: LatticeSpec, state: PhaseState, spec_to: LatticeSpec) -> PhaseState:
    """Restrict a state to the centered sub-box of radius spec_to.n."""
    if spec_to.d != spec_from.d or spec_to.n > spec_from.n:
        raise ValueError("target box must be a centered sub-box of the source")
    off = spec_from.n - spec_to.n
    window = tuple(slice(off, off + spec_to.side) for _ in range(spec_from.d))
    q = state.q.reshape(spec_from.shape)[window].reshape(-1).copy()
    p = state.p.reshape(spec_from.shape)[window].reshape(-1).copy()
    return PhaseState(q, p)


@dataclass
class ConvergenceReport:
    """u_k(n,t) across a sweep of truncation radii, plus diagnostics.

    ``u_values[i]`` compares the radius-``truncations[i]`` run with the
    radius-(n+1) run on the observation window of radius k.  ``d_values``
    is the max phase-space displacement of the radius-n run over recorded
    times; ``phi_values`` is Q(x)*log(e+n) + t^4 with Q taken from the
    initial data on the largest box; ``n_k_estimate`` uses a unit
    constant in 2k + (1 + Q + t)^4.
    """

    k: int
    t: float
    truncations: tuple[int, ...]
    u_values: np.ndarray
    d_values: np.ndarray
    phi_values: np.ndarray
    q_initial: float
    n_k_estimate: float
    decay_rate: float


def convergence_study(
    specs,
    pot: Potential,
    initial: PhaseState,
    k: int,
    t: float,
    dt: float,
) -> ConvergenceReport:
    """Compare runs of the same initial data truncated to nested boxes.

    ``specs`` lists the truncation radii (as LatticeSpec, shared d and K);
    ``initial`` lives on the largest box, which must also fit every n+1
    companion run.
    """
    specs = sorted(specs, key=lambda s: s.n)
    d, K = specs[0].d, specs[0].K
    if any(s.d != d or s.K != K for s in specs):
        raise ValueError("all truncation specs must share d and K")
    if k < 1:
        raise ValueError(f"observation radius k={k} must be >= 1")
    side = round(len(initial.q) ** (1.0 / d))
    n_max = (side - 1) // 2
    spec_max = LatticeSpec(d, n_max, K)
    if spec_max.nsites != len(initial.q):
        raise ValueError("initial data length does not match a box of the given d")
    if any(s.n < k for s in specs):
        raise ValueError(f"every truncation radius must be >= k={k}")
    if specs[-1].n + 1 > n_max:
        raise ValueError(
            f"largest truncation {specs[-1].n} needs initial data on radius >= {specs[-1].n + 1}"
        )
    cfg = IntegratorConfig(dt=dt, t_end=t, record_stride=max(1, int(round(0.1 / dt))))
    spec_k = LatticeSpec(d, k, K)

    finals: dict[int, PhaseState] = {}
    displacement: dict[int, float] = {}
    radii = sorted({s.n for s in specs} | {s.n + 1 for s in specs})
    for n in radii:
        spec_n = LatticeSpec(d, n, K)
        start = restrict_state(spec_max, initial, spec_n)
        try:
            traj = evolve(spec_n, pot, start, cfg)
        except BlowUpError as err:
            raise BlowUpError(
                f"truncation radius n={n}: {err}", time=err.time, step=err.step, site=err.site
            ) from err
        finals[n] = traj.states[-1]
        disp = 0.0
        for s in traj.states[1:]:
            disp = max(
                disp,
                float(np.max(np.abs(s.q - start.q) + np.abs(s.p - start.p))),
            )
        displacement[n] = disp

    u_values = []
    for s in specs:
        spec_n = LatticeSpec(d, s.n, K)
        spec_n1 = LatticeSpec(d, s.n + 1, K)
        a = restrict_state(spec_n, finals[s.n], spec_k)
        b = restrict_state(spec_n1, finals[s.n + 1], spec_k)
        u_values.append(float(np.max(np.abs(a.q - b.q) + np.abs(a.p - b.p))))
    u_values = np.asarray(u_values)

    q0 = q_statistic(spec_max, pot, initial).value
    ns = np.array([s.n for s in specs], dtype=float)
    phi = q0 * np.log(math.e + ns) + t**4
    mask = u_values > 0
    if mask.sum() >= 2:
        decay = float(np.polyfit(ns[mask], np.log(u_values[mask]), 1)[0])
    else:
        decay = math.nan
    return ConvergenceReport(
        k=k,
        t=t,
        truncations=tuple(int(n) for n in ns),
        u_values=u_values,
        d_values=np.array([displacement[s.n] for s in specs]),
        phi_values=phi,
        q_initial=q0,
        n_k_estimate=2 * k + (1 + q0 + t) ** 4,
        decay_rate=decay,
    )


# ---------------------------------------------------------------------------
# Q growth along the flow.
# ---------------------------------------------------------------------------


@dataclass
class QGrowthTrack:
    """Q along recorded snapshots and the smallest growth-law constant.

    ``c_fit`` is the minimal c with Q(t) <= c * {Q(0) log(e + Q(0)) + t^4}
    over the recorded grid.
    """

    times: np.ndarray
    q_values: np.ndarray
    c_fit: float

    def sup_to(self, t: float) -> float:
        """Running sup of Q over recorded times <= t."""
        mask = self.times <= t + 1e-12
        if not mask.any():
            raise ValueError(f"no recorded time <= {t}")
        return float(np.max(self.q_values[mask]))


def q_growth_track(
    spec: LatticeSpec, pot: Potential, state: PhaseState, cfg: IntegratorConfig
) -> QGrowthTrack:
    """Evolve and evaluate Q on every recorded snapshot."""
    traj = evolve(spec, pot, state, cfg)
    qs = np.array([q_statistic(spec, pot, s).value for s in traj.states])
    envelope = qs[0] * math.log(math.e + qs[0]) + traj.times**4
    return QGrowthTrack(traj.times, qs, float(np.max(qs / envelope)))


def q_track_of_trajectory(spec: LatticeSpec, pot: Potential, traj: Trajectory) -> QGrowthTrack:
    """Same as q_growth_track but for an already-computed trajectory."""
    qs = np.array([q_statistic(spec, pot, s).value for s in traj.states])
    envelope = qs[0] * math.log(math.e + qs[0]) + traj.times**4
    return QGrowthTrack(traj.times, qs, float(np.max(qs / envelope)))
