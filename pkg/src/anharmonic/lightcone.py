"""Front extraction and the velocity-bound experiment.

The perturbation front at time t is the largest l1 distance from the
source at which the Jacobian-block norm still exceeds a threshold; the
experiment compares its growth with t*log^alpha(t), tracks the
exponentially weighted out-of-cone sup, and fits the series upper bound.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache, partial
from typing import Optional, Sequence

import numpy as np

from .dynamics import IntegratorConfig, QGrowthTrack, q_track_of_trajectory
from .errors import BlowUpError
from .gibbs import SamplerConfig, sample_ensemble
from .lattice import LatticeSpec, Potential, _site_coords
from .tangent import JacobianField, jacobian_field, series_bound_profile


def cone_radius(t: float, alpha: float) -> float:
    """t * log^alpha(t) for t > 1, else 0 (the log factor is not yet real)."""
    if t <= 1.0:
        return 0.0
    return t * math.log(t) ** alpha


@lru_cache(maxsize=32)
def _distances_from(spec: LatticeSpec, i0: tuple[int, ...]) -> np.ndarray:
    coords = np.asarray(_site_coords(spec))
    dist = np.abs(coords - np.asarray(i0)).sum(axis=1)
    dist.setflags(write=False)
    return dist


def front_radius(field_: JacobianField, i0, epsilon: float) -> int:
    """Max l1 distance from i0 with block norm >= epsilon; -1 if none."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    spec = field_.spec
    dist = _distances_from(spec, spec.as_site(i0))
    mask = field_.norms >= epsilon
    if not mask.any():
        return -1
    return int(dist[mask].max())


def decay_profile(field_: JacobianField, i0) -> np.ndarray:
    """Max block norm at each l1 distance from i0."""
    spec = field_.spec
    dist = _distances_from(spec, spec.as_site(i0))
    profile = np.zeros(int(dist.max()) + 1)
    np.maximum.at(profile, dist, field_.norms)
    return profile


def profile_tail_slope(profile: np.ndarray, r_start: int) -> float:
    """Least-squares slope of log(profile) vs distance beyond ``r_start``.

    Only strictly positive entries participate; nan when fewer than two.
    """
    r = np.arange(len(profile))
    mask = (r > r_start) & (profile > 0)
    if mask.sum() < 2:
        return math.nan
    return float(np.polyfit(r[mask], np.log(profile[mask]), 1)[0])


@dataclass(frozen=True)
class FrontRecord:
    """Front measurement at one time; invalid when the cone left the box."""

    t: float
    r_front: int
    cone_radius: float
    max_outside: float
    weighted_outside: float
    valid: bool


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one velocity-bound experiment needs."""

    lattice: LatticeSpec
    potential: Potential
    integrator: IntegratorConfig
    sampler: SamplerConfig
    i0: tuple[int, ...]
    measurement_times: tuple[float, ...]
    ensemble_size: int
    alpha: float = 0.75
    b: float = 0.1
    epsilon_front: float = 1e-6
    delta: Optional[float] = 1.5

    def __post_init__(self):
        object.__setattr__(self, "i0", self.lattice.as_site(self.i0))
        object.__setattr__(
            self, "measurement_times", tuple(float(t) for t in self.measurement_times)
        )
        if not self.lattice.contains(self.i0):
            raise ValueError(f"source site {self.i0} outside the box")
        if not self.alpha > 0.5:
            raise ValueError(f"alpha={self.alpha} must exceed 1/2")
        if not self.b > 0:
            raise ValueError("b must be positive")
        if not self.epsilon_front > 0:
            raise ValueError("epsilon_front must be positive")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if self.sampler.kept_samples < 1:
            raise ValueError("sampler settings keep no samples")
        if self.delta is not None and not (1.0 < self.delta < 4.0 * self.alpha - 1.0):
            raise ValueError(
                f"delta={self.delta} outside (1, 4*alpha-1) = (1, {4 * self.alpha - 1})"
            )
        times = self.measurement_times
        if not times or any(t <= 0 for t in times) or list(times) != sorted(set(times)):
            raise ValueError("measurement times must be positive, increasing, distinct")
        if times[-1] > self.integrator.t_end + 1e-9:
            raise ValueError("measurement times must lie within [0, t_end]")
        dt = self.integrator.dt
        for t in times:
            if abs(round(t / dt) * dt - t) > 1e-9 * max(1.0, t):
                raise ValueError(f"measurement time {t} does not land on the step grid")
        if cone_radius(times[-1], self.alpha) >= self.lattice.n:
            warnings.warn(
                "cone radius exceeds the box at the largest measurement time; "
                "records there will be flagged invalid",
                stacklevel=2,
            )

    def record_stride(self) -> int:
        steps = [int(round(t / self.integrator.dt)) for t in self.measurement_times]
        return math.gcd(*steps) if len(steps) > 1 else steps[0]


def member_seed(base_seed: int, index: int) -> int:
    """Counter-based per-member seed; adding members never shifts streams."""
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(index,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class MemberResult:
    """One ensemble member: front records, profiles, fields, Q track."""

    index: int
    seed: int
    records: list[FrontRecord] = field(default_factory=list)
    profiles: list[np.ndarray] = field(default_factory=list)
    fields: list[JacobianField] = field(default_factory=list)
    q_track: Optional[QGrowthTrack] = None
    c_front: float = math.nan
    error: Optional[str] = None


def run_member(cfg: ExperimentConfig, index: int) -> MemberResult:
    """Sample one thermal state, propagate the Jacobian, measure the front."""
    seed = member_seed(cfg.sampler.seed, index)
    out = MemberResult(index=index, seed=seed)
    sampler = replace(cfg.sampler, seed=seed)
    try:
        state = sample_ensemble(cfg.lattice, cfg.potential, sampler).states[0]
        icfg = replace(cfg.integrator, record_stride=cfg.record_stride())
        run = jacobian_field(cfg.lattice, cfg.potential, state, cfg.i0, icfg)
    except BlowUpError as err:
        out.error = str(err)
        return out
    out.fields = run.fields
    out.q_track = q_track_of_trajectory(cfg.lattice, cfg.potential, run.trajectory)
    ratios = []
    for t in cfg.measurement_times:
        idx = int(np.argmin(np.abs(run.trajectory.times - t)))
        fld = run.fields[idx]
        cone = cone_radius(t, cfg.alpha)
        dist = _distances_from(cfg.lattice, cfg.i0)
        outside = fld.norms[dist > cone]
        max_outside = float(outside.max()) if outside.size else 0.0
        rec = FrontRecord(
            t=t,
            r_front=front_radius(fld, cfg.i0, cfg.epsilon_front),
            cone_radius=cone,
            max_outside=max_outside,
            weighted_outside=math.exp(cfg.b * t) * max_outside,
            valid=cone < cfg.lattice.n,
        )
        out.records.append(rec)
        out.profiles.append(decay_profile(fld, cfg.i0))
        if cone > 0 and rec.valid:
            ratios.append(max(rec.r_front, 0) / cone)
    out.c_front = max(ratios) if ratios else math.nan
    return out


@dataclass
class ExperimentSummary:
    """Ensemble-level reductions of the front records."""

    times: tuple[float, ...]
    n_members: int
    n_errors: int
    valid_fraction: np.ndarray
    median_r_front: np.ndarray
    median_ratio: np.ndarray
    ratio_band: float
    median_weighted: np.ndarray
    weighted_nonincreasing: bool
    weighted_below_threshold_fraction: float
    report_threshold: float
    median_tail_slope: np.ndarray
    c_least_squares: float
    c_members: list[float]

    def to_dict(self) -> dict:
        return {
            "times": list(self.times),
            "n_members": self.n_members,
            "n_errors": self.n_errors,
            "valid_fraction": [float(x) for x in self.valid_fraction],
            "median_r_front": [float(x) for x in self.median_r_front],
            "median_ratio": [float(x) for x in self.median_ratio],
            "ratio_band": float(self.ratio_band),
            "median_weighted": [float(x) for x in self.median_weighted],
            "weighted_nonincreasing": bool(self.weighted_nonincreasing),
            "weighted_below_threshold_fraction": float(
                self.weighted_below_threshold_fraction
            ),
            "report_threshold": float(self.report_threshold),
            "median_tail_slope": [float(x) for x in self.median_tail_slope],
            "c_least_squares": float(self.c_least_squares),
            "c_members": [float(x) for x in self.c_members],
        }


def summarize(
    cfg: ExperimentConfig,
    members: Sequence[MemberResult],
    report_threshold: float = 1.0,
) -> ExperimentSummary:
    """Reduce member records; invalid (box-escaped) records are excluded."""
    times = cfg.measurement_times
    ok = [m for m in members if m.error is None]
    n_ok = len(ok)
    valid_fraction = np.zeros(len(times))
    median_r = np.full(len(times), math.nan)
    median_ratio = np.full(len(times), math.nan)
    median_weighted = np.full(len(times), math.nan)
    median_slope = np.full(len(times), math.nan)
    for ti, t in enumerate(times):
        recs = [m.records[ti] for m in ok]
        valid = [r for r in recs if r.valid]
        valid_fraction[ti] = len(valid) / n_ok if n_ok else 0.0
        if valid:
            median_r[ti] = float(np.median([max(r.r_front, 0) for r in valid]))
            median_weighted[ti] = float(np.median([r.weighted_outside for r in valid]))
            cone = cone_radius(t, cfg.alpha)
            if cone > 0:
                median_ratio[ti] = median_r[ti] / cone
            slopes = [
                profile_tail_slope(m.profiles[ti], max(m.records[ti].r_front, 0))
                for m in ok
                if m.records[ti].valid
            ]
            slopes = [s for s in slopes if math.isfinite(s)]
            if slopes:
                median_slope[ti] = float(np.median(slopes))
    finite = median_ratio[np.isfinite(median_ratio)]
    if finite.size:
        center = float(np.median(finite))
        ratio_band = float(np.max(np.abs(finite - center)) / center) if center > 0 else math.inf
    else:
        ratio_band = math.nan
    mw = median_weighted[np.isfinite(median_weighted)]
    nonincreasing = bool(np.all(np.diff(mw) <= np.abs(mw[:-1]) * 1e-12 + 1e-300)) if mw.size else False
    last = [m.records[-1] for m in ok if m.records and m.records[-1].valid]
    below = (
        sum(1 for r in last if r.weighted_outside < report_threshold) / len(last)
        if last
        else math.nan
    )
    cones = np.array([cone_radius(t, cfg.alpha) for t in times])
    mask = np.isfinite(median_r) & (cones > 0)
    c_ls = (
        float(np.sum(cones[mask] * median_r[mask]) / np.sum(cones[mask] ** 2))
        if mask.any()
        else math.nan
    )
    return ExperimentSummary(
        times=times,
        n_members=len(members),
        n_errors=len(members) - n_ok,
        valid_fraction=valid_fraction,
        median_r_front=median_r,
        median_ratio=median_ratio,
        ratio_band=ratio_band,
        median_weighted=median_weighted,
        weighted_nonincreasing=nonincreasing,
        weighted_below_threshold_fraction=below,
        report_threshold=report_threshold,
        median_tail_slope=median_slope,
        c_least_squares=c_ls,
        c_members=[m.c_front for m in ok],
    )


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    members: list[MemberResult]
    summary: ExperimentSummary


def velocity_bound_experiment(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    """Run every ensemble member (optionally in parallel) and summarize.

    Results are merged in member order, so the output is independent of
    ``jobs``.
    """
    indices = list(range(cfg.ensemble_size))
    worker = partial(run_member, cfg)
    if jobs <= 1:
        members = [worker(i) for i in indices]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            members = list(pool.map(worker, indices))
    return ExperimentResult(cfg, members, summarize(cfg, members))


# ---------------------------------------------------------------------------
# Series-bound domination fit.
# ---------------------------------------------------------------------------


@dataclass
class BoundComparison:
    """Smallest c1 making the series bound dominate the measured norms."""

    c1: float
    violations: int
    vacuous: bool
    n_pairs: int


def bound_comparison(
    spec: LatticeSpec,
    fields: Sequence[JacobianField],
    q_track: QGrowthTrack,
    max_time: Optional[float] = None,
    rtol: float = 0.01,
) -> BoundComparison:
    """Bisect the smallest c1 with series_bound >= every measured norm.

    Norms are reduced to per-distance maxima first.  ``q_track`` supplies
    the running sup of Q up to each field time.  ``vacuous`` flags fits
    where domination only happens through float overflow of the series.
    """
    chosen = [f for f in fields if max_time is None or f.t <= max_time + 1e-9]
    if not chosen:
        raise ValueError("no fields selected")
    data = []
    for f in chosen:
        profile = decay_profile(f, f.source)
        data.append((f.t, q_track.sup_to(f.t), profile))
    n_pairs = sum(int(np.sum(p > 0)) for _, _, p in data)

    def dominates(c1: float) -> bool:
        for t, supq, profile in data:
            bounds = series_bound_profile(t, supq, c1, len(profile) - 1)
            if np.any(bounds < profile):
                return False
        return True

    hi = 1.0
    while not dominates(hi):
        hi *= 2.0
        if hi > 1e12:
            return BoundComparison(math.nan, n_pairs, True, n_pairs)
    lo = hi / 2.0
    while lo > 1e-12 and dominates(lo):
        hi = lo
        lo /= 2.0
    if not dominates(lo):
        while (hi - lo) / hi > rtol:
            mid = math.sqrt(lo * hi)
            if dominates(mid):
                hi = mid
            else:
                lo = mid
    vacuous = False
    violations = 0
    for t, supq, profile in data:
        bounds = series_bound_profile(t, supq, hi, len(profile) - 1)
        violations += int(np.sum(bounds < profile))
        if np.any(np.isinf(bounds) & (profile > 0)):
            vacuous = True
    return BoundComparison(float(hi), violations, vacuous, n_pairs)
