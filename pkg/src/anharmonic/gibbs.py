"""Thermal sampling of the finite-volume Gibbs measure exp(-beta H).

Positions are sampled by sequential single-site Metropolis sweeps (fixed
site order, so a seed fully determines the chain); momenta are never
MCMC-updated since their marginal is exactly Gaussian and independent
of q.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dynamics import IntegratorConfig, evolve
from .errors import BlowUpError, LambdaTooLargeError
from .lattice import (
    Cube,
    LatticeSpec,
    PhaseState,
    Potential,
    _admissible_arrays,
    _check_cube,
    _neighbor_flat,
    cube_energies,
    q_statistic,
    zero_state,
)

_EXP_LIMIT = 700.0


@dataclass(frozen=True)
class SamplerConfig:
    """Metropolis chain parameters; proposal_sigma defaults to 0.5/sqrt(beta)."""

    beta: float
    sweeps: int
    burn_in: int = 0
    proposal_sigma: Optional[float] = None
    seed: int = 0
    thin: int = 1

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta={self.beta} must be positive")
        if not 0 <= self.burn_in < self.sweeps:
            raise ValueError("need 0 <= burn_in < sweeps")
        if self.proposal_sigma is not None and not self.proposal_sigma > 0:
            raise ValueError("proposal_sigma must be positive")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")

    @property
    def sigma(self) -> float:
        return self.proposal_sigma if self.proposal_sigma is not None else 0.5 / math.sqrt(self.beta)

    @property
    def kept_samples(self) -> int:
        return (self.sweeps - self.burn_in) // self.thin


def sample_momenta(spec: LatticeSpec, beta: float, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. Gaussian momenta with variance 1/beta per site."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    return rng.normal(0.0, 1.0 / math.sqrt(beta), spec.nsites)


def _delta_energy(pot: Potential, K: float, qi: float, qp: float, deg: int, nbr_sum: float) -> float:
    """H change when one site moves qi -> qp with neighbor sum ``nbr_sum``."""
    a4, a3, a2, a1 = pot.a4, pot.a3, pot.a2, pot.a1
    du = (((a4 * qp + a3) * qp + a2) * qp + a1) * qp
    du -= (((a4 * qi + a3) * qi + a2) * qi + a1) * qi
    du += 0.5 * K * (deg * (qp * qp - qi * qi) - 2.0 * (qp - qi) * nbr_sum)
    return du


def metropolis_sweep(
    spec: LatticeSpec,
    pot: Potential,
    state: PhaseState,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> tuple[PhaseState, float]:
    """One sequential sweep of single-site Gaussian-proposal Metropolis on q.

    Momenta are untouched.  Returns the new state and the acceptance rate.
    """
    state.require_finite("metropolis_sweep")
    q = state.q.tolist()
    nbrs = _neighbor_flat(spec)
    beta = cfg.beta
    K = spec.K
    a4, a3, a2, a1 = pot.a4, pot.a3, pot.a2, pot.a1
    steps = rng.normal(0.0, cfg.sigma, spec.nsites).tolist()
    us = rng.random(spec.nsites).tolist()
    exp = math.exp
    accepted = 0
    for i in range(spec.nsites):
        qi = q[i]
        qp = qi + steps[i]
        s = 0.0
        nb = nbrs[i]
        for j in nb:
            s += q[j]
        du = (((a4 * qp + a3) * qp + a2) * qp + a1) * qp
        du -= (((a4 * qi + a3) * qi + a2) * qi + a1) * qi
        du += 0.5 * K * (len(nb) * (qp * qp - qi * qi) - 2.0 * (qp - qi) * s)
        if du <= 0.0 or us[i] < exp(-beta * du):
            q[i] = qp
            accepted += 1
    return PhaseState(np.asarray(q), state.p.copy()), accepted / spec.nsites


@dataclass
class Ensemble:
    """Kept samples of one chain plus per-sweep acceptance rates."""

    states: list[PhaseState]
    acceptance: np.ndarray
    config: SamplerConfig

    def __len__(self) -> int:
        return len(self.states)

    def __iter__(self):
        return iter(self.states)

    @property
    def mean_acceptance(self) -> float:
        return float(np.mean(self.acceptance))


def sample_ensemble(spec: LatticeSpec, pot: Potential, cfg: SamplerConfig) -> Ensemble:
    """Run one chain from a cold start; keep every thin-th post-burn-in sweep.

    Each kept q-configuration is paired with fresh exact momenta drawn
    from the same stream, so a seed determines the ensemble bit-for-bit.
    """
    rng = np.random.default_rng(cfg.seed)
    state = zero_state(spec)
    acc = np.empty(cfg.sweeps)
    kept: list[PhaseState] = []
    for sweep in range(1, cfg.sweeps + 1):
        state, a = metropolis_sweep(spec, pot, state, cfg, rng)
        acc[sweep - 1] = a
        if sweep > cfg.burn_in and (sweep - cfg.burn_in) % cfg.thin == 0:
            p = sample_momenta(spec, cfg.beta, rng)
            kept.append(PhaseState(state.q.copy(), p))
    return Ensemble(kept, acc, cfg)


@dataclass
class EnsembleDiagnostics:
    """Measure-level diagnostics; each routine fills its own slice."""

    q_values: Optional[np.ndarray] = None
    tail_grid: Optional[np.ndarray] = None
    tail_prob: Optional[np.ndarray] = None
    tail_slope: Optional[float] = None
    lam: Optional[float] = None
    cube_centers: Optional[np.ndarray] = None
    cube_ks: Optional[np.ndarray] = None
    c_hat: Optional[np.ndarray] = None
    c_omega: Optional[float] = None
    goodset_delta: Optional[float] = None
    goodset_k: Optional[tuple[int, ...]] = None
    goodset_fail_fraction: Optional[np.ndarray] = None
    goodset_blowups: Optional[int] = None


def _cube_arrays(spec: LatticeSpec, cubes: Optional[Sequence[Cube]]):
    if cubes is None:
        return _admissible_arrays(spec)
    for cube in cubes:
        _check_cube(spec, cube)
    centers = np.array([c.center for c in cubes], dtype=int)
    ks = np.array([c.k for c in cubes], dtype=int)
    return centers, ks


def superstability_diagnostic(
    spec: LatticeSpec,
    pot: Potential,
    states: Sequence[PhaseState],
    lam: float,
    cubes: Optional[Sequence[Cube]] = None,
) -> EnsembleDiagnostics:
    """Per-cube C_hat = log(mean exp(lam W)) / volume over the ensemble.

    ``cubes`` defaults to every admissible cube of the Q statistic.  If
    exp(lam*W) would overflow the float range the routine refuses and
    suggests a smaller lambda.
    """
    if not states:
        raise ValueError("empty ensemble")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    centers, ks = _cube_arrays(spec, cubes)
    m = len(states)
    wmax = np.full(len(ks), -np.inf)
    for s in states:
        np.maximum(wmax, cube_energies(spec, pot, s, centers, ks), out=wmax)
    peak = float(lam * wmax.max())
    if peak > _EXP_LIMIT:
        suggested = 0.9 * _EXP_LIMIT / float(wmax.max())
        raise LambdaTooLargeError(
            f"exp(lambda*W) overflows (lambda*max W = {peak:.3g}); "
            f"retry with lambda <= {suggested:.3g}",
            suggested=suggested,
        )
    acc = np.zeros(len(ks))
    for s in states:
        acc += np.exp(lam * (cube_energies(spec, pot, s, centers, ks) - wmax))
    volumes = (2.0 * ks + 1.0) ** spec.d
    c_hat = (lam * wmax + np.log(acc / m)) / volumes
    return EnsembleDiagnostics(
        lam=lam,
        cube_centers=centers,
        cube_ks=ks,
        c_hat=c_hat,
        c_omega=float(c_hat.max()),
    )


def q_tail_diagnostic(
    spec: LatticeSpec,
    pot: Potential,
    states: Sequence[PhaseState],
    n_grid: Sequence[float],
) -> EnsembleDiagnostics:
    """Empirical P(Q > N) on a grid plus the log-tail slope.

    The slope is fit by least squares over grid points where the tail
    still has at least 5 samples (P > 5/M); nan when fewer than two such
    points exist.
    """
    if not states:
        raise ValueError("empty ensemble")
    grid = np.asarray(sorted(float(x) for x in n_grid))
    qv = np.array([q_statistic(spec, pot, s).value for s in states])
    prob = (qv[:, None] > grid[None, :]).mean(axis=0)
    mask = prob > 5.0 / len(qv)
    if mask.sum() >= 2:
        slope = float(np.polyfit(grid[mask], np.log(prob[mask]), 1)[0])
    else:
        slope = math.nan
    return EnsembleDiagnostics(q_values=qv, tail_grid=grid, tail_prob=prob, tail_slope=slope)


def good_set_diagnostic(
    spec: LatticeSpec,
    pot: Potential,
    states: Sequence[PhaseState],
    delta: float,
    k_list: Sequence[int],
    dt: float,
) -> EnsembleDiagnostics:
    """Fraction of samples with Q(flow at time k) > log^delta k, per k.

    Samples whose evolution blows up are excluded from the fractions and
    counted separately.
    """
    if not delta > 1:
        raise ValueError("delta must be > 1")
    k_list = sorted(int(k) for k in k_list)
    if not k_list or k_list[0] < 3:
        raise ValueError("every k must be >= 3")
    fails = np.zeros(len(k_list))
    alive = np.zeros(len(k_list))
    blowups = 0
    for s in states:
        cur = s
        t_prev = 0.0
        blown = False
        for idx, k in enumerate(k_list):
            if not blown:
                cfg = IntegratorConfig(dt=dt, t_end=k - t_prev, record_stride=10**9)
                try:
                    cur = evolve(spec, pot, cur, cfg).states[-1]
                    t_prev = float(k)
                except BlowUpError:
                    blown = True
                    blowups += 1
            if blown:
                continue
            alive[idx] += 1
            if q_statistic(spec, pot, cur).value > math.log(k) ** delta:
                fails[idx] += 1
    frac = np.where(alive > 0, fails / np.maximum(alive, 1), np.nan)
    return EnsembleDiagnostics(
        goodset_delta=delta,
        goodset_k=tuple(k_list),
        goodset_fail_fraction=frac,
        goodset_blowups=blowups,
    )
