"""Exact linearization of the discrete flow around a trajectory.

The tangent map is the derivative of the velocity-Verlet step itself,
not a discretization of the continuous variational equation.  That keeps
the Jacobian exactly consistent with the simulated flow and conserves
the symplectic pairing of the two propagated tangent vectors to
roundoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .dynamics import IntegratorConfig, PhaseState, Trajectory
from .errors import BlowUpError
from .lattice import (
    LatticeSpec,
    Potential,
    _axis_slice,
    _degree_grid,
    force_field,
)


@dataclass
class TangentVector:
    """Per-site (dq, dp) components of one tangent direction."""

    dq: np.ndarray
    dp: np.ndarray

    def copy(self) -> "TangentVector":
        return TangentVector(self.dq.copy(), self.dp.copy())


@dataclass
class TangentPair:
    """The two Jacobian columns with respect to one source site.

    ``wrt_q`` starts as the unit perturbation of q at the source,
    ``wrt_p`` as the unit perturbation of p.  Their symplectic product
    equals 1 for all time under the exact tangent map.
    """

    source: tuple[int, ...]
    wrt_q: TangentVector
    wrt_p: TangentVector

    def copy(self) -> "TangentPair":
        return TangentPair(self.source, self.wrt_q.copy(), self.wrt_p.copy())


def unit_tangent_pair(spec: LatticeSpec, i0) -> TangentPair:
    """Canonical t=0 tangent pair for source site i0."""
    i0 = spec.as_site(i0)
    flat = spec.flat_index(i0)
    wrt_q = TangentVector(np.zeros(spec.nsites), np.zeros(spec.nsites))
    wrt_p = TangentVector(np.zeros(spec.nsites), np.zeros(spec.nsites))
    wrt_q.dq[flat] = 1.0
    wrt_p.dp[flat] = 1.0
    return TangentPair(i0, wrt_q, wrt_p)


def symplectic_product(pair: TangentPair) -> float:
    """sum_j (dq_j^wq * dp_j^wp - dp_j^wq * dq_j^wp); 1 for canonical pairs."""
    return float(
        np.dot(pair.wrt_q.dq, pair.wrt_p.dp) - np.dot(pair.wrt_q.dp, pair.wrt_p.dq)
    )


def b_entry(spec: LatticeSpec, pot: Potential, state: PhaseState, j, h) -> float:
    """Entry (j, h) of the force linearization dF_j/dq_h.

    -[U''(q_j) + (#in-box neighbors)*K] on the diagonal, K on nearest
    neighbors, 0 otherwise.  The diagonal uses the actual neighbor count:
    under free boundary the truncated force has fewer bonds at the
    boundary, and the tangent map must differentiate that force exactly.
    """
    j = spec.as_site(j)
    h = spec.as_site(h)
    jf = spec.flat_index(j)
    spec.flat_index(h)
    if h == j:
        deg = float(np.asarray(_degree_grid(spec)).reshape(-1)[jf])
        return float(-(pot.d2u(state.q[jf]) + spec.K * deg))
    if sum(abs(a - b) for a, b in zip(j, h)) == 1:
        return float(spec.K)
    return 0.0


def _b_diag(spec: LatticeSpec, pot: Potential, q: np.ndarray) -> np.ndarray:
    """Diagonal of the B matrix, on the grid."""
    qg = q.reshape(spec.shape)
    return -(pot.d2u(qg) + spec.K * np.asarray(_degree_grid(spec)))


def _b_apply(spec: LatticeSpec, diag: np.ndarray, v: np.ndarray) -> np.ndarray:
    """B @ v with the precomputed diagonal; v flat, result flat."""
    vg = v.reshape(spec.shape)
    out = diag * vg
    for ax in range(spec.d):
        out[_axis_slice(spec.d, ax, slice(None, -1))] += spec.K * vg[
            _axis_slice(spec.d, ax, slice(1, None))
        ]
        out[_axis_slice(spec.d, ax, slice(1, None))] += spec.K * vg[
            _axis_slice(spec.d, ax, slice(None, -1))
        ]
    return out.reshape(-1)


def b_apply(spec: LatticeSpec, pot: Potential, state: PhaseState, v: np.ndarray) -> np.ndarray:
    """Matrix-vector product of the force linearization at a state."""
    return _b_apply(spec, _b_diag(spec, pot, state.q), np.asarray(v, dtype=np.float64))


def tangent_step(
    spec: LatticeSpec,
    pot: Potential,
    state_before: PhaseState,
    state_after: PhaseState,
    pair: TangentPair,
    dt: float,
) -> TangentPair:
    """Advance the tangent pair by the exact Jacobian of one Verlet step.

    ``state_before`` and ``state_after`` are the base states bracketing
    the step (the second force pass of Verlet is evaluated at the
    post-drift positions, which are exactly ``state_after.q``).
    """
    diag_b = _b_diag(spec, pot, state_before.q)
    diag_a = _b_diag(spec, pot, state_after.q)
    half = 0.5 * dt
    out = pair.copy()
    for vec in (out.wrt_q, out.wrt_p):
        vec.dp += half * _b_apply(spec, diag_b, vec.dq)
        vec.dq += dt * vec.dp
        vec.dp += half * _b_apply(spec, diag_a, vec.dq)
    for vec in (out.wrt_q, out.wrt_p):
        for arr in (vec.dq, vec.dp):
            if not np.isfinite(arr).all():
                finite = arr[np.isfinite(arr)]
                peak = float(np.max(np.abs(finite))) if finite.size else math.inf
                raise BlowUpError(
                    f"tangent blow-up: largest finite entry {peak:.3e}"
                )
    return out


@dataclass
class JacobianField(object):
    """Per-site 2x2 Jacobian blocks at one time, plus their uniform norms.

    ``blocks[j]`` is [[dq_j/dq_0, dq_j/dp_0], [dp_j/dq_0, dp_j/dp_0]] for
    the source site; ``norms[j]`` is the max absolute entry.
    ``source_x0`` records the source site's initial (q, p) so local
    observables can be differentiated there.
    """

    spec: LatticeSpec
    t: float
    source: tuple[int, ...]
    source_x0: tuple[float, float]
    blocks: np.ndarray
    norms: np.ndarray


def _field_from_pair(spec, t, pair, source_x0) -> JacobianField:
    blocks = np.zeros((spec.nsites, 2, 2))
    blocks[:, 0, 0] = pair.wrt_q.dq
    blocks[:, 0, 1] = pair.wrt_p.dq
    blocks[:, 1, 0] = pair.wrt_q.dp
    blocks[:, 1, 1] = pair.wrt_p.dp
    norms = np.abs(blocks).max(axis=(1, 2))
    return JacobianField(spec, t, pair.source, source_x0, blocks, norms)


@dataclass
class JacobianRun:
    """Jacobian snapshots co-evolved with the base trajectory."""

    source: tuple[int, ...]
    fields: list[JacobianField]
    trajectory: Trajectory


def jacobian_field(
    spec: LatticeSpec,
    pot: Potential,
    initial: PhaseState,
    i0,
    cfg: IntegratorConfig,
) -> JacobianRun:
    """Co-evolve the base state and the tangent pair from source i0.

    Emits a JacobianField at t=0, every ``record_stride`` steps, and at
    the final step.  Raises BlowUpError (with the failure time) if either
    flow leaves the representable range.
    """
    i0 = spec.as_site(i0)
    initial.require_finite("jacobian_field initial state")
    flat0 = spec.flat_index(i0)
    source_x0 = (float(initial.q[flat0]), float(initial.p[flat0]))
    pair = unit_tangent_pair(spec, i0)
    q = initial.q.copy()
    p = initial.p.copy()
    times = [0.0]
    states = [PhaseState(q.copy(), p.copy())]
    fields = [_field_from_pair(spec, 0.0, pair, source_x0)]
    half = 0.5 * cfg.dt
    deg = np.asarray(_degree_grid(spec))
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, cfg.n_steps + 1):
            diag = -(pot.d2u(q.reshape(spec.shape)) + spec.K * deg)
            f = force_field(spec, pot, q)
            p_half = p + half * f
            for vec in (pair.wrt_q, pair.wrt_p):
                vec.dp += half * _b_apply(spec, diag, vec.dq)
                vec.dq += cfg.dt * vec.dp
            q = q + cfg.dt * p_half
            diag = -(pot.d2u(q.reshape(spec.shape)) + spec.K * deg)
            p = p_half + half * force_field(spec, pot, q)
            for vec in (pair.wrt_q, pair.wrt_p):
                vec.dp += half * _b_apply(spec, diag, vec.dq)
            t = step * cfg.dt
            ok = np.isfinite(q).all() and np.isfinite(p).all()
            ok = ok and all(
                np.isfinite(v.dq).all() and np.isfinite(v.dp).all()
                for v in (pair.wrt_q, pair.wrt_p)
            )
            if not ok:
                raise BlowUpError(
                    f"tangent/base blow-up at t={t:.6g} (step {step})",
                    time=t,
                    step=step,
                )
            if step % cfg.record_stride == 0 or step == cfg.n_steps:
                times.append(t)
                states.append(PhaseState(q.copy(), p.copy()))
                fields.append(_field_from_pair(spec, t, pair, source_x0))
    return JacobianRun(i0, fields, Trajectory(np.asarray(times), states))


# ---------------------------------------------------------------------------
# Poisson brackets of single-site observables through the flow.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Observable:
    """Single-site observable with its phase-space partial derivatives.

    ``grad_bound``, when declared, is the sup norm of the gradient and
    enables the bracket inequality check.
    """

    name: str
    value: Callable[[float, float], float]
    dq: Callable[[float, float], float]
    dp: Callable[[float, float], float]
    grad_bound: Optional[float] = None


COORD_Q = Observable("q", lambda q, p: q, lambda q, p: 1.0, lambda q, p: 0.0, 1.0)
COORD_P = Observable("p", lambda q, p: p, lambda q, p: 0.0, lambda q, p: 1.0, 1.0)
TANH_Q = Observable(
    "tanh_q",
    lambda q, p: math.tanh(q),
    lambda q, p: 1.0 / math.cosh(q) ** 2,
    lambda q, p: 0.0,
    1.0,
)
TANH_P = Observable(
    "tanh_p",
    lambda q, p: math.tanh(p),
    lambda q, p: 0.0,
    lambda q, p: 1.0 / math.cosh(p) ** 2,
    1.0,
)


def poisson_bracket(
    f: Observable,
    g: Observable,
    i,
    j,
    field: JacobianField,
    state_t: PhaseState,
) -> float:
    """{f_i, g_j o flow} via the chain rule through the Jacobian blocks.

    ``f`` is differentiated at the source site's initial point (recorded
    in the field), ``g`` at site j of the evolved state ``state_t``.
    """
    spec = field.spec
    i = spec.as_site(i)
    if i != field.source:
        raise ValueError(
            f"jacobian field was propagated from source {field.source}, not {i}"
        )
    jf = spec.flat_index(j)
    q0, p0 = field.source_x0
    fq = f.dq(q0, p0)
    fp = f.dp(q0, p0)
    qj = float(state_t.q[jf])
    pj = float(state_t.p[jf])
    gq = g.dq(qj, pj)
    gp = g.dp(qj, pj)
    blk = field.blocks[jf]
    value = fq * (gq * blk[0, 1] + gp * blk[1, 1]) - fp * (gq * blk[0, 0] + gp * blk[1, 0])
    if f.grad_bound is not None and g.grad_bound is not None:
        limit = 4.0 * f.grad_bound * g.grad_bound * float(field.norms[jf])
        if abs(value) > limit * (1 + 1e-12) + 1e-300:
            raise RuntimeError(
                f"bracket bound violated: |{value:.6g}| > 4*{f.grad_bound}*{g.grad_bound}"
                f"*{field.norms[jf]:.6g}"
            )
    return float(value)


# ---------------------------------------------------------------------------
# Series upper bound on the Jacobian norms.
# ---------------------------------------------------------------------------

_TERM_FLOOR = 1e-300
_LOG_OVERFLOW = 709.0


def _log_term(n: int, log_h: float) -> float:
    # log of (H * log^(1/2)(e+n) / n^2)^n
    return n * (log_h + 0.5 * math.log(math.log(math.e + n)) - 2.0 * math.log(n))


def series_bound(t: float, q_sup: float, j_dist: int, c1: float) -> float:
    """(1+t) * sum_{n >= j_dist} (H log^(1/2)(e+n) / n^2)^n, H = c1 t^2 sqrt(q_sup).

    The n=0 term (reachable only for j_dist=0) is defined as 1.  The sum
    is truncated once terms drop below 1e-300 or after the term ratio
    stays below 1/2 for 10 consecutive terms; it saturates to +inf if a
    term overflows the float range.
    """
    if t < 0 or q_sup < 0 or j_dist < 0 or not c1 > 0:
        raise ValueError("need t >= 0, q_sup >= 0, j_dist >= 0, c1 > 0")
    prefac = 1.0 + t
    total = 1.0 if j_dist == 0 else 0.0
    h = c1 * t * t * math.sqrt(q_sup)
    if h == 0.0:
        return prefac * total
    log_h = math.log(h)
    prev = None
    streak = 0
    n = max(j_dist, 1)
    while n <= max(j_dist, 1) + 200_000:
        lt = _log_term(n, log_h)
        if lt > _LOG_OVERFLOW:
            return math.inf
        term = math.exp(lt)
        total += term
        if term < _TERM_FLOOR:
            break
        if prev is not None and term < 0.5 * prev:
            streak += 1
            if streak >= 10:
                break
        else:
            streak = 0
        prev = term
        n += 1
    return prefac * total


def series_bound_profile(t: float, q_sup: float, c1: float, max_dist: int) -> np.ndarray:
    """series_bound for every j_dist in 0..max_dist, sharing one term table.

    Truncates on the 1e-300 floor only, so values can exceed the scalar
    op by the (sub-0.2%) tail the scalar's ratio rule drops.
    """
    if t < 0 or q_sup < 0 or max_dist < 0 or not c1 > 0:
        raise ValueError("need t >= 0, q_sup >= 0, max_dist >= 0, c1 > 0")
    prefac = 1.0 + t
    bounds = np.zeros(max_dist + 1)
    bounds[0] = prefac
    h = c1 * t * t * math.sqrt(q_sup)
    if h == 0.0:
        return bounds
    log_h = math.log(h)
    n_end = max(max_dist + 1, 64)
    while True:
        if _log_term(n_end, log_h) < math.log(_TERM_FLOOR) - 60 and n_end >= max_dist + 1:
            break
        if n_end > 4_000_000:
            break
        n_end *= 2
    ns = np.arange(1, n_end + 1, dtype=np.float64)
    with np.errstate(over="ignore"):
        log_terms = ns * (log_h + 0.5 * np.log(np.log(math.e + ns)) - 2.0 * np.log(ns))
        terms = np.exp(log_terms)
    suffix = np.cumsum(terms[::-1])[::-1]
    bounds[0] = prefac * (1.0 + suffix[0])
    upto = min(max_dist, n_end)
    if upto >= 1:
        bounds[1 : upto + 1] = prefac * suffix[:upto]
    return bounds
