"""CSV and JSON export with byte-deterministic formatting.

Floats are written with repr() (shortest round-trip form) and all files
use LF newlines, so identical inputs produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .dynamics import ConvergenceReport, Trajectory, energy_drift
from .gibbs import Ensemble, EnsembleDiagnostics
from .lattice import LatticeSpec, PhaseState, Potential, hamiltonian
from .lightcone import ExperimentConfig, MemberResult
from .tangent import JacobianField


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def _coord_header(d: int) -> list[str]:
    return [f"i{ax + 1}" for ax in range(d)]


def write_state_csv(path, spec: LatticeSpec, state: PhaseState):
    """Schema: i1[,i2[,i3]],q,p with one row per site in flat order."""
    lines = [",".join(_coord_header(spec.d) + ["q", "p"])]
    coords = spec.sites()
    for flat in range(spec.nsites):
        row = [str(int(c)) for c in coords[flat]]
        row += [fmt(state.q[flat]), fmt(state.p[flat])]
        lines.append(",".join(row))
    _write_text(path, "\n".join(lines) + "\n")


def read_state_csv(path, spec: LatticeSpec) -> PhaseState:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln]
    expected = ",".join(_coord_header(spec.d) + ["q", "p"])
    if lines[0] != expected:
        raise ValueError(f"unexpected header {lines[0]!r}; want {expected!r}")
    if len(lines) - 1 != spec.nsites:
        raise ValueError(f"expected {spec.nsites} rows, found {len(lines) - 1}")
    q = np.empty(spec.nsites)
    p = np.empty(spec.nsites)
    for row in lines[1:]:
        parts = row.split(",")
        site = tuple(int(c) for c in parts[: spec.d])
        flat = spec.flat_index(site)
        q[flat] = float(parts[spec.d])
        p[flat] = float(parts[spec.d + 1])
    return PhaseState(q, p)


def write_trajectory_csv(path, spec: LatticeSpec, traj: Trajectory):
    """Long format: t,i1[,i2[,i3]],q,p."""
    lines = [",".join(["t"] + _coord_header(spec.d) + ["q", "p"])]
    coords = spec.sites()
    for t, state in zip(traj.times, traj.states):
        for flat in range(spec.nsites):
            row = [fmt(t)] + [str(int(c)) for c in coords[flat]]
            row += [fmt(state.q[flat]), fmt(state.p[flat])]
            lines.append(",".join(row))
    _write_text(path, "\n".join(lines) + "\n")


def write_energy_csv(path, spec: LatticeSpec, pot: Potential, traj: Trajectory):
    drift = energy_drift(spec, pot, traj)
    lines = ["t,H,drift"]
    for t, state, dr in zip(traj.times, traj.states, drift):
        lines.append(",".join([fmt(t), fmt(hamiltonian(spec, pot, state)), fmt(dr)]))
    _write_text(path, "\n".join(lines) + "\n")


def write_jacobian_csv(path, fields: Sequence[JacobianField]):
    lines = ["t,site,d_qq,d_qp,d_pq,d_pp,norm"]
    for f in fields:
        for site in range(len(f.norms)):
            blk = f.blocks[site]
            lines.append(
                ",".join(
                    [
                        fmt(f.t),
                        str(site),
                        fmt(blk[0, 0]),
                        fmt(blk[0, 1]),
                        fmt(blk[1, 0]),
                        fmt(blk[1, 1]),
                        fmt(f.norms[site]),
                    ]
                )
            )
    _write_text(path, "\n".join(lines) + "\n")


def write_jacobian_norms_csv(path, fields: Sequence[JacobianField]):
    """Compact export: t,site,log10_norm."""
    lines = ["t,site,log10_norm"]
    with np.errstate(divide="ignore"):
        for f in fields:
            logs = np.log10(f.norms)
            for site in range(len(f.norms)):
                lines.append(",".join([fmt(f.t), str(site), fmt(logs[site])]))
    _write_text(path, "\n".join(lines) + "\n")


def write_front_csv(path, cfg: ExperimentConfig, members: Sequence[MemberResult]):
    lines = ["seed,t,epsilon,r_front,cone_radius,max_outside,weighted_outside,valid"]
    for m in members:
        for rec in m.records:
            lines.append(
                ",".join(
                    [
                        str(m.seed),
                        fmt(rec.t),
                        fmt(cfg.epsilon_front),
                        str(rec.r_front),
                        fmt(rec.cone_radius),
                        fmt(rec.max_outside),
                        fmt(rec.weighted_outside),
                        "1" if rec.valid else "0",
                    ]
                )
            )
    _write_text(path, "\n".join(lines) + "\n")


def write_tail_csv(path, diag: EnsembleDiagnostics):
    lines = ["N,P_tail"]
    for n, p in zip(diag.tail_grid, diag.tail_prob):
        lines.append(",".join([fmt(n), fmt(p)]))
    _write_text(path, "\n".join(lines) + "\n")


def write_superstability_csv(path, diag: EnsembleDiagnostics):
    lines = ["nu,k,C_hat"]
    for center, k, c in zip(diag.cube_centers, diag.cube_ks, diag.c_hat):
        nu = ";".join(str(int(c_)) for c_ in np.atleast_1d(center))
        lines.append(",".join([nu, str(int(k)), fmt(c)]))
    _write_text(path, "\n".join(lines) + "\n")


def write_convergence_csv(path, report: ConvergenceReport):
    lines = ["n,u_k,d_n,phi_n"]
    for n, u, d, phi in zip(
        report.truncations, report.u_values, report.d_values, report.phi_values
    ):
        lines.append(",".join([str(n), fmt(u), fmt(d), fmt(phi)]))
    _write_text(path, "\n".join(lines) + "\n")


def write_ensemble(out_dir, spec: LatticeSpec, ensemble: Ensemble, extra: dict | None = None):
    """Directory of per-sample state CSVs plus a manifest."""
    out_dir = Path(out_dir)
    files = []
    for idx, state in enumerate(ensemble.states):
        rel = f"states/state_{idx:05d}.csv"
        write_state_csv(out_dir / rel, spec, state)
        files.append(rel)
    manifest = {
        "seed": ensemble.config.seed,
        "n_samples": len(ensemble.states),
        "acceptance_rates": [float(a) for a in ensemble.acceptance],
        "mean_acceptance": ensemble.mean_acceptance,
        "files": files,
    }
    if extra:
        manifest.update(extra)
    write_json(out_dir / "manifest.json", manifest)
    return manifest


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path, obj):
    _write_text(path, canonical_json(obj))


def config_hash(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()
