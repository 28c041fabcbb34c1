"""Config-driven batch front end.

Subcommands: simulate | tangent | sample | front | converge.  One TOML
config drives a run; unknown keys fail fast.  Progress goes to stderr,
data only to files, so pipes stay clean.  Exit codes: 0 success, 2
config error, 3 runtime numeric error.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import io
from .dynamics import IntegratorConfig, convergence_study, evolve
from .errors import BlowUpError, ConfigError, LambdaTooLargeError
from .gibbs import (
    SamplerConfig,
    q_tail_diagnostic,
    sample_ensemble,
    superstability_diagnostic,
)
from .lattice import LatticeSpec, Potential, zero_state
from .lightcone import ExperimentConfig, bound_comparison, velocity_bound_experiment
from .tangent import jacobian_field

_REQUIRED = object()

_TOP_KEYS = {"seed": "int", "out": "str"}
_SCHEMA = {
    "lattice": {"d": "int", "n": "int", "K": "float"},
    "potential": {"a0": "float", "a1": "float", "a2": "float", "a3": "float", "a4": "float"},
    "integrator": {"dt": "float", "t_end": "float", "record_stride": "int"},
    "sampler": {
        "beta": "float",
        "sweeps": "int",
        "burn_in": "int",
        "proposal_sigma": "float",
        "thin": "int",
    },
    "experiment": {
        "i0": "site",
        "alpha": "float",
        "b": "float",
        "epsilon_front": "float",
        "measurement_times": "float_list",
        "ensemble_size": "int",
        "delta": "float",
        "lambda": "float",
        "tail_grid": "float_list",
        "observation_radius": "int",
        "truncations": "int_list",
        "time": "float",
    },
}


def _cast(path: str, kind: str, value):
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected number, got {value!r}")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(path, f"expected string, got {value!r}")
        return value
    if kind == "site":
        if isinstance(value, bool):
            raise ConfigError(path, f"expected site index, got {value!r}")
        if isinstance(value, int):
            return [value]
        if isinstance(value, list) and value and all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            return list(value)
        raise ConfigError(path, f"expected site index (int or list of ints), got {value!r}")
    if kind == "int_list":
        if isinstance(value, list) and all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            return list(value)
        raise ConfigError(path, f"expected list of integers, got {value!r}")
    if kind == "float_list":
        if isinstance(value, list) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            return [float(v) for v in value]
        raise ConfigError(path, f"expected list of numbers, got {value!r}")
    raise AssertionError(kind)


def load_config(path) -> dict:
    """Parse and strictly validate a TOML run config."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as err:
        raise ConfigError(str(path), f"cannot read config: {err}") from err
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(str(path), f"invalid TOML: {err}") from err
    cfg: dict = {}
    for key, value in raw.items():
        if key in _TOP_KEYS:
            cfg[key] = _cast(key, _TOP_KEYS[key], value)
        elif key in _SCHEMA:
            if not isinstance(value, dict):
                raise ConfigError(key, "expected a section")
            section = {}
            for sub, subval in value.items():
                if sub not in _SCHEMA[key]:
                    raise ConfigError(f"{key}.{sub}", "unknown key")
                section[sub] = _cast(f"{key}.{sub}", _SCHEMA[key][sub], subval)
            cfg[key] = section
        else:
            raise ConfigError(key, "unknown key")
    return cfg


def _get(cfg: dict, section: str, key: str, default=_REQUIRED):
    sec = cfg.get(section)
    if sec is None or key not in sec:
        if default is _REQUIRED:
            raise ConfigError(f"{section}.{key}", "missing required key")
        return default
    return sec[key]


def _require_section(cfg: dict, section: str):
    if section not in cfg:
        raise ConfigError(section, "missing required section")


def _wrap(section: str, builder):
    try:
        return builder()
    except (ValueError, TypeError) as err:
        raise ConfigError(section, str(err)) from err


def build_lattice(cfg: dict) -> LatticeSpec:
    _require_section(cfg, "lattice")
    return _wrap(
        "lattice",
        lambda: LatticeSpec(
            d=_get(cfg, "lattice", "d"),
            n=_get(cfg, "lattice", "n"),
            K=_get(cfg, "lattice", "K"),
        ),
    )


def build_potential(cfg: dict) -> Potential:
    sec = cfg.get("potential", {})
    return _wrap("potential", lambda: Potential(**sec))


def build_integrator(cfg: dict) -> IntegratorConfig:
    _require_section(cfg, "integrator")
    return _wrap(
        "integrator",
        lambda: IntegratorConfig(
            dt=_get(cfg, "integrator", "dt"),
            t_end=_get(cfg, "integrator", "t_end"),
            record_stride=_get(cfg, "integrator", "record_stride", 1),
        ),
    )


def build_sampler(cfg: dict, seed: int) -> SamplerConfig:
    _require_section(cfg, "sampler")
    return _wrap(
        "sampler",
        lambda: SamplerConfig(
            beta=_get(cfg, "sampler", "beta"),
            sweeps=_get(cfg, "sampler", "sweeps"),
            burn_in=_get(cfg, "sampler", "burn_in", 0),
            proposal_sigma=_get(cfg, "sampler", "proposal_sigma", None),
            thin=_get(cfg, "sampler", "thin", 1),
            seed=seed,
        ),
    )


def _initial_state(cfg, spec, pot, seed):
    """Gibbs-sampled initial data when a sampler section is present, else zeros."""
    if "sampler" in cfg:
        ens = sample_ensemble(spec, pot, build_sampler(cfg, seed))
        if not ens.states:
            raise ConfigError("sampler", "sampler settings keep no samples")
        return ens.states[0]
    return zero_state(spec)


def _echo_config(cfg: dict, command: str, seed: int, out: Path) -> str:
    echo = {k: v for k, v in cfg.items() if k != "out"}
    echo["seed"] = seed
    doc = {"command": command, "config": echo, "config_hash": io.config_hash([command, echo])}
    io.write_json(out / "config_echo.json", doc)
    return doc["config_hash"]


def _progress(msg: str):
    print(msg, file=sys.stderr, flush=True)


def cmd_simulate(cfg: dict, out: Path, seed: int, jobs: int) -> None:
    spec = build_lattice(cfg)
    pot = build_potential(cfg)
    icfg = build_integrator(cfg)
    _echo_config(cfg, "simulate", seed, out)
    initial = _initial_state(cfg, spec, pot, seed)
    traj = evolve(spec, pot, initial, icfg)
    io.write_trajectory_csv(out / "trajectory.csv", spec, traj)
    io.write_energy_csv(out / "energy.csv", spec, pot, traj)
    _progress(f"simulate: {len(traj)} snapshots -> {out}")


def cmd_tangent(cfg: dict, out: Path, seed: int, jobs: int) -> None:
    spec = build_lattice(cfg)
    pot = build_potential(cfg)
    icfg = build_integrator(cfg)
    i0 = tuple(_get(cfg, "experiment", "i0", [0] * spec.d))
    _echo_config(cfg, "tangent", seed, out)
    initial = _initial_state(cfg, spec, pot, seed)
    run = _wrap("experiment.i0", lambda: jacobian_field(spec, pot, initial, i0, icfg))
    io.write_jacobian_csv(out / "jacobian.csv", run.fields)
    io.write_jacobian_norms_csv(out / "norms.csv", run.fields)
    _progress(f"tangent: {len(run.fields)} fields -> {out}")


def cmd_sample(cfg: dict, out: Path, seed: int, jobs: int) -> None:
    spec = build_lattice(cfg)
    pot = build_potential(cfg)
    sampler = build_sampler(cfg, seed)
    chash = _echo_config(cfg, "sample", seed, out)
    ens = sample_ensemble(spec, pot, sampler)
    io.write_ensemble(out, spec, ens, extra={"config_hash": chash})
    if ens.states:
        lam = _get(cfg, "experiment", "lambda", 0.05)
        diag = superstability_diagnostic(spec, pot, ens.states, lam)
        io.write_superstability_csv(out / "superstability.csv", diag)
        grid = _get(cfg, "experiment", "tail_grid", None)
        if grid is None:
            qmax = max(float(max(q_statistic(spec, pot, s).value for s in ens.states)), 1.0)
            grid = list(np.linspace(1.0, qmax * 1.05, 21))
        tail = q_tail_diagnostic(spec, pot, ens.states, grid)
        io.write_tail_csv(out / "tail.csv", tail)
    _progress(f"sample: {len(ens.states)} states -> {out}")


def cmd_front(cfg: dict, out: Path, seed: int, jobs: int) -> None:
    spec = build_lattice(cfg)
    pot = build_potential(cfg)
    icfg = build_integrator(cfg)
    sampler = build_sampler(cfg, seed)
    _require_section(cfg, "experiment")
    exp = _wrap(
        "experiment",
        lambda: ExperimentConfig(
            lattice=spec,
            potential=pot,
            integrator=icfg,
            sampler=sampler,
            i0=tuple(_get(cfg, "experiment", "i0", [0] * spec.d)),
            measurement_times=tuple(_get(cfg, "experiment", "measurement_times")),
            ensemble_size=_get(cfg, "experiment", "ensemble_size"),
            alpha=_get(cfg, "experiment", "alpha", 0.75),
            b=_get(cfg, "experiment", "b", 0.1),
            epsilon_front=_get(cfg, "experiment", "epsilon_front", 1e-6),
            delta=_get(cfg, "experiment", "delta", 1.5),
        ),
    )
    chash = _echo_config(cfg, "front", seed, out)
    _progress(f"front: running {exp.ensemble_size} members with {jobs} job(s)")
    result = velocity_bound_experiment(exp, jobs=jobs)
    io.write_front_csv(out / "front.csv", exp, result.members)
    c1_members = []
    for m in result.members:
        if m.error is not None:
            c1_members.append(math.nan)
            continue
        fit = bound_comparison(spec, m.fields, m.q_track)
        c1_members.append(fit.c1 if not fit.vacuous else math.nan)
    doc = {
        "config_hash": chash,
        "summary": result.summary.to_dict(),
        "c1_members": [float(x) for x in c1_members],
        "q_growth_c_members": [
            float(m.q_track.c_fit) if m.q_track is not None else math.nan
            for m in result.members
        ],
    }
    io.write_json(out / "summary.json", doc)
    _progress(f"front: {len(result.members)} members -> {out}")


def cmd_converge(cfg: dict, out: Path, seed: int, jobs: int) -> None:
    spec = build_lattice(cfg)
    pot = build_potential(cfg)
    dt = _get(cfg, "integrator", "dt")
    k = _get(cfg, "experiment", "observation_radius")
    truncations = _get(cfg, "experiment", "truncations")
    t = _get(cfg, "experiment", "time")
    if not truncations:
        raise ConfigError("experiment.truncations", "must list at least one radius")
    if any(n < k for n in truncations):
        raise ConfigError(
            "experiment.truncations", f"every truncation radius must be >= k={k}"
        )
    if max(truncations) + 1 > spec.n:
        raise ConfigError(
            "experiment.truncations",
            f"largest truncation {max(truncations)} needs lattice.n >= {max(truncations) + 1}",
        )
    sampler = build_sampler(cfg, seed)
    chash = _echo_config(cfg, "converge", seed, out)
    ens = sample_ensemble(spec, pot, sampler)
    if not ens.states:
        raise ConfigError("sampler", "sampler settings keep no samples")
    specs = [LatticeSpec(spec.d, n, spec.K) for n in truncations]
    report = _wrap(
        "experiment",
        lambda: convergence_study(specs, pot, ens.states[0], k, t, dt),
    )
    io.write_convergence_csv(out / "convergence.csv", report)
    doc = {
        "config_hash": chash,
        "k": report.k,
        "t": report.t,
        "q_initial": report.q_initial,
        "n_k_estimate": report.n_k_estimate,
        "slope": report.decay_rate if len(truncations) >= 3 else None,
    }
    io.write_json(out / "summary.json", doc)
    _progress(f"converge: {len(truncations)} radii -> {out}")


_COMMANDS = {
    "simulate": cmd_simulate,
    "tangent": cmd_tangent,
    "sample": cmd_sample,
    "front": cmd_front,
    "converge": cmd_converge,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="anharmonic", description="Anharmonic-lattice experiment runner"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML run config")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--jobs", type=int, default=None, help="parallel jobs (default: cores)")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        out = Path(args.out if args.out is not None else cfg.get("out", f"runs/{args.command}"))
        out.mkdir(parents=True, exist_ok=True)
        jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
        _COMMANDS[args.command](cfg, out, seed, jobs)
        return 0
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except LambdaTooLargeError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 3
    except BlowUpError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 3
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
