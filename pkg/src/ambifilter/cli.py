"""Config-driven experiment runner.

Configuration format: UTF-8 text, one `section.key = value` per line, `#`
comments. Coefficients are preset calls like `tanh(0.2)`. Validation reports
every problem found, not just the first. Each run writes its CSV artifacts
into a fresh directory and finishes with manifest.json; a directory without a
manifest is an incomplete run by definition.

Exit codes: 0 success, 1 configuration error, 2 numerical failure
(degenerate cloud, ill-conditioned basis, bad data), 3 fixed-point
non-convergence.
"""

from __future__ import annotations

import argparse
import difflib
import hashlib
import json
import re
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .bsde import solve_worst_value
from .errors import (AmbiFilterError, ConfigError, InvalidArgumentError,
                     MissingFeatureError, NumericalError, ShapeError)
from .features import RegressionBasis
from .filtering import innovation_path, run_filter
from .minimax import (FilterRule, PicardConfig, minimax_gap, picard_solve,
                      saddle_probes)
from .model import ModelSpec, build_time_grid, simulate_bundle
from .oracles import (LinearGaussianSpec, finite_signal_estimates,
                      finite_signal_filter, grid_sup_cost, kalman_bucy,
                      make_finite_surrogate, particle_filter_on_surrogate,
                      sign_pattern_family, simulate_finite_signal)
from .policies import time_table_policy, zero_policy
from .presets import CoefPreset, make_coef

SUBCOMMANDS = ("simulate", "filter", "worst-case", "picard", "minimax-gap",
               "oracle-check")

_PRESET_RE = re.compile(r"^([a-z_]+)\s*(?:\(([^)]*)\))?$")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    n_steps: int = 50
    n_paths: int = 2000
    n_particles: int = 500
    seed: int = 12345
    ess_threshold: float = 0.5
    bsde_degree: int = 3
    ridge_lambda: Optional[float] = None
    picard_max_iters: int = 20
    picard_damping: float = 0.5
    picard_tol: float = 0.02
    k_grid: tuple[float, ...] = (0.0, 0.1, 0.25, 0.5)
    rule_particles: int = 250
    out_dir: str = "runs"
    label: str = "run"
    digest: str = ""


@dataclass(frozen=True)
class RunManifest:
    command: str
    config_digest: str
    seed: int
    version: str
    wall_clock_s: float
    artifacts: tuple[dict, ...]
    status: str
    error: Optional[str] = None
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        body = {
            "command": self.command,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "version": self.version,
            "wall_clock_s": self.wall_clock_s,
            "artifacts": list(self.artifacts),
            "status": self.status,
            "error": self.error,
            "extras": self.extras,
        }
        return json.dumps(body, indent=2, sort_keys=True)


_KNOWN_KEYS: dict[str, str] = {
    "model.b": "preset", "model.sigma": "preset", "model.h": "preset",
    "model.f": "preset", "model.x0": "float", "model.T": "float",
    "model.k": "float",
    "grid.n_steps": "int",
    "mc.n_paths": "int", "mc.n_particles": "int", "mc.seed": "int",
    "mc.ess_threshold": "float",
    "bsde.degree": "int", "bsde.ridge_lambda": "float_or_auto",
    "picard.max_iters": "int", "picard.damping": "float", "picard.tol": "float",
    "worst_case.k_grid": "float_list", "worst_case.rule_particles": "int",
    "output.dir": "str", "output.label": "str",
}

_REQUIRED = ("model.b", "model.sigma", "model.h", "model.f")


def _parse_preset(raw: str) -> CoefPreset:
    m = _PRESET_RE.match(raw.strip())
    if not m:
        raise InvalidArgumentError(f"cannot parse preset {raw!r}; expected name(p1, p2, ...)")
    name, args = m.group(1), m.group(2)
    params = []
    if args and args.strip():
        params = [float(tok) for tok in args.split(",")]
    return make_coef(name, *params)


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and fully validate a config file; raises ConfigError carrying
    every problem found."""
    path = Path(path)
    problems: list[str] = []
    values: dict[str, str] = {}
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"])
    except UnicodeDecodeError as exc:
        raise ConfigError([f"config file is not UTF-8: {exc}"])

    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            problems.append(f"line {lineno}: expected 'section.key = value', got {stripped!r}")
            continue
        key, _, val = stripped.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _KNOWN_KEYS:
            hint = difflib.get_close_matches(key, _KNOWN_KEYS, n=1)
            suffix = f" (did you mean {hint[0]!r}?)" if hint else ""
            problems.append(f"line {lineno}: unknown key {key!r}{suffix}")
            continue
        if key in values:
            problems.append(f"line {lineno}: duplicate key {key!r}")
            continue
        values[key] = val

    for key in _REQUIRED:
        if key not in values:
            problems.append(f"missing required key {key!r}")

    def take(key: str, default, conv):
        if key not in values:
            return default
        try:
            return conv(values[key])
        except (ValueError, InvalidArgumentError) as exc:
            problems.append(f"{key}: {exc}")
            return default

    def positive_int(name, lo=1):
        def conv(s):
            v = int(s)
            if v < lo:
                raise ValueError(f"out of range: {name} must be >= {lo}, got {v}")
            return v
        return conv

    def bounded_float(name, lo, hi):
        def conv(s):
            v = float(s)
            if not (lo <= v <= hi):
                raise ValueError(f"out of range: {name} must be in [{lo}, {hi}], got {v}")
            return v
        return conv

    def float_list(s):
        return tuple(float(tok) for tok in s.split(","))

    presets = {}
    for key in _REQUIRED:
        if key in values:
            try:
                presets[key] = _parse_preset(values[key])
            except (ValueError, InvalidArgumentError) as exc:
                problems.append(f"{key}: {exc}")

    x0 = take("model.x0", 0.0, float)
    T = take("model.T", 1.0, bounded_float("model.T", 1e-9, np.inf))
    k = take("model.k", 0.0, bounded_float("model.k", 0.0, np.inf))
    n_steps = take("grid.n_steps", 50, positive_int("grid.n_steps"))
    n_paths = take("mc.n_paths", 2000, positive_int("mc.n_paths"))
    n_particles = take("mc.n_particles", 500, positive_int("mc.n_particles", lo=2))
    seed = take("mc.seed", 12345, int)
    ess = take("mc.ess_threshold", 0.5, bounded_float("mc.ess_threshold", 0.0, 1.0))
    degree = take("bsde.degree", 3, positive_int("bsde.degree"))
    ridge = take("bsde.ridge_lambda", None,
                 lambda s: None if s == "auto" else float(s))
    max_iters = take("picard.max_iters", 20, positive_int("picard.max_iters"))
    damping = take("picard.damping", 0.5, bounded_float("picard.damping", 1e-9, 1.0))
    tol = take("picard.tol", 0.02, bounded_float("picard.tol", 0.0, 1.0))
    k_grid = take("worst_case.k_grid", (0.0, 0.1, 0.25, 0.5), float_list)
    rule_particles = take("worst_case.rule_particles", 250,
                          positive_int("worst_case.rule_particles", lo=2))
    out_dir = take("output.dir", "runs", str)
    label = take("output.label", "run", str)

    model = None
    if len(presets) == len(_REQUIRED) and not problems:
        try:
            model = ModelSpec(b=presets["model.b"], sigma=presets["model.sigma"],
                              h=presets["model.h"], f=presets["model.f"],
                              x0=x0, T=T, k=k)
        except InvalidArgumentError as exc:
            problems.append(f"model: {exc}")

    if problems:
        raise ConfigError(problems)

    digest = hashlib.sha256(
        "\n".join(f"{k2}={v2}" for k2, v2 in sorted(values.items())).encode()
    ).hexdigest()[:16]
    return ExperimentConfig(model=model, n_steps=n_steps, n_paths=n_paths,
                            n_particles=n_particles, seed=seed,
                            ess_threshold=ess, bsde_degree=degree,
                            ridge_lambda=ridge, picard_max_iters=max_iters,
                            picard_damping=damping, picard_tol=tol,
                            k_grid=k_grid, rule_particles=rule_particles,
                            out_dir=out_dir, label=label, digest=digest)


def apply_overrides(config: ExperimentConfig, seed=None, k=None, n_paths=None,
                    n_particles=None, out_dir=None) -> ExperimentConfig:
    """The whitelisted command-line overrides."""
    updates = {}
    if seed is not None:
        updates["seed"] = int(seed)
    if k is not None:
        if k < 0:
            raise ConfigError([f"out of range: model.k must be >= 0, got {k}"])
        updates["model"] = replace(config.model, k=float(k))
    if n_paths is not None:
        if n_paths < 1:
            raise ConfigError([f"out of range: mc.n_paths must be >= 1, got {n_paths}"])
        updates["n_paths"] = int(n_paths)
    if n_particles is not None:
        if n_particles < 2:
            raise ConfigError([f"out of range: mc.n_particles must be >= 2, got {n_particles}"])
        updates["n_particles"] = int(n_particles)
    if out_dir is not None:
        updates["out_dir"] = str(out_dir)
    return replace(config, **updates) if updates else config


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows) -> dict:
    body = ",".join(header) + "\n"
    body += "".join(",".join(_fmt(v) for v in row) + "\n" for row in rows)
    data = body.encode("utf-8")
    path.write_bytes(data)
    return {"name": path.name, "sha256": hashlib.sha256(data).hexdigest(),
            "bytes": len(data)}


def _cmd_simulate(config: ExperimentConfig, run_dir: Path):
    grid = build_time_grid(config.model.T, config.n_steps)
    bundle = simulate_bundle(config.model, zero_policy(), grid, config.n_paths,
                             config.seed, measure="P")
    rows = []
    for i in range(bundle.n_paths):
        for j, t in enumerate(grid.times):
            rows.append((t, i, bundle.X[i, j], bundle.Y[i, j], bundle.M[i, j],
                         bundle.log_density[i, j]))
    art = write_csv(run_dir / "paths.csv",
                    ["t", "path_id", "X", "Y", "M", "log_density"], rows)
    return [art], {"n_paths": config.n_paths}


def _cmd_filter(config: ExperimentConfig, run_dir: Path):
    grid = build_time_grid(config.model.T, config.n_steps)
    bundle = simulate_bundle(config.model, zero_policy(), grid, 1, config.seed,
                             measure="P")
    fp = run_filter(config.model, zero_policy(), bundle.Y[0],
                    config.n_particles, config.seed,
                    ess_threshold=config.ess_threshold)
    nu = innovation_path(bundle.Y[0], fp.pi_h, grid).nu
    rows = [(grid.times[j], bundle.X[0, j], bundle.Y[0, j], fp.u[j], fp.pi_h[j],
             nu[j], fp.ess[j]) for j in range(grid.n_steps + 1)]
    art = write_csv(run_dir / "filter_path.csv",
                    ["t", "X", "Y", "u", "pi_h", "nu", "ess"], rows)
    return [art], {"n_particles": config.n_particles}


def _cmd_worst_case(config: ExperimentConfig, run_dir: Path):
    grid = build_time_grid(config.model.T, config.n_steps)
    basis = RegressionBasis("poly_xu", config.bsde_degree, config.ridge_lambda)
    rows = []
    extras = {}
    for kv in config.k_grid:
        model_k = replace(config.model, k=float(kv))
        rule = FilterRule(zero_policy(), n_particles=config.rule_particles,
                          ess_threshold=config.ess_threshold, seed=config.seed)
        bundle = simulate_bundle(model_k, zero_policy(), grid, config.n_paths,
                                 config.seed, measure="P")
        u = rule.evaluate(model_k, grid, bundle.Y, seed=config.seed)
        sol = solve_worst_value(bundle, u, model_k, basis)
        family = sign_pattern_family(float(kv), 3, model_k.T)
        sup = grid_sup_cost(model_k, rule, family, config.n_paths, config.seed,
                            n_particles=config.rule_particles, grid=grid)
        rel = abs(sol.y0 - sup.J_worst) / max(sup.J_worst, 1e-12)
        rows.append((kv, sol.y0, sup.J_worst, sup.se_worst, rel))
    art = write_csv(run_dir / "worst_case.csv",
                    ["k", "J_bsde", "J_grid", "se_grid", "rel_diff"], rows)
    extras["k_grid"] = list(config.k_grid)
    return [art], extras


def _cmd_picard(config: ExperimentConfig, run_dir: Path):
    pc = PicardConfig(n_paths=config.n_paths, n_particles=config.n_particles,
                      n_steps=config.n_steps, seed=config.seed,
                      max_iters=config.picard_max_iters,
                      damping=config.picard_damping, tol=config.picard_tol,
                      ess_threshold=config.ess_threshold)
    report = picard_solve(config.model, pc)
    arts = [write_csv(run_dir / "picard.csv",
                      ["iter", "J", "sign_agreement", "damping"],
                      [(it.index, it.J, it.sign_agreement, it.damping)
                       for it in report.iterations])]
    probes = saddle_probes(config.model, report, n_policy_probes=10,
                           deltas=(0.05, -0.05, 0.1, -0.1),
                           n_paths=config.n_paths,
                           n_particles=config.rule_particles,
                           seed=config.seed, n_steps=config.n_steps)
    arts.append(write_csv(run_dir / "saddle.csv",
                          ["probe_kind", "probe_id", "J", "se"],
                          [(p.kind, p.probe_id, p.report.J, p.report.se)
                           for p in probes]))
    extras = {"converged": report.converged,
              "iterations": len(report.iterations),
              "J_final": report.final_cost.J,
              "u_digest": report.final_u_digest}
    return arts, extras


def _default_grids(config: ExperimentConfig):
    k, T = config.model.k, config.model.T
    policies = [zero_policy()]
    if k > 0:
        policies += [time_table_policy([k], T, k),
                     time_table_policy([-k], T, k),
                     time_table_policy([k, -k], T, k),
                     time_table_policy([-k, k], T, k)]
    rules = [FilterRule(p, n_particles=config.rule_particles,
                        ess_threshold=config.ess_threshold, seed=config.seed)
             for p in policies]
    return rules, policies


def _cmd_minimax_gap(config: ExperimentConfig, run_dir: Path):
    rules, policies = _default_grids(config)
    rep = minimax_gap(config.model, rules, policies, config.n_paths,
                      config.rule_particles, config.seed,
                      n_steps=config.n_steps)
    rows = [("grid_cell", f"u{i}_th{j}", rep.J[i, j], rep.se[i, j])
            for i in range(rep.J.shape[0]) for j in range(rep.J.shape[1])]
    art = write_csv(run_dir / "saddle.csv",
                    ["probe_kind", "probe_id", "J", "se"], rows)
    extras = {"min_sup": rep.min_sup, "sup_min": rep.sup_min, "gap": rep.gap,
              "argmin_control": rep.argmin_control,
              "argmax_policy": rep.argmax_policy}
    return [art], extras


def _kalman_compatible(model: ModelSpec) -> Optional[LinearGaussianSpec]:
    def slope(c: CoefPreset) -> Optional[float]:
        if c.name == "constant" and c.params[0] == 0.0:
            return 0.0
        if c.name in ("linear", "identity") and c.params[0] == 0.0:
            return c.params[1]
        return None

    a, cs, fs = slope(model.b), slope(model.h), slope(model.f)
    if model.k != 0.0 or a is None or cs is None or fs != 1.0 \
            or model.sigma.name != "constant":
        return None
    return LinearGaussianSpec(a=a, sigma=model.sigma.params[0], c=cs,
                              x0=model.x0, T=model.T)


def _cmd_oracle_check(config: ExperimentConfig, run_dir: Path):
    model = config.model
    grid = build_time_grid(model.T, config.n_steps)
    spec = _kalman_compatible(model)
    if spec is not None:
        bundle = simulate_bundle(model, zero_policy(), grid, 1, config.seed,
                                 measure="P")
        fp = run_filter(model, zero_policy(), bundle.Y[0], config.n_particles,
                        config.seed, ess_threshold=config.ess_threshold)
        mean, _ = kalman_bucy(spec, bundle.Y[0], grid)
        u_oracle = mean
        u_part = fp.u
        extras = {"oracle": "kalman_bucy",
                  "rmse": float(np.sqrt(np.mean((u_part - u_oracle) ** 2)))}
    elif model.h1_compliant:
        sd = float(model.sigma.value(model.x0)) * np.sqrt(model.T)
        half = max(3.0 * sd, 0.5)
        fspec = make_finite_surrogate(model, 5, model.x0 - half, model.x0 + half)
        _, Y = simulate_finite_signal(fspec, grid, config.seed, model.x0)
        masses = finite_signal_filter(fspec, Y, grid, model.x0)
        u_oracle = finite_signal_estimates(fspec, masses)
        fp = particle_filter_on_surrogate(fspec, Y, grid, config.n_particles,
                                          config.seed, model.x0,
                                          ess_threshold=config.ess_threshold)
        u_part = fp.u
        extras = {"oracle": "finite_signal",
                  "time_avg_abs_err": float(np.mean(np.abs(u_part - u_oracle)))}
    else:
        raise ConfigError([
            "oracle-check needs either a k=0 linear-Gaussian model "
            "(b linear, sigma constant, h linear, f identity) or bounded presets"
        ])
    rows = [(grid.times[j], u_part[j], u_oracle[j], abs(u_part[j] - u_oracle[j]))
            for j in range(grid.n_steps + 1)]
    art = write_csv(run_dir / "oracle_check.csv",
                    ["t", "u_particle", "u_oracle", "abs_err"], rows)
    return [art], extras


_DISPATCH = {
    "simulate": _cmd_simulate,
    "filter": _cmd_filter,
    "worst-case": _cmd_worst_case,
    "picard": _cmd_picard,
    "minimax-gap": _cmd_minimax_gap,
    "oracle-check": _cmd_oracle_check,
}


def run_subcommand(cmd: str, config: ExperimentConfig,
                   run_dir: Optional[Path] = None) -> RunManifest:
    """Execute one subcommand; always leaves a manifest in the run directory,
    recording the failure if the computation raised."""
    if cmd not in _DISPATCH:
        raise ConfigError([f"unknown subcommand {cmd!r}; choose from {SUBCOMMANDS}"])
    if run_dir is None:
        run_dir = Path(config.out_dir) / f"{config.label}-{cmd}"
    run_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    artifacts: list[dict] = []
    extras: dict = {}
    status, error = "ok", None
    try:
        artifacts, extras = _DISPATCH[cmd](config, run_dir)
    except AmbiFilterError as exc:
        status, error = "error", f"{type(exc).__name__}: {exc}"
        raise
    finally:
        manifest = RunManifest(command=cmd, config_digest=config.digest,
                               seed=config.seed, version=__version__,
                               wall_clock_s=time.monotonic() - t0,
                               artifacts=tuple(artifacts), status=status,
                               error=error, extras=extras)
        (run_dir / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="ambifilter",
        description="Ambiguity-filter experiments: simulation, filtering, "
                    "worst-case evaluation and saddle-point computation.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="path to the config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--k", type=float, default=None)
    parser.add_argument("--n-paths", type=int, default=None)
    parser.add_argument("--n-particles", type=int, default=None)
    parser.add_argument("--out-dir", type=str, default=None)
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config)
        config = apply_overrides(config, seed=args.seed, k=args.k,
                                 n_paths=args.n_paths,
                                 n_particles=args.n_particles,
                                 out_dir=args.out_dir)
        manifest = run_subcommand(args.subcommand, config)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return 1
    except (InvalidArgumentError, MissingFeatureError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2

    if args.subcommand == "picard" and not manifest.extras.get("converged", True):
        print("picard iteration did not converge within max_iters", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
