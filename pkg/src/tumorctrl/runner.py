"""Configuration ingestion, experiment orchestration and persistence.

Experiments are described by a sectioned key = value text file; a config may
name a preset whose values are merged underneath the explicit keys.  Every
run writes its CSV artifacts into a subdirectory of the output directory
named by the hash of the fully-defaulted config, plus a flat key = value
manifest listing the artifacts, timings, versions and the config echo.
Artifacts are deterministic: two runs of one config produce byte-identical
files.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .fields import write_field_csv
from .model import validate_setup
from .optim import (kappa_sweep, proximal_gradient_solve, support_measure,
                    zero_control_threshold)
from .presets import (Problem, make_problem, preset_names, preset_settings,
                      random_admissible_controls)
from .solver import solve_state, state_balance_report
from .sparsity import SparsityMode, certificate, certificate_to_csv
from .verify import (CheckReport, duality_gap, fd_gradient_check,
                     linearized_fd_refinement, separation_monitor,
                     write_check_csv)

COMMANDS = ("simulate", "optimize", "verify", "sweep-kappa", "threshold")


@dataclass(frozen=True)
class ConfigIssue:
    key: str
    line: int
    message: str
    kind: str  # parse | unknown-key | unknown-value | missing-key | range

    def __str__(self):
        where = f" (line {self.line})" if self.line else ""
        return f"{self.kind}: {self.key}{where}: {self.message}"


class ConfigError(ValueError):
    """Carries every located config problem at once."""

    def __init__(self, issues):
        self.issues = tuple(issues)
        super().__init__("; ".join(str(i) for i in self.issues))


def _float_key(lo=None, lo_strict=False):
    def conv(raw, key, line, issues):
        try:
            v = float(raw)
        except ValueError:
            issues.append(ConfigIssue(key, line, f"not a number: {raw!r}",
                                      "parse"))
            return None
        if not np.isfinite(v):
            issues.append(ConfigIssue(key, line, "must be finite", "range"))
            return None
        if lo is not None and (v < lo or (lo_strict and v == lo)):
            cmp = ">" if lo_strict else ">="
            issues.append(ConfigIssue(key, line, f"must be {cmp} {lo}",
                                      "range"))
            return None
        return v
    return conv


def _int_key(lo=None):
    def conv(raw, key, line, issues):
        try:
            v = int(raw)
        except ValueError:
            issues.append(ConfigIssue(key, line, f"not an integer: {raw!r}",
                                      "parse"))
            return None
        if lo is not None and v < lo:
            issues.append(ConfigIssue(key, line, f"must be >= {lo}", "range"))
            return None
        return v
    return conv


def _choice_key(options):
    def conv(raw, key, line, issues):
        if raw not in options:
            issues.append(ConfigIssue(
                key, line, f"unknown value {raw!r}; one of {sorted(options)}",
                "unknown-value"))
            return None
        return raw
    return conv


def _str_key(raw, key, line, issues):
    return raw


def _tuple_key(conv_item, max_len=2):
    def conv(raw, key, line, issues):
        parts = raw.split()
        if not 1 <= len(parts) <= max_len:
            issues.append(ConfigIssue(key, line,
                                      f"expected 1..{max_len} values", "parse"))
            return None
        out = []
        for p in parts:
            v = conv_item(p, key, line, issues)
            if v is None:
                return None
            out.append(v)
        return tuple(out)
    return conv


def _floats_key(raw, key, line, issues):
    try:
        return tuple(float(p) for p in raw.split())
    except ValueError:
        issues.append(ConfigIssue(key, line, "expected numbers", "parse"))
        return None


# (section, key) -> (settings name or None, converter, default-from-presets)
SCHEMA = {
    ("run", "command"): ("command", _choice_key(COMMANDS)),
    ("run", "preset"): ("preset", _str_key),
    ("run", "seed"): ("seed", _int_key(lo=0)),
    ("run", "kappas"): ("kappas", _floats_key),
    ("model", "alpha"): ("alpha", _float_key(lo=0, lo_strict=True)),
    ("model", "beta"): ("beta", _float_key(lo=0, lo_strict=True)),
    ("model", "chi"): ("chi", _float_key(lo=0)),
    ("model", "p_rate"): ("p_rate", _float_key(lo=0)),
    ("model", "a_rate"): ("a_rate", _float_key(lo=0)),
    ("model", "b_rate"): ("b_rate", _float_key(lo=0)),
    ("model", "e_rate"): ("e_rate", _float_key(lo=0)),
    ("model", "sigma_s"): ("sigma_s", _float_key(lo=0)),
    ("model", "nu"): ("nu", _float_key(lo=0, lo_strict=True)),
    ("model", "kappa"): ("kappa", _float_key(lo=0, lo_strict=True)),
    ("model", "beta1"): ("beta1", _float_key(lo=0)),
    ("model", "beta2"): ("beta2", _float_key(lo=0)),
    ("potential", "variant"): ("potential",
                               _choice_key(("regular", "logarithmic"))),
    ("potential", "log_k"): ("log_k", _float_key(lo=1, lo_strict=True)),
    ("potential", "h"): ("h", _choice_key(("smoothstep7",))),
    ("grid", "dim"): ("dim", _int_key(lo=1)),
    ("grid", "n"): ("n", _tuple_key(_int_key(lo=1))),
    ("grid", "length"): ("length", _tuple_key(_float_key(lo=0,
                                                         lo_strict=True))),
    ("time", "t_final"): ("t_final", _float_key(lo=0, lo_strict=True)),
    ("time", "n_steps"): ("n_steps", _int_key(lo=1)),
    ("init", "mu"): ("init_mu", _str_key),
    ("init", "phi"): ("init_phi", _str_key),
    ("init", "sigma"): ("init_sigma", _str_key),
    ("targets", "phi_q"): ("target_phi_q", _str_key),
    ("targets", "phi_omega"): ("target_phi_omega", _str_key),
    ("bounds", "lo1"): ("lo1", _float_key()),
    ("bounds", "hi1"): ("hi1", _float_key()),
    ("bounds", "lo2"): ("lo2", _float_key()),
    ("bounds", "hi2"): ("hi2", _float_key()),
    ("sparsity", "mode"): ("mode", _choice_key(("none", "full", "time",
                                                "space"))),
    ("controls", "u0_1"): ("u0_1", _str_key),
    ("controls", "u0_2"): ("u0_2", _str_key),
    ("optimizer", "max_iters"): ("max_iters", _int_key(lo=1)),
    ("optimizer", "eta0"): ("eta0", _float_key(lo=0)),
    ("optimizer", "backtrack"): ("backtrack", _float_key()),
    ("optimizer", "decrease"): ("decrease", _float_key(lo=0, lo_strict=True)),
    ("optimizer", "tol_vi"): ("tol_vi", _float_key(lo=0, lo_strict=True)),
    ("optimizer", "tol_cost"): ("tol_cost", _float_key(lo=0)),
}

_DEFAULT_COMMAND = "simulate"


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully-defaulted, validated experiment description."""

    values: tuple  # sorted ((section, key), canonical-string) pairs

    def get(self, section: str, key: str) -> str:
        for (s, k), v in self.values:
            if s == section and k == key:
                return v
        raise KeyError((section, key))

    def serialize(self) -> str:
        lines = []
        section = None
        for (s, k), v in self.values:
            if s != section:
                if section is not None:
                    lines.append("")
                lines.append(f"[{s}]")
                section = s
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()[:12]

    def to_settings(self) -> dict:
        issues: list = []
        out = {}
        for (sec, key), raw in self.values:
            name, conv = SCHEMA[(sec, key)]
            v = conv(raw, f"{sec}.{key}", 0, issues)
            if v is not None:
                out[name] = v
        if issues:
            raise ConfigError(issues)
        name = out.pop("preset", "")
        command = out.pop("command")
        kappas = out.pop("kappas", ())
        if name:
            out["name"] = name
        return command, kappas, out


def _canonical(value) -> str:
    if isinstance(value, tuple):
        return " ".join(_canonical(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse and validate config text; raises ConfigError with locations."""
    issues = []
    raw: dict = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            continue
        if "=" not in stripped:
            issues.append(ConfigIssue(stripped[:20], lineno,
                                      "expected key = value", "parse"))
            continue
        key, _, val = stripped.partition("=")
        key, val = key.strip(), val.split("#")[0].split(";")[0].strip()
        if section is None:
            issues.append(ConfigIssue(key, lineno, "key outside any section",
                                      "parse"))
            continue
        if (section, key) not in SCHEMA:
            issues.append(ConfigIssue(f"{section}.{key}", lineno,
                                      "unknown key", "unknown-key"))
            continue
        raw[(section, key)] = (val, lineno)

    # validate explicit values with their line numbers
    for (sec, key), (val, lineno) in raw.items():
        _, conv = SCHEMA[(sec, key)]
        conv(val, f"{sec}.{key}", lineno, issues)
    if issues:
        raise ConfigError(issues)

    # merge preset defaults under explicit keys, then global defaults
    merged: dict = {}
    preset = raw.get(("run", "preset"), ("", 0))[0]
    if preset:
        if preset not in preset_names():
            raise ConfigError([ConfigIssue("run.preset",
                                           raw[("run", "preset")][1],
                                           f"unknown preset {preset!r}",
                                           "unknown-value")])
        ps = preset_settings(preset)
        ps.pop("name", None)
        by_name = {name: (sec, key) for (sec, key), (name, _) in SCHEMA.items()}
        for name, value in ps.items():
            merged[by_name[name]] = _canonical(value)
    from .presets import DEFAULT_SETTINGS
    by_name = {name: (sec, key) for (sec, key), (name, _) in SCHEMA.items()}
    for name, value in DEFAULT_SETTINGS.items():
        if name in by_name and by_name[name] not in merged:
            merged[by_name[name]] = _canonical(value)
    merged.setdefault(("run", "command"), _DEFAULT_COMMAND)
    merged.setdefault(("run", "preset"), preset)
    merged.setdefault(("run", "kappas"), "")
    for (sec, key), (val, _) in raw.items():
        merged[(sec, key)] = val
    values = tuple(sorted(merged.items()))
    return ExperimentConfig(values)


def load_config(path) -> ExperimentConfig:
    """Read, parse and validate a config file."""
    text = Path(path).read_text(encoding="utf-8")
    cfg = parse_config_text(text)
    # round-trip sanity: serialize -> parse reproduces the config
    again = parse_config_text(cfg.serialize())
    if again.values != cfg.values:
        raise ConfigError([ConfigIssue("<config>", 0,
                                       "round-trip mismatch", "parse")])
    return cfg


@dataclass(frozen=True)
class RunManifest:
    config_hash: str
    command: str
    out_dir: Path
    artifacts: tuple
    passed: bool
    elapsed_s: float

    @property
    def manifest_path(self) -> Path:
        return self.out_dir / "manifest.txt"


def _write_controls(out, tag, control):
    files = []
    for name, comp in (("u1", control.u1), ("u2", control.u2)):
        p = out / f"{tag}{name}.csv"
        write_field_csv(p, comp, name)
        files.append(p)
    return files


def _write_trajectory(out, traj):
    files = []
    for name in ("mu", "phi", "sigma"):
        p = out / f"{name}.csv"
        write_field_csv(p, getattr(traj, name), name)
        files.append(p)
    return files


def _run_simulate(problem: Problem, out: Path):
    stats: dict = {}
    traj = solve_state(problem.params, problem.pot, problem.hspec, problem.u0,
                       problem.init, stats=stats)
    files = _write_trajectory(out, traj)
    p = out / "solver_manifest.json"
    p.write_text(json.dumps(stats, sort_keys=True, indent=1) + "\n",
                 encoding="utf-8")
    files.append(p)
    bal = state_balance_report(traj, problem.params, problem.u0, problem.hspec)
    p = out / "balance.csv"
    with open(p, "w", encoding="utf-8") as fh:
        fh.write("step,residual_mu,residual_sigma,relative_mu,relative_sigma\n")
        for i in range(bal["residual_mu"].size):
            fh.write(f"{i},{float(bal['residual_mu'][i])!r},"
                     f"{float(bal['residual_sigma'][i])!r},"
                     f"{float(bal['relative_mu'][i])!r},"
                     f"{float(bal['relative_sigma'][i])!r}\n")
    files.append(p)
    sep = separation_monitor(traj, problem.pot)
    p = out / "separation.csv"
    write_check_csv(sep, p)
    files.append(p)
    return files, sep.passed


def _run_optimize(problem: Problem, out: Path):
    res = proximal_gradient_solve(problem.params, problem.pot, problem.hspec,
                                  problem.targets, problem.mode,
                                  problem.bounds, problem.u0, problem.opts,
                                  problem.init)
    files = _write_controls(out, "control_", res.control)
    files += _write_trajectory(out, res.trajectory)
    p = out / "convergence.csv"
    s1, s2 = support_measure(problem.mode, res.control)
    with open(p, "w", encoding="utf-8") as fh:
        fh.write("iter,cost,vi_residual,step_size,support1,support2\n")
        for i in range(res.vi_history.size):
            cost = float(res.cost_history[min(i, res.cost_history.size - 1)])
            eta = float(res.eta_history[min(i, res.eta_history.size - 1)]) \
                if res.eta_history.size else float("nan")
            fh.write(f"{i},{cost!r},{float(res.vi_history[i])!r},{eta!r},"
                     f"{s1!r},{s2!r}\n")
    files.append(p)
    if problem.mode is not SparsityMode.NONE:
        cert = certificate(problem.mode, res.adjoint, res.trajectory,
                           problem.hspec, problem.params.kappa, problem.bounds)
        p = out / "certificate.csv"
        certificate_to_csv(cert, p)
        files.append(p)
    return files, True


def _run_threshold(problem: Problem, out: Path):
    rep = zero_control_threshold(problem.params, problem.pot, problem.hspec,
                                 problem.targets, problem.mode, problem.init)
    p = out / "threshold.csv"
    with open(p, "w", encoding="utf-8") as fh:
        fh.write("quantity,value\n")
        fh.write(f"kappa1,{rep.kappa1!r}\n")
        fh.write(f"kappa2,{rep.kappa2!r}\n")
        fh.write(f"kappa0_estimate,{rep.kappa0_estimate!r}\n")
    return [p], True


def _run_sweep(problem: Problem, kappas, out: Path):
    ks = list(kappas)
    if not ks:
        rep = zero_control_threshold(problem.params, problem.pot,
                                     problem.hspec, problem.targets,
                                     problem.mode, problem.init)
        k0 = rep.kappa0_estimate
        ks = [0.0, 0.5 * k0, 2.0 * k0] if k0 > 0 else [0.0]
    rows = kappa_sweep(problem.params, problem.pot, problem.hspec,
                       problem.targets, problem.mode, problem.bounds,
                       problem.u0, problem.opts, ks, problem.init)
    p = out / "kappa_sweep.csv"
    with open(p, "w", encoding="utf-8") as fh:
        fh.write("kappa,cost,vi_residual,support1,support2,control_norm,"
                 "iterations\n")
        for r in rows:
            fh.write(f"{r['kappa']!r},{r['cost']!r},{r['vi_residual']!r},"
                     f"{r['support1']!r},{r['support2']!r},"
                     f"{r['control_norm']!r},{r['iterations']}\n")
    return [p], True


def _run_verify(problem: Problem, out: Path):
    checks: list[CheckReport] = []
    checks.append(fd_gradient_check(problem, n_directions=3))
    checks.append(linearized_fd_refinement(problem, levels=3))
    checks.append(duality_gap(problem, levels=3))
    traj = solve_state(problem.params, problem.pot, problem.hspec, problem.u0,
                       problem.init)
    checks.append(separation_monitor(traj, problem.pot))
    files = []
    for rep in checks:
        p = out / f"check_{rep.name}.csv"
        write_check_csv(rep, p)
        files.append(p)
    p = out / "verify_summary.csv"
    passed = all(c.passed for c in checks)
    with open(p, "w", encoding="utf-8") as fh:
        fh.write("check,passed\n")
        for c in checks:
            fh.write(f"{c.name},{int(c.passed)}\n")
    files.append(p)
    return files, passed


def run(config: ExperimentConfig, out_dir) -> RunManifest:
    """Execute the configured command and persist artifacts + manifest."""
    t0 = time.perf_counter()
    command, kappas, settings = config.to_settings()
    problem = make_problem(settings)

    report = validate_setup(problem.params, problem.pot, problem.init,
                            problem.hspec)
    if not report.passed:
        raise ConfigError([ConfigIssue(code, 0, msg, "range")
                           for code, msg in report.violations])

    if command in ("threshold", "sweep-kappa") \
            and problem.mode is SparsityMode.NONE:
        raise ConfigError([ConfigIssue(
            "sparsity.mode", 0,
            f"command {command!r} needs a sparsity mode other than 'none'",
            "range")])

    out = Path(out_dir) / config.config_hash()
    out.mkdir(parents=True, exist_ok=True)

    if command == "simulate":
        files, passed = _run_simulate(problem, out)
    elif command == "optimize":
        files, passed = _run_optimize(problem, out)
    elif command == "threshold":
        files, passed = _run_threshold(problem, out)
    elif command == "sweep-kappa":
        files, passed = _run_sweep(problem, kappas, out)
    elif command == "verify":
        files, passed = _run_verify(problem, out)
    else:  # pragma: no cover - schema forbids
        raise ConfigError([ConfigIssue("run.command", 0,
                                       f"unknown command {command!r}",
                                       "unknown-value")])

    echo = out / "config.echo.cfg"
    echo.write_text(config.serialize(), encoding="utf-8")
    files.append(echo)

    elapsed = time.perf_counter() - t0
    manifest = RunManifest(config.config_hash(), command, out,
                           tuple(sorted(f.name for f in files)), passed,
                           elapsed)
    lines = [f"config_hash = {manifest.config_hash}",
             f"command = {command}",
             f"passed = {int(passed)}",
             f"artifact_count = {len(manifest.artifacts)}"]
    lines += [f"artifact.{i} = {name}"
              for i, name in enumerate(manifest.artifacts)]
    lines += [f"timing.total_s = {elapsed:.3f}",
              f"version.tumorctrl = {__version__}",
              f"version.numpy = {np.__version__}"]
    lines += [f"config.{s}.{k} = {v}" for (s, k), v in config.values]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n",
                                      encoding="utf-8")
    return manifest
