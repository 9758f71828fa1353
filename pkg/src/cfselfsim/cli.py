"""Batch driver: INI configuration, scenario dispatch, CSV and manifest output.

Usage::

    cfselfsim solve-profile -c run.ini
    cfselfsim evolve -c run.ini --set solver.mode=physical --set solver.t_end=5
    cfselfsim oracle fragmentation
    cfselfsim verify

Exit codes: 0 success, 1 scenario failure (non-convergence, positivity
failure, failed suite or oracle), 2 configuration error.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .coefficients import (
    AdmissibilityError, CoefficientSet, DaughterSpec, DiagnosticParams, LN2, load_daughter_csv,
    mollify, require_admissible, rho_star,
)
from .diagnostics import check_ail, ail_sides, delta_rho
from .dynamics import (
    EvolveConfig, PositivityError, evolve, gelation_monitor, scale_to_physical, scale_to_rescaled,
)
from .grid import format_number, make_grid, moment, project, x1_distance
from .manifest import format_value, write_manifest
from .operators import CoagulationOperator, FragmentationOperator
from .profile import ProfileConfig, epsilon_sweep, rho_sweep, solve_profile

logger = logging.getLogger(__name__)

SCENARIOS = ("evolve", "solve-profile", "sweep-eps", "sweep-rho", "verify", "oracle")
ORACLES = ("fragmentation", "coagulation")
OUT_ENV = "CF_SELFSIM_OUT"

_REQUIRED = object()

# section -> key -> (type, default); _REQUIRED marks keys without a default
SCHEMA = {
    "coefficients": {"lambda": (float, _REQUIRED), "alpha": (float, _REQUIRED),
                     "K0": (float, _REQUIRED), "a0": (float, _REQUIRED)},
    "daughter": {"nu": (float, 0.0), "table": (str, "")},
    "grid": {"xmin": (float, 1e-6), "xmax": (float, 1e3), "n_cells": (int, 256)},
    "solver": {"mode": (str, "rescaled"), "t_end": (float, 30.0), "snapshot_every": (float, 0.5),
               "integrator": (str, "mprk"), "rtol": (float, 1e-4), "atol": (float, 1e-14),
               "dt_max": (float, 1.0), "cfl": (float, 0.5), "steady_tol": (float, 1e-8),
               "stencil": (str, "vanleer"), "reconstruction": (str, "linear")},
    "profile": {"rho": (float, _REQUIRED), "eps": (float, 0.01), "eps_list": (list, [0.1, 0.05, 0.025]),
                "rho_list": (list, [])},
    "oracle": {"t_end": (float, 1.0), "kernel_value": (float, 2.0), "a0": (float, 1.0),
               "snapshot_every": (float, 0.1)},
    "verify": {"samples": (int, 100_000)},
    "run": {"output": (str, "runs"), "seed": (int, 0), "workers": (int, 1), "snapshots": (bool, True)},
}

# sections whose required keys matter for each scenario
_NEEDS = {
    "evolve": ("coefficients", "profile"),
    "solve-profile": ("coefficients", "profile"),
    "sweep-eps": ("coefficients", "profile"),
    "sweep-rho": ("coefficients",),
    "verify": (),
    "oracle": (),
}


class ConfigError(ValueError):
    """Invalid or incomplete configuration (exit code 2)."""


@dataclass
class RunSpec:
    """Validated run description."""

    scenario: str
    values: dict
    oracle: str | None = None
    overrides: list = field(default_factory=list)

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def seed(self) -> int:
        return self.get("run", "seed")

    def coefficients(self) -> CoefficientSet:
        c = self.values["coefficients"]
        return CoefficientSet(c["lambda"], c["alpha"], c["K0"], c["a0"])

    def daughter(self) -> DaughterSpec:
        d = self.values["daughter"]
        if d["table"]:
            return load_daughter_csv(d["table"], nu=d["nu"])
        return DaughterSpec(nu=d["nu"])

    def grid(self):
        g = self.values["grid"]
        return make_grid(g["xmin"], g["xmax"], g["n_cells"])

    def profile_config(self) -> ProfileConfig:
        g, s = self.values["grid"], self.values["solver"]
        return ProfileConfig(xmin=g["xmin"], xmax=g["xmax"], n_cells=g["n_cells"], s_max=s["t_end"],
                             steady_tol=s["steady_tol"], snapshot_every=s["snapshot_every"],
                             rtol=s["rtol"], dt_max=s["dt_max"], stencil=s["stencil"])

    def evolve_config(self) -> EvolveConfig:
        s = self.values["solver"]
        return EvolveConfig(mode=s["mode"], t_end=s["t_end"], cfl=s["cfl"], snapshot_every=s["snapshot_every"],
                            steady_tol=s["steady_tol"], integrator=s["integrator"], rtol=s["rtol"],
                            atol=s["atol"], dt_max=s["dt_max"], stencil=s["stencil"],
                            reconstruction=s["reconstruction"])

    def manifest(self) -> dict:
        out = {"scenario": self.scenario if self.oracle is None else f"oracle {self.oracle}"}
        for section, keys in self.values.items():
            out[section] = {k: (v if v is not None else "unset") for k, v in keys.items()}
        return out


def _convert(kind, raw: str, where: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is list:
            return [float(p) for p in raw.replace(";", ",").split(",") if p.strip()]
        if kind is int:
            return int(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind.__name__}") from None


def parse_config(text: str = "", scenario: str = "solve-profile", overrides=(), oracle: str | None = None) -> RunSpec:
    """Parse INI ``text`` plus ``section.key=value`` overrides into a :class:`RunSpec`.

    Unknown sections or keys, type mismatches and missing required keys
    raise :class:`ConfigError`; inadmissible coefficients raise
    :class:`AdmissibilityError`.
    """
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; expected one of {', '.join(SCENARIOS)}")
    if scenario == "oracle" and oracle not in ORACLES:
        raise ConfigError(f"oracle name must be one of {', '.join(ORACLES)} (got {oracle!r})")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None
    raw = {s: dict(parser[s]) for s in parser.sections()}
    for item in overrides:
        key, sep, val = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        raw.setdefault(section, {})[name] = val

    unknown = [s for s in raw if s not in SCHEMA]
    unknown += [f"{s}.{k}" for s, keys in raw.items() if s in SCHEMA for k in keys if k not in SCHEMA[s]]
    if unknown:
        raise ConfigError("unknown configuration keys: " + ", ".join(sorted(unknown)))

    values, missing = {}, []
    for section, keys in SCHEMA.items():
        given = raw.get(section, {})
        out = {}
        for key, (kind, default) in keys.items():
            if key in given:
                out[key] = _convert(kind, given[key], f"{section}.{key}")
            elif default is _REQUIRED:
                if section in _NEEDS[scenario]:
                    missing.append(f"{section}.{key}")
                out[key] = None
            else:
                out[key] = default
        values[section] = out
    if missing:
        raise ConfigError("missing required keys: " + ", ".join(missing))

    spec = RunSpec(scenario, values, oracle, list(overrides))
    s = values["solver"]
    try:
        spec.evolve_config()
        spec.grid()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if s["stencil"] not in ("upwind", "vanleer") or s["reconstruction"] not in ("linear", "constant"):
        raise ConfigError("solver.stencil must be upwind|vanleer and solver.reconstruction linear|constant")
    if values["run"]["workers"] < 1:
        raise ConfigError("run.workers must be >= 1")
    if "coefficients" in _NEEDS[scenario]:
        require_admissible(spec.coefficients(), spec.daughter())
    return spec


def output_dir(spec: RunSpec, cli_out: str | None = None) -> Path:
    """``$CF_SELFSIM_OUT`` beats ``--out`` beats ``run.output``."""
    root = os.environ.get(OUT_ENV) or cli_out or spec.get("run", "output")
    name = spec.scenario if spec.oracle is None else f"oracle-{spec.oracle}"
    return Path(root) / name


def _write_table(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else format_number(float(v)) for v in row) + "\n")


def _derived(spec: RunSpec) -> dict:
    coeffs, daughter = spec.coefficients(), spec.daughter()
    out = {"rho_star": rho_star(coeffs, daughter)}
    rho = spec.get("profile", "rho")
    if rho is not None:
        out["delta_rho"] = delta_rho(coeffs, daughter, rho)
    eps = spec.get("profile", "eps")
    if eps:
        out["rho_star_eps"] = rho_star(coeffs, mollify(daughter, eps))
    return out


# --------------------------------------------------------------------------
# scenarios

def run_evolve(spec: RunSpec, out: Path) -> int:
    coeffs, daughter = spec.coefficients(), spec.daughter()
    eps = spec.get("profile", "eps")
    bd = mollify(daughter, eps) if eps else daughter
    rho = spec.get("profile", "rho")
    cfg = spec.evolve_config()
    f0 = project(lambda x: rho * np.exp(-x), spec.grid())
    status = 0
    try:
        rec, final = evolve(f0, cfg, coeffs, bd, DiagnosticParams.default(coeffs, daughter))
    except (PositivityError, FloatingPointError) as exc:
        logger.error("evolution failed: %s", exc)
        write_manifest(out / "manifest.txt", {**spec.manifest(), "derived": _derived(spec), "status": "failed",
                                              "error": str(exc)})
        return 1
    rec.write_csv(out / "trajectory.csv")
    final.write_csv(out / "final.csv")
    if spec.get("run", "snapshots"):
        for i, st in enumerate(rec.states):
            st.write_csv(out / "snapshots" / f"snap_{i:04d}.csv")
    entries = {**spec.manifest(), "derived": _derived(spec), "status": "ok", "steps": rec.steps,
               "t_final": rec.times[-1], "M_1_final": moment(final, 1.0), "gel_mass": final.gel_mass,
               "dust_mass": final.dust_mass, "clip_mass": final.clip_mass}
    if cfg.mode == "physical":
        ev = gelation_monitor(rec)
        entries["gelation"] = {"fired": ev.fired, "time": ev.time if ev.fired else "none",
                               "threshold": ev.threshold}
    else:
        entries["stationary"] = rec.stationary
        entries["stationarity_residual"] = rec.residuals[-1]
    write_manifest(out / "manifest.txt", entries)
    return status


def run_solve_profile(spec: RunSpec, out: Path) -> int:
    coeffs, daughter = spec.coefficients(), spec.daughter()
    cert = solve_profile(coeffs, daughter, spec.get("profile", "eps") or None, spec.get("profile", "rho"),
                         spec.profile_config())
    cert.write(out, {**spec.manifest(), "derived": _derived(spec)})
    if not cert.stationary:
        logger.error("profile not stationary by s = %.4g (residual %.3e)", cert.s_final,
                     cert.stationarity_residual)
        return 1
    return 0


def run_sweep_eps(spec: RunSpec, out: Path) -> int:
    coeffs, daughter = spec.coefficients(), spec.daughter()
    eps_list = spec.get("profile", "eps_list")
    rep = epsilon_sweep(coeffs, daughter, spec.get("profile", "rho"), eps_list, spec.profile_config(),
                        workers=spec.get("run", "workers"))
    rows = []
    for i, (e, c) in enumerate(zip(rep.eps, rep.certificates)):
        if c is not None:
            c.write(out / f"member_{i:02d}")
        dist = rep.distances[i - 1] if i > 0 else math.nan
        rows.append([e, dist] + [rep.moments[k][i] for k in rep.moments])
    _write_table(out / "sweep.csv", ["eps", "x1_distance_to_previous"] + list(rep.moments), rows)
    write_manifest(out / "manifest.txt", {**spec.manifest(), "derived": _derived(spec), "cauchy": rep.cauchy,
                                          "failures": format_value(sorted(rep.failures)) or "none"})
    return 1 if rep.failures else 0


def run_sweep_rho(spec: RunSpec, out: Path) -> int:
    coeffs, daughter = spec.coefficients(), spec.daughter()
    rhos = spec.get("profile", "rho_list")
    if not rhos:
        raise ConfigError("sweep-rho needs profile.rho_list")
    eps = spec.get("profile", "eps") or None
    results = rho_sweep(coeffs, daughter, eps, rhos, spec.profile_config(), workers=spec.get("run", "workers"))
    rows, failed = [], 0
    for i, (r, (cert, err)) in enumerate(zip(rhos, results)):
        if cert is None:
            failed += 1
            rows.append([r, "failed", math.nan, math.nan, math.nan])
            logger.error("rho = %g failed: %s", r, err)
            continue
        cert.write(out / f"member_{i:02d}")
        failed += not cert.stationary
        rows.append([r, ";".join(cert.flags) or "none", cert.stationarity_residual,
                     cert.max_weak_residual, cert.integral_residual])
    _write_table(out / "sweep.csv", ["rho", "flags", "stationarity_residual", "max_weak_residual",
                                     "integral_residual"], rows)
    write_manifest(out / "manifest.txt", {**spec.manifest(), "derived": _derived(spec), "failed_members": failed})
    return 1 if failed else 0


def oracle_solution(name: str, spec: RunSpec):
    """Coefficients and closed-form solution ``f(t, x)`` of an analytic test case."""
    o = spec.values["oracle"]
    if name == "fragmentation":
        a0 = o["a0"]
        coeffs = CoefficientSet(2.0, 1.0, 0.0, a0)

        def exact(t, x):
            return (1.0 + a0 * t) ** 2 * np.exp(-(1.0 + a0 * t) * x)

        return coeffs, exact, 1e-3
    c = o["kernel_value"]
    coeffs = CoefficientSet.constant_kernel(c)

    def exact(t, x):
        s = 2.0 / (2.0 + c * t)
        return s * s * np.exp(-s * x)

    return coeffs, exact, 1e-2


def run_oracle(spec: RunSpec, out: Path) -> int:
    coeffs, exact, tol = oracle_solution(spec.oracle, spec)
    o = spec.values["oracle"]
    grid = spec.grid()
    cfg = EvolveConfig(mode="physical", t_end=o["t_end"], snapshot_every=o["snapshot_every"],
                       rtol=spec.get("solver", "rtol"), dt_max=min(spec.get("solver", "dt_max"), 0.05),
                       integrator=spec.get("solver", "integrator"), stencil=spec.get("solver", "stencil"),
                       reconstruction=spec.get("solver", "reconstruction"), record_steps=False)
    f0 = project(lambda x: exact(0.0, x), grid)
    rec, _ = evolve(f0, cfg, coeffs, DaughterSpec(0.0))
    rows = []
    for t, st in zip(rec.times, rec.states):
        ref = project(lambda x, t=t: exact(t, x), grid)
        rows.append([t, moment(st, 0.0), moment(ref, 0.0), x1_distance(st, ref)])
    _write_table(out / "oracle.csv", ["time", "M_0", "M_0_exact", "l1_error"], rows)
    err = rows[-1][3]
    ok = err < tol
    write_manifest(out / "manifest.txt", {**spec.manifest(), "error": err, "tolerance": tol, "passed": ok})
    logger.info("oracle %s: L1 error %.3e (tolerance %.1e)", spec.oracle, err, tol)
    return 0 if ok else 1


def verify_suites(seed: int = 0, samples: int = 100_000) -> list[tuple[str, bool, str]]:
    """Cheap property suites; each entry is ``(name, passed, detail)``."""
    rng = np.random.default_rng(seed)
    out = []

    rep = check_ail(samples, seed=seed)
    xs = np.exp(rng.uniform(np.log(1e-6), np.log(1e6), 1000))
    lhs, rhs = ail_sides(xs, xs)
    diag = float(np.max(np.abs(lhs - rhs) / rhs))
    out.append(("ail", rep.ok and diag < 1e-12, f"violations={rep.violations} diagonal_margin={diag:.3e}"))

    d = DaughterSpec(0.0)
    gaps, ok = [], True
    for eps in (0.1, 0.05, 0.025, 0.0125):
        md = mollify(d, eps)
        ok &= abs(md.normalization() - 1.0) < 1e-10
        ok &= float(np.max(md.B(np.linspace(0.0, eps - eps * eps, 50)))) == 0.0
        gaps.append(abs(md.log_moment() - d.log_moment()))
    ok &= all(b < a for a, b in zip(gaps, gaps[1:])) and gaps[-1] < 1e-2
    out.append(("mollifier", bool(ok), "log_moment_gaps=" + ";".join(f"{g:.3e}" for g in gaps)))

    coeffs = CoefficientSet(2.0, 1.0, 1.0, 1.0)
    grid = make_grid(1e-4, 1e2, 48)
    v = rng.uniform(0.0, 1.0, grid.n_cells)
    worst, neg = 0.0, 0.0
    for Q in (CoagulationOperator(grid, coeffs).transfer(v), FragmentationOperator(grid, coeffs, d).transfer(v)):
        worst = max(worst, float(np.max(np.abs(Q.sum(axis=0))) / np.max(np.abs(Q))))
        off = Q - np.diag(np.diag(Q))
        neg = min(neg, float(off.min()))
    out.append(("conservation", worst < 1e-12 and neg >= 0.0, f"column_sum={worst:.3e} min_offdiag={neg:.3e}"))

    f = project(lambda x: np.exp(-x) * (1 + np.sin(x)), grid)
    g, s = scale_to_rescaled(f, 0.7, 2.0)
    back, t = scale_to_physical(g, s, 2.0)
    rt = float(np.max(np.abs(back.values - f.values))) + abs(t - 0.7)
    out.append(("scale_round_trip", rt < 1e-12, f"error={rt:.3e}"))

    z, w = d.mass_rule()
    mm = [abs(d.moment(m, 1.0) - float(np.sum(w * z ** (m - 1.0)))) for m in (0.5, 1.0, 2.0)]
    rs = abs(rho_star(coeffs, d) - 1.0 / (4.0 * LN2))
    out.append(("daughter_moments", max(mm) < 1e-6 and rs < 1e-14, f"moment_error={max(mm):.3e}"))
    return out


def run_verify(spec: RunSpec, out: Path) -> int:
    results = verify_suites(spec.seed, spec.get("verify", "samples"))
    _write_table(out / "verify.csv", ["suite", "passed", "detail"],
                 [[n, str(ok), detail] for n, ok, detail in results])
    for n, ok, detail in results:
        logger.info("%s %s (%s)", "PASS" if ok else "FAIL", n, detail)
    passed = all(ok for _, ok, _ in results)
    write_manifest(out / "manifest.txt", {**spec.manifest(), "passed": passed})
    return 0 if passed else 1


RUNNERS = {"evolve": run_evolve, "solve-profile": run_solve_profile, "sweep-eps": run_sweep_eps,
           "sweep-rho": run_sweep_rho, "verify": run_verify, "oracle": run_oracle}


def run(spec: RunSpec, cli_out: str | None = None) -> int:
    out = output_dir(spec, cli_out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    logger.info("running %s into %s", spec.scenario, out)
    return RUNNERS[spec.scenario](spec, out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfselfsim", description=__doc__.split("\n")[0])
    p.add_argument("scenario", choices=SCENARIOS)
    p.add_argument("name", nargs="?", help="oracle name (fragmentation or coagulation)")
    p.add_argument("-c", "--config", help="INI configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a configuration key (repeatable)")
    p.add_argument("-o", "--out", help="output root (the environment variable CF_SELFSIM_OUT wins)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
        spec = parse_config(text, args.scenario, args.overrides, args.name)
        return run(spec, args.out)
    except (ConfigError, AdmissibilityError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
