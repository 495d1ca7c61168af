"""Experiment orchestration: dispatch, result files, manifest, plot tables.

Every run writes CSV/JSON outputs plus a JSON manifest listing each output
with its checksum, the scenario echo, wall-clock timings, and any warnings.
Files are written atomically (temp + rename) and the manifest last, so a
manifest on disk always describes complete outputs.  Exit status is 0 only
when no errors occurred and every enabled bound check passed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import __version__ as _version
from .errors import MissingOutput, ValidationError
from .kernels import (JumpKernel, TorusGrid, green_asymptote_fit, green_function,
                      green_function_many, load_kernel, resolvent_integral,
                      transience_check, transition_probability,
                      transition_probability_field)
from .moments import (LatticeBox, bound_sequence, build_generator,
                      majorization_check, moment_bound_check,
                      solve_factorial_moments, solve_first_moment)
from .scenario import Scenario, validate_scenario, write_scenario
from .simulate import run_ensemble, run_field
from .spectral import PerturbationField, spectral_report

_FLOAT_FMT = "%.17g"


def _fmt(x) -> str:
    if isinstance(x, float):
        return _FLOAT_FMT % x
    return str(x)


def _atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_csv(path: str, header, rows) -> None:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, quoting=csv.QUOTE_MINIMAL, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    _atomic_write_text(path, buf.getvalue())


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class ResultManifest:
    scenario: dict
    version: str = _version
    outputs: list = field(default_factory=list)     # {name, path, sha256}
    timings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)      # name -> bool
    exit_status: int = 0
    path: str = ""

    def add_output(self, name: str, path: str) -> None:
        self.outputs.append({"name": name, "path": path, "sha256": _sha256(path)})

    def output_path(self, name: str) -> str:
        for entry in self.outputs:
            if entry["name"] == name:
                return entry["path"]
        raise MissingOutput(f"manifest has no output named {name!r}")

    def write(self, path: str) -> None:
        doc = {
            "version": self.version,
            "scenario": self.scenario,
            "outputs": self.outputs,
            "timings": self.timings,
            "warnings": self.warnings,
            "checks": self.checks,
            "exit_status": self.exit_status,
        }
        _atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
        self.path = path


def load_manifest(path: str) -> ResultManifest:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    man = ResultManifest(scenario=doc["scenario"], version=doc.get("version", ""))
    man.outputs = doc["outputs"]
    man.timings = doc.get("timings", {})
    man.warnings = doc.get("warnings", [])
    man.checks = doc.get("checks", {})
    man.exit_status = doc.get("exit_status", 0)
    man.path = path
    return man


def _scenario_echo(s: Scenario) -> dict:
    return {
        "experiment": s.experiment,
        "kernel": s.kernel,
        "out": s.out,
        "seed": s.seed,
        "threads": s.threads,
        "tolerance_profile": s.tolerance_profile,
        "params": {k: _jsonable(v) for k, v in sorted(s.params.items())},
    }


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def _grid_for(scenario: Scenario, kernel: JumpKernel) -> TorusGrid:
    n = scenario.get("grid_n")
    if n is None:
        grid = TorusGrid.default(kernel.dimension)
        if scenario.tolerance_profile == "fast":
            grid = grid.halved()
        return grid
    return TorusGrid(kernel.dimension, int(n))


def run_experiment(scenario: Scenario) -> ResultManifest:
    """Dispatch a validated scenario and persist outputs plus the manifest."""
    validate_scenario(scenario)
    os.makedirs(scenario.out, exist_ok=True)
    manifest = ResultManifest(scenario=_scenario_echo(scenario))
    runner = {
        "kernels": _run_kernels,
        "spectral": _run_spectral,
        "moments": _run_moments,
        "simulate": _run_simulate,
        "sweep": _run_sweep,
    }[scenario.experiment]
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            runner(scenario, manifest)
        except Exception as exc:  # noqa: BLE001 - propagate via manifest too
            manifest.warnings.append(f"error: {type(exc).__name__}: {exc}")
            manifest.exit_status = 2
            manifest.timings["total"] = time.perf_counter() - t0
            manifest.write(os.path.join(scenario.out, "manifest.json"))
            raise
    for w in caught:
        manifest.warnings.append(f"{w.category.__name__}: {w.message}")
    if manifest.checks and not all(manifest.checks.values()):
        manifest.exit_status = 1
    manifest.timings["total"] = time.perf_counter() - t0
    manifest.write(os.path.join(scenario.out, "manifest.json"))
    return manifest


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def _run_kernels(s: Scenario, man: ResultManifest) -> None:
    kernel = load_kernel(s.kernel)
    d = kernel.dimension
    grid = _grid_for(s, kernel)
    coarse = grid.halved()
    x = s.get("x", (0,) * d)
    y = s.get("y", (0,) * d)
    rows = []
    for t in s.get("t", (1.0,)):
        v = transition_probability(kernel, grid, t, x, y, check_resolution=False)
        vc = transition_probability(kernel, coarse, t, x, y, check_resolution=False)
        rows.append(("p", f"t={_fmt(float(t))};x={x};y={y}", v, abs(v - vc)))
    for lam in s.get("lam", (0.0,)):
        if lam == 0.0 and d < 3:
            rows.append(("G", f"lam=0;x={x};y={y}", math.inf, math.inf))
            rows.append(("I", "lam=0", math.inf, math.inf))
            continue
        gv = green_function(kernel, grid, lam, x, y)
        gc = green_function(kernel, coarse, lam, x, y)
        rows.append(("G", f"lam={_fmt(float(lam))};x={x};y={y}", gv, abs(gv - gc)))
        iv = resolvent_integral(kernel, grid, lam)
        ic = resolvent_integral(kernel, coarse, lam)
        rows.append(("I", f"lam={_fmt(float(lam))}", iv, abs(iv - ic)))
    rep = transience_check(kernel, s.get("transience_grids", (16, 32, 64)))
    rows.append(("transience", f"grids={rep.grid_sizes}",
                 1.0 if rep.verdict == "transient" else 0.0, rep.increment_ratio))
    path = os.path.join(s.out, "kernels.csv")
    _write_csv(path, ("quantity", "args", "value", "est_error"), rows)
    man.add_output("kernels", path)

    radii = s.get("fit_radii")
    if radii:
        fit = green_asymptote_fit(kernel, grid, radii)
        ws = [(int(round(r)),) + (0,) * (d - 1) for r in fit.radii]
        gv = green_function_many(kernel, grid, 0.0, ws)
        fpath = os.path.join(s.out, "green_asymptote.csv")
        _write_csv(fpath, ("radius", "green0", "fit_exponent", "fit_constant",
                           "residual_norm"),
                   [(r, g, fit.exponent, fit.constant, fit.residual_norm)
                    for r, g in zip(fit.radii, gv)])
        man.add_output("green_asymptote", fpath)
        man.checks["asymptote_exponent"] = abs(fit.exponent + (d - 2)) <= (
            0.1 if d == 3 else 0.2)


# ---------------------------------------------------------------------------
# spectral
# ---------------------------------------------------------------------------

def _run_spectral(s: Scenario, man: ResultManifest) -> None:
    kernel = load_kernel(s.kernel)
    grid = _grid_for(s, kernel)
    mu = s.get("mu", 1.0)
    sigmas = s.get("sigma", (0.3,))
    rows = []
    for sig in sigmas:
        fld = PerturbationField.single(mu, float(sig), kernel.dimension)
        rep = spectral_report(kernel, grid, fld)
        rows.append((sig, rep.regime,
                     rep.steady_constant if rep.steady_constant is not None else "",
                     rep.bound_constant if rep.bound_constant is not None else "",
                     rep.growth_rate if rep.growth_rate is not None else "",
                     rep.sigma_star))
    path = os.path.join(s.out, "spectral.csv")
    _write_csv(path, ("sigma", "regime", "A_or_C", "B", "lambda", "sigma_star"), rows)
    man.add_output("spectral", path)

    diag = {
        "grid_n": grid.points_per_axis,
        "sigma_star": rows[0][5] if rows else None,
        "I0": resolvent_integral(kernel, grid, 0.0) if kernel.dimension >= 3 else None,
        "I0_coarse": resolvent_integral(kernel, grid.halved(), 0.0)
        if kernel.dimension >= 3 else None,
    }
    box_ls = s.get("box_l")
    if box_ls:
        from .spectral import box_principal_eigenvalue
        delta0 = s.get("delta0", 0.1)
        brow = []
        for L in box_ls:
            be = box_principal_eigenvalue(kernel, int(L), float(delta0))
            brow.append((L, delta0, be.lambda0, be.rayleigh_trial, be.iterations,
                         be.residual))
        bpath = os.path.join(s.out, "box_eigenvalue.csv")
        _write_csv(bpath, ("L", "delta0", "lambda0", "rayleigh_trial",
                           "iterations", "residual"), brow)
        man.add_output("box_eigenvalue", bpath)
    jpath = os.path.join(s.out, "spectral_report.json")
    _atomic_write_text(jpath, json.dumps(diag, indent=2, sort_keys=True) + "\n")
    man.add_output("spectral_report", jpath)


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------

def _run_moments(s: Scenario, man: ResultManifest) -> None:
    kernel = load_kernel(s.kernel)
    d = kernel.dimension
    mu = s.get("mu", 1.0)
    sources = s.get("sources", ())
    fld = PerturbationField(mu, tuple(sources))
    t_end = s.get("t_end", 10.0)
    radius = s.get("radius",
                   int(math.ceil(6.0 * math.sqrt(t_end)))
                   + max((max(abs(c) for c in site) for site, _ in sources), default=0))
    box = LatticeBox(d, radius, s.get("boundary", "absorbing"))
    orders = s.get("orders", 2)
    y0 = s.get("y0", (0,) * d)
    checkpoints = s.get("checkpoints", tuple(np.linspace(t_end / 4, t_end, 4)))
    probes = s.get("probes", ((0,) * d,))
    dt = s.get("dt")
    h = build_generator(kernel, box, fld)
    if orders == 1:
        table = solve_first_moment(h, box, "delta", t_end, dt=dt,
                                   checkpoints=checkpoints, field=fld, y0=y0)
    else:
        table = solve_factorial_moments(h, box, fld, orders, y0, t_end, dt=dt,
                                        checkpoints=checkpoints,
                                        error_estimate=s.get("error_estimate", False))
    rows = []
    for j, t in enumerate(table.times):
        for probe in probes:
            row = [t, ",".join(str(c) for c in probe)]
            for l in range(1, orders + 1):
                row.append(float(table.order(l)[j, box.index(probe)]))
            rows.append(tuple(row))
    header = ["t", "probe"] + [f"m{l}" for l in range(1, orders + 1)]
    path = os.path.join(s.out, "moments.csv")
    _write_csv(path, header, rows)
    man.add_output("moments", path)

    summary: dict = {
        "orders": orders,
        "radius": radius,
        "boundary": box.boundary,
        "boundary_leak": table.boundary_leak,
        "error_estimates": list(table.error_estimates) if table.error_estimates else None,
        "D_l": [str(v) for v in bound_sequence(max(orders, 6)).values],
    }
    if s.get("bound_check", False):
        if d > 3:
            raise ValidationError("bound_check needs heat-kernel fields (d <= 3)")
        from .spectral import bound_constant_B, critical_threshold, steady_mean_constant
        grid = _grid_for(s, kernel)
        if fld.sigma_total >= critical_threshold(kernel, grid):
            raise ValidationError("bound_check requires a subcritical field")
        a_const = steady_mean_constant(kernel, grid, fld)
        b_const = bound_constant_B(kernel, grid, fld)
        half = radius + max(abs(c) for c in y0) if any(y0) else radius
        p_vals = np.zeros((len(table.times), box.n_sites))
        coords = box.coordinates()
        for j, t in enumerate(table.times):
            fldp = transition_probability_field(kernel, grid, float(t), half)
            disp = coords - np.asarray(y0)
            idx = tuple((disp[:, ax] + half) for ax in range(d))
            p_vals[j] = fldp[idx]
        rep = moment_bound_check(table, a_const, b_const, p_vals)
        summary["bound_check"] = {
            "A_or_C": a_const,
            "B": b_const,
            "max_ratios": list(rep.max_ratios),
            "passed": rep.passed,
        }
        man.checks["moment_bound"] = rep.passed
        if tuple(y0) == (0,) * d and len(sources) == 1 and not any(sources[0][0]):
            maj = majorization_check(table)
            summary["majorization"] = {"ok": maj.ok, "worst_margin": maj.worst_margin}
            man.checks["majorization"] = maj.ok
    jpath = os.path.join(s.out, "moments_summary.json")
    _atomic_write_text(jpath, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    man.add_output("moments_summary", jpath)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _run_simulate(s: Scenario, man: ResultManifest) -> None:
    kernel = load_kernel(s.kernel)
    d = kernel.dimension
    fld = PerturbationField(s.get("mu", 1.0), tuple(s.get("sources", ())))
    t_end = s.get("t_end", 10.0)
    checkpoints = s.get("checkpoints", (t_end,))
    replicas = s.get("replicas", 100)
    probes = s.get("probes", ((0,) * d,))
    init = s.get("init", "single")
    stats = run_ensemble(
        kernel, fld, init, checkpoints, replicas, s.seed,
        init_site=s.get("init_site"), window=s.get("window"), probes=probes,
        obs_window=s.get("obs_window"),
        max_particles=s.get("max_particles", 1 << 21),
        max_events=s.get("max_events", 1e7))
    rows = []
    for j, t in enumerate(stats.times):
        occ_mean, occ_se = stats.occupied_fraction(j)
        for pidx, probe in enumerate(stats.probe_sites):
            mean, se = stats.mean_count(j, pidx)
            rows.append((t, ",".join(str(c) for c in probe), mean, se,
                         stats.extinction_probability(j, pidx), occ_mean, occ_se))
    path = os.path.join(s.out, "simulate.csv")
    _write_csv(path, ("t", "probe", "mean_n", "se_n", "p_empty",
                      "occupied_fraction", "occupied_se"), rows)
    man.add_output("simulate", path)

    hrows = []
    for j, t in enumerate(stats.times):
        for pidx, probe in enumerate(stats.probe_sites):
            for value, count in sorted(stats.histogram(j, pidx).items()):
                hrows.append((t, ",".join(str(c) for c in probe), value, count))
    hpath = os.path.join(s.out, "histogram.csv")
    _write_csv(hpath, ("t", "probe", "n", "replicas"), hrows)
    man.add_output("histogram", hpath)

    if s.get("raw_snapshots", False):
        if replicas > 2000:
            raise ValidationError("raw_snapshots supported for replicas <= 2000")
        spath = os.path.join(s.out, "snapshots.jsonl")
        lines = []
        for r in range(replicas):
            traj = run_field(kernel, fld, init, t_end, s.seed,
                             checkpoints=checkpoints, init_site=s.get("init_site"),
                             window=s.get("window"), probes=probes,
                             obs_window=s.get("obs_window"), replica=r,
                             max_particles=s.get("max_particles", 1 << 21),
                             max_events=s.get("max_events", 1e7))
            for snap in traj.snapshots:
                lines.append(json.dumps({
                    "replica": r,
                    "t": snap.time,
                    "sites": [[list(site), n] for site, n in sorted(snap.counts.items())],
                }, sort_keys=True))
        _atomic_write_text(spath, "\n".join(lines) + "\n")
        man.add_output("snapshots", spath)
    man.checks["no_truncated_replicas"] = stats.truncated_replicas == 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

_HEADLINES = {
    "kernels": ("kernels", lambda rows: rows[-1][2]),
    "spectral": ("spectral", lambda rows: rows[0][5]),
    "moments": ("moments", lambda rows: rows[-1][2]),
    "simulate": ("simulate", lambda rows: rows[-1][2]),
}


def _run_sweep(s: Scenario, man: ResultManifest) -> None:
    from .scenario import _SCHEMAS, _parse_value  # shared key typing

    target = s.get("target")
    parameter = s.get("parameter")
    values = s.get("values")
    schema = dict(_SCHEMAS[target])
    schema.update({"kernel": "str"})
    if parameter not in schema:
        raise ValidationError(f"parameter {parameter!r} not valid for {target!r}")
    base_params = {k: v for k, v in s.params.items()
                   if k in _SCHEMAS[target]}
    rows = []
    for value_text in values:
        parsed = _parse_value(schema[parameter], value_text, 0, 0)
        sub_out = os.path.join(s.out, f"sweep_{parameter}_{value_text.replace('/', '_')}")
        sub_params = dict(base_params)
        kernel_name = s.kernel
        if parameter == "kernel":
            kernel_name = value_text
        else:
            sub_params[parameter] = parsed
        sub = Scenario(experiment=target, kernel=kernel_name, out=sub_out,
                       seed=s.seed, threads=s.threads,
                       tolerance_profile=s.tolerance_profile, params=sub_params)
        sub_man = run_experiment(sub)
        name, headline = _HEADLINES[target]
        with open(sub_man.output_path(name), "r", encoding="utf-8") as fh:
            data = list(csv.reader(fh))[1:]
        rows.append((parameter, value_text, headline(data),
                     sub_man.exit_status, os.path.join(sub_out, "manifest.json")))
        man.checks[f"sweep[{value_text}]"] = sub_man.exit_status == 0
    path = os.path.join(s.out, "sweep.csv")
    _write_csv(path, ("parameter", "value", "headline", "exit_status", "manifest"),
               rows)
    man.add_output("sweep", path)


# ---------------------------------------------------------------------------
# plot-data emission
# ---------------------------------------------------------------------------

_VIEWS = ("m1-convergence", "occupancy", "green-asymptote", "histogram",
          "lambda-curve")


def emit_plot_data(manifest: ResultManifest, view: str, out_dir: str | None = None) -> str:
    """Write a tidy (series, x, y, ci_lo, ci_hi) table for the named view."""
    if view not in _VIEWS:
        raise ValueError(f"unknown view {view!r}; expected one of {_VIEWS}")
    out_dir = out_dir or os.path.dirname(manifest.path) or "."
    rows = []
    if view == "m1-convergence":
        data = _read_csv(manifest.output_path("moments"))
        for rec in data:
            rows.append(("m1", float(rec["t"]), float(rec["m1"]), "", ""))
        a_line = _moments_a_constant(manifest)
        if a_line is not None:
            for rec in data:
                rows.append(("A", float(rec["t"]), a_line, "", ""))
    elif view == "occupancy":
        for rec in _read_csv(manifest.output_path("simulate")):
            y = float(rec["occupied_fraction"])
            se = float(rec["occupied_se"]) if rec["occupied_se"] else 0.0
            rows.append(("occupied_fraction", float(rec["t"]), y,
                         y - 1.96 * se, y + 1.96 * se))
    elif view == "green-asymptote":
        data = _read_csv(manifest.output_path("green_asymptote"))
        for rec in data:
            rows.append(("log_green", math.log(float(rec["radius"])),
                         math.log(float(rec["green0"])), "", ""))
        if data:
            slope = float(data[0]["fit_exponent"])
            c = float(data[0]["fit_constant"])
            for rec in data:
                lr = math.log(float(rec["radius"]))
                rows.append(("fit", lr, math.log(c) + slope * lr, "", ""))
    elif view == "histogram":
        for rec in _read_csv(manifest.output_path("histogram")):
            rows.append((f"t={rec['t']}", int(rec["n"]), int(rec["replicas"]), "", ""))
    elif view == "lambda-curve":
        for rec in _read_csv(manifest.output_path("spectral")):
            if rec["lambda"]:
                rows.append(("lambda", float(rec["sigma"]), float(rec["lambda"]),
                             "", ""))
    path = os.path.join(out_dir, f"plot_{view.replace('-', '_')}.csv")
    _write_csv(path, ("series", "x", "y", "ci_lo", "ci_hi"), rows)
    return path


def _read_csv(path: str):
    if not os.path.exists(path):
        raise MissingOutput(f"output file {path} is missing")
    with open(path, "r", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _moments_a_constant(manifest: ResultManifest):
    try:
        path = manifest.output_path("moments_summary")
    except MissingOutput:
        return None
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    bc = doc.get("bound_check")
    return bc.get("A_or_C") if bc else None


def save_scenario(scenario: Scenario, path: str) -> None:
    write_scenario(scenario, path)
