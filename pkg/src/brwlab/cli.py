"""Command-line entry point.

Subcommands mirror the experiment types (kernels, spectral, moments,
simulate, sweep) plus ``report`` for plot-ready tables.  Every run can be
driven either by a scenario file (--scenario) or by direct flags; flags
override scenario values.  All randomness flows from the single --seed.
"""

from __future__ import annotations

import argparse
import sys

from .errors import BrwlabError
from .experiments import _VIEWS, emit_plot_data, load_manifest, run_experiment
from .scenario import Scenario, load_scenario


def _parse_site(text: str):
    return tuple(int(p) for p in text.split(","))


def _parse_sites(text: str):
    return tuple(_parse_site(p.strip()) for p in text.split(";") if p.strip())


def _parse_sources(text: str):
    out = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        site, _, s = part.rpartition(":")
        out.append((_parse_site(site), float(s)))
    return tuple(out)


def _floats(text: str):
    if ":" in text:
        # inclusive range: start:stop:step
        start, stop, step = (float(p) for p in text.split(":"))
        n = int((stop - start) / step + 1e-9) + 1
        return tuple(round(start + i * step, 12) for i in range(n))
    return tuple(float(p) for p in text.split(",") if p.strip())


def _ints(text: str):
    return tuple(int(p) for p in text.split(",") if p.strip())


def create_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="brwlab",
        allow_abbrev=False,
        description="Branching random walk laboratory: lattice kernels, "
                    "criticality thresholds, moment hierarchies, and "
                    "particle-field simulation.")
    parser.add_argument("--scenario", help="scenario file; flags override its keys")
    parser.add_argument("--out", help="output directory (default: results)")
    parser.add_argument("--seed", type=int, help="master seed for all randomness")
    parser.add_argument("--threads", type=int, help="worker threads (0 = default)")
    parser.add_argument("--tolerance-profile", choices=("fast", "strict"),
                        dest="tolerance_profile", help="accuracy preset")
    sub = parser.add_subparsers(dest="command", required=True)

    pk = sub.add_parser("kernels", allow_abbrev=False, help="heat kernel, Green function, transience")
    pk.add_argument("--kernel", help="built-in name (srw-d1..d5) or definition file")
    pk.add_argument("--t", type=_floats, help="times, comma separated")
    pk.add_argument("--x", type=_parse_site, help="start site, e.g. 0,0,0")
    pk.add_argument("--y", type=_parse_site, help="end site")
    pk.add_argument("--lam", type=_floats, help="resolvent parameters")
    pk.add_argument("--grid-n", type=int, dest="grid_n", help="quadrature points per axis")
    pk.add_argument("--fit-radii", type=_floats, dest="fit_radii",
                    help="radii for the Green asymptote fit")

    ps = sub.add_parser("spectral", allow_abbrev=False, help="thresholds, steady constants, eigenvalues")
    ps.add_argument("--kernel")
    ps.add_argument("--sigma", type=_floats, help="source strengths to classify")
    ps.add_argument("--mu", type=float, help="baseline rate")
    ps.add_argument("--grid-n", type=int, dest="grid_n")
    ps.add_argument("--box-l", type=_ints, dest="box_l",
                    help="cube half-widths for the Dirichlet eigenvalue demo")
    ps.add_argument("--delta0", type=float, help="potential height on the cube")

    pm = sub.add_parser("moments", allow_abbrev=False, help="factorial-moment hierarchy on a box")
    pm.add_argument("--kernel")
    pm.add_argument("--radius", type=int, help="box half-width")
    pm.add_argument("--boundary", choices=("absorbing", "periodic"))
    pm.add_argument("--sources", type=_parse_sources,
                    help="semicolon list of site:strength, e.g. '0,0,0:0.3'")
    pm.add_argument("--mu", type=float)
    pm.add_argument("--orders", type=int, help="highest factorial moment")
    pm.add_argument("--t-end", type=float, dest="t_end")
    pm.add_argument("--dt", type=float)
    pm.add_argument("--y0", type=_parse_site, help="target site of the counts")
    pm.add_argument("--checkpoints", type=_floats)
    pm.add_argument("--probes", type=_parse_sites, help="sites reported in the CSV")
    pm.add_argument("--bound-check", action="store_true", dest="bound_check",
                    default=None, help="verify the factorial-moment bound")
    pm.add_argument("--grid-n", type=int, dest="grid_n")

    pr = sub.add_parser("simulate", allow_abbrev=False, help="event-driven particle field Monte Carlo")
    pr.add_argument("--kernel")
    pr.add_argument("--sources", type=_parse_sources)
    pr.add_argument("--mu", type=float)
    pr.add_argument("--init", choices=("single", "window"))
    pr.add_argument("--init-site", type=_parse_site, dest="init_site")
    pr.add_argument("--window", type=int, help="one-per-site init half-width")
    pr.add_argument("--t-end", type=float, dest="t_end")
    pr.add_argument("--checkpoints", type=_floats)
    pr.add_argument("--replicas", type=int)
    pr.add_argument("--probes", type=_parse_sites)
    pr.add_argument("--obs-window", type=int, dest="obs_window")
    pr.add_argument("--max-particles", type=int, dest="max_particles")
    pr.add_argument("--max-events", type=float, dest="max_events")
    pr.add_argument("--raw-snapshots", action="store_true", dest="raw_snapshots",
                    default=None, help="emit per-replica JSONL snapshots")

    pw = sub.add_parser("sweep", allow_abbrev=False, help="run a base experiment over parameter values")
    pw.add_argument("--kernel")
    pw.add_argument("--target", choices=("kernels", "spectral", "moments", "simulate"))
    pw.add_argument("--parameter", help="scenario key to vary")
    pw.add_argument("--values", type=lambda t: tuple(p.strip() for p in t.split(",")),
                    help="comma-separated values (parsed per the key's type)")
    # common base-configuration keys of the target experiment
    pw.add_argument("--mu", type=float)
    pw.add_argument("--sigma", type=_floats)
    pw.add_argument("--sources", type=_parse_sources)
    pw.add_argument("--grid-n", type=int, dest="grid_n")
    pw.add_argument("--radius", type=int)
    pw.add_argument("--orders", type=int)
    pw.add_argument("--dt", type=float)
    pw.add_argument("--t-end", type=float, dest="t_end")
    pw.add_argument("--checkpoints", type=_floats)
    pw.add_argument("--replicas", type=int)
    pw.add_argument("--init", choices=("single", "window"))
    pw.add_argument("--window", type=int)

    pp = sub.add_parser("report", allow_abbrev=False, help="emit plot-ready tables from a manifest")
    pp.add_argument("manifest", help="path to a manifest.json")
    pp.add_argument("--view", choices=_VIEWS, required=True)
    return parser


_PARAM_KEYS = {
    "kernels": ("t", "x", "y", "lam", "grid_n", "fit_radii"),
    "spectral": ("sigma", "mu", "grid_n", "box_l", "delta0"),
    "moments": ("radius", "boundary", "sources", "mu", "orders", "t_end", "dt",
                "y0", "checkpoints", "probes", "bound_check", "grid_n"),
    "simulate": ("sources", "mu", "init", "init_site", "window", "t_end",
                 "checkpoints", "replicas", "probes", "obs_window",
                 "max_particles", "max_events", "raw_snapshots"),
    "sweep": ("target", "parameter", "values", "mu", "sigma", "sources",
              "grid_n", "radius", "orders", "dt", "t_end", "checkpoints",
              "replicas", "init", "window"),
}


def _scenario_from_args(args) -> Scenario:
    if args.scenario:
        scenario = load_scenario(args.scenario)
        if scenario.experiment != args.command:
            raise BrwlabError(
                f"scenario is for {scenario.experiment!r}, invoked as {args.command!r}")
    else:
        scenario = Scenario(experiment=args.command)
    params = {k: getattr(args, k, None) for k in _PARAM_KEYS[args.command]}
    return scenario.with_overrides(
        kernel=getattr(args, "kernel", None),
        out=args.out,
        seed=args.seed,
        threads=args.threads,
        tolerance_profile=args.tolerance_profile,
        params=params,
    )


def main(argv=None) -> int:
    args = create_parser().parse_args(argv)
    try:
        if args.command == "report":
            manifest = load_manifest(args.manifest)
            path = emit_plot_data(manifest, args.view, out_dir=args.out)
            print(path)
            return 0
        scenario = _scenario_from_args(args)
        if scenario.threads:
            import numba

            numba.set_num_threads(scenario.threads)
        manifest = run_experiment(scenario)
        for entry in manifest.outputs:
            print(entry["path"])
        for name, ok in manifest.checks.items():
            print(f"check {name}: {'PASS' if ok else 'FAIL'}")
        print(f"manifest: {manifest.path}")
        return manifest.exit_status
    except BrwlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
