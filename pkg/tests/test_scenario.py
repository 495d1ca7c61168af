import json
import os

import pytest

from brwlab import ParseError, Scenario, ValidationError, load_scenario, write_scenario
from brwlab.cli import main
from brwlab.experiments import (emit_plot_data, load_manifest, run_experiment)
from brwlab.errors import MissingOutput


def test_minimal_scenario_defaults(tmp_path):
    path = tmp_path / "s.txt"
    path.write_text("experiment = spectral\nkernel = srw-d3\nsigma = 0.3\n")
    s = load_scenario(path)
    assert s.experiment == "spectral"
    assert s.kernel == "srw-d3"
    assert s.params["sigma"] == (0.3,)
    assert s.out == "results"
    assert s.tolerance_profile == "strict"


def test_negative_sigma_rejected(tmp_path):
    path = tmp_path / "s.txt"
    path.write_text("experiment = spectral\nsigma = -0.1\n")
    with pytest.raises(ValidationError, match="> 0"):
        load_scenario(path)


def test_unknown_key_rejected_with_location(tmp_path):
    path = tmp_path / "s.txt"
    path.write_text("experiment = spectral\nsigma = 0.3\nsigmaa = 0.4\n")
    with pytest.raises(ParseError, match="sigmaa") as err:
        load_scenario(path)
    assert err.value.line == 3


def test_parse_errors(tmp_path):
    path = tmp_path / "s.txt"
    path.write_text("experiment = spectral\nsigma 0.3\n")
    with pytest.raises(ParseError, match="key = value"):
        load_scenario(path)
    path.write_text("sigma = 0.3\n")
    with pytest.raises(ParseError, match="experiment"):
        load_scenario(path)
    path.write_text("experiment = spectral\nsigma = 0.3\nsigma = 0.4\n")
    with pytest.raises(ParseError, match="duplicate"):
        load_scenario(path)
    path.write_text("experiment = spectral\nsigma = zero\n")
    with pytest.raises(ParseError, match="float"):
        load_scenario(path)


def test_zero_replicas_rejected(tmp_path):
    path = tmp_path / "s.txt"
    path.write_text("experiment = simulate\nreplicas = 0\nt_end = 1.0\n")
    with pytest.raises(ValidationError, match="replicas"):
        load_scenario(path)


def test_float_range_syntax(tmp_path):
    path = tmp_path / "s.txt"
    path.write_text("experiment = spectral\nsigma = 0.1:0.5:0.1\n")
    s = load_scenario(path)
    assert s.params["sigma"] == (0.1, 0.2, 0.3, 0.4, 0.5)


def test_round_trip(tmp_path):
    s = Scenario(experiment="moments", kernel="srw-d1", out="o", seed=7,
                 params={"radius": 10, "sources": (((0,), 0.2), ((3,), 0.1)),
                         "t_end": 4.0, "checkpoints": (1.0, 4.0),
                         "probes": ((0,), (2,)), "bound_check": True,
                         "boundary": "absorbing"})
    path = tmp_path / "round.txt"
    write_scenario(s, path)
    loaded = load_scenario(path)
    assert loaded == s


# ---------------------------------------------------------------------------
# run_experiment
# ---------------------------------------------------------------------------

def test_spectral_experiment_regime_flip(tmp_path):
    sigmas = tuple(round(0.1 * k, 1) for k in range(1, 11))
    s = Scenario(experiment="spectral", kernel="srw-d3", out=str(tmp_path / "sp"),
                 params={"sigma": sigmas, "mu": 1.0, "grid_n": 32})
    man = run_experiment(s)
    assert man.exit_status == 0
    import csv
    with open(man.output_path("spectral")) as fh:
        rows = list(csv.DictReader(fh))
    regimes = [r["regime"] for r in rows]
    assert regimes[:6] == ["subcritical"] * 6
    assert regimes[6:] == ["supercritical"] * 4
    star = float(rows[0]["sigma_star"])
    assert star == pytest.approx(0.659, abs=2e-3)
    # every float field round-trips at the written precision
    a03 = float(rows[2]["A_or_C"])
    assert a03 == pytest.approx(1.834579, abs=1e-3)
    # checksums and manifest integrity
    for entry in man.outputs:
        assert os.path.exists(entry["path"])
        assert len(entry["sha256"]) == 64
    assert os.path.exists(man.path)


def test_moments_experiment_with_bound_check(tmp_path):
    s = Scenario(experiment="moments", kernel="srw-d3", out=str(tmp_path / "mo"),
                 params={"radius": 8, "sources": (((0, 0, 0), 0.3),), "mu": 1.0,
                         "orders": 2, "t_end": 4.0, "dt": 0.02,
                         "checkpoints": (2.0, 4.0), "bound_check": True})
    man = run_experiment(s)
    assert man.exit_status == 0
    assert man.checks["moment_bound"] is True
    assert man.checks["majorization"] is True
    summary = json.load(open(man.output_path("moments_summary")))
    assert summary["bound_check"]["passed"] is True
    assert summary["D_l"][:4] == ["1", "1", "3", "15"]


def test_simulate_experiment_reproducible(tmp_path):
    params = {"mu": 1.0, "init": "window", "window": 30, "t_end": 2.0,
              "checkpoints": (1.0, 2.0), "replicas": 200,
              "raw_snapshots": True}
    s1 = Scenario(experiment="simulate", kernel="srw-d1",
                  out=str(tmp_path / "a"), seed=99, params=params)
    s2 = Scenario(experiment="simulate", kernel="srw-d1",
                  out=str(tmp_path / "b"), seed=99, params=params)
    m1, m2 = run_experiment(s1), run_experiment(s2)
    for name in ("simulate", "histogram", "snapshots"):
        b1 = open(m1.output_path(name), "rb").read()
        b2 = open(m2.output_path(name), "rb").read()
        assert b1 == b2
    # different seed changes the stochastic outputs
    s3 = Scenario(experiment="simulate", kernel="srw-d1",
                  out=str(tmp_path / "c"), seed=100, params=params)
    m3 = run_experiment(s3)
    assert open(m3.output_path("simulate"), "rb").read() != b1


def test_sweep_experiment(tmp_path):
    s = Scenario(experiment="sweep", kernel="srw-d3", out=str(tmp_path / "sw"),
                 params={"target": "spectral", "parameter": "sigma",
                         "values": ("0.3", "0.8"), "mu": 1.0, "grid_n": 32})
    man = run_experiment(s)
    assert man.exit_status == 0
    import csv
    with open(man.output_path("sweep")) as fh:
        rows = list(csv.reader(fh))[1:]
    assert len(rows) == 2
    assert all(r[3] == "0" for r in rows)


def test_kernels_experiment_and_report(tmp_path):
    s = Scenario(experiment="kernels", kernel="srw-d3", out=str(tmp_path / "k"),
                 params={"t": (1.0,), "lam": (0.0, 0.5),
                         "fit_radii": (4.0, 6.0, 8.0, 12.0, 16.0)})
    man = run_experiment(s)
    assert man.exit_status == 0
    assert man.checks["asymptote_exponent"] is True
    path = emit_plot_data(man, "green-asymptote")
    import csv
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    series = {r["series"] for r in rows}
    assert series == {"log_green", "fit"}
    with pytest.raises(MissingOutput):
        man.output_path("simulate")
    with pytest.raises(MissingOutput):
        emit_plot_data(man, "histogram")


def test_report_views_from_moments_and_simulate(tmp_path):
    s = Scenario(experiment="moments", kernel="srw-d3", out=str(tmp_path / "m"),
                 params={"radius": 6, "sources": (((0, 0, 0), 0.2),), "mu": 1.0,
                         "orders": 2, "t_end": 3.0, "dt": 0.02,
                         "checkpoints": (1.0, 3.0), "bound_check": True,
                         "grid_n": 32})
    man = run_experiment(s)
    path = emit_plot_data(man, "m1-convergence")
    import csv
    rows = list(csv.DictReader(open(path)))
    assert {"m1", "A"} == {r["series"] for r in rows}
    s2 = Scenario(experiment="simulate", kernel="srw-d1", out=str(tmp_path / "s"),
                  params={"mu": 1.0, "init": "window", "window": 20,
                          "t_end": 2.0, "checkpoints": (1.0, 2.0),
                          "replicas": 50})
    man2 = run_experiment(s2)
    p2 = emit_plot_data(man2, "occupancy")
    rows2 = list(csv.DictReader(open(p2)))
    assert all(r["series"] == "occupied_fraction" for r in rows2)
    p3 = emit_plot_data(man2, "histogram")
    assert os.path.exists(p3)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def test_cli_spectral(tmp_path, capsys):
    rc = main(["--out", str(tmp_path / "sp"), "spectral", "--kernel", "srw-d3",
               "--sigma", "0.3,0.8", "--mu", "1.0", "--grid-n", "32"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "spectral.csv" in out
    assert "manifest:" in out


def test_cli_scenario_with_overrides(tmp_path, capsys):
    scen = tmp_path / "scen.txt"
    scen.write_text("experiment = spectral\nkernel = srw-d3\nsigma = 0.3\n"
                    "mu = 1.0\ngrid_n = 32\n")
    rc = main(["--scenario", str(scen), "--out", str(tmp_path / "o"), "spectral"])
    assert rc == 0
    man = load_manifest(str(tmp_path / "o" / "manifest.json"))
    assert man.scenario["params"]["sigma"] == [0.3]


def test_cli_wrong_subcommand_for_scenario(tmp_path, capsys):
    scen = tmp_path / "scen.txt"
    scen.write_text("experiment = spectral\nsigma = 0.3\n")
    rc = main(["--scenario", str(scen), "moments"])
    assert rc == 2
    assert "error" in capsys.readouterr().err


def test_cli_report(tmp_path, capsys):
    rc = main(["--out", str(tmp_path / "sp"), "spectral", "--kernel", "srw-d3",
               "--sigma", "0.7,0.9", "--mu", "1.0", "--grid-n", "32"])
    assert rc == 0
    rc2 = main(["report", str(tmp_path / "sp" / "manifest.json"),
                "--view", "lambda-curve"])
    assert rc2 == 0
    out = capsys.readouterr().out
    assert "plot_lambda_curve.csv" in out


def test_cli_kernel_file(tmp_path, capsys):
    from brwlab import JumpKernel
    kpath = tmp_path / "walk.txt"
    JumpKernel.simple(1).to_file(kpath)
    rc = main(["--out", str(tmp_path / "k"), "kernels", "--kernel", str(kpath),
               "--t", "1.0", "--lam", "0.5", "--grid-n", "256"])
    assert rc == 0
