import configparser
import math
from dataclasses import replace

import numpy as np
import pytest

from driftlab import cli, harness, qp
from driftlab.bayes import PosteriorBelief, adapt_on_log
from driftlab.dynamics import DT, TrajectoryLog


def parse(text, base="."):
    p = configparser.ConfigParser(interpolation=None)
    p.read_string(text)
    return harness.config_from_parser(p, base)


# configuration


def test_demo_config_loads(demo_config):
    assert demo_config.name == "demo"
    assert demo_config.seeds == (0, 1, 2)
    assert demo_config.ensemble_size == 8 and demo_config.epochs == 150
    assert harness.Path(demo_config.checkpoint).is_file()


@pytest.mark.parametrize("text,needle", [
    ("[experiment]\nseeds = 1\ncolour = red\n", "[experiment] colour"),
    ("[experiment]\nrounds = two\n", "[experiment] rounds"),
    ("[experiment]\nseeds =\n", "[experiment] seeds"),
    ("[experiment]\nscenarios = moon\n", "[experiment] scenarios"),
    ("[experiment]\nadaptation = sometimes\n", "[experiment] adaptation"),
    ("[ocp]\nhorizon = 0\n", "[ocp] horizon"),
    ("[ocp]\nalpha = -1\n", "[ocp] alpha"),
    ("[plant]\nmu_r = 3\n", "[plant]"),
    ("[plant]\nwings = 2\n", "[plant] wings"),
    ("[plant]\nmass = nan\n", "[plant] mass"),
    ("[reference.figure8]\nradius = -4\n", "[reference.figure8]"),
    ("[reference.figure8]\nspeed = 4\n", "[reference.figure8] speed"),
    ("[reference.helix]\nradius = 4\n", "[reference.helix]"),
    ("[extras]\nx = 1\n", "[extras]"),
])
def test_config_errors_name_the_key(text, needle):
    with pytest.raises(harness.ConfigError) as exc:
        parse(text)
    assert needle in str(exc.value)


def test_config_fields_and_paths(tmp_path):
    cfg = parse("[experiment]\nseeds = 4, 5\nscenarios = circle\n[model]\ncheckpoint = m.json\n"
                "[plant]\nmu_r = 0.6\n[reference.circle]\nradius = 20\nspeed = 8\n", tmp_path)
    assert cfg.seeds == (4, 5) and cfg.scenarios == ("circle",)
    assert cfg.checkpoint == str(tmp_path / "m.json")
    assert cfg.target_plant().mu_r == 0.6
    assert np.allclose(cfg.reference("circle").kappa, 1 / 20)


def test_missing_config_is_config_error():
    with pytest.raises(harness.ConfigError):
        harness.load_config("/nonexistent/config.ini")


def test_output_dir_precedence(tmp_path, monkeypatch, demo_config):
    cfg = replace(demo_config, out=str(tmp_path / "cfg"))
    monkeypatch.delenv("DRIFTLAB_OUT", raising=False)
    assert harness.output_dir(cfg) == tmp_path / "cfg"
    monkeypatch.setenv("DRIFTLAB_OUT", str(tmp_path / "env"))
    assert harness.output_dir(cfg) == tmp_path / "env"
    assert harness.output_dir(cfg, str(tmp_path / "flag")) == tmp_path / "flag"


# metrics


def synthetic_log(beta):
    n = len(beta)
    x = np.zeros((n, 6))
    x[:, 1] = 10.0
    x[:, 2] = beta
    return TrajectoryLog(DT * np.arange(n), x, np.zeros((n, 2)), np.zeros((n, 2)))


def test_initiation_distance():
    beta = np.r_[np.zeros(20), 0.3 * np.ones(5), np.zeros(5), 0.4 * np.ones(15)]
    dist, ok = harness.initiation_distance(synthetic_log(beta))
    assert ok and dist == pytest.approx(30 * 10.0 * DT)  # the short excursion does not count
    dist, ok = harness.initiation_distance(synthetic_log(np.zeros(30)))
    assert not ok and dist == pytest.approx(29 * 10.0 * DT)


def test_record_row_round_trip():
    r = harness.RunRecord("figure8", "Prior", 3, "SpinOut", 17, 0.1, 0.5, 1.7, 12.0, True,
                          (1.0, 2.0, 3.0, 4.0, 10.0), 2, "f.csv")
    d = dict(zip(harness.RunRecord.HEADER, [str(v) for v in r.row()]))
    assert harness.RunRecord.from_row(d) == r


def make_records():
    recs = []
    for cond, vals in (("Prior", (0.3, 0.1, 0.2)), ("Offline", (0.05,))):
        for seed, v in enumerate(vals):
            recs.append(harness.RunRecord("figure8", cond, seed, "Completed", 10, v, 2 * v, 0.4,
                                          20.0 + seed, True, (1, 1, 1, 1, 4.0 - seed)))
    return recs


def test_report_medians(tmp_path):
    path = harness.report(make_records(), tmp_path)
    rows = {r[1]: r for r in (ln.split(",") for ln in path.read_text().splitlines()[1:])}
    assert float(rows["Prior"][6]) == pytest.approx(0.2)  # median of three
    assert float(rows["Offline"][6]) == pytest.approx(0.05)  # a single run is its own median
    assert int(rows["Prior"][2]) == 3


def test_report_is_deterministic(tmp_path):
    a = harness.report(make_records(), tmp_path / "a").read_bytes()
    b = harness.report(list(reversed(make_records())), tmp_path / "b").read_bytes()
    assert a == b
    assert (tmp_path / "a" / "runs.csv").read_bytes() == (tmp_path / "b" / "runs.csv").read_bytes()
    with pytest.raises(ValueError):
        harness.report([], tmp_path)


# experiments


@pytest.fixture(scope="module")
def circle_config(demo_config):
    return replace(demo_config, scenarios=("circle",), plant={}, seeds=(0,),
                   references={"circle": {"radius": 15.0, "speed": 9.0, "duration": 10.0}})


def test_circle_grip_on_nominal_plant(circle_config, demo_model, tmp_path):
    net, prior = demo_model
    b = prior.copy()
    b.theta[:] = 0.0
    rec = harness.closed_loop(circle_config, net, b, "circle", 0, condition="Zero", out=tmp_path)
    assert rec.status == "Completed" and rec.rms_e < 0.3
    # metrics are recomputable from the log file alone
    m = harness.log_metrics(TrajectoryLog.from_csv(tmp_path / rec.log_path))
    assert m["rms_e"] == rec.rms_e and m["max_beta"] == rec.max_beta
    assert m["initiation_distance"] == rec.initiation_distance


def test_gather_without_rounds_keeps_prior(demo_config, demo_model):
    net, prior = demo_model
    beliefs, logs = harness.gather(demo_config, net, prior, 0, rounds=0)
    assert len(beliefs) == 1 and not logs
    one = TrajectoryLog(np.zeros(1), np.array([[0, 8, 0, 8, 0, 0.0]]), np.zeros((1, 2)),
                        np.zeros((1, 2)))
    assert harness.covariance_norms(adapt_on_log(net, prior, one)) == harness.covariance_norms(prior)


def test_covariance_study_single_seed(demo_config, demo_model, tmp_path):
    net, prior = demo_model
    res = harness.run_covariance_study(replace(demo_config, seeds=(0,)), net, prior, tmp_path)
    norms = res[0]
    for cond in harness.COVARIANCE_CONDITIONS[1:]:
        assert all(a <= p + 1e-12 for a, p in zip(norms[cond], norms["Prior"]))
    lines = (tmp_path / "covariance_table.csv").read_text().splitlines()
    assert lines[0] == "dimension,Prior,Once-OCP,Once-Info-OCP,Twice-Info-OCP"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["r", "v", "beta", "omega_r", "Total"]


# command line


def test_help_exits_zero(capsys):
    assert cli.main(["mpc-run", "--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_usage_errors_exit_one(capsys):
    assert cli.main(["fly"]) == 1
    assert cli.main([]) == 1
    assert cli.main(["mpc-run", "--seed", "x"]) == 1
    assert "usage" in capsys.readouterr().err


def test_config_error_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[experiment]\nrounds = many\n")
    assert cli.main(["mpc-run", "--config", str(bad)]) == 1
    assert "[experiment] rounds" in capsys.readouterr().err


def test_missing_checkpoint_exits_two(tmp_path, capsys):
    assert cli.main(["mpc-run", "--checkpoint", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2


def test_qp_solve_command(tmp_path, capsys):
    prob = qp.QpProblem(np.eye(2), [1.0, -1.0], [[1.0, 0.0]], [0.0], [1.0])
    qp.dump_problem(prob, tmp_path / "p.qp")
    assert cli.main(["qp-solve", str(tmp_path / "p.qp")]) == 0
    out = capsys.readouterr().out
    assert "status Solved" in out
    x = [float(v) for v in out.splitlines()[-1].split()[1:]]
    assert np.allclose(x, [0.0, 1.0], atol=1e-8)


def test_report_command(tmp_path, capsys):
    harness.write_records(tmp_path / "runs.csv", make_records())
    assert cli.main(["report", "--runs", str(tmp_path / "runs.csv"), "--out", str(tmp_path / "o")]) == 0
    assert capsys.readouterr().out.startswith("scenario,condition,runs")


def test_covariance_table_command(tmp_path, capsys):
    assert cli.main(["covariance-table", "--config", "demo", "--seed", "0", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 6 and lines[0].startswith("dimension,Prior")
    assert all(math.isfinite(float(v)) for ln in lines[1:] for v in ln.split(",")[1:])
