import csv
import json
import math
import os
import re

import pytest

from survfunnel import cli
from survfunnel.cli import DataError, RunConfig, load_dataset, main, parse_run_config
from survfunnel.funnelbench import BenchmarkConfig, benchmark_mortality
from survfunnel.plotting import render_funnel_svg
from survfunnel.simlab import SCENARIOS, dump_scenario, generate_dataset
from survfunnel.survdata import is_missing


def write_dataset(data, path, blank_every=0):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["center_id", "time", "status", *data.covariate_names])
        for k, r in enumerate(data.records):
            cov = ["" if blank_every and k % blank_every == 3 else repr(v) for v in r.covariates]
            w.writerow([r.center_id, repr(r.time), r.status, *cov])
    return path


@pytest.fixture(scope="module")
def sim_csv(tmp_path_factory):
    data = generate_dataset(SCENARIOS["base"].replace(n_centers=30), 11).data
    return write_dataset(data, tmp_path_factory.mktemp("data") / "sim.csv")


# -- input parsing -----------------------------------------------------------------

def test_load_small_file(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("center_id,time,status,age\nA,1.5,1,60\nA,2,0,\nB,3,1,71\n")
    ds = load_dataset(p, RunConfig())
    assert len(ds) == 3
    assert ds.centers == ("A", "B")
    assert ds.covariate_names == ("age",)
    assert is_missing(ds.covariates[1, 0]) and ds.covariates[2, 0] == 71


def test_bad_status_names_line(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("center_id,time,status\nA,1,1\nA,2,0\nB,3,1\nB,4,2\n")
    with pytest.raises(DataError, match="line 5: status must be 0 or 1"):
        load_dataset(p, RunConfig())


def test_all_bad_lines_reported(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("center_id,time,status,entry_time\nA,x,1,0\nA,2,0,3\nA,-1,1,\nB,4\n")
    with pytest.raises(DataError) as info:
        load_dataset(p, RunConfig())
    text = [m.split(":")[0] for m in info.value.problems]
    assert text == ["line 2", "line 3", "line 4", "line 5"]


@pytest.mark.parametrize("content, msg", [
    ("center_id,time\nA,1\n", "missing required column 'status'"),
    ("", "no header row"),
    ("center_id,time,status\n", "no data rows"),
    ("center_id,time,status,a,a\nA,1,1,0,0\n", "duplicate"),
])
def test_structural_errors(tmp_path, content, msg):
    p = tmp_path / "d.csv"
    p.write_text(content)
    with pytest.raises(DataError, match=msg):
        load_dataset(p, RunConfig())


def test_covariate_selection(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("center_id,time,status,a,b\nA,1,1,0,5\nA,2,0,1,6\n")
    assert load_dataset(p, RunConfig(covariates=("b",))).covariate_names == ("b",)
    with pytest.raises(DataError, match="'c' not in header"):
        load_dataset(p, RunConfig(covariates=("c",)))
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope.csv", RunConfig())


def test_run_config_parsing():
    cfg = parse_run_config("[run]\ntau = 24\ncovariates = age, sex\nimpute = no\n")
    assert cfg.tau == 24 and cfg.covariates == ("age", "sex") and not cfg.impute
    with pytest.raises(ValueError, match="unknown config key: tua"):
        parse_run_config("[run]\ntua = 3\n")
    with pytest.raises(ValueError, match="unknown config section"):
        parse_run_config("[other]\n")
    with pytest.raises(ValueError):
        parse_run_config("[run]\nalpha = 1.5\n")
    with pytest.raises(ValueError):
        parse_run_config("[run]\nbootstrap = 10\n")


# -- commands ------------------------------------------------------------------------

def _read_tree(root):
    out = {}
    for name in sorted(os.listdir(root)):
        out[name] = (root / name).read_bytes()
    return out


COMMANDS = {
    "funnel-mortality": {"centers.csv", "funnel_mortality.json", "funnel_mortality.svg",
                         "fit_report.txt"},
    "funnel-followup": {"followup.csv", "funnel_followup.json", "funnel_followup.svg"},
    "fit-report": {"fit_report.txt", "baseline_hazard.csv"},
    "pseudo-compare": {"pseudo_intervals.csv"},
}


@pytest.mark.parametrize("command", list(COMMANDS))
def test_commands_write_outputs_deterministically(tmp_path, sim_csv, command, capsys):
    extra = ["--bootstrap", "200"] if command == "pseudo-compare" else []
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        rc = main([command, "--input", str(sim_csv), "--out-dir", str(out), "--seed", "3", *extra])
        assert rc == 0
        runs.append(_read_tree(out))
    assert set(runs[0]) == COMMANDS[command]
    assert runs[0] == runs[1]
    if command.startswith("funnel"):
        assert re.search(r"Over: \d+  Target: \d+  Under: \d+", capsys.readouterr().out)


def test_config_file_and_flag_override(tmp_path, sim_csv):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"[run]\ninput = {sim_csv}\ntau = 6\n")
    assert main(["funnel-mortality", "--config", str(cfg), "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["funnel-mortality", "--config", str(cfg), "--tau", "12",
                 "--out-dir", str(tmp_path / "b")]) == 0
    a = json.loads((tmp_path / "a" / "funnel_mortality.json").read_text())
    b = json.loads((tmp_path / "b" / "funnel_mortality.json").read_text())
    assert a["target"] == 1.0 and sum(a["counts"].values()) == sum(b["counts"].values())
    assert a["points"] != b["points"]


def test_no_impute_with_missing_fails(tmp_path, capsys):
    data = generate_dataset(SCENARIOS["base"].replace(n_centers=10), 2).data
    p = write_dataset(data, tmp_path / "m.csv", blank_every=50)
    assert main(["funnel-mortality", "--input", str(p), "--out-dir", str(tmp_path / "o")]) == 0
    rc = main(["funnel-mortality", "--input", str(p), "--no-impute", "--out-dir", str(tmp_path / "o")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_missing_input_is_an_error(tmp_path, capsys):
    assert main(["funnel-mortality", "--out-dir", str(tmp_path)]) == 1
    assert main(["funnel-mortality", "--input", str(tmp_path / "x.csv")]) == 1
    assert "input file not found" in capsys.readouterr().err


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == 2


# -- funnel SVG ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def chart(tmp_path_factory):
    data = generate_dataset(SCENARIOS["base"].replace(n_centers=25), 5).data
    return benchmark_mortality(data, BenchmarkConfig()).chart


def test_svg_structure(tmp_path, chart):
    path = tmp_path / "f.svg"
    render_funnel_svg(chart, path)
    text = path.read_text()
    for pt in chart.points:
        assert len(re.findall(rf'id="center-{re.escape(pt["center_id"])}"', text)) == 1
    for gid in ("limit-inner-lower", "limit-inner-upper", "limit-outer-lower",
                "limit-outer-upper", "target-line"):
        assert text.count(f'id="{gid}"') == 1
    assert text.count('id="center-') == len(chart.points)
    for c in ("Over", "Target", "Under"):
        assert f"{c} ({chart.counts.get(c, 0)})" in text


def test_svg_is_byte_identical_and_accepts_dict(tmp_path, chart):
    render_funnel_svg(chart, tmp_path / "a.svg")
    render_funnel_svg(json.loads(chart.to_json()), tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_svg_legend_shows_empty_buckets(tmp_path, chart):
    d = json.loads(chart.to_json())
    for pt in d["points"]:
        pt["classification"] = "Target"
    d["counts"] = {"Over": 0, "Target": len(d["points"]), "Under": 0}
    render_funnel_svg(d, tmp_path / "t.svg")
    text = (tmp_path / "t.svg").read_text()
    assert "Over (0)" in text and "Under (0)" in text


def test_svg_unwritable_path(tmp_path, chart):
    with pytest.raises(FileNotFoundError):
        render_funnel_svg(chart, tmp_path / "missing" / "f.svg")


# -- simulate -----------------------------------------------------------------------

TINY_SCENARIO = SCENARIOS["base"].replace(
    name="tiny", n_centers=10, center_size_mean=50, center_size_sd=20, replications=2, bootstrap=100,
)


def test_simulate_paper_scale_file_deterministic(tmp_path, capsys):
    spec = tmp_path / "tiny.scenario"
    spec.write_text(dump_scenario(TINY_SCENARIO))
    trees = []
    for k in range(2):
        out = tmp_path / f"s{k}"
        assert main(["simulate", "--input", str(spec), "--paper-scale", "--seed", "9",
                     "--out-dir", str(out)]) == 0
        trees.append(_read_tree(out))
    assert set(trees[0]) == {"summary.csv", "diagnostics.csv", "z_vs_censoring.svg", "z_scatter.svg"}
    assert trees[0] == trees[1]
    rows = list(csv.DictReader(open(tmp_path / "s0" / "diagnostics.csv")))
    assert {r["replicate"] for r in rows} == {"0", "1"}
    assert "tiny: Z mean" in capsys.readouterr().out
    out = tmp_path / "s2"
    assert main(["simulate", "--input", str(spec), "--paper-scale", "--seed", "10",
                 "--out-dir", str(out)]) == 0
    assert (out / "diagnostics.csv").read_bytes() != trees[0]["diagnostics.csv"]


def test_simulate_unknown_field(tmp_path, capsys):
    spec = tmp_path / "bad.scenario"
    spec.write_text("[scenario]\nn_centres = 10\n")
    assert main(["simulate", "--input", str(spec), "--out-dir", str(tmp_path)]) == 1
    assert "n_centres" in capsys.readouterr().err


def test_simulate_requires_a_source():
    with pytest.raises(SystemExit):
        main(["simulate"])
    with pytest.raises(SystemExit):
        main(["simulate", "--scenario", "base", "--input", "x"])


def test_simulate_desk_scale_caps_replications(tmp_path, monkeypatch):
    seen = {}

    def fake_run(config, workers=1):
        seen["config"] = config
        raise RuntimeError("stop")

    monkeypatch.setattr(cli.simlab, "run_scenario", fake_run)
    assert main(["simulate", "--scenario", "base", "--out-dir", str(tmp_path)]) == 1
    cfg = seen["config"]
    assert (cfg.n_centers, cfg.replications, cfg.bootstrap) == (100, 20, 200)
    assert main(["simulate", "--scenario", "base", "--paper-scale", "--tau", "6",
                 "--out-dir", str(tmp_path)]) == 1
    cfg = seen["config"]
    assert (cfg.n_centers, cfg.replications, cfg.tau) == (300, 50, 6.0)
    assert not math.isnan(cfg.alpha)
