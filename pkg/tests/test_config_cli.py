from __future__ import annotations

import json
import shutil
from datetime import date
from pathlib import Path

import pytest

from cdrshock.cli import main
from cdrshock.config import ConfigError, PipelineConfig, read_config, read_config_text, write_config

TINY = """
synth.n_users = 2500
synth.n_country = 60
province.n_provinces = 10
province.users_per_province = 150
province.n_boot = 20
n_boot = 20
rsd.population = 300
rsd.k_grid = 50,100
"""


# ---------------------------------------------------------------------------
# config grammar


def test_grammar_basics(tmp_path):
    cfg = read_config_text(
        """
        # comment
        gamma = 0.1   # trailing
        calendar.gaps = 2006-08-14..2006-09-24, 2006-12-24..2006-12-26
        forecast.families = AR1, AR1_GDP
        forecast.intercept = false
        cluster.town = A, B
        cdr = data/cdr.csv
        layoff_date = none
        """,
        base=tmp_path,
    )
    assert cfg["gamma"] == 0.1
    assert cfg["calendar.gaps"] == ((date(2006, 8, 14), date(2006, 9, 24)), (date(2006, 12, 24), date(2006, 12, 26)))
    assert cfg["forecast.families"] == ("AR1", "AR1_GDP")
    assert cfg["forecast.intercept"] is False
    assert cfg["cluster.town"] == ("A", "B")
    assert cfg["cdr"] == str(tmp_path / "data/cdr.csv")
    assert cfg["layoff_date"] is None


@pytest.mark.parametrize(
    "text, match",
    [
        ("gamma = 0.1\ngamma = 0.2", "duplicate"),
        ("gamm = 0.1", "unknown"),
        ("gamma", "key = value"),
        ("min_calls = ten", "cannot parse"),
        ("synth.nope = 3", "nope"),
    ],
)
def test_grammar_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        read_config_text(text)


@pytest.mark.parametrize("key, value", [("gamma", 2.0), ("d", 0.0), ("gamma", 0.0), ("forecast.families", ("AR2",)), ("threads", 0)])
def test_validation(key, value):
    with pytest.raises(ConfigError):
        PipelineConfig.from_layers({key: value})


def test_layers_later_wins():
    cfg = PipelineConfig.from_layers({"gamma": 0.1, "seed": 4}, {"gamma": 0.2})
    assert cfg["gamma"] == 0.2 and cfg["seed"] == 4 and cfg["d"] == 0.29


def test_synth_and_province_config():
    cfg = PipelineConfig.from_layers({"seed": 9, "synth.n_users": 123, "province.n_provinces": 4})
    assert cfg.synth_config().n_users == 123 and cfg.synth_config().seed == 9
    assert cfg.province_config().n_provinces == 4 and cfg.province_config().seed == 9


def test_write_config_round_trip(tmp_path):
    vals = {"cdr": str(tmp_path / "x" / "cdr.csv"), "calendar.start": date(2006, 1, 1), "cluster.t": ("A", "B"), "gamma": 0.125}
    write_config(vals, tmp_path / "c.conf", base=tmp_path)
    text = (tmp_path / "c.conf").read_text()
    assert str(tmp_path) not in text
    assert read_config(tmp_path / "c.conf") == vals


# ---------------------------------------------------------------------------
# command line


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.conf").write_text(TINY)
    rc = main(["run", "--config", str(root / "tiny.conf"), "--output", str(root / "out")])
    assert rc == 0
    return root


def _copy(run_dir, tmp_path):
    dst = tmp_path / "out"
    shutil.copytree(run_dir / "out", dst)
    return dst


def test_all_stages_written(run_dir):
    out = run_dir / "out"
    for stage, files in {
        "synth": ["cdr.csv", "truth.csv", "towers.csv", "pipeline.conf", "unemployment.csv"],
        "break": ["community_break.json", "daily_volume.csv", "user_breaks.csv"],
        "classify": ["posteriors.csv", "summary.json"],
        "metrics": ["features.csv", "group_diffs.csv", "fit.json", "percent_change.csv"],
        "forecast": ["eval.json", "pca_loadings.csv", "predictions.csv"],
        "rsd": ["rsd.csv"],
    }.items():
        for f in files + ["manifest.json", "summary.txt"]:
            assert (out / stage / f).is_file(), f"{stage}/{f}"
    index = json.loads((out / "manifest.json").read_text())
    assert set(index["stages"]) == {"synth", "break", "classify", "metrics", "forecast", "rsd"}


def test_outputs_have_no_absolute_paths(run_dir):
    root = str(run_dir)
    for p in (run_dir / "out").rglob("*"):
        if p.is_file() and p.suffix in (".json", ".conf", ".txt"):
            assert root not in p.read_text(), p


def test_break_found_near_planted(run_dir):
    br = json.loads((run_dir / "out" / "break" / "community_break.json").read_text())
    assert abs((date.fromisoformat(br["t_break"]) - date(2006, 12, 1)).days) <= 2


def test_flag_beats_config_file(run_dir, tmp_path, capsys):
    out = _copy(run_dir, tmp_path)
    assert main(["classify", "--config", str(run_dir / "tiny.conf"), "--set", "gamma=0.2", "--output", str(out), "--gamma", "0.3"]) == 0
    s = json.loads((out / "classify" / "summary.json").read_text())
    assert s["gamma"] == 0.3
    assert "stage: classify" in capsys.readouterr().out


def test_global_flag_before_subcommand(run_dir, tmp_path):
    out = _copy(run_dir, tmp_path)
    assert main(["--output", str(out), "--seed", "3", "classify"]) == 0
    m = json.loads((out / "classify" / "manifest.json").read_text())
    assert m["seed"] == 3


def test_manifest_tracks_inputs(run_dir, tmp_path):
    out = _copy(run_dir, tmp_path)
    before = (out / "break" / "manifest.json").read_text()
    assert main(["break", "--config", str(run_dir / "tiny.conf"), "--output", str(out)]) == 0
    assert (out / "break" / "manifest.json").read_text() == before
    cdr = out / "synth" / "cdr.csv"
    lines = cdr.read_text().splitlines(keepends=True)
    cdr.write_text("".join(lines[:-1]))
    assert main(["break", "--config", str(run_dir / "tiny.conf"), "--output", str(out)]) == 0
    after = json.loads((out / "break" / "manifest.json").read_text())
    assert after["inputs"]["cdr"] != json.loads(before)["inputs"]["cdr"]


def test_missing_upstream_stage_message(tmp_path, capsys):
    assert main(["classify", "--output", str(tmp_path / "empty")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("cdrshock: error:") and "break stage or layoff_date" in err


def test_missing_posteriors_names_stage(run_dir, tmp_path, capsys):
    out = _copy(run_dir, tmp_path)
    shutil.rmtree(out / "classify")
    assert main(["metrics", "--output", str(out)]) == 1
    assert "run the classify stage first" in capsys.readouterr().err


def test_failed_stage_keeps_previous_artifacts(run_dir, tmp_path):
    out = _copy(run_dir, tmp_path)
    before = {p.name: p.read_bytes() for p in (out / "classify").iterdir()}
    (out / "synth" / "cdr.csv").write_text("caller_id,callee_id,caller_tower,callee_tower,timestamp\n" + "a,b,NOPE,,bad\n" * 50)
    assert main(["classify", "--output", str(out)]) == 1
    assert {p.name: p.read_bytes() for p in (out / "classify").iterdir()} == before
    assert not [p for p in out.iterdir() if p.name.startswith(".")]


def test_invalid_value_exit_code(tmp_path, capsys):
    assert main(["classify", "--output", str(tmp_path), "--gamma", "2"]) == 1
    assert "gamma" in capsys.readouterr().err


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as e:
        main(["nonsense"])
    assert e.value.code == 2


def test_unknown_stage_in_run(tmp_path, capsys):
    assert main(["run", "synth", "bogus", "--output", str(tmp_path)]) == 1
    assert "bogus" in capsys.readouterr().err


def test_metrics_features_only(run_dir, tmp_path):
    out = _copy(run_dir, tmp_path)
    shutil.rmtree(out / "metrics")
    assert main(["metrics", "features", "--output", str(out)]) == 0
    assert (out / "metrics" / "features.csv").exists() and not (out / "metrics" / "fit.json").exists()
