from __future__ import annotations

import json
import shutil

import numpy as np
import pytest

from sindyloop.bench.systems import FIXTURE_DIR, FIXTURE_NAMES
from sindyloop.cli import main
from sindyloop.regress import Trajectory, read_trajectory, write_trajectory


@pytest.fixture()
def osc_csv(tmp_path):
    out = tmp_path / "osc.csv"
    assert main(["generate", "--spec", str(FIXTURE_DIR / "odebench24.json"), "--out", str(out)]) == 0
    return out


def test_generate_writes_csv_and_sidecar(osc_csv, capsys):
    traj = read_trajectory(osc_csv)
    assert traj.states.shape == (500, 2)
    assert traj.split == 350
    assert osc_csv.with_suffix(".meta.json").exists()


def test_generate_march_leuba_spec(tmp_path):
    spec = tmp_path / "ml.json"
    spec.write_text(json.dumps({"generator": "march_leuba", "t_span": [0, 2], "n_samples": 201}))
    out = tmp_path / "ml.csv"
    assert main(["generate", "--spec", str(spec), "--out", str(out)]) == 0
    traj = read_trajectory(out)
    assert (traj.n_states, traj.n_inputs) == (7, 1)


def test_baseline_reports_trust(osc_csv, tmp_path, capsys):
    out = tmp_path / "base.json"
    assert main(["baseline", "--traj", str(osc_csv), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    # the broad dictionary overfits the oscillator: many terms, rollout fails, nothing trusted
    assert doc["n_active_terms"] > 20
    assert doc["rollout"]["outcome"] != "Completed"
    assert doc["trust"] == ["unreliable", "unreliable"]


def test_refine_replay_prints_model(osc_csv, tmp_path, capsys):
    out = tmp_path / "run.json"
    assert main(["refine", "--traj", str(osc_csv), "--proposer", "replay", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "dx0/dt" in text and "stop=EarlyStop" in text
    assert json.loads(out.read_text())["iterations"]


def test_mutation_runs_are_reproducible(osc_csv, tmp_path):
    logs = []
    for k in range(2):
        out = tmp_path / f"m{k}.json"
        argv = ["refine", "--traj", str(osc_csv), "--proposer", "mutate:42", "--out", str(out), "--normalize"]
        assert main(argv + ["--set", "loop.max_iterations=3"]) == 0
        logs.append(out.read_bytes())
    assert logs[0] == logs[1]


@pytest.mark.parametrize(
    "argv, code",
    [
        (["generate", "--spec", "/nonexistent.json", "--out", "x.csv"], 2),
        (["baseline", "--traj", "/nonexistent.csv"], 2),
        (["generate", "--spec", str(FIXTURE_DIR / "odebench24.json"), "--out", "x.csv", "--split", "1.5"], 2),
    ],
)
def test_input_errors_exit_2(argv, code, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code


def test_bad_override_exits_2(osc_csv):
    assert main(["baseline", "--traj", str(osc_csv), "--set", "loop.nope=1"]) == 2


def test_unknown_proposer_exits_2(osc_csv, tmp_path):
    assert main(["refine", "--traj", str(osc_csv), "--proposer", "oracle", "--out", str(tmp_path / "r.json")]) == 2


def test_constant_column_exits_3(tmp_path):
    t = np.linspace(0, 1, 100)
    path = tmp_path / "const.csv"
    write_trajectory(Trajectory(times=t, states=np.column_stack([np.exp(-t), np.ones_like(t)]), split=70), path)
    assert main(["baseline", "--traj", str(path)]) == 3


def test_remote_without_credential_exits_4(osc_csv, tmp_path, monkeypatch):
    monkeypatch.delenv("SINDYLOOP_API_KEY", raising=False)
    assert main(["refine", "--traj", str(osc_csv), "--proposer", "remote", "--out", str(tmp_path / "r.json")]) == 4


def test_missing_replay_exits_4(osc_csv, tmp_path):
    argv = ["refine", "--traj", str(osc_csv), "--proposer", f"replay:{tmp_path / 'none.json'}", "--out", "r.json"]
    assert main(argv) == 4


def test_empty_bench_dir_exits_2(tmp_path):
    assert main(["bench", "--specs", str(tmp_path), "--proposer", "replay", "--out", str(tmp_path / "o")]) == 2


def test_bench_over_fixtures(tmp_path, capsys):
    specs = tmp_path / "specs"
    specs.mkdir()
    for name in ("odebench24", "odebench39"):
        shutil.copy(FIXTURE_DIR / f"{name}.json", specs)
        shutil.copy(FIXTURE_DIR / f"{name}.replay.json", specs)
    out = tmp_path / "out"
    assert main(["bench", "--specs", str(specs), "--proposer", "replay", "--out", str(out), "--jobs", "2"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert [r["system"] for r in report["systems"]] == ["odebench24", "odebench39"]
    assert (out / "report.csv").read_text().count("\n") == 3
    assert "refined better on" in capsys.readouterr().out


def test_fixture_names_have_replays():
    for name in FIXTURE_NAMES:
        assert (FIXTURE_DIR / f"{name}.replay.json").exists()
