import json

import pytest
from conftest import shrink

from ecosim.cli import run


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(shrink("subgroup_slope").to_json())
    return str(path)


def test_missing_seed_is_a_usage_error(tmp_path, capsys):
    assert run(["train", "--lambda", "0.5", "--out", str(tmp_path)]) == 1
    assert "--seed" in capsys.readouterr().err


def test_unknown_scenario_lists_names(tmp_path, capsys):
    code = run(["evaluate", "--agent", "random", "--scenario", "bogus", "--seed", "0",
                "--out", str(tmp_path)])
    assert code == 1
    err = capsys.readouterr().err
    assert all(n in err for n in ("saturated_log", "linear", "subgroup_init", "subgroup_slope"))


def test_lambda_out_of_range(tmp_path):
    assert run(["train", "--lambda", "1.5", "--seed", "0", "--out", str(tmp_path)]) == 1


def test_bad_thread_env(tmp_path, scenario_file, monkeypatch):
    monkeypatch.setenv("ECOSIM_THREADS", "many")
    assert run(["sweep", "--config", scenario_file, "--seed", "0", "--out", str(tmp_path),
                "--lambda", "0", "--lr", "0.03", "--epochs", "1", "--rollouts", "1"]) == 1


def test_train_then_evaluate(tmp_path, scenario_file):
    out = tmp_path / "run"
    assert run(["train", "--config", scenario_file, "--seed", "1", "--lambda", "0.8",
                "--epochs", "2", "--out", str(out)]) == 0
    assert (out / "agent.bin").exists() and (out / "curves.csv").exists()
    assert run(["evaluate", "--config", scenario_file, "--seed", "2", "--checkpoint",
                str(out / "agent"), "--lambda", "0.8", "--rollouts", "2", "--trajectories",
                "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["n"] == 2
    lines = [json.loads(x) for x in (out / "trajectories.jsonl").read_text().splitlines()]
    # episodes may end early once every provider has left
    episodes = [rec["episode"] for rec in lines]
    assert set(episodes) == {0, 1} and max(episodes.count(e) for e in (0, 1)) <= 4
    # a checkpoint trained at another lambda is refused
    assert run(["evaluate", "--config", scenario_file, "--seed", "2", "--checkpoint",
                str(out / "agent"), "--lambda", "0.1", "--out", str(out)]) == 1


def test_evaluate_eco_needs_checkpoint(tmp_path, scenario_file):
    assert run(["evaluate", "--config", scenario_file, "--seed", "0", "--out",
                str(tmp_path)]) == 1


def test_sweep_and_plot_rerender(tmp_path, scenario_file):
    out = tmp_path / "sweep"
    assert run(["sweep", "--config", scenario_file, "--seed", "3", "--out", str(out),
                "--lambda", "0,1", "--lr", "0.03", "--epochs", "1", "--rollouts", "2"]) == 0
    again = tmp_path / "plot"
    assert run(["plot", "--in", str(out), "--out", str(again)]) == 0
    for name in ("fig4_provider_reward.csv", "fig12_rec_counts.csv", "fig5_pareto.svg"):
        assert (out / name).read_bytes() == (again / name).read_bytes()


def test_plot_without_sweep(tmp_path):
    assert run(["plot", "--in", str(tmp_path), "--out", str(tmp_path / "x")]) == 1


def test_selftest_passes(capsys):
    assert run(["selftest", "--seeds", "1"]) == 0
    assert "FAIL" not in capsys.readouterr().err
