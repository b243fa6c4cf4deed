import json

import numpy as np
import pytest
import yaml

from psmrl.cli import main
from psmrl.envs import load_demos
from psmrl.learner import METRIC_COLUMNS, read_metrics
from psmrl.rollout import read_bench_table

TINY = ["--hidden", "8", "--n-envs", "2"]


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump({"trainer": {"n_cycles": 2, "n_batches": 2, "n_test_episodes": 4}}))
    return path


def test_demo_gen_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    assert main(["demo-gen", "--env", "pick", "--count", "5", "--out", str(a), "--seed", "3"]) == 0
    assert "attempts" in capsys.readouterr().out
    assert main(["demo-gen", "--env", "pick", "--count", "5", "--out", str(b), "--seed", "3"]) == 0
    assert a.read_bytes() == b.read_bytes()
    episodes, cfg = load_demos(a)
    assert len(episodes) == 5 and cfg.kind == "pick"
    assert all(ep.rewards[-1] == 0.0 for ep in episodes)


def test_usage_errors_exit_1(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["demo-gen", "--count", "0", "--out", str(tmp_path / "x")])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main(["bench", "--n", "0"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1


def test_demo_gen_unwritable_path(tmp_path):
    assert main(["demo-gen", "--env", "reach", "--count", "1", "--out", str(tmp_path / "no" / "dir" / "x.bin")]) == 2


def test_train_writes_run_directory(tmp_path, tiny_config, capsys):
    out = tmp_path / "run"
    rc = main(["train", "--config", str(tiny_config), "--env", "reach", "--epochs", "2", "--out", str(out), "--seed", "4", "--plot", *TINY])
    assert rc == 0
    assert len(read_metrics(out / "metrics.csv")) == 2
    for name in ("latest.ckpt", "best.ckpt", "config.yaml", "success.svg", "resume.pkl"):
        assert (out / name).exists()
    resolved = yaml.safe_load((out / "config.yaml").read_text())
    assert resolved["trainer"]["n_epochs"] == 2 and resolved["trainer"]["n_cycles"] == 2
    assert resolved["trainer"]["hidden"] == [8]
    assert resolved["env"]["seed"] == 4 and resolved["seed"] == 4
    # the resolved file is itself a valid config
    again = tmp_path / "again"
    assert main(["train", "--config", str(out / "config.yaml"), "--out", str(again), "--epochs", "1"]) == 0


def test_train_rejects_unknown_keys(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("trainer: {n_epoch: 3}\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == 1
    bad.write_text("learning_rate: 3\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == 1
    assert not (tmp_path / "r").exists()


def test_train_missing_demo_file(tmp_path):
    assert main(["train", "--env", "pick", "--demos", str(tmp_path / "none.bin"), "--out", str(tmp_path / "r")]) == 2


def test_train_with_demos_logs_bc(tmp_path, tiny_config):
    demos = tmp_path / "d.bin"
    main(["demo-gen", "--env", "pick", "--count", "3", "--out", str(demos)])
    out = tmp_path / "run"
    rc = main(["train", "--config", str(tiny_config), "--env", "pick", "--epochs", "1", "--demos", str(demos), "--out", str(out), *TINY])
    assert rc == 0
    assert read_metrics(out / "metrics.csv")[0].bc_loss > 0
    # demos recorded for the other task are refused
    assert main(["train", "--env", "reach", "--epochs", "1", "--demos", str(demos), "--out", str(tmp_path / "r2")]) == 2


def test_eval_and_mismatch(tmp_path, tiny_config, capsys):
    out = tmp_path / "run"
    main(["train", "--config", str(tiny_config), "--env", "reach", "--epochs", "1", "--out", str(out), *TINY])
    ckpt = out / "best.ckpt"
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt), "--episodes", "5", "--max-steps", "50"]) == 0
    assert "success" in capsys.readouterr().out
    record = json.loads((out / "best.ckpt.eval.json").read_text())
    assert record["episodes"] == 5 and record["max_steps"] == 50 and 0.0 <= record["success_rate"] <= 1.0
    assert main(["eval", "--checkpoint", str(ckpt), "--env", "pick"]) == 2
    data = bytearray(ckpt.read_bytes())
    data[-20] ^= 0xFF
    ckpt.write_bytes(bytes(data))
    assert main(["eval", "--checkpoint", str(ckpt)]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2


def test_bench_rows(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--env", "reach", "--n", "1,2", "--episodes", "1", "--out", str(out)]) == 0
    rows = read_bench_table(out)
    assert [int(r["n_envs"]) for r in rows] == [1, 2]
    assert "steps/s" in capsys.readouterr().out


def _metrics(path, values):
    lines = [",".join(METRIC_COLUMNS)] + [f"{i},{v},0.1,0.2,0.0,1.000" for i, v in enumerate(values)]
    path.write_text("\n".join(lines) + "\n")


def test_plot_overlay(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    _metrics(a, [0.0, 0.5, 1.0])
    _metrics(b, [0.0, 0.1])
    out = tmp_path / "plot.svg"
    assert main(["plot", str(a), str(b), "--out", str(out), "--labels", "with BC,without BC"]) == 0
    svg = out.read_text()
    assert svg.startswith("<svg") and svg.count("<polyline") == 2
    assert "with BC,2,1.0" in svg and "without BC,1,0.1" in svg


def test_plot_errors(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text(",".join(METRIC_COLUMNS) + "\n")
    out = tmp_path / "plot.svg"
    assert main(["plot", str(empty), "--out", str(out)]) == 2
    assert not out.exists()
    bad = tmp_path / "bad.csv"
    bad.write_text(",".join(METRIC_COLUMNS) + "\n0,x,1,1,1,1\n")
    assert main(["plot", str(bad), "--out", str(out)]) == 2


def test_tools_fk_ik(capsys):
    assert main(["tools", "fk", "--tool", "suction", "--q", "0", "0", "0.0156", "0", "0", "--no-limits"]) == 0
    line = capsys.readouterr().out.splitlines()[0].split()
    np.testing.assert_allclose([float(v) for v in line[1:]], [0, 0, -0.0102], atol=1e-9)
    q = ["0.2", "-0.1", "0.12", "0.3", "-0.4"]
    main(["tools", "fk", "--q", *q])
    out = capsys.readouterr().out.split()
    pose = out[1:4] + out[5:8]
    assert main(["tools", "ik", "--pose", *pose]) == 0
    got = [float(v) for v in capsys.readouterr().out.split()[1:]]
    np.testing.assert_allclose(got, [float(v) for v in q], atol=1e-6)
    assert main(["tools", "fk", "--tool", "lnd", "--q", "0"]) == 1
    assert main(["tools", "ik", "--pose", "0", "0", "-2", "0", "0", "-1"]) == 1
