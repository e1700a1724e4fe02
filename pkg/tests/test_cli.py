import json
import subprocess
import sys

import pytest

from quzo.cli import main
from quzo.config import load_config, run_id
from quzo.errors import ConfigurationError

NUMERIC_CSV = {
    "train": ["train_log.csv"],
    "bias-sweep": ["bias_sweep.csv", "bias_sweep_long.csv"],
    "dtype-search": ["dtype_search.csv"],
    "mem-report": ["mem_report.csv"],
    "gen-data": ["data.csv"],
}

CONFIGS = {
    "train": {"task": "two-gaussians", "data": {"n": 100, "dim": 3},
              "train": {"steps": 15, "lr": 0.01, "epsilon": 0.05, "eval_every": 5}},
    "bias-sweep": {"task": "token-copy", "data": {"n": 8, "vocab": 5, "seq_len": 4},
                   "model": {"d_model": 8, "heads": 2},
                   "bias_sweep": {"bits": [4, 8], "n": 5, "batch_size": 4}},
    "dtype-search": {"model": {"hidden": [16, 8]}},
    "mem-report": {"task": "token-copy", "data": {"n": 4}},
    "gen-data": {"task": "xor-clusters", "data": {"n": 20, "dim": 3}},
}


def write_cfg(tmp_path, cfg):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return str(p)


@pytest.mark.parametrize("command", list(NUMERIC_CSV))
def test_command_outputs_and_reruns(command, tmp_path):
    cfg = write_cfg(tmp_path, CONFIGS[command])
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main([command, "--config", cfg, "--out", str(out), "--seed", "3"]) == 0
    for name in NUMERIC_CSV[command]:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    resolved = json.loads((outs[0] / "config.resolved.json").read_text())
    assert resolved["seed"] == 3 and resolved["train"]["seed"] == 3
    assert "lr_schedule" in resolved["train"]  # defaults written back
    run = json.loads((outs[0] / "run.json").read_text())
    assert run["command"] == command and len(run["run_id"]) == 40


def test_train_writes_checkpoint_and_summary(tmp_path):
    out = tmp_path / "t"
    assert main(["train", "--config", write_cfg(tmp_path, CONFIGS["train"]), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert 0 <= summary["final_acc"] <= 1
    assert (out / "model.ckpt").read_bytes()[:4] == b"QZM1"
    assert len((out / "train_log.csv").read_text().splitlines()) == 16


def test_train_from_generated_csv(tmp_path):
    gen = tmp_path / "g"
    assert main(["gen-data", "--config", write_cfg(tmp_path, CONFIGS["gen-data"]), "--out", str(gen)]) == 0
    cfg = {"data": {"path": str(gen / "data.csv")}, "train": {"steps": 3, "epsilon": 0.05}}
    assert main(["train", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path / "t")]) == 0


def test_mem_report_rows(tmp_path):
    out = tmp_path / "m"
    assert main(["mem-report", "--config", write_cfg(tmp_path, CONFIGS["mem-report"]), "--out", str(out)]) == 0
    rows = [l.split(",")[0] for l in (out / "mem_report.csv").read_text().splitlines()[1:]]
    assert rows == ["FO-SGD", "MeZO", "FO(8-bit)", "FO(4-bit)", "QuZO(8-bit)", "QuZO(4-bit)"]


def test_exit_codes(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["train", "--config", write_cfg(tmp_path, {"trian": {}})]) == 2
    assert main(["train", "--config", write_cfg(tmp_path, {"train": {"lr": "fast"}})]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("x0,label\n1,oops\n")
    assert main(["train", "--config", write_cfg(tmp_path, {"data": {"path": str(bad)}}),
                 "--out", str(tmp_path / "o")]) == 1
    assert "quzo:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["fly"])


def test_encoder_on_tabular_task_is_config_error(tmp_path):
    cfg = {"model": {"kind": "encoder"}, "train": {"steps": 1}}
    assert main(["train", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2


def test_environment_overrides(tmp_path):
    path = write_cfg(tmp_path, {"train": {"lr": 0.1}})
    cfg = load_config(path, environ={"QUZO_TRAIN__LR": "0.5", "QUZO_TASK": "xor-clusters", "HOME": "/x"})
    assert cfg["train"]["lr"] == 0.5 and cfg["task"] == "xor-clusters"
    cfg = load_config(path, overrides={"train": {"lr": 0.7}}, environ={"QUZO_TRAIN__LR": "0.5"})
    assert cfg["train"]["lr"] == 0.7
    with pytest.raises(ConfigurationError):
        load_config(None, environ={"QUZO_TRAIN__MOMENTUM": "1"})


def test_seed_propagation_and_run_id():
    cfg = load_config(None, {"seed": 5}, environ={})
    assert cfg["train"]["seed"] == 5 and cfg["data"]["seed"] == 5 and cfg["model"]["kind"] == "mlp"
    assert load_config(None, {"task": "token-copy"}, environ={})["model"]["kind"] == "encoder"
    a = load_config(None, {"out": "x", "threads": 4}, environ={})
    b = load_config(None, {"out": "y"}, environ={})
    assert run_id(a, "train") == run_id(b, "train") != run_id(b, "mem-report")


def test_console_script_module(tmp_path):
    r = subprocess.run([sys.executable, "-m", "quzo.cli", "gen-data", "--out", str(tmp_path / "d")],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "d" / "data.csv").exists()


def test_bias_sweep_default_widths_give_six_rows(tmp_path):
    cfg = {"task": "token-copy", "data": {"n": 4, "vocab": 5, "seq_len": 4},
           "model": {"d_model": 8, "heads": 2}, "bias_sweep": {"n": 3, "batch_size": 4}}
    out = tmp_path / "b"
    assert main(["bias-sweep", "--config", write_cfg(tmp_path, cfg), "--out", str(out)]) == 0
    rows = [l.split(",")[:2] for l in (out / "bias_sweep.csv").read_text().splitlines()[1:]]
    assert rows == [[k, b] for b in ("3", "4", "8") for k in ("Q-RGE1", "Q-RGE2")]


def test_gen_data_thousand_rows_seed_seven(tmp_path):
    cfg = write_cfg(tmp_path, {"data": {"n": 1000}})
    for o in ("x", "y"):
        assert main(["gen-data", "--config", cfg, "--seed", "7", "--out", str(tmp_path / o)]) == 0
    a, b = (tmp_path / "x" / "data.csv").read_bytes(), (tmp_path / "y" / "data.csv").read_bytes()
    assert a == b and len(a.splitlines()) == 1001
