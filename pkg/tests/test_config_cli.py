import json
import os
import time

import pytest

from mvlab.cli import main
from mvlab.config import apply_overrides, from_dict, parse_config
from mvlab.data import Dataset
from mvlab.errors import ConfigurationError
from mvlab.patchnet import ModelParams

SMALL = {
    "data": {"k": 2, "d": 6, "P": 4}, "arch": {"m": 6}, "n_train": 40, "n_test": 20,
    "train": {"n_clean": 2, "n_adv": 1, "batch_size": 20, "attack": {"steps": 2}, "eval_attack": {"steps": 2}},
}


def write_config(tmp_path, raw=SMALL, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


def test_minimal_config_defaults(out_dir):
    cfg = from_dict({"data": {"k": 5, "d": 30}})
    assert cfg.data.P == 25 and cfg.data.gamma == pytest.approx(5**-1.5)
    assert (cfg.arch.k, cfg.arch.d, cfg.arch.P) == (5, 30, 25)
    assert cfg.output_dir == str(out_dir)
    assert cfg.train.loss.method == "CKTAT" and cfg.train.attack.epsilon == 0.1


@pytest.mark.parametrize("raw,fragment", [
    ({"train": {"attack": {"epsilonn": 0.1}}}, "train.attack.epsilonn"),
    ({"epsilonn": 0.1}, "epsilonn"),
    ({"arch": {"k": 4}}, "arch.k=4 disagrees with data.k=5"),
    ({"train": {"loss": {"method": "CKTAT"}, "n_clean": 0}}, "needs a teacher"),
    ({"train": {"n_adv": -1}}, "train.n_adv"),
    ({"train": {"lr": "fast"}}, "train.lr"),
    ({"seeds": [1, -2]}, "seeds"),
    ({"data": {"seed": -1}}, "data.seed"),
    ({"probes": {"threshold": 0}}, "probes.threshold"),
    ({"n_train": 0}, "n_train"),
    ({"train": []}, "train"),
])
def test_config_errors_name_the_field(raw, fragment):
    with pytest.raises(ConfigurationError, match=fragment):
        from_dict(raw)


def test_round_trip_fixed_point(tmp_path, out_dir):
    cfg = parse_config(write_config(tmp_path))
    again = from_dict(json.loads(cfg.to_json()))
    assert again.to_dict() == cfg.to_dict()
    assert from_dict(again.to_dict()).to_json() == cfg.to_json()


def test_parse_config_io_errors(tmp_path):
    with pytest.raises(OSError):
        parse_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigurationError):
        parse_config(bad)


def test_overrides():
    raw = apply_overrides({"train": {"lr": 0.1}}, [("train.loss.tau", "2"), ("run_id", "x"), ("train.attack.random_start", "false")])
    assert raw == {"train": {"lr": 0.1, "loss": {"tau": 2}, "attack": {"random_start": False}}, "run_id": "x"}
    with pytest.raises(ConfigurationError):
        apply_overrides({"n_train": 5}, [("n_train.x", "1")])


# -- command line -------------------------------------------------------------


def test_error_model_command(capsys):
    t0 = time.perf_counter()
    assert main(["error-model", "--mu", "0.4", "--k1", "0.3", "--k2", "0.8", "--theta", "1", "--smix", "3"]) == 0
    assert time.perf_counter() - t0 < 1.0
    out = dict(line.split(None, 1) for line in capsys.readouterr().out.strip().split("\n"))
    assert out["verdict"] == "no incentive"
    assert float(out["incentive_gap"]) > 0
    assert main(["error-model", "--mu", "1"]) == 0
    out = dict(line.split(None, 1) for line in capsys.readouterr().out.strip().split("\n"))
    assert out["verdict"] == "learns feature" and float(out["incentive_gap"]) < 0


def test_error_model_sweep_and_range_errors(tmp_path, capsys):
    csv_path = tmp_path / "s.csv"
    assert main(["error-model", "--sweep", "k2", "--steps", "5", "--out", str(csv_path)]) == 0
    assert len(csv_path.read_text().strip().split("\n")) == 6
    assert main(["error-model", "--mu", "1.5"]) == 2
    assert main(["error-model", "--sweep", "mu", "--lo", "0", "--hi", "3"]) == 2
    assert main(["error-model", "--train.lr", "1"]) == 2


def test_train_eval_probe_flow(tmp_path, out_dir, capsys):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", cfg, "--run_id", "a"]) == 0
    summary = json.loads(capsys.readouterr().out)
    run_dir = out_dir / "a"
    assert summary["run_dir"] == str(run_dir)
    assert {"teacher.ckpt", "student.ckpt", "metrics.csv", "probe.json", "config.json"} <= set(os.listdir(run_dir))
    # refuses to overwrite, then --force works
    assert main(["train", "--config", cfg, "--run_id", "a"]) == 4
    assert main(["train", "--config", cfg, "--run_id", "a", "--force"]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", cfg, "--checkpoint", str(run_dir / "student.ckpt")]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert 0 <= rec["clean_acc"] <= 1 and rec["robust_acc"] is not None
    assert main(["eval", "--config", cfg, "--checkpoint", str(run_dir / "student.ckpt"), "--epsilon", "0"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["robust_acc"] == rec["clean_acc"]
    report = tmp_path / "probe.json"
    assert main(["probe", "--config", cfg, "--checkpoint", str(run_dir / "teacher.ckpt"), "--out", str(report)]) == 0
    full = json.loads(report.read_text())
    assert {"cosines", "learned_set", "per_class_coverage", "mixture_mass", "sv_accuracy_by_learned_status"} <= set(full)


def test_clean_method_writes_only_teacher_artifacts(tmp_path, out_dir, capsys):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", cfg, "--train.loss.method", "CLEAN", "--run_id", "c"]) == 0
    files = set(os.listdir(out_dir / "c"))
    assert "teacher.ckpt" in files and "student.ckpt" not in files


def test_cli_validation_exit_codes(tmp_path, out_dir, capsys):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", cfg, "--train.n_clean", "0"]) == 2
    assert main(["train", "--config", cfg, "--train.attack.epsilonn", "3"]) == 2
    assert main(["train", "--config", cfg, "stray"]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 4
    assert main(["nonsense"]) == 2
    err = capsys.readouterr().err
    assert "epsilonn" in err


def test_gen_data_and_dataset_reuse(tmp_path, out_dir, capsys):
    cfg = write_config(tmp_path)
    path = tmp_path / "d.mvds"
    assert main(["gen-data", "--config", cfg, "--out", str(path)]) == 0
    digest = capsys.readouterr().out.split()[0]
    assert Dataset.load(path).checksum() == digest
    assert main(["gen-data", "--config", cfg, "--out", str(path)]) == 4
    assert main(["gen-data", "--config", cfg, "--out", str(path), "--force"]) == 0
    assert capsys.readouterr().out.split()[0] == digest
    assert main(["gen-data", "--config", cfg, "--n_train", "0", "--out", str(tmp_path / "e.mvds")]) == 2
    assert main(["train", "--config", cfg, "--dataset_path", str(path), "--run_id", "from_file"]) == 0
    teacher = ModelParams.load(out_dir / "from_file" / "teacher.ckpt")
    assert main(["train", "--config", cfg, "--run_id", "from_teacher", "--train.n_clean", "0",
                 "--teacher_path", str(out_dir / "from_file" / "teacher.ckpt")]) == 0
    assert ModelParams.load(out_dir / "from_teacher" / "teacher.ckpt").equals(teacher)


def test_preset_command(tmp_path, out_dir, capsys):
    cfg = write_config(tmp_path)
    assert main(["preset", "tau_sweep", "--config", cfg, "--train.n_adv", "1"]) == 0
    dirs = [d for d in os.listdir(out_dir / "tau_sweep") if os.path.isdir(out_dir / "tau_sweep" / d)]
    assert len(dirs) == 6 and (out_dir / "tau_sweep" / "summary.json").exists()
    assert main(["preset", "tau_sweep", "--config", cfg]) == 4
    assert main(["preset", "bogus", "--config", cfg]) == 2


def test_grad_check_command(capsys):
    assert main(["grad-check", "--trials", "2"]) == 0
    lines = capsys.readouterr().out.strip().split("\n")
    assert len(lines) == 7 and all(line.endswith("ok") for line in lines)
    assert main(["grad-check", "--trials", "2", "--tol", "1e-30"]) == 3
