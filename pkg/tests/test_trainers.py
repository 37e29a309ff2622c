import dataclasses
import json
import os

import numpy as np
import pytest

from mvlab.attacks import AttackConfig
from mvlab.config import from_dict
from mvlab.data import DistributionConfig, build_feature_bank, sample_dataset, sample_simplified
from mvlab.errors import ConfigurationError, TrainingDivergedError
from mvlab.patchnet import LossSpec, ModelArch, ModelParams, TrackedModel, composite_loss, init_model
from mvlab.trainers import (
    METRICS_HEADER,
    SGD,
    MetricsRecord,
    TrainConfig,
    evaluate,
    lr_at,
    metrics_csv,
    read_metrics_csv,
    run_experiment,
    run_preset,
    train_clean,
    train_student,
    write_run,
)


def toy_set(N=200, mu=0.5, seed=0):
    bank = build_feature_bank(2, 6, 0)
    return sample_simplified(2, mu, N, bank, seed=seed, P=4)


TOY_ARCH = ModelArch(k=2, d=6, P=4, m=8)


def test_zero_epochs_returns_init():
    ds = toy_set()
    params, history = train_clean(TrainConfig(n_clean=0, seed=5), ds, TOY_ARCH)
    assert params.equals(init_model(TOY_ARCH, 5)) and history == []


def test_separable_toy_set_is_fit():
    ds = toy_set()
    cfg = TrainConfig(n_clean=50, lr=0.1, lr_schedule="constant", batch_size=32)
    params, history = train_clean(cfg, ds, TOY_ARCH)
    assert evaluate(params, ds, None).clean_acc == 1.0
    assert len(history) == 50 and history[-1].clean_acc == 1.0


def test_training_is_deterministic():
    ds = toy_set()
    cfg = TrainConfig(n_clean=3, n_adv=2, attack=AttackConfig(steps=2), loss=LossSpec("PGDAT"))
    a, _ = train_clean(cfg, ds, TOY_ARCH)
    b, _ = train_clean(cfg, ds, TOY_ARCH)
    assert a.equals(b)
    sa, _ = train_student(cfg, ds, a)
    sb, _ = train_student(cfg, ds, b)
    assert sa.equals(sb)


def test_zero_adversarial_epochs_keep_teacher():
    ds = toy_set()
    teacher, _ = train_clean(TrainConfig(n_clean=2), ds, TOY_ARCH)
    student, history = train_student(TrainConfig(n_adv=0, init_from_teacher=True, loss=LossSpec("CKTAT")), ds, teacher)
    assert student.equals(teacher) and history == []


def test_pgdat_reaches_full_robust_accuracy_on_margin_data():
    ds = toy_set(mu=0.0)
    teacher, _ = train_clean(TrainConfig(n_clean=30, lr=0.1, lr_schedule="constant", batch_size=32), ds, TOY_ARCH)
    eps = 0.02
    cfg = TrainConfig(
        n_adv=20, lr=0.05, lr_schedule="constant", batch_size=32, loss=LossSpec("PGDAT"),
        attack=AttackConfig(epsilon=eps, steps=5), eval_attack=AttackConfig(epsilon=eps, steps=10),
    )
    student, history = train_student(cfg, ds, teacher)
    assert history[-1].robust_acc == 1.0


def test_cktat_identity_step_zero_loss():
    ds = toy_set()
    teacher, _ = train_clean(TrainConfig(n_clean=2), ds, TOY_ARCH)
    spec = LossSpec("CKTAT", beta=0.0, tau=1.0, teacher=teacher)
    x = ds.X[:16]
    loss = composite_loss(spec, TrackedModel(teacher.copy()), x, x.copy(), ds.labels[:16])
    assert loss.item() == pytest.approx(0.0, abs=1e-14)


def test_evaluate_examples():
    ds = sample_dataset(DistributionConfig(k=2, d=6, P=4, mu=0.0), build_feature_bank(2, 6, 0), 60, 0)
    uniform = ModelParams(np.zeros((3, 6)), np.zeros((2, 3)), np.zeros(2), ModelArch(k=2, d=6, P=4, m=3))
    rec = evaluate(uniform, ds, AttackConfig(epsilon=0.1, steps=2))
    assert rec.clean_train_err == 0.5 and rec.robust_train_err == 0.5
    assert rec.sv_clean_acc is None and rec.sv_robust_acc is None
    assert rec.mv_clean_acc is not None
    model = init_model(ModelArch(k=2, d=6, P=4, m=3), 1)
    rec = evaluate(model, ds, AttackConfig(epsilon=0.0))
    assert rec.robust_acc == rec.clean_acc and rec.robust_train_err == rec.clean_train_err
    assert evaluate(model, ds, None).robust_acc is None
    for v in (rec.clean_acc, rec.robust_acc, rec.clean_train_err, rec.robust_train_err):
        assert 0 <= v <= 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_epoch():
    ds = toy_set()
    with pytest.raises(TrainingDivergedError) as info:
        train_clean(TrainConfig(n_clean=5, lr=1e200, momentum=0.0), ds, TOY_ARCH)
    assert info.value.epoch == 0


def test_config_and_arch_errors():
    ds = toy_set()
    with pytest.raises(ConfigurationError):
        train_clean(TrainConfig(batch_size=0), ds, TOY_ARCH)
    with pytest.raises(ConfigurationError):
        train_clean(TrainConfig(), ds, ModelArch(k=3, d=6, P=4))
    with pytest.raises(ConfigurationError):
        train_student(TrainConfig(loss=LossSpec("CKTAT")), ds, None, TOY_ARCH)
    other = init_model(dataclasses.replace(TOY_ARCH, m=3))
    with pytest.raises(ConfigurationError):
        train_student(TrainConfig(n_adv=1, loss=LossSpec("PGDAT")), ds, other, TOY_ARCH)


def test_sgd_and_schedule():
    opt = SGD(lr=0.1, momentum=0.5)
    p = [np.array([1.0])]
    p = opt.step(p, [np.array([1.0])])
    assert p[0][0] == pytest.approx(0.9)
    p = opt.step(p, [np.array([1.0])])
    assert p[0][0] == pytest.approx(0.9 - 0.1 * 1.5)
    cfg = TrainConfig(lr=1.0)
    assert [lr_at(cfg, e, 8) for e in (0, 3, 4, 5, 6, 7)] == pytest.approx([1, 1, 0.1, 0.1, 0.01, 0.01])
    assert lr_at(TrainConfig(lr=0.3, lr_schedule="constant"), 7, 8) == 0.3


def test_metrics_csv_round_trip():
    recs = [MetricsRecord(epoch=0, train_loss=0.5, clean_acc=1.0), MetricsRecord(epoch=1, sv_clean_acc=None)]
    rows = read_metrics_csv(metrics_csv(recs))
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert float(rows[0]["train_loss"]) == 0.5 and rows[1]["sv_clean_acc"] == ""
    with pytest.raises(ValueError):
        read_metrics_csv("a,b\n")


def tiny_config(**overrides):
    raw = {
        "data": {"k": 2, "d": 6, "P": 4}, "arch": {"m": 6}, "n_train": 40, "n_test": 20,
        "train": {"n_clean": 1, "n_adv": 1, "batch_size": 20, "attack": {"steps": 1}, "eval_attack": {"steps": 1}},
    }
    raw.update(overrides)
    return from_dict(raw)


def test_clean_method_reports_teacher():
    cfg = tiny_config()
    cfg.train.loss = LossSpec("CLEAN")
    res = run_experiment(cfg)
    assert res.model is res.teacher and res.history == res.teacher_history


def test_write_run_layout(tmp_path):
    cfg = tiny_config()
    res = run_experiment(cfg, "r")
    sums = write_run(str(tmp_path / "r"), cfg, res)
    files = set(os.listdir(tmp_path / "r"))
    assert {"config.json", "teacher.ckpt", "student.ckpt", "metrics.csv", "teacher_metrics.csv", "test.json", "probe.json"} <= files
    assert set(sums) == {"teacher.ckpt", "student.ckpt"}
    header = (tmp_path / "r" / "metrics.csv").read_text().split("\n")[0].split(",")
    assert header == METRICS_HEADER
    assert from_dict(json.loads((tmp_path / "r" / "config.json").read_text())).to_dict() == cfg.to_dict()
    with pytest.raises(FileExistsError):
        write_run(str(tmp_path / "r"), cfg, res)


@pytest.mark.parametrize("name,count", [("ablation_terms", 4), ("tau_sweep", 6), ("beta_sweep", 8), ("capacity_study", 6)])
def test_preset_run_counts(tmp_path, name, count):
    cfg = tiny_config(n_train=20, n_test=10)
    summary = run_preset(name, cfg, out_dir=str(tmp_path / name))
    assert len(summary["runs"]) == count
    for run in summary["runs"]:
        rows = read_metrics_csv((tmp_path / name / run["dir"] / "metrics.csv").read_text())
        assert rows
    on_disk = json.loads((tmp_path / name / "summary.json").read_text())
    assert len(on_disk["runs"]) == count


def test_method_comparison_five_seeds(tmp_path):
    cfg = tiny_config(n_train=20, n_test=10)
    summary = run_preset("method_comparison", cfg, seeds=[1, 2, 3, 4, 5], out_dir=str(tmp_path / "mc"))
    assert len(summary["runs"]) == 20
    metric_files = [f for root, _, files in os.walk(tmp_path / "mc") for f in files if f == "metrics.csv"]
    assert len(metric_files) == 20


def test_preset_parallel_matches_serial():
    cfg = tiny_config(n_train=20, n_test=10)
    serial = run_preset("ablation_terms", cfg, seeds=[0, 1])
    parallel = run_preset("ablation_terms", cfg, seeds=[0, 1], jobs=2)
    for a, b in zip(serial["results"], parallel["results"]):
        assert a.name == b.name and a.model.equals(b.model)


def test_preset_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        run_preset("nope", tiny_config())
    cfg = tiny_config(n_train=20, n_test=10)
    run_preset("tau_sweep", cfg, out_dir=str(tmp_path / "t"))
    with pytest.raises(FileExistsError):
        run_preset("tau_sweep", cfg, out_dir=str(tmp_path / "t"))


def test_teacher_shared_within_seed():
    cfg = tiny_config(n_train=20, n_test=10)
    results = run_preset("ablation_terms", cfg)["results"]
    teachers = [r.teacher for r in results]
    assert all(t.equals(teachers[0]) for t in teachers)
    full = next(r for r in results if r.settings["variant"] == "full")
    assert full.settings["tau"] == 5.0 and full.settings["init_from_teacher"]
