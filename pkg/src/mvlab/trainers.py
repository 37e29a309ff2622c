"""Clean-teacher training, adversarial student training, evaluation and presets.

The student loop follows the clean-knowledge-transfer recipe: train a clean
teacher, copy it into the student, then train the student on attacked
inputs under a :class:`~mvlab.patchnet.LossSpec`.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attacks import AttackConfig, attack_batch
from .autodiff import backward
from .data import Dataset, DistributionConfig, build_feature_bank, sample_dataset, sample_simplified
from .errors import ConfigurationError, TrainingDivergedError
from .patchnet import (
    LossSpec,
    ModelArch,
    ModelParams,
    TEACHER_METHODS,
    TrackedModel,
    composite_loss,
    init_model,
)
from .probes import (
    LEARNED_THRESHOLD,
    adversarial_inputs,
    feature_alignment,
    probe_report,
)

log = logging.getLogger(__name__)

METRICS_HEADER = [
    "epoch", "train_loss", "clean_acc", "robust_acc", "clean_train_err", "robust_train_err",
    "sv_clean_acc", "mv_clean_acc", "sv_robust_acc", "mv_robust_acc", "features_learned", "wall_time_ms",
]
PRESETS = ("ablation_terms", "tau_sweep", "beta_sweep", "capacity_study", "method_comparison")

# stream tags for derived generators
_SHUFFLE, _ATTACK, _EVAL = 1, 2, 3
_TEACHER_STAGE, _STUDENT_STAGE, _WARMUP_STAGE = 0, 1, 2


@dataclass
class TrainConfig:
    n_clean: int = 30
    n_adv: int = 30
    n_warmup: int = 0
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_schedule: str = "step"  # "step" | "constant"
    decay_at: tuple = (0.5, 0.75)  # fractions of the phase's epochs
    decay_factor: float = 0.1
    seed: int = 0
    init_from_teacher: bool = True
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval_attack: AttackConfig = field(default_factory=AttackConfig)
    loss: LossSpec = field(default_factory=LossSpec)
    eval_every: int = 1  # robust metrics every n epochs (and always on the last)

    def validate(self) -> None:
        for name in ("n_clean", "n_adv", "n_warmup"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"train.{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("train.batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError("train.lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("train.momentum must lie in [0, 1)")
        if self.lr_schedule not in ("step", "constant"):
            raise ConfigurationError(f"train.lr_schedule must be 'step' or 'constant', got {self.lr_schedule!r}")
        if self.eval_every < 1:
            raise ConfigurationError("train.eval_every must be >= 1")


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: Optional[float] = None
    clean_acc: Optional[float] = None
    robust_acc: Optional[float] = None
    clean_train_err: Optional[float] = None
    robust_train_err: Optional[float] = None
    sv_clean_acc: Optional[float] = None
    mv_clean_acc: Optional[float] = None
    sv_robust_acc: Optional[float] = None
    mv_robust_acc: Optional[float] = None
    features_learned: Optional[int] = None
    wall_time_ms: float = 0.0
    per_feature_max: Optional[list] = None  # not part of the CSV

    def row(self) -> list:
        out = []
        for name in METRICS_HEADER:
            v = getattr(self, name)
            out.append("" if v is None else (repr(float(v)) if isinstance(v, float) else str(v)))
        return out

    def to_json(self) -> dict:
        return {name: getattr(self, name) for name in METRICS_HEADER}


def metrics_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def read_metrics_csv(text: str) -> list:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != METRICS_HEADER:
        raise ValueError("metrics CSV header mismatch")
    return [dict(zip(METRICS_HEADER, r)) for r in rows[1:]]


# -- evaluation ----------------------------------------------------------


def _subset_acc(correct: np.ndarray, mask: np.ndarray) -> Optional[float]:
    return float(correct[mask].mean()) if mask.any() else None


def evaluate(model: ModelParams, dataset: Dataset, attack_cfg: Optional[AttackConfig], seed: int = 0, threshold: float = LEARNED_THRESHOLD, epoch: int = -1) -> MetricsRecord:
    """Clean/robust accuracy and training errors, split by view.

    ``attack_cfg=None`` skips the robust half (fields left ``None``).
    Subsets that are empty (e.g. no single-view samples) report ``None``.
    """
    t0 = time.perf_counter()
    y = dataset.labels
    sv = dataset.single_view_mask()
    mv = ~sv

    def scores(X):
        probs = []
        preds = []
        for s in range(0, len(X), 1000):
            logits = model(X[s : s + 1000]).data
            z = logits - logits.max(axis=-1, keepdims=True)
            p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
            probs.append(p[np.arange(len(p)), y[s : s + 1000]])
            preds.append(logits.argmax(axis=-1))
        return np.concatenate(probs), np.concatenate(preds) == y

    p_clean, c_clean = scores(dataset.X)
    rec = MetricsRecord(
        epoch=epoch,
        clean_acc=float(c_clean.mean()),
        clean_train_err=float(1.0 - p_clean.mean()),
        sv_clean_acc=_subset_acc(c_clean, sv),
        mv_clean_acc=_subset_acc(c_clean, mv),
    )
    if attack_cfg is not None:
        if attack_cfg.epsilon == 0:
            p_adv, c_adv = p_clean, c_clean
        else:
            p_adv, c_adv = scores(adversarial_inputs(model, dataset, attack_cfg, seed))
        rec.robust_acc = float(c_adv.mean())
        rec.robust_train_err = float(1.0 - p_adv.mean())
        rec.sv_robust_acc = _subset_acc(c_adv, sv)
        rec.mv_robust_acc = _subset_acc(c_adv, mv)
    align = feature_alignment(model, dataset.bank, threshold)
    rec.features_learned = len(align.learned_set)
    rec.per_feature_max = align.per_feature_max.tolist()
    rec.wall_time_ms = (time.perf_counter() - t0) * 1000.0
    return rec


# -- optimization ---------------------------------------------------------


class SGD:
    """Heavy-ball SGD: v <- momentum * v + g (+ wd * p); p <- p - lr * v."""

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = None

    def step(self, params: list, grads: list) -> list:
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            if self.weight_decay:
                g = g + self.weight_decay * p
            self.velocity[i] = self.momentum * self.velocity[i] + g
            out.append(p - self.lr * self.velocity[i])
        return out


def lr_at(cfg: TrainConfig, epoch: int, n_epochs: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    passed = sum(epoch >= int(frac * n_epochs) for frac in cfg.decay_at)
    return cfg.lr * cfg.decay_factor**passed


def _derived_seed(*key) -> int:
    return int(np.random.default_rng([int(k) for k in key]).integers(2**31))


def _batches(N: int, batch_size: int, seed: int, stage: int, epoch: int):
    perm = np.random.default_rng([seed, _SHUFFLE, stage, epoch]).permutation(N)
    for s in range(0, N, batch_size):
        yield perm[s : s + batch_size]


def _sgd_epoch(params: ModelParams, opt: SGD, dataset: Dataset, cfg: TrainConfig, stage: int, epoch: int, loss_fn) -> tuple:
    losses = []
    for idx in _batches(dataset.N, cfg.batch_size, cfg.seed, stage, epoch):
        tracked = TrackedModel(params)
        loss = loss_fn(tracked, params, idx)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(epoch)
        grads = backward(loss, tracked.leaves)
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDivergedError(epoch)
        hidden, head, bias = opt.step([params.hidden, params.head, params.bias], grads)
        params = ModelParams(hidden, head, bias, params.arch)
        losses.append(value * len(idx))
    return params, math.fsum(losses) / dataset.N


def _epoch_record(params, dataset, cfg, epoch, n_epochs, train_loss, t0, stage) -> MetricsRecord:
    robust_now = (epoch + 1) % cfg.eval_every == 0 or epoch == n_epochs - 1
    rec = evaluate(
        params, dataset, cfg.eval_attack if robust_now else None,
        seed=_derived_seed(cfg.seed, _EVAL, stage, epoch),
        epoch=epoch,
    )
    rec.train_loss = train_loss
    rec.wall_time_ms = (time.perf_counter() - t0) * 1000.0
    return rec


def _clean_ce(tracked, params, idx, dataset):
    return composite_loss(LossSpec(method="CLEAN"), tracked, dataset.X[idx], None, dataset.labels[idx])


def train_clean(cfg: TrainConfig, dataset: Dataset, arch: ModelArch, init: Optional[ModelParams] = None) -> tuple:
    """Minimize clean cross-entropy for ``cfg.n_clean`` epochs.

    Returns ``(teacher, [MetricsRecord per epoch])``.
    """
    cfg.validate()
    _check_arch(arch, dataset)
    params = init.copy() if init is not None else init_model(arch, cfg.seed)
    opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    history = []
    for epoch in range(cfg.n_clean):
        t0 = time.perf_counter()
        opt.lr = lr_at(cfg, epoch, cfg.n_clean)
        params, train_loss = _sgd_epoch(
            params, opt, dataset, cfg, _TEACHER_STAGE, epoch,
            lambda tr, p, idx: _clean_ce(tr, p, idx, dataset),
        )
        history.append(_epoch_record(params, dataset, cfg, epoch, cfg.n_clean, train_loss, t0, _TEACHER_STAGE))
        log.debug("clean epoch %d loss %.4f acc %.3f", epoch, train_loss, history[-1].clean_acc)
    return params, history


def _check_arch(arch: ModelArch, dataset: Dataset) -> None:
    P, d = dataset.X.shape[1:]
    if (arch.k, arch.d, arch.P) != (dataset.k, d, P):
        raise ConfigurationError(
            f"arch (k={arch.k}, d={arch.d}, P={arch.P}) does not match data (k={dataset.k}, d={d}, P={P})"
        )


def train_student(cfg: TrainConfig, dataset: Dataset, teacher: Optional[ModelParams], arch: Optional[ModelArch] = None) -> tuple:
    """Adversarially train a student under ``cfg.loss``.

    With ``init_from_teacher`` the student starts as an exact copy of the
    teacher.  Returns ``(student, [MetricsRecord per epoch])``.
    """
    cfg.validate()
    spec = dataclasses.replace(cfg.loss)
    needs_teacher = cfg.init_from_teacher or spec.method in TEACHER_METHODS
    if needs_teacher and teacher is None:
        raise ConfigurationError(f"method {spec.method} with init_from_teacher={cfg.init_from_teacher} needs a teacher")
    arch = arch or (teacher.arch if teacher is not None else None)
    if arch is None:
        raise ConfigurationError("student architecture unknown: pass arch or a teacher")
    _check_arch(arch, dataset)
    if teacher is not None and needs_teacher and teacher.arch != arch and cfg.init_from_teacher:
        raise ConfigurationError(f"teacher arch {teacher.arch} does not match student arch {arch}")
    if spec.method in TEACHER_METHODS:
        spec.teacher = teacher
    spec.validate()

    params = teacher.copy() if cfg.init_from_teacher else init_model(arch, cfg.seed)
    teacher_logits = teacher.logits(dataset.X) if spec.method in TEACHER_METHODS else None
    opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    history = []

    # optional clean warm-up of the student at the base learning rate
    for epoch in range(cfg.n_warmup):
        params, _ = _sgd_epoch(
            params, opt, dataset, cfg, _WARMUP_STAGE, epoch,
            lambda tr, p, idx: _clean_ce(tr, p, idx, dataset),
        )

    opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    for epoch in range(cfg.n_adv):
        t0 = time.perf_counter()
        opt.lr = lr_at(cfg, epoch, cfg.n_adv)
        attack_seed = _derived_seed(cfg.seed, _ATTACK, epoch)

        def loss_fn(tracked, current, idx, attack_seed=attack_seed):
            X, y = dataset.X[idx], dataset.labels[idx]
            x_adv = None
            if spec.adversarial:
                x_adv = attack_batch(current, cfg.attack, X, y, seed=attack_seed, sample_ids=idx)
            t_logits = teacher_logits[idx] if teacher_logits is not None else None
            return composite_loss(spec, tracked, X, x_adv, y, teacher_logits=t_logits)

        params, train_loss = _sgd_epoch(params, opt, dataset, cfg, _STUDENT_STAGE, epoch, loss_fn)
        history.append(_epoch_record(params, dataset, cfg, epoch, cfg.n_adv, train_loss, t0, _STUDENT_STAGE))
        log.debug("%s epoch %d loss %.4f acc %.3f", spec.method, epoch, train_loss, history[-1].clean_acc)
    return params, history


# -- experiments ------------------------------------------------------------


@dataclass
class RunResult:
    name: str
    method: str
    seed: int
    model: ModelParams
    teacher: Optional[ModelParams]
    history: list
    test: MetricsRecord
    probe: dict
    teacher_history: list = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {"name": self.name, "method": self.method, "seed": self.seed, **self.settings}
        out.update({f"test_{k}": v for k, v in self.test.to_json().items() if k not in ("epoch", "train_loss")})
        out["per_class_coverage_mean"] = float(np.mean(self.probe["per_class_coverage"]))
        return out


def with_seed(cfg, seed: int):
    """Copy of an experiment config with both data and training seeds set to ``seed``."""
    return dataclasses.replace(
        cfg,
        data=dataclasses.replace(cfg.data, seed=seed),
        train=dataclasses.replace(cfg.train, seed=seed),
    )


def sample_for(data: DistributionConfig, bank, N: int, stream: int) -> Dataset:
    if data.mode == "simplified":
        return sample_simplified(data.k, data.mu, N, bank, data.seed, P=data.P, stream=stream)
    return sample_dataset(data, bank, N, data.seed, stream=stream)


def build_data(cfg) -> tuple:
    """(bank, train set, test set) for an experiment config.

    The training set is loaded from ``cfg.dataset_path`` when given.  The
    test set is an independent draw (stream 1); with ``n_test == 0`` the
    training set doubles as the evaluation set.
    """
    if cfg.dataset_path:
        train = Dataset.load(cfg.dataset_path)
        bank = train.bank
        data = dataclasses.replace(train.config, seed=int(train.meta.get("seed", train.config.seed)))
    else:
        data = cfg.data.resolved()
        bank = build_feature_bank(data.k, data.d, data.seed)
        train = sample_for(data, bank, cfg.n_train, stream=0)
    test = sample_for(data, bank, cfg.n_test, stream=1) if cfg.n_test > 0 else train
    return bank, train, test


def run_experiment(cfg, name: str = "run", data=None, teacher=None, teacher_history=None, settings=None) -> RunResult:
    """Train (teacher and) model for one config and evaluate it on held-out data.

    ``teacher`` (with its ``teacher_history``) may be supplied to reuse one
    clean model across runs.  For method CLEAN the teacher itself is the
    reported model.
    """
    bank, train, test = data if data is not None else build_data(cfg)
    tc = cfg.train
    method = tc.loss.method
    arch = cfg.arch_for()
    if teacher is None and getattr(cfg, "teacher_path", None):
        teacher = ModelParams.load(cfg.teacher_path)
    teacher_history = list(teacher_history or [])
    needs_teacher = method == "CLEAN" or method in TEACHER_METHODS or tc.init_from_teacher
    if teacher is None and needs_teacher:
        if tc.n_clean == 0 and method != "CLEAN":
            raise ConfigurationError(f"method {method} needs a teacher but train.n_clean is 0")
        teacher, teacher_history = train_clean(tc, train, arch)
    if method == "CLEAN":
        model, history = teacher, teacher_history
    else:
        model, history = train_student(tc, train, teacher, arch)
    test_rec = evaluate(model, test, tc.eval_attack, seed=_derived_seed(tc.seed, _EVAL, 99))
    probe = probe_report(model, bank, test, cfg.probe_threshold)
    return RunResult(name, method, tc.seed, model, teacher, history, test_rec, probe, teacher_history, dict(settings or {}))


def _variants(name: str, base) -> list:
    """(run name, config, settings) triples for a preset on one seed."""
    t = base.train

    def variant(label, **train_changes):
        loss_changes = train_changes.pop("loss", {})
        arch_changes = train_changes.pop("arch", {})
        loss = dataclasses.replace(t.loss, **loss_changes)
        train = dataclasses.replace(t, loss=loss, **train_changes)
        arch = dataclasses.replace(base.arch, **arch_changes)
        return label, dataclasses.replace(base, train=train, arch=arch)

    cktat = {"method": "CKTAT"}
    if name == "ablation_terms":
        runs = [
            variant("full", loss=cktat, init_from_teacher=True),
            variant("no_init", loss=cktat, init_from_teacher=False),
            variant("no_kl_teacher", loss={"method": "CKTAT_NO_KL_TEACHER"}, init_from_teacher=True),
            variant("no_kl_self", loss={"method": "CKTAT_NO_KL_SELF"}, init_from_teacher=True),
        ]
    elif name == "tau_sweep":
        runs = [variant(f"tau_{tau}", loss={**cktat, "tau": float(tau)}, init_from_teacher=True) for tau in range(1, 7)]
    elif name == "beta_sweep":
        runs = [variant(f"beta_{beta}", loss={**cktat, "beta": float(beta)}, init_from_teacher=True) for beta in range(0, 8)]
    elif name == "capacity_study":
        runs = []
        for m in (16, 64, 256):
            runs.append(variant(f"m{m}_pgdat", loss={"method": "PGDAT"}, init_from_teacher=False, arch={"m": m}))
            runs.append(variant(f"m{m}_clean_teacher", loss={**cktat, "tau": 1.0}, init_from_teacher=False, arch={"m": m}))
    elif name == "method_comparison":
        trades_attack = dataclasses.replace(t.attack, loss_target="kl")
        runs = [
            variant("clean", loss={"method": "CLEAN"}, init_from_teacher=False),
            variant("pgdat", loss={"method": "PGDAT"}, init_from_teacher=False),
            variant("trades", loss={"method": "TRADES"}, init_from_teacher=False, attack=trades_attack),
            variant("cktat", loss=cktat, init_from_teacher=True),
        ]
    else:
        raise ConfigurationError(f"unknown preset {name!r}; choose one of {PRESETS}")
    return runs


def _preset_seed(name: str, base_cfg, seed: int, tag_seed: bool, out_dir, force: bool) -> list:
    seeded = with_seed(base_cfg, seed)
    data = build_data(seeded)
    teachers = {}
    results = []
    for label, cfg in _variants(name, seeded):
        arch = cfg.arch_for()
        key = (arch.m, arch.activation)
        if key not in teachers:
            teachers[key] = train_clean(cfg.train, data[1], arch)
        teacher, teacher_history = teachers[key]
        run_name = f"{label}_seed{seed}" if tag_seed else label
        settings = {
            "preset": name, "variant": label, "tau": cfg.train.loss.tau, "beta": cfg.train.loss.beta,
            "m": arch.m, "init_from_teacher": cfg.train.init_from_teacher,
        }
        res = run_experiment(cfg, run_name, data=data, teacher=teacher, teacher_history=teacher_history, settings=settings)
        if out_dir is not None:
            write_run(os.path.join(out_dir, run_name), cfg, res, force=force)
        results.append(res)
    return results


def run_preset(name: str, base_cfg, seeds=None, out_dir=None, force: bool = False, jobs: int = 1) -> dict:
    """Run every variant of a preset for each seed.

    Clean teachers are trained once per (seed, width) and shared across
    variants.  When ``out_dir`` is given each run gets ``<out_dir>/<run>/``
    (see :func:`write_run`) and ``summary.json`` lists them all.  With
    ``jobs > 1`` seeds run in separate processes; results are identical to
    a serial run.  Returns the summary dict, with the in-memory
    :class:`RunResult` objects under ``"results"``.
    """
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose one of {PRESETS}")
    seeds = list(seeds) if seeds is not None else list(base_cfg.seeds or [base_cfg.train.seed])
    tag_seed = len(seeds) > 1 or name == "method_comparison"
    if out_dir is not None:
        if os.path.exists(os.path.join(out_dir, "summary.json")) and not force:
            raise FileExistsError(f"{out_dir} already holds a preset; pass force to overwrite")
        os.makedirs(out_dir, exist_ok=True)
    args = [(name, base_cfg, seed, tag_seed, out_dir, force) for seed in seeds]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(_preset_seed, *zip(*args)))
    else:
        per_seed = [_preset_seed(*a) for a in args]
    results = [r for batch in per_seed for r in batch]
    summary = {"preset": name, "seeds": seeds, "runs": [dict(r.summary(), dir=r.name) for r in results]}
    if out_dir is not None:
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
    summary["results"] = results
    return summary


def write_run(run_dir: str, cfg, res: RunResult, force: bool = False) -> dict:
    """Write ``config.json, teacher.ckpt, student.ckpt, metrics.csv, probe.json``.

    ``metrics.csv`` holds the reported model's per-epoch history (the
    teacher's for CLEAN); a student run also gets ``teacher_metrics.csv``.
    ``test.json`` has the held-out evaluation.  Returns checkpoint checksums.
    """
    if os.path.exists(os.path.join(run_dir, "metrics.csv")) and not force:
        raise FileExistsError(f"{run_dir} already holds a run; pass force to overwrite")
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    sums = {}
    if res.teacher is not None:
        sums["teacher.ckpt"] = res.teacher.save(os.path.join(run_dir, "teacher.ckpt"))
    if res.method != "CLEAN":
        sums["student.ckpt"] = res.model.save(os.path.join(run_dir, "student.ckpt"))
        if res.teacher_history:
            with open(os.path.join(run_dir, "teacher_metrics.csv"), "w") as fh:
                fh.write(metrics_csv(res.teacher_history))
    with open(os.path.join(run_dir, "metrics.csv"), "w") as fh:
        fh.write(metrics_csv(res.history))
    with open(os.path.join(run_dir, "test.json"), "w") as fh:
        json.dump(res.test.to_json(), fh, indent=2, sort_keys=True)
    with open(os.path.join(run_dir, "probe.json"), "w") as fh:
        json.dump(res.probe, fh, indent=2, sort_keys=True)
    return sums
