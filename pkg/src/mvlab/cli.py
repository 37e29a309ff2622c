"""Command-line entry point: ``mvlab <command> [options] [--section.key value ...]``.

Exit codes: 0 success, 2 validation error, 3 runtime or training error,
4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import time

from . import error_model as em
from .config import ExperimentConfig, apply_overrides, from_dict
from .data import Dataset
from .errors import (
    AttackFailureError,
    ConfigurationError,
    FormatError,
    InvalidParameterError,
    LabError,
    TrainingDivergedError,
)
from .gradcheck import run_gradcheck
from .patchnet import ModelParams
from .probes import learning_order, probe_report
from .trainers import PRESETS, build_data, evaluate, run_experiment, run_preset, write_run

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("mvlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{args.config}: invalid JSON ({exc})") from None
    raw = apply_overrides(raw, args.overrides)
    return from_dict(raw)


def _split_overrides(extra: list) -> list:
    """``--a.b 1 --c.d=x`` -> ``[("a.b", "1"), ("c.d", "x")]``; top-level keys work too."""
    out, i = [], 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or len(token) == 2:
            raise UsageError(f"unrecognized argument {token!r}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"{token} needs a value")
            value = extra[i + 1]
            i += 2
        out.append((key, value))
    return out


def _prepare_run_dir(path: str, force: bool) -> None:
    if os.path.exists(path) and os.listdir(path):
        if not force:
            raise FileExistsError(f"{path} already exists; pass --force to overwrite")
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = args.out or os.path.join(cfg.run_dir, "data.mvds")
    if os.path.exists(out) and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    _, train, _ = build_data(dataclasses.replace(cfg, n_test=0, dataset_path=None))
    digest = train.save(out)
    print(f"{digest}  {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    run_dir = cfg.run_dir
    _prepare_run_dir(run_dir, args.force)
    t0 = time.perf_counter()
    res = run_experiment(cfg, cfg.run_id)
    sums = write_run(run_dir, cfg, res, force=True)
    if cfg.probes.enabled and cfg.probes.learning_order and res.history:
        order = learning_order([r.per_feature_max for r in res.history], cfg.probes.threshold)
        with open(os.path.join(run_dir, "learning_order.json"), "w") as fh:
            json.dump({f"{j},{l}": e for (j, l), e in order.items()}, fh, indent=2, sort_keys=True)
    summary = {"run_dir": run_dir, "method": res.method, "wall_time_s": time.perf_counter() - t0,
               "checksums": sums, "test": res.test.to_json()}
    _emit(summary)
    return EXIT_OK


def _model_and_data(args):
    cfg = _load_config(args)
    model = ModelParams.load(args.checkpoint)
    if args.dataset:
        data = Dataset.load(args.dataset)
        bank = data.bank
    else:
        bank, _, data = build_data(cfg)
    if model.arch.d != bank.d or model.arch.k != bank.k:
        raise ConfigurationError(f"checkpoint arch {model.arch} does not match data (k={bank.k}, d={bank.d})")
    return cfg, model, bank, data


def cmd_eval(args) -> int:
    cfg, model, _, data = _model_and_data(args)
    attack = cfg.train.eval_attack
    if args.epsilon is not None:
        attack = attack.with_epsilon(args.epsilon)
    _emit(evaluate(model, data, attack, seed=args.seed).to_json())
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg, model, bank, data = _model_and_data(args)
    report = probe_report(model, bank, data if cfg.probes.single_view else None, cfg.probes.threshold)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    _emit({k: report[k] for k in ("learned_set", "per_class_coverage", "sv_accuracy_by_learned_status")})
    return EXIT_OK


def cmd_error_model(args) -> int:
    p = em.ErrorModelParams(mu=args.mu, k1=args.k1, k2=args.k2, theta=args.theta, s_mix=args.smix)
    if args.sweep:
        rows = em.sweep(p, args.sweep, args.lo, args.hi, args.steps)
        text = em.sweep_csv(rows)
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(text)
            print(f"{len(rows)} rows -> {args.out}")
        else:
            sys.stdout.write(text)
        return EXIT_OK
    r = em.report(p)
    width = 16
    for name in ("a", "b", "c", "r_robust_1", "r_robust_2", "r_clean_1", "r_clean_2",
                 "delta_robust", "delta_clean", "incentive_gap"):
        print(f"{name:<{width}}{getattr(r, name):+.10f}")
    print(f"{'verdict':<{width}}{r.verdict}")
    return EXIT_OK


def cmd_preset(args) -> int:
    cfg = _load_config(args)
    out_dir = os.path.join(cfg.output_dir, args.name if cfg.run_id == "run" else cfg.run_id)
    if os.path.exists(os.path.join(out_dir, "summary.json")) and not args.force:
        raise FileExistsError(f"{out_dir} already holds a preset; pass --force to overwrite")
    if args.force and os.path.exists(out_dir):
        shutil.rmtree(out_dir)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    summary = run_preset(args.name, cfg, seeds=seeds, out_dir=out_dir, force=args.force, jobs=args.jobs)
    print(f"{len(summary['runs'])} runs -> {out_dir}")
    for run in summary["runs"]:
        print(f"  {run['name']:<28} clean_acc={run['test_clean_acc']:.4f} robust_acc={run['test_robust_acc']:.4f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = run_gradcheck(args.trials, args.seed)
    worst = {}
    for r in results:
        worst[r.variant] = max(worst.get(r.variant, 0.0), r.rel_error)
    ok = True
    for name, err in worst.items():
        status = "ok" if err <= args.tol else "FAIL"
        ok &= err <= args.tol
        print(f"{name:<24} max_rel_err={err:.3e} {status}")
    if not ok:
        print(f"gradient check failed (tolerance {args.tol:g})", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        return p

    p = with_config(sub.add_parser("gen-data", help="sample a dataset and write it as MVDS"))
    p.add_argument("--out", help="output path (default <output_dir>/<run_id>/data.mvds)")
    p.set_defaults(func=cmd_gen_data)

    p = with_config(sub.add_parser("train", help="train teacher and student, write the run directory"))
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "clean and robust metrics of a checkpoint"),
                                 ("probe", cmd_probe, "feature-alignment report of a checkpoint")):
        p = with_config(sub.add_parser(name, help=helptext))
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", help="MVDS file (default: the config's held-out set)")
        p.add_argument("--seed", type=int, default=0)
        if name == "eval":
            p.add_argument("--epsilon", type=float)
        else:
            p.add_argument("--out", help="write the full report JSON here")
        p.set_defaults(func=func)

    p = sub.add_parser("error-model", help="closed-form robust/clean error accounting")
    p.add_argument("--mu", type=float, default=0.4)
    p.add_argument("--k1", type=float, default=0.3)
    p.add_argument("--k2", type=float, default=0.8)
    p.add_argument("--theta", type=float, default=1.0)
    p.add_argument("--smix", type=float, default=3.0)
    p.add_argument("--sweep", choices=em.SWEEPABLE, help="parameter to sweep")
    p.add_argument("--lo", type=float, default=0.0)
    p.add_argument("--hi", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=11)
    p.add_argument("--out", help="CSV path for sweep output (default stdout)")
    p.set_defaults(func=cmd_error_model)

    p = with_config(sub.add_parser("preset", help="run a named experiment family"))
    p.add_argument("name", choices=PRESETS)
    p.add_argument("--seeds", help="comma-separated seeds (default: config seeds or train.seed)")
    p.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
    p.set_defaults(func=cmd_preset)

    p = sub.add_parser("grad-check", help="backward pass vs central finite differences")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        args.overrides = _split_overrides(extra)
        if args.overrides and not hasattr(args, "config"):
            raise UsageError(f"{args.command} takes no config overrides")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except (UsageError, ConfigurationError, InvalidParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDivergedError, AttackFailureError, LabError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
