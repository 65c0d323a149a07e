"""Command-line entry point: ``psnet {gen-data,train,eval,gradcheck}``.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 gradient
check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import config as run_config
from .data import DataError, SpecError, TaskSpec, generate, load_jsonl, load_splits, write_splits
from .evaluation import MetricError, accuracy, teacher_alignment
from .gradcheck import format_report, run_all
from .model import ConfigError, InputError, load_checkpoint
from .trainer import train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3

log = logging.getLogger("psnet")


def cmd_gen_data(args) -> int:
    raw = json.loads(Path(args.spec).read_text()) if args.spec else {}
    unknown = sorted(set(raw) - set(asdict(TaskSpec())))
    if unknown:
        raise ConfigError(f"task spec: unknown key(s) {', '.join(unknown)}")
    spec = TaskSpec(**raw)
    seed = spec.seed if args.seed is None else args.seed
    manifest = write_splits(generate(spec, seed), args.out, spec, seed)
    print(json.dumps(manifest["counts"], sort_keys=True))
    return EXIT_OK


def _load_config(args) -> run_config.RunConfig:
    cfg = run_config.load(args.config) if args.config else run_config.from_dict({})
    if args.preset:
        cfg = run_config.apply_preset(cfg, args.preset, k=args.k)
    elif args.k is not None:
        cfg = run_config.apply_preset(cfg, "multi-student", k=args.k)
    if args.seed is not None:
        cfg = run_config.with_seed(cfg, args.seed)
    if args.out:
        cfg.out_dir = args.out
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    run_dir = Path(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.echo.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    if cfg.data_dir:
        data = load_splits(cfg.data_dir, cfg.task.vocab_size, cfg.task.num_classes, cfg.task.seq_len)
    else:
        data = generate(cfg.task)
    result = train(cfg.train, cfg.teacher, cfg.student, cfg.curriculum, cfg.weights, data, run_dir)
    summary = result.summary
    for s in summary["students"]:
        print(f"{s['id']}: dev={s.get('final_dev_accuracy', float('nan')):.4f} "
              f"test={s.get('final_test_accuracy', float('nan')):.4f} best_dev={s['best_dev_accuracy']}")
    if "teacher" in summary:
        t = summary["teacher"]
        print(f"teacher: dev={t.get('final_dev_accuracy', float('nan')):.4f} "
              f"test={t.get('final_test_accuracy', float('nan')):.4f}")
    if "best_student" in summary:
        print(f"best student: student_{summary['best_student']} "
              f"(test={summary['best_student_test_accuracy']:.4f})")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def _check_fit(model_cfg, examples, what: str) -> None:
    for i, ex in enumerate(examples):
        if len(ex.tokens) > model_cfg.max_seq_len:
            raise ConfigError(f"{what}: example {i} length exceeds max_seq_len={model_cfg.max_seq_len}")
        if ex.tokens and max(ex.tokens) >= model_cfg.vocab_size:
            raise ConfigError(f"{what}: example {i} token id exceeds vocab_size={model_cfg.vocab_size}")
        if ex.label is not None and ex.label >= model_cfg.num_classes:
            raise ConfigError(f"{what}: example {i} label exceeds num_classes={model_cfg.num_classes}")


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.ckpt)
    examples = load_jsonl(Path(args.data) / f"{args.split}.jsonl")
    _check_fit(model.config, examples, args.ckpt)
    out = {"split": args.split, "count": len(examples), "accuracy": accuracy(model, examples)}
    if args.teacher:
        teacher, _ = load_checkpoint(args.teacher)
        if teacher.config.num_classes != model.config.num_classes:
            raise ConfigError(
                f"num_classes mismatch: student {model.config.num_classes} vs teacher {teacher.config.num_classes}"
            )
        for dim in ("vocab_size", "max_seq_len"):
            if getattr(teacher.config, dim) != getattr(model.config, dim):
                raise ConfigError(f"{dim} mismatch between student and teacher checkpoints")
        out["cka_to_teacher"], out["kl_to_teacher"] = teacher_alignment(teacher, model, examples)
    print(f"{args.split}: n={out['count']} accuracy={out['accuracy']:.4f}")
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_all(args.seed)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_GRADCHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write labeled/unlabeled/dev/test JSONL splits")
    p.add_argument("--spec", help="task spec JSON (defaults when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a teacher and student cohort")
    p.add_argument("--config", help="run config JSON (defaults when omitted)")
    p.add_argument("--preset", choices=run_config.PRESETS)
    p.add_argument("--k", type=int, help="cohort size for the multi-student preset")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="override the run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a data split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--teacher")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("dev", "test"), default="dev")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SpecError, ValueError) as exc:
        if isinstance(exc, (DataError, InputError, MetricError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
