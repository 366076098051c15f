"""Command line driver.

Every subcommand takes ``--out <dir>``; relative artifact paths (``--data``,
``--teacher``, ``--labels``, ``--ckpt``) are resolved under it. Exit codes:
0 success, 1 validation error, 2 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .evaluation import dump_predictions, evaluate
from .experiment import (
    ExperimentConfig,
    StageError,
    dumps_report,
    load_config,
    load_grid,
    run_ablation,
    run_experiment,
    write_log,
)
from .model import load_checkpoint, save_checkpoint
from .pseudo_labeling import generate_pseudo_labels, load_pseudo_labels, retrain, save_pseudo_labels
from .stage1 import train_stage1
from .synthetic_data import generate_dataset, load_dataset, save_dataset
from .training import TrainingDivergence

logger = logging.getLogger("ccl_grounding")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2


def _under(out: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else out / p


def _config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    saved = args.out / "config.json"
    return load_config(saved) if saved.exists() else ExperimentConfig()


def _seed(args, cfg: ExperimentConfig) -> int:
    return cfg.seeds[0] if args.seed is None else args.seed


def _dataset(args):
    path = _under(args.out, args.data)
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} not found; run `generate` first")
    return load_dataset(path)


def cmd_generate(args, cfg):
    seed = _seed(args, cfg)
    split = generate_dataset(cfg.for_seed(seed)[0])
    path = _under(args.out, args.data)
    save_dataset(split, path)
    (args.out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {path} {json.dumps(split.sizes(), sort_keys=True)}")


def cmd_train_stage1(args, cfg):
    seed = _seed(args, cfg)
    split = _dataset(args)
    s1 = cfg.for_seed(seed)[1]
    student, teacher, log = train_stage1(split.train_labeled, split.train_unlabeled, cfg.model, s1)
    write_log(args.out / "stage1_log.jsonl", log)
    save_checkpoint(args.out / "stage1_student.ckpt.json", student, None, seed, {"role": "stage1_student"})
    save_checkpoint(args.out / "stage1_teacher.ckpt.json", teacher if teacher is not None else student, None, seed,
                    {"role": "stage1_teacher"})
    print(f"wrote {args.out / 'stage1_teacher.ckpt.json'}")


def cmd_pseudo_label(args, cfg):
    split = _dataset(args)
    teacher = load_checkpoint(_under(args.out, args.teacher))[0]
    labels = generate_pseudo_labels(teacher, split.train_unlabeled, cfg.for_seed(_seed(args, cfg))[2])
    path = args.out / "pseudo_labels.jsonl"
    save_pseudo_labels(labels, path)
    counts = {b: sum(pl.bucket == b for pl in labels) for b in ("low", "mid", "high")}
    print(f"wrote {path} {json.dumps(counts)}")


def cmd_retrain(args, cfg):
    seed = _seed(args, cfg)
    split = _dataset(args)
    labels = load_pseudo_labels(_under(args.out, args.labels))
    model, log = retrain(split.train_labeled, split.train_unlabeled, labels, cfg.model, cfg.for_seed(seed)[2])
    write_log(args.out / "stage2_log.jsonl", log)
    save_checkpoint(args.out / "stage2.ckpt.json", model, None, seed, {"role": "stage2"})
    print(f"wrote {args.out / 'stage2.ckpt.json'}")


def cmd_eval(args, cfg):
    split = _dataset(args)
    model = load_checkpoint(_under(args.out, args.ckpt))[0]
    metrics = evaluate(model, split.test)
    (args.out / "eval.json").write_text(dumps_report(metrics))
    print(dumps_report(metrics), end="")


def cmd_dump(args, cfg):
    split = _dataset(args)
    sample = split.get(args.sample)
    stage1 = load_checkpoint(_under(args.out, args.ckpt))[0]
    stage2 = load_checkpoint(_under(args.out, args.ckpt2))[0] if args.ckpt2 else None
    text = dump_predictions(sample, stage1, stage2)
    (args.out / f"dump_{args.sample}.txt").write_text(text)
    print(text, end="")


def cmd_run(args, cfg):
    report = run_experiment(cfg, args.out)
    print(dumps_report(report), end="")


def cmd_ablate(args, cfg):
    table = run_ablation(cfg, load_grid(args.grid), args.out)
    print(dumps_report(table), end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccl-vpg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, config_required=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", type=Path, required=True, help="output root directory")
        p.add_argument("--config", required=config_required, help="experiment config JSON")
        p.set_defaults(fn=fn)
        return p

    def data_opts(p):
        p.add_argument("--data", default="dataset.jsonl", help="dataset path (under --out if relative)")
        p.add_argument("--seed", type=int, default=None, help="defaults to the first configured seed")

    data_opts(add("generate", cmd_generate, "write the synthetic dataset", True))
    data_opts(add("train-stage1", cmd_train_stage1, "stage-1 mean-teacher training", True))
    p = add("pseudo-label", cmd_pseudo_label, "label unlabeled paragraphs with a teacher")
    p.add_argument("--teacher", required=True)
    data_opts(p)
    p = add("retrain", cmd_retrain, "stage-2 retraining on ground truth plus pseudo labels")
    p.add_argument("--labels", required=True)
    data_opts(p)
    p = add("eval", cmd_eval, "test-split metrics of a checkpoint")
    p.add_argument("--ckpt", required=True)
    data_opts(p)
    add("run", cmd_run, "every stage for every configured seed, then the report", True)
    p = add("dump", cmd_dump, "per-sentence interval table for one sample")
    p.add_argument("--ckpt", required=True, help="stage-1 checkpoint")
    p.add_argument("--ckpt2", default=None, help="stage-2 checkpoint (defaults to --ckpt)")
    p.add_argument("--sample", required=True)
    data_opts(p)
    p = add("ablate", cmd_ablate, "run a grid of component flags")
    p.add_argument("--grid", required=True, help="'components' or a JSON file of {row: {mt, aug, cr, pl}}")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    stage = args.command
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        cfg = _config(args)
        args.fn(args, cfg)
    except StageError as exc:
        stage, err = f"{args.command}/{exc.stage}", exc.cause
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code below
        err = exc
    else:
        return EXIT_OK
    if isinstance(err, TrainingDivergence):
        print(f"error [{stage}]: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    if isinstance(err, (ValueError, KeyError, FileNotFoundError, IndexError, TypeError)):
        print(f"error [{stage}]: {err}", file=sys.stderr)
        return EXIT_INVALID
    raise err


if __name__ == "__main__":
    sys.exit(main())
