"""Experiment configuration and the end-to-end pipeline behind the CLI.

Artifacts for seed ``s`` land in ``<out>/seed-<s>/``:

    dataset.jsonl (+ .meta.json)   synthetic benchmark
    baseline.ckpt.json             labeled-only model
    stage1_student.ckpt.json       stage-1 student
    stage1_teacher.ckpt.json       stage-1 EMA teacher
    stage1_log.jsonl / baseline_log.jsonl / stage2_log.jsonl
    pseudo_labels.jsonl
    stage2.ckpt.json               retrained model
    ious_<model>.jsonl             per-sample, per-sentence test IoUs

and ``<out>/report.json`` collects the metrics of every seed.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
import numpy as np

from .evaluation import AVERAGING_NOTE, metrics_from_ious, per_sentence_ious
from .model import ModelConfig, init_params, save_checkpoint
from .pseudo_labeling import Stage2Config, generate_pseudo_labels, retrain, save_pseudo_labels
from .stage1 import Stage1Config, train_stage1
from .synthetic_data import SyntheticConfig, generate_dataset, load_dataset, save_dataset

logger = logging.getLogger(__name__)

FLAG_NAMES = ("mt", "aug", "cr", "pl")

# Component grid for ablations; "baseline" is the labeled-only reference.
COMPONENT_GRID = {
    "baseline": dict(mt=False, aug=False, cr=False, pl=False),
    "mt": dict(mt=True, aug=False, cr=False, pl=False),
    "aug": dict(mt=False, aug=True, cr=False, pl=False),
    "mt+aug": dict(mt=True, aug=True, cr=False, pl=False),
    "mt+cr": dict(mt=True, aug=False, cr=True, pl=False),
    "mt+aug+cr": dict(mt=True, aug=True, cr=True, pl=False),
    "mt+aug+cr+pl": dict(mt=True, aug=True, cr=True, pl=True),
}


class StageError(RuntimeError):
    """Wraps a failure with the name of the pipeline stage it happened in."""

    def __init__(self, stage: str, exc: BaseException):
        self.stage = stage
        self.cause = exc
        super().__init__(f"stage {stage} failed: {exc}")


@dataclass
class Flags:
    mt: bool = True
    aug: bool = True
    cr: bool = True
    pl: bool = True

    def __post_init__(self):
        for name in FLAG_NAMES:
            if not isinstance(getattr(self, name), bool):
                raise ValueError(f"flag {name} must be a boolean")
        if self.cr and not self.mt:
            raise ValueError("cr needs the mean teacher (mt) to supply targets")
        if self.pl and not self.mt:
            raise ValueError("pl needs a stage-1 teacher (mt)")

    def row_name(self) -> str:
        on = [n for n in FLAG_NAMES if getattr(self, n)]
        return "+".join(on) if on else "baseline"


@dataclass
class ExperimentConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    flags: Flags = field(default_factory=Flags)
    seeds: tuple = (0,)
    baseline: bool = True

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be a non-empty list of distinct integers")
        # feature sizes are owned by the dataset
        self.model = replace(self.model, D_v=self.synthetic.D_v, D_q=self.synthetic.D_q)
        self.stage1 = replace(self.stage1, mt=self.flags.mt, aug=self.flags.aug, cr=self.flags.cr)

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in ("synthetic", "model", "stage1", "stage2", "flags")}
        for k in ("mt", "aug", "cr"):
            d["stage1"].pop(k)
        d["stage1"].pop("seed")
        d["stage2"].pop("seed")
        d["synthetic"].pop("seed")
        d["seeds"] = list(self.seeds)
        d["baseline"] = self.baseline
        return json.loads(json.dumps(d))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def for_seed(self, seed: int) -> tuple:
        """Per-seed (synthetic, stage1, stage2) configs; one seed drives all three."""
        return (replace(self.synthetic, seed=seed), replace(self.stage1, seed=seed), replace(self.stage2, seed=seed))

    def with_flags(self, **flags) -> "ExperimentConfig":
        return replace(self, flags=Flags(**{**asdict(self.flags), **flags}))


def _section(cls, obj, name):
    if obj is None:
        return cls()
    if not isinstance(obj, dict):
        raise ValueError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ValueError(f"unknown keys in config section {name!r}: {unknown}")
    try:
        return cls(**obj)
    except TypeError as exc:
        raise ValueError(f"config section {name!r}: {exc}") from None


def config_from_dict(obj: dict) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ValueError("config must be a JSON object")
    allowed = {"synthetic", "model", "stage1", "stage2", "flags", "seeds", "baseline"}
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ValueError(f"unknown top-level config keys: {unknown}")
    return ExperimentConfig(
        synthetic=_section(SyntheticConfig, obj.get("synthetic"), "synthetic"),
        model=_section(ModelConfig, obj.get("model"), "model"),
        stage1=_section(Stage1Config, obj.get("stage1"), "stage1"),
        stage2=_section(Stage2Config, obj.get("stage2"), "stage2"),
        flags=_section(Flags, obj.get("flags"), "flags"),
        seeds=tuple(obj.get("seeds", (0,))),
        baseline=bool(obj.get("baseline", True)),
    )


def load_config(path) -> ExperimentConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: malformed JSON ({exc.msg}, line {exc.lineno})") from None
    return config_from_dict(obj)


def write_log(path, log) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_ious(path, per_sample) -> None:
    with open(path, "w") as fh:
        for sid, ious in per_sample:
            fh.write(json.dumps({"sample_id": sid, "ious": ious}) + "\n")


def read_ious(path) -> list:
    with open(path) as fh:
        return [(r["sample_id"], r["ious"]) for r in map(json.loads, fh)]


def _metrics(per_sample) -> dict:
    flat = [v for _, ious in per_sample for v in ious]
    return {**metrics_from_ious(flat), "num_sentences": len(flat)}


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage attached
        raise StageError(name, exc) from exc


def prepare_dataset(cfg: ExperimentConfig, seed: int, out: Path):
    """Write the seed's dataset, then train from the file (what a rerun would see)."""
    path = out / "dataset.jsonl"
    save_dataset(generate_dataset(cfg.for_seed(seed)[0]), path)
    return load_dataset(path)


def run_seed(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    """All stages for one seed; returns ``{model_name: metrics}``."""
    out.mkdir(parents=True, exist_ok=True)
    _, s1, s2 = cfg.for_seed(seed)
    split = _stage("generate", prepare_dataset, cfg, seed, out)
    lab, unl, test = split.train_labeled, split.train_unlabeled, split.test
    results = {}

    def record(name, model):
        per = per_sentence_ious(model, test)
        write_ious(out / f"ious_{name}.jsonl", per)
        results[name] = _metrics(per)

    record("random_init", init_params(cfg.model, seed))

    if cfg.baseline:
        base_cfg = replace(s1, mt=False, aug=False, cr=False)
        model, _, log = _stage("baseline", train_stage1, lab, [], cfg.model, base_cfg)
        save_checkpoint(out / "baseline.ckpt.json", model, None, seed, {"role": "baseline"})
        write_log(out / "baseline_log.jsonl", log)
        record("baseline", model)

    student, teacher, log = _stage("stage1", train_stage1, lab, unl, cfg.model, s1)
    write_log(out / "stage1_log.jsonl", log)
    save_checkpoint(out / "stage1_student.ckpt.json", student, None, seed, {"role": "stage1_student"})
    stage1_model = teacher if teacher is not None else student
    save_checkpoint(out / "stage1_teacher.ckpt.json", stage1_model, None, seed, {"role": "stage1_teacher"})
    record("stage1", stage1_model)

    if cfg.flags.pl:
        labels = _stage("pseudo-label", generate_pseudo_labels, stage1_model, unl, s2)
        save_pseudo_labels(labels, out / "pseudo_labels.jsonl")
        model, log = _stage("retrain", retrain, lab, unl, labels, cfg.model, s2)
        write_log(out / "stage2_log.jsonl", log)
        save_checkpoint(out / "stage2.ckpt.json", model, None, seed, {"role": "stage2"})
        record("stage2", model)
        counts = {b: sum(pl.bucket == b for pl in labels) for b in ("low", "mid", "high")}
        results["pseudo_label_buckets"] = counts
    return results


def _mean_metrics(per_seed: list) -> dict:
    keys = [k for k in per_seed[0] if k != "num_sentences"]
    return {k: float(np.mean([m[k] for m in per_seed])) for k in keys}


def build_report(cfg: ExperimentConfig, per_seed: dict) -> dict:
    """``per_seed`` maps seed to :func:`run_seed` output."""
    seeds = list(cfg.seeds)
    models = [m for m in per_seed[seeds[0]] if m != "pseudo_label_buckets"]
    report = {
        "config_hash": cfg.config_hash(),
        "row": cfg.flags.row_name(),
        "seeds": seeds,
        "averaging": AVERAGING_NOTE,
        "models": {},
    }
    for name in models:
        runs = [per_seed[s][name] for s in seeds]
        report["models"][name] = {"mean": _mean_metrics(runs), "per_seed": {str(s): r for s, r in zip(seeds, runs)}}
    deltas = {}
    if "baseline" in models:
        deltas["stage1_minus_baseline_mIoU"] = [per_seed[s]["stage1"]["mIoU"] - per_seed[s]["baseline"]["mIoU"] for s in seeds]
    if "stage2" in models:
        deltas["stage2_minus_stage1_mIoU"] = [per_seed[s]["stage2"]["mIoU"] - per_seed[s]["stage1"]["mIoU"] for s in seeds]
        report["pseudo_label_buckets"] = {str(s): per_seed[s]["pseudo_label_buckets"] for s in seeds}
    for k, v in list(deltas.items()):
        deltas[k] = {"per_seed": v, "mean": float(np.mean(v))}
    report["deltas"] = deltas
    return report


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def run_experiment(cfg: ExperimentConfig, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    per_seed = {}
    for seed in cfg.seeds:
        logger.info("seed %d", seed)
        per_seed[seed] = run_seed(cfg, seed, out / f"seed-{seed}")
    report = build_report(cfg, per_seed)
    (out / "report.json").write_text(dumps_report(report))
    return report


def load_grid(grid: str) -> dict:
    """``components`` for the built-in grid, or a JSON file mapping row names to flag dicts."""
    if grid == "components":
        return dict(COMPONENT_GRID)
    try:
        obj = json.loads(Path(grid).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{grid}: malformed JSON ({exc.msg})") from None
    if not isinstance(obj, dict) or not obj:
        raise ValueError("grid file must map row names to flag objects")
    rows = {}
    for name, flags in obj.items():
        unknown = sorted(set(flags) - set(FLAG_NAMES)) if isinstance(flags, dict) else ["<not an object>"]
        if unknown:
            raise ValueError(f"grid row {name!r}: unknown flags {unknown}")
        rows[name] = {k: bool(flags.get(k, False)) for k in FLAG_NAMES}
    return rows


def run_ablation(cfg: ExperimentConfig, rows: dict, out) -> dict:
    """One pipeline per grid row, each without the extra baseline run."""
    out = Path(out)
    table = {"config_hash": cfg.config_hash(), "seeds": list(cfg.seeds), "averaging": AVERAGING_NOTE, "rows": {}}
    for name, flags in rows.items():
        row_cfg = replace(cfg.with_flags(**flags), baseline=False)
        rep = run_experiment(row_cfg, out / name)
        final = "stage2" if flags["pl"] else "stage1"
        table["rows"][name] = {"flags": flags, "config_hash": row_cfg.config_hash(), **rep["models"][final]["mean"]}
    (out / "ablation.json").write_text(dumps_report(table))
    return table
