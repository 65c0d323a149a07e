"""JSON run configuration, validation and ablation presets."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .data import TaskSpec
from .losses import LossWeights
from .model import ConfigError, LayerMapping, ModelConfig
from .perturb import CurriculumConfig
from .trainer import TrainConfig

PRESETS = ("dual-student", "multi-student", "single-student", "no-cat", "pure-dml", "no-dml", "supervised-only")

# Desk-scale schedule: 3000 steps with ramp-up and curriculum period at the
# same fractions of the run (0.1 and 0.2) as the full-scale 50000-step schedule.
# A from-scratch teacher needs a larger step than fine-tuning would (chosen on dev).
DESK_TRAIN = TrainConfig(total_steps=3000, lr_teacher=3e-4)
DESK_CURRICULUM = CurriculumConfig(lambda_k=600)
DESK_WEIGHTS = LossWeights(lam=0.1, t=300)
MODEL_SHAPE_KEYS = ("num_layers", "hidden_dim", "num_heads", "ff_dim")


@dataclass
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    teacher: ModelConfig = field(default_factory=lambda: ModelConfig(num_layers=4))
    student: ModelConfig = field(default_factory=lambda: ModelConfig(num_layers=2))
    train: TrainConfig = DESK_TRAIN
    curriculum: CurriculumConfig = DESK_CURRICULUM
    weights: LossWeights = DESK_WEIGHTS
    out_dir: str = "runs/default"
    data_dir: str | None = None
    seed: int = 0
    preset: str | None = None

    def validate(self) -> None:
        self.task.validate()
        for role in ("teacher", "student"):
            cfg = getattr(self, role)
            cfg.validate()
            expect = (self.task.vocab_size, self.task.seq_len, self.task.num_classes)
            if (cfg.vocab_size, cfg.max_seq_len, cfg.num_classes) != expect:
                raise ConfigError(f"{role}: vocab_size/max_seq_len/num_classes must match the task {expect}")
        self.train.validate()
        self.curriculum.validate()
        self.weights.validate()

    def to_dict(self) -> dict:
        out = {
            "task": asdict(self.task),
            "teacher": {k: getattr(self.teacher, k) for k in MODEL_SHAPE_KEYS},
            "student": {k: getattr(self.student, k) for k in MODEL_SHAPE_KEYS},
            "train": asdict(self.train),
            "curriculum": asdict(self.curriculum),
            "weights": asdict(self.weights),
            "out_dir": self.out_dir,
            "data_dir": self.data_dir,
            "seed": self.seed,
            "preset": self.preset,
        }
        out["train"].pop("seed")
        if self.train.mappings is not None:
            out["train"]["mappings"] = [m.to_dict() for m in self.train.mappings]
        return out


def _build(cls, raw: dict, where: str, base=None):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    base = base if base is not None else cls()
    try:
        return replace(base, **raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _mappings(raw, student_layers: int, teacher_layers: int) -> tuple[LayerMapping, ...]:
    out = []
    for i, m in enumerate(raw):
        unknown = sorted(set(m) - {"kind", "start", "student_layers", "teacher_layers"})
        if unknown:
            raise ConfigError(f"train.mappings[{i}]: unknown key(s) {', '.join(unknown)}")
        out.append(LayerMapping(m["kind"], student_layers, teacher_layers, m.get("start")))
    return tuple(out)


def from_dict(raw: dict) -> RunConfig:
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    task = _build(TaskSpec, raw.get("task", {}), "task")
    shared = dict(vocab_size=task.vocab_size, max_seq_len=task.seq_len, num_classes=task.num_classes)
    teacher = _build(ModelConfig, raw.get("teacher", {}), "teacher", ModelConfig(num_layers=4, **shared))
    student = _build(ModelConfig, raw.get("student", {}), "student", ModelConfig(num_layers=2, **shared))
    train_raw = dict(raw.get("train", {}))
    maps = train_raw.pop("mappings", None)
    train = _build(TrainConfig, train_raw, "train", DESK_TRAIN)
    if maps is not None:
        train = replace(train, mappings=_mappings(maps, student.num_layers, teacher.num_layers))
    cfg = RunConfig(
        task=task,
        teacher=teacher,
        student=student,
        train=train,
        curriculum=_build(CurriculumConfig, raw.get("curriculum", {}), "curriculum", DESK_CURRICULUM),
        weights=_build(LossWeights, raw.get("weights", {}), "weights", DESK_WEIGHTS),
        out_dir=raw.get("out_dir", "runs/default"),
        data_dir=raw.get("data_dir"),
        seed=int(raw.get("seed", 0)),
        preset=raw.get("preset"),
    )
    cfg.train = replace(cfg.train, seed=cfg.seed)
    if cfg.preset is not None:
        cfg = apply_preset(cfg, cfg.preset)
    cfg.validate()
    return cfg


def load(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(raw)


def apply_preset(cfg: RunConfig, preset: str, k: int | None = None) -> RunConfig:
    """Return ``cfg`` reconfigured for one of the ablation protocols."""
    t = cfg.train
    if preset == "dual-student":
        t = replace(t, k=2, mappings=None)
    elif preset == "multi-student":
        k = k or (t.k if t.k > 2 else 4)
        # distinct consecutive blocks: first, last, then middle blocks
        depth = max(cfg.teacher.num_layers, cfg.student.num_layers * k)
        cfg = replace(cfg, teacher=replace(cfg.teacher, num_layers=depth))
        t = replace(t, k=k, mappings=None)
    elif preset == "single-student":
        t = replace(t, k=1, enable_dml=False, mappings=None)
    elif preset == "no-cat":
        t = replace(t, enable_cat=False)
    elif preset == "pure-dml":
        t = replace(t, enable_teacher=False)
    elif preset == "no-dml":
        t = replace(t, enable_dml=False)
    elif preset == "supervised-only":
        t = replace(t, k=1, enable_teacher=False, use_unlabeled=False, mappings=None)
    else:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    return replace(cfg, train=t, preset=preset)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, seed=seed, train=replace(cfg.train, seed=seed))
