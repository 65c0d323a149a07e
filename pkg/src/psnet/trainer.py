"""Online teacher/student-cohort training.

Each global step runs a supervised sub-step (teacher and students fit the
labeled batch under adversarial noise) and then an unsupervised sub-step in
which only the students learn: feature and logit distillation from the
teacher plus mutual learning among the peers.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Example, batch_iter, labels_array, tokens_array
from .evaluation import MetricRecord, accuracy, select_best_student, teacher_alignment
from .losses import (
    LossReport,
    LossWeights,
    loss_dml,
    loss_feature_kd,
    loss_logit_kd,
    loss_supervised,
    mc_total,
    ramp_up,
    total_losses,
)
from .model import (
    ConfigError,
    LayerMapping,
    Model,
    ModelConfig,
    cohort_mappings,
    forward,
    init_model,
    init_student_from_teacher,
    save_checkpoint,
)
from .perturb import CurriculumConfig, safe_anf

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimizer


def adam_update(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step; ``t`` is the 1-based step count.

    Returns ``(new_param, new_m, new_v)``.
    """
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam over a model's parameters with its own moments and step count."""

    def __init__(self, model: Model, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.model = model
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.value) for k, p in model.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in model.params.items()}
        self.t = 0
        self.skipped = 0

    def step(self) -> None:
        self.t += 1
        for name, p in self.model.params.items():
            g = p.grad_or_zeros()
            if not np.all(np.isfinite(g)):
                self.skipped += 1
                log.warning("non-finite gradient for %s; skipping its update", name)
                continue
            p.value, self.m[name], self.v[name] = adam_update(
                p.value, g, self.m[name], self.v[name], self.t, self.lr, self.beta1, self.beta2, self.eps
            )


# ---------------------------------------------------------------------------
# configuration and state


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 3000
    sup_batch: int = 4
    unsup_batch: int = 16
    lr_teacher: float = 5e-5
    lr_student_sup: float = 3e-4
    lr_distill: float = 7e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    k: int = 2
    mappings: tuple[LayerMapping, ...] | None = None
    eval_every: int = 100
    probe_size: int = 256
    schedule_mode: str = "phased"
    enable_cat: bool = True
    enable_dml: bool = True
    enable_teacher: bool = True
    use_unlabeled: bool = True
    student_init: str = "random"
    dml_symmetric_grad: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("cohort size k must be >= 1")
        if min(self.lr_teacher, self.lr_student_sup, self.lr_distill) <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.total_steps < 0 or self.eval_every < 1:
            raise ConfigError("total_steps must be >= 0 and eval_every >= 1")
        if self.sup_batch < 1 or self.unsup_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.schedule_mode not in ("phased", "joint"):
            raise ConfigError(f"unknown schedule_mode {self.schedule_mode!r}")
        if self.student_init not in ("random", "teacher_slice"):
            raise ConfigError(f"unknown student_init {self.student_init!r}")
        if self.mappings is not None and len(self.mappings) != self.k:
            raise ConfigError(f"{len(self.mappings)} mappings given for k={self.k} students")

    @property
    def dml_active(self) -> bool:
        return self.enable_dml and self.k >= 2


@dataclass
class CohortState:
    teacher: Model | None
    students: list[Model]
    mappings: list[LayerMapping]
    teacher_opt: Adam | None
    student_sup_opts: list[Adam]
    student_distill_opts: list[Adam]
    rng: np.random.Generator
    step: int = 0
    counters: Counter = field(default_factory=Counter)

    def models(self) -> list[tuple[str, Model]]:
        out = [("teacher", self.teacher)] if self.teacher is not None else []
        return out + [(f"student_{k + 1}", s) for k, s in enumerate(self.students)]


def init_state(
    config: TrainConfig,
    teacher_cfg: ModelConfig,
    student_cfg: ModelConfig,
) -> CohortState:
    config.validate()
    seeds = np.random.SeedSequence(config.seed).generate_state(config.k + 2)
    teacher = init_model(replace(teacher_cfg, seed=int(seeds[0]))) if config.enable_teacher else None
    if config.mappings is not None:
        mappings = list(config.mappings)
    else:
        mappings = cohort_mappings(config.k, student_cfg.num_layers, teacher_cfg.num_layers)
    for m in mappings:
        if (m.student_layers, m.teacher_layers) != (student_cfg.num_layers, teacher_cfg.num_layers):
            raise ConfigError(f"mapping {m} does not match student/teacher depths")
        m.validate()
    if student_cfg.hidden_dim != teacher_cfg.hidden_dim or student_cfg.num_heads != teacher_cfg.num_heads:
        raise ConfigError("teacher and students must share hidden_dim and num_heads")
    students = []
    for k in range(config.k):
        cfg = replace(student_cfg, seed=int(seeds[k + 1]))
        if config.student_init == "teacher_slice" and teacher is not None:
            students.append(init_student_from_teacher(cfg, teacher, mappings[k]))
        else:
            students.append(init_model(cfg))
    opt = dict(beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
    return CohortState(
        teacher=teacher,
        students=students,
        mappings=mappings,
        teacher_opt=Adam(teacher, config.lr_teacher, **opt) if teacher is not None else None,
        student_sup_opts=[Adam(s, config.lr_student_sup, **opt) for s in students],
        student_distill_opts=[Adam(s, config.lr_distill, **opt) for s in students],
        rng=np.random.default_rng(seeds[-1]),
    )


# ---------------------------------------------------------------------------
# one global step


def _noise(state, model, ids, n, config, curriculum, labels=None, clean_logits=None):
    if not config.enable_cat:
        return np.zeros((ids.shape[0], model.config.max_seq_len, model.config.hidden_dim))
    state.counters["anf_calls"] += 1
    delta, ok = safe_anf(model, ids, n, curriculum, labels, state.rng, clean_logits)
    if not ok:
        state.counters["anf_fallbacks"] += 1
    return delta


def _supervised_losses(state, batch, n, config, curriculum):
    ids = tokens_array(batch, state.students[0].config.max_seq_len)
    y = labels_array(batch)
    out = []
    for _, model in state.models():
        delta = _noise(state, model, ids, n, config, curriculum, labels=y)
        out.append(loss_supervised(model, ids, y, delta))
    return out


def _unsupervised_losses(state, batch, n, config, curriculum, weights):
    """Per-student (fkd, lkd, dml) Nodes and the assembled objective."""
    ids = tokens_array(batch, state.students[0].config.max_seq_len)
    K = len(state.students)
    zero = ad.Node(0.0)
    fkd, lkd = [zero] * K, [zero] * K
    if state.teacher is not None:
        frozen = Model(state.teacher.config, {k: ad.Node(v.value) for k, v in state.teacher.params.items()})
        t_clean = forward(frozen, ids)
        t_delta = _noise(state, state.teacher, ids, n, config, curriculum, clean_logits=t_clean.logits.value)
        t_pert = forward(frozen, ids, t_delta)
    s_pert = []
    fkd = list(fkd)
    lkd = list(lkd)
    for k, student in enumerate(state.students):
        s_clean = forward(student, ids)
        delta = _noise(state, student, ids, n, config, curriculum, clean_logits=s_clean.logits.value)
        pert = forward(student, ids, delta)
        s_pert.append(pert)
        if state.teacher is not None:
            fkd[k] = loss_feature_kd(s_clean, t_clean, state.mappings[k])
            lkd[k] = loss_logit_kd(pert, t_pert)
    dml = [zero] * K
    if config.dml_active:
        dml = []
        for k in range(K):
            res = loss_dml(k, s_pert, symmetric_grad=config.dml_symmetric_grad)
            state.counters["dml_calls"] += 1
            state.counters["dml_peer_terms"] += res.peers
            dml.append(res.loss)
    mu = ramp_up(weights.t, n)
    return fkd, lkd, dml, mc_total(fkd, lkd, dml, mu, weights.lam)


def _grads_clear(state) -> bool:
    return all(p.grad is None for _, m in state.models() for p in m.params.values())


def train_step(state: CohortState, sup_batch, unsup_batch, config: TrainConfig,
               curriculum: CurriculumConfig, weights: LossWeights) -> LossReport:
    """One global step; advances ``state.step`` by exactly one."""
    n = state.step
    K = len(state.students)
    has_unsup = config.use_unlabeled and bool(unsup_batch)
    if config.use_unlabeled and not unsup_batch:
        log.warning("step %d: empty unlabeled batch, skipping the unsupervised sub-step", n)

    if config.schedule_mode == "phased":
        sup = _supervised_losses(state, sup_batch, n, config, curriculum)
        for node in sup:
            ad.backward(node)
        if state.teacher_opt is not None:
            state.teacher_opt.step()
        for opt in state.student_sup_opts:
            opt.step()
        for _, m in state.models():
            m.zero_grad()
        state.counters["sup_steps"] += 1
        if not _grads_clear(state):
            raise RuntimeError("gradient leaked out of the supervised sub-step")
        state.counters["grad_clear_checks"] += 1

        fkd = lkd = dml = [ad.Node(0.0)] * K
        if has_unsup:
            fkd, lkd, dml, objective = _unsupervised_losses(state, unsup_batch, n, config, curriculum, weights)
            if isinstance(objective, ad.Node) and objective.requires_grad:
                ad.backward(objective)
                for opt in state.student_distill_opts:
                    opt.step()
            for s in state.students:
                s.zero_grad()
            if state.teacher is not None:
                state.teacher.zero_grad()
            state.counters["unsup_steps"] += 1
    else:
        sup = _supervised_losses(state, sup_batch, n, config, curriculum)
        objective = sup[0]
        for node in sup[1:]:
            objective = objective + node
        fkd = lkd = dml = [ad.Node(0.0)] * K
        if has_unsup:
            fkd, lkd, dml, mc = _unsupervised_losses(state, unsup_batch, n, config, curriculum, weights)
            objective = objective + mc
            state.counters["unsup_steps"] += 1
        ad.backward(objective)
        if state.teacher_opt is not None:
            state.teacher_opt.step()
        for opt in state.student_sup_opts:
            opt.step()
        for _, m in state.models():
            m.zero_grad()
        state.counters["sup_steps"] += 1

    offset = 1 if state.teacher is not None else 0
    report = total_losses(
        n,
        weights,
        float(sup[0].value) if offset else 0.0,
        [float(x.value) for x in sup[offset:]],
        [float(x.value) for x in fkd],
        [float(x.value) for x in lkd],
        [float(x.value) for x in dml],
    )
    report.check()
    state.step += 1
    return report


# ---------------------------------------------------------------------------
# full run


@dataclass
class RunResult:
    state: CohortState
    metrics: list[dict]
    losses: list[dict]
    summary: dict


def _losses_for(model_id: str, report: LossReport | None) -> dict:
    if report is None:
        return {}
    if model_id == "teacher":
        return {"l_teacher_sup": report.l_teacher_sup}
    k = int(model_id.split("_")[1]) - 1
    return {
        "l_student_sup": report.l_student_sup[k],
        "l_fkd": report.l_fkd[k],
        "l_lkd": report.l_lkd[k],
        "l_dml": report.l_dml[k],
        "mu": report.mu,
    }


def evaluate_state(state: CohortState, dev: list[Example], probe: list[Example],
                   report: LossReport | None = None) -> list[MetricRecord]:
    records = []
    for model_id, model in state.models():
        rec = MetricRecord(state.step, model_id, "dev", accuracy(model, dev), losses=_losses_for(model_id, report))
        if model_id != "teacher" and state.teacher is not None:
            rec.cka_to_teacher, rec.kl_to_teacher = teacher_alignment(state.teacher, model, probe)
        records.append(rec)
    return records


def train(
    config: TrainConfig,
    teacher_cfg: ModelConfig,
    student_cfg: ModelConfig,
    curriculum: CurriculumConfig,
    weights: LossWeights,
    data: dict[str, list[Example]],
    run_dir=None,
) -> RunResult:
    """Run ``config.total_steps`` global steps, evaluating every ``eval_every``.

    When ``run_dir`` is given, writes final and best-per-student checkpoints,
    ``metrics.jsonl``, ``losses.jsonl`` and ``summary.json`` into it.
    """
    curriculum.validate()
    weights.validate()
    state = init_state(config, teacher_cfg, student_cfg)
    labeled = data.get("labeled", [])
    unlabeled = data.get("unlabeled", []) if config.use_unlabeled else []
    dev, test = data.get("dev", []), data.get("test", [])
    if not labeled:
        raise ConfigError("training needs a non-empty labeled split")
    probe = dev[: config.probe_size]
    seeds = np.random.SeedSequence([config.seed, 1]).generate_state(2)
    sup_iter = batch_iter(labeled, config.sup_batch, int(seeds[0]), cycle=True)
    unsup_iter = batch_iter(unlabeled, config.unsup_batch, int(seeds[1]), cycle=True) if unlabeled else None
    if config.use_unlabeled and not unlabeled:
        log.warning("unlabeled pool is empty; unsupervised sub-steps will be skipped")

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    metrics_fh = open(run_dir / "metrics.jsonl", "w") if run_dir is not None else None
    losses_fh = open(run_dir / "losses.jsonl", "w") if run_dir is not None else None

    metrics: list[dict] = []
    losses: list[dict] = []
    best_acc = [-1.0] * config.k
    best_snap = [s.snapshot() for s in state.students]
    best_step = [0] * config.k
    try:
        for _ in range(config.total_steps):
            sup_batch = next(sup_iter)
            unsup_batch = next(unsup_iter) if unsup_iter is not None else []
            report = train_step(state, sup_batch, unsup_batch, config, curriculum, weights)
            losses.append(report.to_dict())
            if losses_fh:
                losses_fh.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
            if state.step % config.eval_every == 0 and dev:
                for rec in evaluate_state(state, dev, probe, report):
                    row = rec.to_dict()
                    metrics.append(row)
                    if metrics_fh:
                        metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")
                    if rec.model_id.startswith("student_"):
                        k = int(rec.model_id.split("_")[1]) - 1
                        if rec.accuracy > best_acc[k]:
                            best_acc[k], best_step[k] = rec.accuracy, state.step
                            best_snap[k] = state.students[k].snapshot()
    finally:
        for fh in (metrics_fh, losses_fh):
            if fh:
                fh.close()

    summary = _summarize(state, metrics, best_snap, best_acc, best_step, dev, test)
    if run_dir is not None:
        _write_run(run_dir, state, best_snap, best_step, summary)
    return RunResult(state, metrics, losses, summary)


def _summarize(state, metrics, best_snap, best_acc, best_step, dev, test) -> dict:
    summary: dict = {"steps": state.step, "counters": dict(sorted(state.counters.items())), "students": []}
    for k, student in enumerate(state.students):
        best = Model(student.config, {n: ad.Node(v) for n, v in best_snap[k].items()})
        entry = {
            "id": f"student_{k + 1}",
            "mapping": state.mappings[k].to_dict(),
            "best_step": best_step[k],
            "best_dev_accuracy": best_acc[k] if best_acc[k] >= 0 else None,
        }
        if dev:
            entry["final_dev_accuracy"] = accuracy(student, dev)
        if test:
            entry["final_test_accuracy"] = accuracy(student, test)
            entry["best_test_accuracy"] = accuracy(best, test)
        summary["students"].append(entry)
    if state.teacher is not None:
        summary["teacher"] = {}
        if dev:
            summary["teacher"]["final_dev_accuracy"] = accuracy(state.teacher, dev)
        if test:
            summary["teacher"]["final_test_accuracy"] = accuracy(state.teacher, test)
    if metrics:
        best_id = select_best_student(metrics)
        summary["best_student"] = best_id
        summary["best_student_test_accuracy"] = summary["students"][best_id - 1].get("best_test_accuracy")
    return summary


def _write_run(run_dir: Path, state: CohortState, best_snap, best_step, summary) -> None:
    if state.teacher is not None:
        save_checkpoint(state.teacher, run_dir / "teacher.ckpt", {"step": state.step})
    for k, student in enumerate(state.students):
        save_checkpoint(student, run_dir / f"student_{k + 1}.ckpt", {"step": state.step})
        best = Model(student.config, {n: ad.Node(v) for n, v in best_snap[k].items()})
        save_checkpoint(best, run_dir / f"best_student_{k + 1}.ckpt", {"step": best_step[k]})
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
