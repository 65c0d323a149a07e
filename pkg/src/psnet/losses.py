"""Loss terms of the teacher/student cohort and their aggregation.

Every distillation target (teacher activations, peer logits) is detached, so
these losses only ever push gradient into the model being taught.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .model import ConfigError, ForwardTrace, LayerMapping, Model, forward, map_layer


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.1
    t: int = 5000

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.t <= 0:
            raise ValueError("ramp-up period t must be > 0")


def ramp_up(t: int, n: int) -> float:
    """Linear ramp ``min(n / t, 1)``."""
    if t <= 0 or n < 0:
        raise ValueError("need t > 0 and n >= 0")
    return min(n / t, 1.0)


def loss_supervised(model: Model, token_ids, labels, delta=None) -> Node:
    """Mean cross-entropy of the perturbed forward; ``delta`` is a constant."""
    trace = forward(model, token_ids, None if delta is None else Node(np.asarray(delta)))
    return ad.cross_entropy(trace.logits, labels)


def loss_feature_kd(student: ForwardTrace, teacher: ForwardTrace, mapping: LayerMapping) -> Node:
    """Embedding MSE at layer 0 plus hidden-state and attention-score MSE for
    every student layer against its mapped teacher layer."""
    M = len(student.hidden)
    if mapping.student_layers != M or mapping.teacher_layers != len(teacher.hidden):
        raise ConfigError(
            f"mapping {mapping.student_layers}->{mapping.teacher_layers} does not fit "
            f"traces with {M} and {len(teacher.hidden)} layers"
        )
    try:
        loss = ad.mse(student.embedding_out, ad.detach(teacher.embedding_out))
        for m in range(1, M + 1):
            t = map_layer(mapping, m)
            loss = loss + ad.mse(student.hidden[m - 1], ad.detach(teacher.hidden[t - 1]))
            loss = loss + ad.mse(student.attention_scores[m - 1], ad.detach(teacher.attention_scores[t - 1]))
    except ad.DimensionError as exc:
        raise ConfigError(f"feature KD shape mismatch: {exc}") from exc
    return loss


def loss_logit_kd(student: ForwardTrace, teacher: ForwardTrace) -> Node:
    if student.logits.shape != teacher.logits.shape:
        raise ConfigError(
            f"logit KD needs equal class counts: {student.logits.shape} vs {teacher.logits.shape}"
        )
    return ad.mse(student.logits, ad.detach(teacher.logits))


@dataclass
class DMLResult:
    loss: Node
    peers: int
    enabled: bool


def loss_dml(k: int, traces: list[ForwardTrace], symmetric_grad: bool = False) -> DMLResult:
    """Average logit MSE of student ``k`` against each of its K-1 peers.

    Peers are detached unless ``symmetric_grad``. With fewer than two
    students the term is disabled and zero.
    """
    K = len(traces)
    if K < 2:
        return DMLResult(Node(0.0), 0, False)
    mine = traces[k].logits
    loss = None
    for i, peer in enumerate(traces):
        if i == k:
            continue
        target = peer.logits if symmetric_grad else ad.detach(peer.logits)
        term = ad.mse(mine, target)
        loss = term if loss is None else loss + term
    return DMLResult(ad.scale(loss, 1.0 / (K - 1)), K - 1, True)


@dataclass
class LossReport:
    step: int
    mu: float
    l_teacher_sup: float = 0.0
    l_student_sup: list[float] = field(default_factory=list)
    l_fkd: list[float] = field(default_factory=list)
    l_lkd: list[float] = field(default_factory=list)
    l_dml: list[float] = field(default_factory=list)
    l_ko_total: float = 0.0
    l_mc_total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def check(self) -> None:
        values = [self.mu, self.l_teacher_sup, self.l_ko_total, self.l_mc_total]
        values += self.l_student_sup + self.l_fkd + self.l_lkd + self.l_dml
        if not all(math.isfinite(v) for v in values):
            raise FloatingPointError(f"non-finite loss at step {self.step}")


def mc_total(l_fkd, l_lkd, l_dml, mu: float, lam: float):
    """Unsupervised objective summed over the cohort.

    Works on floats or Nodes. Each student contributes KD + mu * lam * DML.
    """
    total = 0.0
    for f, lo, d in zip(l_fkd, l_lkd, l_dml):
        total = total + (f + lo) + d * (mu * lam)
    return total


def mc_total_dual(l_fkd, l_lkd, l_dml, mu: float, lam: float):
    """Two-student form: summed KD plus one weighted DML term.

    The single symmetric DML term equals the sum of the two directional
    terms; this path exists to cross-check the K-general assembly.
    """
    if len(l_fkd) != 2:
        raise ValueError("dual-student form needs exactly two students")
    kd = (l_fkd[0] + l_lkd[0]) + (l_fkd[1] + l_lkd[1])
    return kd + (mu * lam) * (l_dml[0] + l_dml[1])


def total_losses(
    step: int,
    weights: LossWeights,
    l_teacher_sup: float,
    l_student_sup: list[float],
    l_fkd: list[float],
    l_lkd: list[float],
    l_dml: list[float],
) -> LossReport:
    mu = ramp_up(weights.t, step)
    report = LossReport(
        step=step,
        mu=mu,
        l_teacher_sup=float(l_teacher_sup),
        l_student_sup=[float(x) for x in l_student_sup],
        l_fkd=[float(x) for x in l_fkd],
        l_lkd=[float(x) for x in l_lkd],
        l_dml=[float(x) for x in l_dml],
    )
    report.l_ko_total = report.l_teacher_sup + sum(report.l_student_sup)
    report.l_mc_total = float(mc_total(report.l_fkd, report.l_lkd, report.l_dml, mu, weights.lam))
    return report
