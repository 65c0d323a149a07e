"""Curriculum adversarial noise in embedding space.

Noise starts as projected Gaussian and is refined by raw-gradient ascent.
The ascent count is a step function of the global training step, zero until
the first curriculum period has elapsed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .model import Model, forward, pad_batch


class PerturbationError(RuntimeError):
    """The ascent produced a non-finite gradient."""


@dataclass(frozen=True)
class CurriculumConfig:
    lambda_k: int = 10_000
    gamma: float = 1.0
    sigma2: float = 1e-5
    epsilon: float = 1e-6
    eta: float = 1e-3
    inclusive_loop: bool = False

    def validate(self) -> None:
        if self.lambda_k <= 0:
            raise ValueError("lambda_k must be > 0")
        if self.gamma < 0 or self.sigma2 < 0:
            raise ValueError("gamma and sigma2 must be >= 0")
        if self.epsilon <= 0 or self.eta <= 0:
            raise ValueError("epsilon and eta must be > 0")


def curriculum_steps(n: int, cfg: CurriculumConfig) -> int:
    """Number of ascent iterations at training step ``n``."""
    if n < 0:
        raise ValueError("training step must be >= 0")
    # n * gamma / lambda_k keeps exact integer cases exact (e.g. 25000/10000 -> 2.5)
    k = int(np.floor(n * cfg.gamma / cfg.lambda_k))
    return k + 1 if cfg.inclusive_loop else k


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(delta, -epsilon, epsilon)


def _frozen(model: Model) -> Model:
    return Model(model.config, {k: Node(v.value) for k, v in model.params.items()})


def anf(
    model: Model,
    token_ids,
    n: int,
    cfg: CurriculumConfig,
    labels=None,
    rng: np.random.Generator | None = None,
    clean_logits: np.ndarray | None = None,
    iterations: int | None = None,
) -> np.ndarray:
    """Adversarial noise ``delta`` of shape ``(B, L, d)`` for a batch.

    With ``labels`` the ascent objective is cross-entropy against them;
    without, it is the MSE between perturbed and clean logits (clean logits
    held fixed). Examples never interact inside the encoder, so ascending the
    batch *sum* gives every example exactly its own gradient.

    The model's parameters are read but never touched. ``clean_logits`` may
    supply the unperturbed logits when the caller already has them.
    ``iterations`` overrides the curriculum count.
    """
    rng = np.random.default_rng() if rng is None else rng
    ids = pad_batch(token_ids, model.config) if not isinstance(token_ids, np.ndarray) else token_ids
    shape = (ids.shape[0], model.config.max_seq_len, model.config.hidden_dim)
    delta = project_linf(rng.normal(0.0, np.sqrt(cfg.sigma2), size=shape), cfg.epsilon)
    steps = curriculum_steps(n, cfg) if iterations is None else iterations
    if steps == 0:
        return delta

    frozen = _frozen(model)
    target = None
    if labels is None:
        target = Node(clean_logits if clean_logits is not None else forward(frozen, ids).logits.value)
    for _ in range(steps):
        d = Node(delta, requires_grad=True)
        logits = forward(frozen, ids, d).logits
        if labels is not None:
            objective = ad.cross_entropy(logits, labels, reduction="sum")
        else:
            # per-example MSE over classes, summed over the batch
            objective = ad.scale(ad.mse(logits, target), float(logits.shape[0]))
        ad.backward(objective)
        grad = d.grad_or_zeros()
        if not np.all(np.isfinite(grad)):
            raise PerturbationError("non-finite gradient during adversarial ascent")
        delta = project_linf(delta + cfg.eta * grad, cfg.epsilon)
    return delta


def safe_anf(model, token_ids, n, cfg, labels=None, rng=None, clean_logits=None) -> tuple[np.ndarray, bool]:
    """``anf`` that falls back to projected Gaussian noise on failure.

    Returns ``(delta, ok)``.
    """
    state = None if rng is None else rng.bit_generator.state
    try:
        return anf(model, token_ids, n, cfg, labels, rng, clean_logits), True
    except PerturbationError:
        if state is not None:
            rng.bit_generator.state = state
        ids = pad_batch(token_ids, model.config) if not isinstance(token_ids, np.ndarray) else token_ids
        return anf(model, ids, n, cfg, labels, rng, iterations=0), False
