"""Central finite-difference checks for every differentiable path.

Each check builds a scalar function of some input arrays, computes the
analytic gradient with :func:`autodiff.backward` and compares it against
central differences. The error reported is

    max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, 1e-8)

i.e. relative to the gradient's scale, so entries near zero do not inflate it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .losses import loss_dml, loss_feature_kd, loss_logit_kd, loss_supervised, mc_total
from .model import LayerMapping, Model, ModelConfig, forward, init_model

H = 1e-4
THRESHOLD = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < THRESHOLD


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale_ = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale_


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = H, entries=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x`` (mutated in place, restored).

    ``entries`` restricts the estimate to a list of flat indices; other
    entries are left at zero.
    """
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def check_function(name: str, build: Callable[[list[Node]], Node], inputs: list[np.ndarray],
                   h: float = H) -> CheckResult:
    """Gradient check of ``build(nodes) -> scalar Node`` w.r.t. all ``inputs``."""
    nodes = [Node(x, requires_grad=True) for x in inputs]
    ad.backward(build(nodes))
    worst = 0.0
    for node, x in zip(nodes, inputs):
        arr = node.value

        def f():
            return float(build([Node(n.value) for n in nodes]).value)

        num = numeric_grad(f, arr, h)
        worst = max(worst, relative_error(node.grad_or_zeros(), num))
    return CheckResult(name, worst)


def check_model_params(name: str, models: list[Model], loss_fn: Callable[[], Node],
                       rng: np.random.Generator, per_param: int = 3, h: float = H,
                       numeric_fn: Callable[[], Node] | None = None) -> CheckResult:
    """Gradient check over a random sample of entries of every parameter.

    Only ``models`` are perturbed; detached targets are held fixed by construction.
    ``numeric_fn`` (default ``loss_fn``) is the function differenced numerically.
    """
    numeric_fn = loss_fn if numeric_fn is None else numeric_fn
    for m in models:
        m.zero_grad()
    ad.backward(loss_fn())
    worst = 0.0
    for m in models:
        for pname, p in m.params.items():
            entries = rng.choice(p.value.size, size=min(per_param, p.value.size), replace=False)
            num = numeric_grad(lambda: float(numeric_fn().value), p.value, h, entries)
            ana = p.grad_or_zeros().reshape(-1)[entries]
            scale_ = max(float(np.max(np.abs(num.reshape(-1)[entries]))), 1e-8)
            err = float(np.max(np.abs(ana - num.reshape(-1)[entries]))) / scale_
            # a parameter with (numerically) zero gradient on the sample is fine if analytic agrees
            if np.max(np.abs(num.reshape(-1)[entries])) < 1e-9:
                err = float(np.max(np.abs(ana)))
            worst = max(worst, err)
    for m in models:
        m.zero_grad()
    return CheckResult(name, worst)


def _tiny(num_layers: int, seed: int, scale: float = 1.0) -> Model:
    cfg = ModelConfig(num_layers=num_layers, hidden_dim=8, num_heads=2, ff_dim=12, vocab_size=16,
                      max_seq_len=5, num_classes=3, seed=seed)
    model = init_model(cfg)
    # larger weights than the 0.02 init so every path carries a measurable gradient
    rng = np.random.default_rng(seed + 1000)
    for name, p in model.params.items():
        p.value = p.value + rng.normal(0.0, 0.3 * scale, size=p.shape)
    return model


def run_all(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    u = lambda *shape: rng.uniform(-1.0, 1.0, size=shape)  # noqa: E731
    results = []

    w1 = u(3, 2)
    results.append(check_function("matmul", lambda n: ad.total(ad.mul(ad.matmul(n[0], n[1]), Node(w1))),
                                  [u(3, 4), u(4, 2)]))
    w2 = u(2, 5)
    results.append(check_function("softmax_rows", lambda n: ad.total(ad.mul(ad.softmax_rows(n[0]), Node(w2))),
                                  [u(2, 5)]))
    w3 = u(3, 4)
    results.append(check_function(
        "layer_norm", lambda n: ad.total(ad.mul(ad.layer_norm(n[0], n[1], n[2]), Node(w3))),
        [u(3, 4), u(4), u(4)]))
    w4 = u(3, 4)
    results.append(check_function("gelu", lambda n: ad.total(ad.mul(ad.gelu(n[0]), Node(w4))), [u(3, 4) * 2]))
    labels = rng.integers(0, 3, size=4)
    results.append(check_function("cross_entropy", lambda n: ad.cross_entropy(n[0], labels), [u(4, 3)]))
    results.append(check_function("mse", lambda n: ad.mse(n[0], n[1]), [u(5, 5), u(5, 5)]))
    w5 = u(2, 3, 5)
    results.append(check_function(
        "linear", lambda n: ad.total(ad.mul(ad.linear(n[0], n[1], n[2]), Node(w5))), [u(2, 3, 4), u(4, 5), u(5)]))
    w6 = u(2, 2, 3, 3)
    results.append(check_function(
        "attention_scores",
        lambda n: ad.total(ad.mul(ad.attention_scores(n[0], n[1], n[2], n[3], n[4], 2), Node(w6))),
        [u(2, 3, 4), u(4, 4), u(4), u(4, 4), u(4)]))
    mask = np.zeros((2, 1, 1, 3))
    mask[1, ..., 2] = -1e9
    w7 = u(2, 3, 4)
    results.append(check_function(
        "attend", lambda n: ad.total(ad.mul(ad.attend(n[0], n[1], n[2], n[3], mask), Node(w7))),
        [u(2, 2, 3, 3), u(2, 3, 4), u(4, 4), u(4)]))
    ids = rng.integers(0, 6, size=(2, 3))
    w8 = u(2, 3, 4)
    results.append(check_function("embedding", lambda n: ad.total(ad.mul(ad.embedding(n[0], ids), Node(w8))),
                                  [u(6, 4)]))
    w9 = u(3, 4)
    results.append(check_function(
        "structural(reshape,transpose,index,add,sub,scale)",
        lambda n: ad.total(ad.mul(
            ad.scale(ad.sub(ad.add(ad.reshape(ad.transpose(n[0], (1, 0)), (3, 4)), n[1]), n[1][0:1, :]), 1.5),
            Node(w9))),
        [u(4, 3), u(3, 4)]))
    w10 = u(3, 5)
    results.append(check_function(
        "composite(matmul,layer_norm,gelu)",
        lambda n: ad.total(ad.mul(ad.gelu(ad.layer_norm(ad.matmul(n[0], n[1]), n[2], n[3])), Node(w10))),
        [u(3, 4), u(4, 5), u(5), u(5)]))

    # loss terms over real model parameters
    teacher, s1, s2 = _tiny(2, seed + 1), _tiny(1, seed + 2), _tiny(1, seed + 3)
    cfg = teacher.config
    toks = rng.integers(1, cfg.vocab_size, size=(3, cfg.max_seq_len))
    toks[2, -1] = 0  # exercise the padding mask
    y = rng.integers(0, cfg.num_classes, size=3)
    delta = rng.normal(0.0, 0.1, size=(3, cfg.max_seq_len, cfg.hidden_dim))
    results.append(check_model_params("loss_supervised", [teacher],
                                      lambda: loss_supervised(teacher, toks, y, delta), rng))
    mapping = LayerMapping("last_k", 1, 2)
    results.append(check_model_params(
        "loss_feature_kd", [s1],
        lambda: loss_feature_kd(forward(s1, toks), forward(teacher, toks), mapping), rng))
    results.append(check_model_params(
        "loss_logit_kd", [s1],
        lambda: loss_logit_kd(forward(s1, toks, delta), forward(teacher, toks)), rng))
    s3 = _tiny(1, seed + 4)
    results.append(check_model_params(
        "loss_dml(K=3)", [s1],
        lambda: loss_dml(0, [forward(s, toks) for s in (s1, s2, s3)]).loss, rng))

    t_fixed = forward(teacher, toks)
    s2_fixed = forward(s2, toks)
    kinds = ("first_k", "last_k")

    def mc():
        traces = [forward(s1, toks), s2_fixed]
        fk = [loss_feature_kd(tr, t_fixed, LayerMapping(kind, 1, 2)) for tr, kind in zip(traces, kinds)]
        lk = [loss_logit_kd(tr, t_fixed) for tr in traces]
        dm = [loss_dml(k, traces).loss for k in range(2)]
        return mc_total(fk, lk, dm, 0.5, 0.1)

    def own_terms():
        tr = forward(s1, toks)
        own = loss_feature_kd(tr, t_fixed, LayerMapping(kinds[0], 1, 2)) + loss_logit_kd(tr, t_fixed)
        return own + loss_dml(0, [tr, s2_fixed]).loss * 0.05

    # peers are detached targets, so the assembled objective's gradient for a
    # student must equal the gradient of that student's own terms
    results.append(check_model_params("mc_total(K=2)", [s1], mc, rng, numeric_fn=own_terms))

    # gradient of the labeled ascent objective w.r.t. the perturbation
    frozen = Model(cfg, {k: Node(v.value) for k, v in teacher.params.items()})
    results.append(check_function(
        "anf_inner_grad",
        lambda n: ad.cross_entropy(forward(frozen, toks, n[0]).logits, y, reduction="sum"),
        [rng.normal(0.0, 0.05, size=(3, cfg.max_seq_len, cfg.hidden_dim))]))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'check':<52} {'max_rel_err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<52} {r.max_rel_err:>12.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results)} checks, {failed} failed (threshold {THRESHOLD:g})")
    return "\n".join(lines)
