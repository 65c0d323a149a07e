import math

import numpy as np
import pytest

from psnet import autodiff as ad
from psnet.autodiff import Node
from psnet.losses import (
    LossReport,
    LossWeights,
    loss_dml,
    loss_feature_kd,
    loss_logit_kd,
    loss_supervised,
    mc_total,
    mc_total_dual,
    ramp_up,
    total_losses,
)
from psnet.model import ConfigError, ForwardTrace, LayerMapping, forward, init_model, map_layer

from conftest import spread, tiny_config


def fake_trace(logits):
    return ForwardTrace(embedding_out=None, hidden=[], attention_scores=[], pooled=None,
                        logits=Node(np.asarray(logits, dtype=float), requires_grad=True))


@pytest.mark.parametrize("n,mu", [(0, 0.0), (2500, 0.5), (7500, 1.0)])
def test_ramp_up(n, mu):
    assert ramp_up(5000, n) == mu


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lam=-0.1).validate()
    with pytest.raises(ValueError):
        LossWeights(t=0).validate()


def test_supervised_uniform_logits_give_log_c():
    model = init_model(tiny_config(1))
    model.params["cls_w"].value[:] = 0.0
    loss = loss_supervised(model, [[1, 2, 3]], [1], np.zeros((1, 5, 8)))
    assert float(loss.value) == pytest.approx(math.log(3), abs=1e-12)


def test_supervised_batch_mean(tiny_teacher):
    one = loss_supervised(tiny_teacher, [[1, 2, 3]], [2])
    many = loss_supervised(tiny_teacher, [[1, 2, 3]] * 4, [2] * 4)
    assert float(many.value) == pytest.approx(float(one.value), abs=1e-12)


def test_feature_kd_identity_is_zero(tiny_teacher, tokens):
    tr = forward(tiny_teacher, tokens)
    assert float(loss_feature_kd(tr, forward(tiny_teacher, tokens), LayerMapping("first_k", 2, 2)).value) == 0.0


def test_feature_kd_single_entry_shift(tiny_teacher, tiny_student, tokens):
    mapping = LayerMapping("last_k", 1, 2)
    s, t = forward(tiny_student, tokens), forward(tiny_teacher, tokens)
    base = float(loss_feature_kd(s, t, mapping).value)
    target = t.hidden[1].value
    c = 0.37
    # (d - c)^2 - d^2 = c^2 - 2cd for the single shifted entry
    diff = s.hidden[0].value - target
    idx = (0, 0, 0)
    target[idx] += c
    shifted = float(loss_feature_kd(s, t, mapping).value)
    expected = base + (c * c - 2 * c * diff[idx]) / target.size
    assert shifted == pytest.approx(expected, abs=1e-12)


def test_feature_kd_shift_on_matching_traces(tiny_teacher, tokens):
    tr_s = forward(tiny_teacher, tokens)
    tr_t = forward(tiny_teacher, tokens)
    c = 0.5
    tr_t.hidden[0].value[1, 2, 3] += c
    loss = float(loss_feature_kd(tr_s, tr_t, LayerMapping("first_k", 2, 2)).value)
    assert loss == pytest.approx(c * c / tr_t.hidden[0].value.size, abs=1e-15)


def test_feature_kd_straight_line(tiny_teacher, tiny_student, tokens):
    mapping = LayerMapping("last_k", 1, 2)
    s, t = forward(tiny_student, tokens), forward(tiny_teacher, tokens)
    got = float(loss_feature_kd(s, t, mapping).value)

    def mse(a, b):
        return float(np.mean((a - b) ** 2))

    expect = mse(s.embedding_out.value, t.embedding_out.value)
    g1 = map_layer(mapping, 1)
    expect += mse(s.hidden[0].value, t.hidden[g1 - 1].value)
    expect += mse(s.attention_scores[0].value, t.attention_scores[g1 - 1].value)
    assert got == pytest.approx(expect, abs=1e-12)


def test_feature_kd_rejects_wrong_mapping(tiny_teacher, tiny_student, tokens):
    with pytest.raises(ConfigError):
        loss_feature_kd(forward(tiny_student, tokens), forward(tiny_teacher, tokens), LayerMapping("last_k", 1, 4))


def test_logit_kd_values():
    assert float(loss_logit_kd(fake_trace([[1.0, 0.0]]), fake_trace([[0.0, 1.0]])).value) == 1.0
    assert float(loss_logit_kd(fake_trace([[1.0, 2.0]]), fake_trace([[1.0, 2.0]])).value) == 0.0
    with pytest.raises(ConfigError):
        loss_logit_kd(fake_trace([[1.0, 0.0]]), fake_trace([[0.0, 1.0, 2.0]]))


def test_distillation_never_reaches_teacher(tiny_teacher, tiny_student, tokens):
    t = forward(tiny_teacher, tokens)
    s = forward(tiny_student, tokens)
    ad.backward(loss_feature_kd(s, t, LayerMapping("last_k", 1, 2)) + loss_logit_kd(s, t))
    assert all(p.grad is None or not np.any(p.grad) for p in tiny_teacher.params.values())
    assert any(p.grad is not None and np.any(p.grad) for p in tiny_student.params.values())


def test_supervised_reaches_teacher(tiny_teacher, tokens):
    ad.backward(loss_supervised(tiny_teacher, tokens, [0, 1, 2]))
    assert np.any(tiny_teacher.params["layer0.wq"].grad)


def test_dml_values():
    traces = [fake_trace([[1.0, 0.0]]), fake_trace([[0.0, 1.0]]), fake_trace([[1.0, 1.0]])]
    res = loss_dml(0, traces)
    assert float(res.loss.value) == 0.75 and res.peers == 2 and res.enabled
    same = [fake_trace([[0.3, 0.1]]) for _ in range(3)]
    assert float(loss_dml(1, same).loss.value) == 0.0
    pair = traces[:2]
    assert float(loss_dml(0, pair).loss.value) == float(loss_dml(1, pair).loss.value)


def test_dml_disabled_below_two():
    res = loss_dml(0, [fake_trace([[1.0, 0.0]])])
    assert not res.enabled and res.peers == 0 and float(res.loss.value) == 0.0


def test_dml_peers_detached_unless_symmetric():
    traces = [fake_trace([[1.0, 0.0]]), fake_trace([[0.0, 1.0]])]
    ad.backward(loss_dml(0, traces).loss)
    assert traces[1].logits.grad is None
    traces = [fake_trace([[1.0, 0.0]]), fake_trace([[0.0, 1.0]])]
    ad.backward(loss_dml(0, traces, symmetric_grad=True).loss)
    assert np.any(traces[1].logits.grad)


def test_totals_with_zero_ramp_ignore_dml():
    r = total_losses(0, LossWeights(lam=0.1, t=10), 1.0, [0.5, 0.4], [0.2, 0.3], [0.1, 0.1], [100.0, 50.0])
    assert r.mu == 0.0
    assert r.l_mc_total == pytest.approx(0.7, abs=1e-12)
    assert r.l_ko_total == pytest.approx(1.9, abs=1e-12)


def test_totals_with_zero_lambda_are_kd_only():
    r = total_losses(50, LossWeights(lam=0.0, t=10), 0.0, [0.0], [0.25], [0.5], [3.0])
    assert r.l_mc_total == pytest.approx(0.75, abs=1e-12)


def test_dual_and_general_paths_agree():
    rng = np.random.default_rng(7)
    for _ in range(50):
        f, lo, d = (list(rng.uniform(0, 2, size=2)) for _ in range(3))
        mu, lam = rng.uniform(), rng.uniform()
        assert abs(mc_total(f, lo, d, mu, lam) - mc_total_dual(f, lo, d, mu, lam)) <= 1e-12


def test_totals_are_linear_in_lambda():
    parts = ([1.0, 2.0], [0.5, 0.5], [0.4, 0.6])
    vals = [mc_total(*parts, mu=1.0, lam=lam) for lam in (0.0, 0.5, 1.0)]
    assert vals[1] - vals[0] == pytest.approx(vals[2] - vals[1], abs=1e-12)
    assert vals[0] <= vals[1] <= vals[2]


def test_report_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        LossReport(step=1, mu=0.0, l_fkd=[float("nan")]).check()


def test_removing_a_student_keeps_others_supervised_loss(tiny_teacher):
    a = spread(init_model(tiny_config(1, seed=3)), seed=4)
    b = spread(init_model(tiny_config(1, seed=5)), seed=6)
    ids, y = [[1, 2, 3, 4]], [1]
    alone = float(loss_supervised(a, ids, y).value)
    float(loss_supervised(b, ids, y).value)
    assert float(loss_supervised(a, ids, y).value) == alone
