import math

import numpy as np
import pytest

from psnet import autodiff as ad
from psnet.model import (
    ConfigError,
    InputError,
    LayerMapping,
    ModelConfig,
    cohort_mappings,
    forward,
    init_model,
    init_student_from_teacher,
    load_checkpoint,
    map_layer,
    save_checkpoint,
)

from conftest import spread, tiny_config


def closed_form_count(N, d, ff, V, L, C):
    per_layer = 4 * (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d) + 2 * d
    return V * d + L * d + N * per_layer + d * C + C


def test_same_seed_same_parameters():
    a, b = init_model(tiny_config(seed=5)), init_model(tiny_config(seed=5))
    for k in a.params:
        assert a.params[k].value.tobytes() == b.params[k].value.tobytes()


def test_init_distribution():
    m = init_model(ModelConfig(seed=3))
    assert np.all(m.params["layer0.ln1_g"].value == 1.0)
    assert np.all(m.params["layer0.ln1_b"].value == 0.0)
    assert np.all(m.params["layer0.bq"].value == 0.0)
    assert m.params["tok_emb"].value.std() == pytest.approx(0.02, rel=0.05)


def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        init_model(ModelConfig(hidden_dim=8, num_heads=3))


def test_parameter_count_matches_closed_form():
    cfg = ModelConfig(num_layers=4, hidden_dim=16, num_heads=2, ff_dim=64, vocab_size=64, max_seq_len=16,
                      num_classes=4)
    assert init_model(cfg).num_parameters() == closed_form_count(4, 16, 64, 64, 16, 4) == 14468


def test_zero_delta_equals_no_delta(tiny_teacher, tokens):
    a = forward(tiny_teacher, tokens)
    b = forward(tiny_teacher, tokens, np.zeros((3, 5, 8)))
    assert a.logits.value.tobytes() == b.logits.value.tobytes()
    for x, y in zip(a.hidden, b.hidden):
        assert x.value.tobytes() == y.value.tobytes()


def test_positions_matter(tiny_teacher):
    seq = [3, 4, 5, 6, 7]
    swapped = [4, 3, 5, 6, 7]
    a = forward(tiny_teacher, [seq]).logits.value
    b = forward(tiny_teacher, [swapped]).logits.value
    assert not np.allclose(a, b)


def _layer_norm(row, g, b, eps=1e-5):
    mu = sum(row) / len(row)
    var = sum((x - mu) ** 2 for x in row) / len(row)
    return [(x - mu) / math.sqrt(var + eps) * gi + bi for x, gi, bi in zip(row, g, b)]


def _gelu(x):
    return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def _vecmat(v, M, b):
    return [sum(v[i] * M[i][j] for i in range(len(v))) + b[j] for j in range(len(b))]


def test_single_head_attention_by_hand():
    cfg = ModelConfig(num_layers=1, hidden_dim=2, num_heads=1, ff_dim=3, vocab_size=5, max_seq_len=2,
                      num_classes=2, seed=7)
    model = spread(init_model(cfg), scale=0.5, seed=8)
    P = {k: v.value.tolist() for k, v in model.params.items()}
    ids = [3, 1]
    x = [[P["tok_emb"][t][j] + P["pos_emb"][i][j] for j in range(2)] for i, t in enumerate(ids)]
    q = [_vecmat(r, P["layer0.wq"], P["layer0.bq"]) for r in x]
    k = [_vecmat(r, P["layer0.wk"], P["layer0.bk"]) for r in x]
    v = [_vecmat(r, P["layer0.wv"], P["layer0.bv"]) for r in x]
    scores = [[sum(q[i][c] * k[j][c] for c in range(2)) / math.sqrt(2) for j in range(2)] for i in range(2)]
    attn = []
    for row in scores:
        e = [math.exp(s) for s in row]
        attn.append([t / sum(e) for t in e])
    ctx = [[sum(attn[i][j] * v[j][c] for j in range(2)) for c in range(2)] for i in range(2)]
    proj = [_vecmat(r, P["layer0.wo"], P["layer0.bo"]) for r in ctx]
    h1 = [_layer_norm([a + b for a, b in zip(x[i], proj[i])], P["layer0.ln1_g"], P["layer0.ln1_b"]) for i in range(2)]
    ff = [_vecmat([_gelu(z) for z in _vecmat(r, P["layer0.w1"], P["layer0.b1"])], P["layer0.w2"], P["layer0.b2"])
          for r in h1]
    h2 = [_layer_norm([a + b for a, b in zip(h1[i], ff[i])], P["layer0.ln2_g"], P["layer0.ln2_b"]) for i in range(2)]
    logits = _vecmat(h2[0], P["cls_w"], P["cls_b"])

    trace = forward(model, [ids])
    np.testing.assert_allclose(trace.embedding_out.value[0], x, atol=1e-14)
    np.testing.assert_allclose(trace.attention_scores[0].value[0, 0], scores, atol=1e-13)
    np.testing.assert_allclose(trace.hidden[0].value[0], h2, atol=1e-12)
    np.testing.assert_allclose(trace.logits.value[0], logits, atol=1e-12)


def test_trace_shapes(tiny_teacher, tokens):
    t = forward(tiny_teacher, tokens)
    assert len(t.hidden) == len(t.attention_scores) == 2
    assert t.embedding_out.shape == (3, 5, 8)
    assert t.attention_scores[0].shape == (3, 2, 5, 5)
    assert t.pooled.shape == (3, 8)
    assert t.logits.shape == (3, 3)


def test_forward_is_pure(tiny_teacher, tokens):
    before = {k: v.value.copy() for k, v in tiny_teacher.params.items()}
    a = forward(tiny_teacher, tokens).logits.value
    b = forward(tiny_teacher, tokens).logits.value
    assert a.tobytes() == b.tobytes()
    for k, v in tiny_teacher.params.items():
        assert v.value.tobytes() == before[k].tobytes()


def test_every_parameter_receives_gradient(tiny_teacher, tokens):
    trace = forward(tiny_teacher, tokens)
    ad.backward(ad.cross_entropy(trace.logits, [0, 1, 2]))
    dead = [k for k, p in tiny_teacher.params.items() if p.grad is None or not np.any(p.grad != 0)]
    # pad id 0 never occurs in `tokens`, so its embedding row is the only untouched entry set
    assert dead == []


def test_attention_probe_rows_sum_to_one(tiny_teacher, tokens):
    trace = forward(tiny_teacher, tokens)
    for s in trace.attention_scores:
        probs = ad.softmax_rows(ad.detach(s)).value
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)


def test_padding_is_masked(tiny_teacher):
    # a padded sequence gives the same first-position output whatever the pad embedding is
    seq = [[3, 4, 5]]
    a = forward(tiny_teacher, seq).logits.value
    tiny_teacher.params["tok_emb"].value[0] += 5.0
    b = forward(tiny_teacher, seq).logits.value
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_input_validation(tiny_teacher):
    with pytest.raises(InputError):
        forward(tiny_teacher, [[1, 2, 3, 4, 5, 6]])
    with pytest.raises(InputError):
        forward(tiny_teacher, [[1, 99]])
    with pytest.raises(InputError):
        forward(tiny_teacher, [[1, 2]], np.zeros((1, 4, 8)))


def test_delta_added_at_embedding(tiny_teacher, tokens):
    delta = np.full((3, 5, 8), 0.25)
    t0, t1 = forward(tiny_teacher, tokens), forward(tiny_teacher, tokens, delta)
    np.testing.assert_allclose(t1.embedding_out.value - t0.embedding_out.value, delta, atol=1e-15)


# -- layer mapping -----------------------------------------------------------

def test_last_k_mapping_of_twelve_layers():
    m = LayerMapping("last_k", 2, 12)
    assert [map_layer(m, i) for i in (1, 2)] == [11, 12]


def test_middle_block_mapping_of_twelve_layers():
    m = LayerMapping("middle_block", 2, 12, start=5)
    assert [map_layer(m, i) for i in (1, 2)] == [5, 6]


@pytest.mark.parametrize("mapping", [LayerMapping("first_k", 2, 4), LayerMapping("last_k", 3, 4),
                                     LayerMapping("middle_block", 2, 6, start=3)])
def test_mapping_pins_and_monotone(mapping):
    M, N = mapping.student_layers, mapping.teacher_layers
    assert map_layer(mapping, 0) == 0
    assert map_layer(mapping, M + 1) == N + 1
    image = [map_layer(mapping, m) for m in range(1, M + 1)]
    assert image == sorted(image) and len(set(image)) == M
    assert all(1 <= t <= N for t in image)


def test_mapping_out_of_range():
    with pytest.raises(ConfigError):
        map_layer(LayerMapping("middle_block", 2, 4, start=4), 2)


def test_cohort_mapping_layout_for_six_students():
    maps = cohort_mappings(6, 2, 12)
    assert [m.layers() for m in maps] == [[1, 2], [11, 12], [3, 4], [5, 6], [7, 8], [9, 10]]


def test_mapping_image_is_shape_consistent(tiny_teacher, tiny_student, tokens):
    mapping = LayerMapping("last_k", 1, 2)
    s, t = forward(tiny_student, tokens), forward(tiny_teacher, tokens)
    for m in range(0, 2):
        ad.mse(s.layer(m), t.layer(map_layer(mapping, m)))


def test_teacher_slice_init(tiny_teacher):
    mapping = LayerMapping("last_k", 1, 2)
    student = init_student_from_teacher(tiny_config(1, seed=9), tiny_teacher, mapping)
    np.testing.assert_array_equal(student.params["layer0.wq"].value, tiny_teacher.params["layer1.wq"].value)
    np.testing.assert_array_equal(student.params["tok_emb"].value, tiny_teacher.params["tok_emb"].value)


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path, tiny_teacher):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_teacher, path, {"step": 7})
    loaded, extra = load_checkpoint(path)
    assert extra == {"step": 7}
    assert loaded.config == tiny_teacher.config
    for k, p in tiny_teacher.params.items():
        assert loaded.params[k].value.tobytes() == p.value.tobytes()


def test_checkpoint_bytes_are_deterministic(tmp_path, tiny_teacher):
    save_checkpoint(tiny_teacher, tmp_path / "a.ckpt")
    save_checkpoint(tiny_teacher, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "bad.ckpt")
