"""Miniature post-LN transformer encoder used for both teacher and students.

The forward pass returns a :class:`ForwardTrace` exposing the embedding
output, every hidden state and every pre-softmax attention score tensor, so
that distillation losses can compare any student layer with its mapped
teacher layer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node

PAD_ID = 0
MASK_VALUE = -1e9


class ConfigError(ValueError):
    """Invalid model/mapping configuration."""


class InputError(ValueError):
    """Token ids or perturbation do not fit the model."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden_dim: int = 32
    num_heads: int = 2
    ff_dim: int = 64
    vocab_size: int = 64
    max_seq_len: int = 16
    num_classes: int = 4
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_layers", "hidden_dim", "num_heads", "ff_dim", "vocab_size", "max_seq_len", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"hidden_dim ({self.hidden_dim}) must be divisible by num_heads ({self.num_heads})"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in the fixed checkpoint order."""
    d, f = config.hidden_dim, config.ff_dim
    shapes = [
        ("tok_emb", (config.vocab_size, d)),
        ("pos_emb", (config.max_seq_len, d)),
    ]
    for i in range(config.num_layers):
        p = f"layer{i}."
        shapes += [
            (p + "wq", (d, d)), (p + "bq", (d,)),
            (p + "wk", (d, d)), (p + "bk", (d,)),
            (p + "wv", (d, d)), (p + "bv", (d,)),
            (p + "wo", (d, d)), (p + "bo", (d,)),
            (p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
            (p + "w1", (d, f)), (p + "b1", (f,)),
            (p + "w2", (f, d)), (p + "b2", (d,)),
            (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
        ]
    shapes += [("cls_w", (d, config.num_classes)), ("cls_b", (config.num_classes,))]
    return shapes


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Node] = field(default_factory=dict)

    def parameters(self) -> list[tuple[str, Node]]:
        return list(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k].value = v.copy()


def init_model(config: ModelConfig) -> Model:
    """Seeded N(0, 0.02^2) weights; layer-norm gains 1; all biases 0."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in parameter_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            value = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("_b"):
            value = np.zeros(shape)
        else:
            value = rng.normal(0.0, 0.02, size=shape)
        params[name] = Node(value, requires_grad=True)
    return Model(config, params)


def init_student_from_teacher(config: ModelConfig, teacher: Model, mapping: "LayerMapping") -> Model:
    """Student whose embeddings, mapped layers and head are copies of the teacher's."""
    student = init_model(config)
    tc = teacher.config
    if (tc.hidden_dim, tc.ff_dim, tc.vocab_size, tc.max_seq_len, tc.num_classes) != (
        config.hidden_dim, config.ff_dim, config.vocab_size, config.max_seq_len, config.num_classes
    ):
        raise ConfigError("teacher_slice init needs matching widths, vocab, length and classes")
    for name in ("tok_emb", "pos_emb", "cls_w", "cls_b"):
        student.params[name].value = teacher.params[name].value.copy()
    for m in range(1, config.num_layers + 1):
        t = map_layer(mapping, m)
        for name, node in student.params.items():
            if name.startswith(f"layer{m - 1}."):
                src = f"layer{t - 1}." + name.split(".", 1)[1]
                node.value = teacher.params[src].value.copy()
    return student


# ---------------------------------------------------------------------------
# forward


@dataclass
class ForwardTrace:
    """Per-batch activations; leading axis of every tensor is the batch."""

    embedding_out: Node  # (B, L, d), layer index 0
    hidden: list[Node]  # num_layers x (B, L, d)
    attention_scores: list[Node]  # num_layers x (B, h, L, L), pre-softmax
    pooled: Node  # (B, d), first position of the final layer
    logits: Node  # (B, C)

    def layer(self, index: int) -> Node:
        """Representation at layer ``index`` (0 = embedding, 1..N = hidden)."""
        return self.embedding_out if index == 0 else self.hidden[index - 1]


def pad_batch(token_ids, config: ModelConfig) -> np.ndarray:
    """Right-pad a batch (or a single sequence) to ``(B, max_seq_len)``."""
    if len(token_ids) and np.isscalar(token_ids[0]):
        token_ids = [token_ids]
    out = np.full((len(token_ids), config.max_seq_len), PAD_ID, dtype=np.int64)
    for i, seq in enumerate(token_ids):
        seq = np.asarray(seq, dtype=np.int64)
        if len(seq) > config.max_seq_len:
            raise InputError(f"sequence {i} has length {len(seq)} > max_seq_len {config.max_seq_len}")
        if len(seq) and (seq.min() < 0 or seq.max() >= config.vocab_size):
            raise InputError(f"sequence {i} has a token id outside [0, {config.vocab_size})")
        out[i, : len(seq)] = seq
    return out


def forward(model: Model, token_ids, delta=None) -> ForwardTrace:
    """Run the encoder on a batch of token sequences.

    ``delta`` (shape ``(B, L, d)`` or ``(L, d)``; array or Node) is added once
    to the embedding output before the first encoder layer.
    """
    cfg = model.config
    p = model.params
    ids = token_ids if isinstance(token_ids, np.ndarray) and token_ids.ndim == 2 else pad_batch(token_ids, cfg)
    if ids.shape[1] != cfg.max_seq_len:
        ids = pad_batch(list(ids), cfg)
    batch, length = ids.shape
    d, h = cfg.hidden_dim, cfg.num_heads

    x = ad.embedding(p["tok_emb"], ids) + p["pos_emb"]
    if delta is not None:
        delta = delta if isinstance(delta, Node) else Node(delta)
        if delta.shape not in ((batch, length, d), (length, d)):
            raise InputError(f"delta shape {delta.shape} does not match {(batch, length, d)}")
        x = x + delta
    embedding_out = x

    key_mask = None
    if (ids == PAD_ID).any():
        key_mask = np.where(ids == PAD_ID, MASK_VALUE, 0.0)[:, None, None, :]
    hidden, scores_list = [], []
    for i in range(cfg.num_layers):
        q = f"layer{i}."
        scores = ad.attention_scores(x, p[q + "wq"], p[q + "bq"], p[q + "wk"], p[q + "bk"], h)
        scores_list.append(scores)
        ctx = ad.attend(scores, x, p[q + "wv"], p[q + "bv"], key_mask)
        x = ad.layer_norm(x + ad.linear(ctx, p[q + "wo"], p[q + "bo"]), p[q + "ln1_g"], p[q + "ln1_b"])
        ff = ad.linear(ad.gelu(ad.linear(x, p[q + "w1"], p[q + "b1"])), p[q + "w2"], p[q + "b2"])
        x = ad.layer_norm(x + ff, p[q + "ln2_g"], p[q + "ln2_b"])
        hidden.append(x)

    pooled = ad.index(x, (slice(None), 0, slice(None)))
    logits = ad.linear(pooled, p["cls_w"], p["cls_b"])
    return ForwardTrace(embedding_out, hidden, scores_list, pooled, logits)


def predict_logits(model: Model, token_ids, batch_size: int = 256) -> np.ndarray:
    """Logits as a plain array, evaluated in chunks without building a graph."""
    ids = pad_batch(token_ids, model.config) if not isinstance(token_ids, np.ndarray) else token_ids
    frozen = Model(model.config, {k: Node(v.value) for k, v in model.params.items()})
    chunks = [forward(frozen, ids[i : i + batch_size]).logits.value for i in range(0, len(ids), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0, model.config.num_classes))


def pooled_features(model: Model, token_ids, batch_size: int = 256) -> np.ndarray:
    ids = pad_batch(token_ids, model.config) if not isinstance(token_ids, np.ndarray) else token_ids
    frozen = Model(model.config, {k: Node(v.value) for k, v in model.params.items()})
    chunks = [forward(frozen, ids[i : i + batch_size]).pooled.value for i in range(0, len(ids), batch_size)]
    return np.concatenate(chunks)


# ---------------------------------------------------------------------------
# layer mapping


@dataclass(frozen=True)
class LayerMapping:
    """Student-to-teacher layer index map g(m).

    ``kind`` is ``first_k``, ``last_k`` or ``middle_block``; ``start`` is the
    first teacher layer of a middle block.
    """

    kind: str
    student_layers: int
    teacher_layers: int
    start: int | None = None

    def validate(self) -> None:
        if self.kind not in ("first_k", "last_k", "middle_block"):
            raise ConfigError(f"unknown mapping kind {self.kind!r}")
        if self.kind == "middle_block" and self.start is None:
            raise ConfigError("middle_block mapping needs a start layer")
        if not 1 <= self.student_layers < self.teacher_layers:
            raise ConfigError(
                f"student depth {self.student_layers} must be in [1, teacher depth {self.teacher_layers})"
            )
        for m in range(1, self.student_layers + 1):
            map_layer(self, m)

    def layers(self) -> list[int]:
        return [map_layer(self, m) for m in range(1, self.student_layers + 1)]

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def map_layer(mapping: LayerMapping, m: int) -> int:
    M, N = mapping.student_layers, mapping.teacher_layers
    if not 0 <= m <= M + 1:
        raise ConfigError(f"student layer index {m} outside [0, {M + 1}]")
    if m == 0:
        return 0
    if m == M + 1:
        return N + 1
    if mapping.kind == "first_k":
        t = m
    elif mapping.kind == "last_k":
        t = N - M + m
    elif mapping.kind == "middle_block":
        t = mapping.start + m - 1
    else:
        raise ConfigError(f"unknown mapping kind {mapping.kind!r}")
    if not 1 <= t <= N:
        raise ConfigError(f"g({m}) = {t} falls outside teacher layers 1..{N}")
    return t


def cohort_mappings(k: int, student_layers: int, teacher_layers: int) -> list[LayerMapping]:
    """First-K, last-K, then consecutive middle blocks (A, B, C, D, ... students)."""
    out = [
        LayerMapping("first_k", student_layers, teacher_layers),
        LayerMapping("last_k", student_layers, teacher_layers),
    ]
    start = student_layers + 1
    while len(out) < k:
        out.append(LayerMapping("middle_block", student_layers, teacher_layers, start))
        start += student_layers
    out = out[:k]
    for m in out:
        m.validate()
    return out


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: b"PSNETCKP" | uint32 version | uint32 header length | JSON header |
# float64 little-endian parameters concatenated in parameter_shapes() order.

CKPT_MAGIC = b"PSNETCKP"
CKPT_VERSION = 1


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    header = {"config": asdict(model.config), "params": [[n, list(s)] for n, s in parameter_shapes(model.config)]}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for name, _ in parameter_shapes(model.config):
            fh.write(model.params[name].value.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[Model, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen])
    config = ModelConfig(**header["config"])
    offset = 16 + hlen
    params = {}
    for name, shape in parameter_shapes(config):
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        params[name] = Node(arr.astype(np.float64), requires_grad=True)
        offset += 8 * count
    if offset != len(raw):
        raise ConfigError(f"{path}: trailing bytes after parameters")
    return Model(config, params), header.get("extra", {})
