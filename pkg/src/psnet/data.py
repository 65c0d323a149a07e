"""Synthetic token-signature classification task and JSONL ingestion.

Each class owns a disjoint set of signature token ids. A sequence of class
``c`` carries ``signal_count`` tokens drawn from that signature; each such
token is swapped for another class's signature token with probability
``label_noise``. All other positions hold uniform noise tokens. Id 0 is the
padding id and never appears in generated data.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .model import PAD_ID

SPLITS = ("labeled", "unlabeled", "dev", "test")


class SpecError(ValueError):
    pass


class DataError(ValueError):
    """Malformed or out-of-range input data."""


@dataclass(frozen=True)
class Example:
    tokens: tuple[int, ...]
    label: int | None = None

    def to_json(self) -> str:
        obj = {"tokens": list(self.tokens)}
        if self.label is not None:
            obj["label"] = self.label
        return json.dumps(obj)


@dataclass(frozen=True)
class TaskSpec:
    vocab_size: int = 64
    seq_len: int = 16
    num_classes: int = 4
    signature_size: int = 4
    signal_count: int = 5
    label_noise: float = 0.1
    labels_per_class: int = 10
    unlabeled_size: int = 2000
    dev_size: int = 500
    test_size: int = 2000
    seed: int = 0

    def validate(self) -> None:
        used = 1 + self.num_classes * self.signature_size
        if used > self.vocab_size or (self.signal_count < self.seq_len and used >= self.vocab_size):
            raise SpecError(
                f"vocab_size {self.vocab_size} too small for {self.num_classes} disjoint "
                f"signatures of size {self.signature_size} plus noise tokens"
            )
        if not 0 <= self.signal_count <= self.seq_len:
            raise SpecError("signal_count must be within [0, seq_len]")
        if not 0.0 <= self.label_noise <= 1.0:
            raise SpecError("label_noise must be a probability")
        if self.num_classes < 2 and self.label_noise > 0:
            raise SpecError("label_noise needs at least two classes")

    def signature(self, c: int) -> np.ndarray:
        start = 1 + c * self.signature_size
        return np.arange(start, start + self.signature_size)

    def noise_ids(self) -> np.ndarray:
        return np.arange(1 + self.num_classes * self.signature_size, self.vocab_size)


def _sample(spec: TaskSpec, label: int, rng: np.random.Generator) -> tuple[int, ...]:
    tokens = rng.choice(spec.noise_ids(), size=spec.seq_len) if spec.signal_count < spec.seq_len else (
        np.zeros(spec.seq_len, dtype=np.int64)
    )
    positions = rng.permutation(spec.seq_len)[: spec.signal_count]
    for pos in positions:
        owner = label
        if rng.random() < spec.label_noise:
            owner = int(rng.choice([c for c in range(spec.num_classes) if c != label]))
        tokens[pos] = rng.choice(spec.signature(owner))
    return tuple(int(t) for t in tokens)


def _draw(spec: TaskSpec, labels: Sequence[int], rng: np.random.Generator, keep_label: bool) -> list[Example]:
    return [Example(_sample(spec, int(y), rng), int(y) if keep_label else None) for y in labels]


def generate(spec: TaskSpec, seed: int | None = None) -> dict[str, list[Example]]:
    """Labeled (class-balanced), unlabeled, dev and test splits.

    Each split has its own rng stream spawned from ``seed``.
    """
    spec.validate()
    seed = spec.seed if seed is None else seed
    streams = np.random.SeedSequence(seed).spawn(len(SPLITS))
    rngs = dict(zip(SPLITS, (np.random.default_rng(s) for s in streams)))
    C = spec.num_classes
    labeled_y = rngs["labeled"].permutation(np.repeat(np.arange(C), spec.labels_per_class))
    return {
        "labeled": _draw(spec, labeled_y, rngs["labeled"], True),
        "unlabeled": _draw(spec, rngs["unlabeled"].integers(0, C, spec.unlabeled_size), rngs["unlabeled"], False),
        "dev": _draw(spec, rngs["dev"].integers(0, C, spec.dev_size), rngs["dev"], True),
        "test": _draw(spec, rngs["test"].integers(0, C, spec.test_size), rngs["test"], True),
    }


def counting_oracle(spec: TaskSpec, tokens: Sequence[int]) -> int:
    """Class whose signature occurs most often; ties go to the lower class."""
    counts = [int(np.isin(tokens, spec.signature(c)).sum()) for c in range(spec.num_classes)]
    return int(np.argmax(counts))


def write_jsonl(examples: Sequence[Example], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")


def load_jsonl(path, vocab_size: int | None = None, num_classes: int | None = None,
               max_len: int | None = None) -> list[Example]:
    """Read one ``{"tokens": [...], "label": int?}`` object per line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                tokens = obj["tokens"]
                label = obj.get("label")
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed line ({exc})") from exc
            if not isinstance(tokens, list) or not all(isinstance(t, int) for t in tokens):
                raise DataError(f"{path}:{lineno}: tokens must be a list of integers")
            if any(t < 0 or (vocab_size is not None and t >= vocab_size) for t in tokens):
                raise DataError(f"{path}:{lineno}: token id out of range")
            if max_len is not None and len(tokens) > max_len:
                raise DataError(f"{path}:{lineno}: sequence longer than {max_len}")
            if label is not None and (
                not isinstance(label, int) or label < 0 or (num_classes is not None and label >= num_classes)
            ):
                raise DataError(f"{path}:{lineno}: label {label!r} out of range")
            out.append(Example(tuple(tokens), label))
    return out


def write_splits(splits: dict[str, list[Example]], out_dir, spec: TaskSpec, seed: int) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, examples in splits.items():
        write_jsonl(examples, out_dir / f"{name}.jsonl")
    manifest = {"counts": {k: len(v) for k, v in splits.items()}, "seed": seed, "spec": asdict(spec)}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_splits(data_dir, vocab_size=None, num_classes=None, max_len=None) -> dict[str, list[Example]]:
    data_dir = Path(data_dir)
    out = {}
    for name in SPLITS:
        path = data_dir / f"{name}.jsonl"
        out[name] = load_jsonl(path, vocab_size, num_classes, max_len) if path.exists() else []
    return out


def batch_iter(examples: Sequence[Example], batch_size: int, seed: int, cycle: bool = False) -> Iterator[list[Example]]:
    """Shuffled batches; a fresh permutation every pass when cycling."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not examples:
        return
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(len(examples))
        for i in range(0, len(order), batch_size):
            yield [examples[j] for j in order[i : i + batch_size]]
        if not cycle:
            return


def tokens_array(examples: Sequence[Example], max_len: int) -> np.ndarray:
    out = np.full((len(examples), max_len), PAD_ID, dtype=np.int64)
    for i, ex in enumerate(examples):
        out[i, : len(ex.tokens)] = ex.tokens
    return out


def labels_array(examples: Sequence[Example]) -> np.ndarray:
    return np.array([ex.label for ex in examples], dtype=np.int64)
