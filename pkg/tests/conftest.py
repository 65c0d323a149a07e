import numpy as np
import pytest

from psnet.model import ModelConfig, init_model


def tiny_config(num_layers=1, seed=0, **kw):
    base = dict(num_layers=num_layers, hidden_dim=8, num_heads=2, ff_dim=12, vocab_size=16,
                max_seq_len=5, num_classes=3, seed=seed)
    base.update(kw)
    return ModelConfig(**base)


def spread(model, scale=0.3, seed=123):
    """Inflate weights beyond the 0.02 init so gradients are well above noise."""
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.value = p.value + rng.normal(0.0, scale, size=p.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_teacher():
    return spread(init_model(tiny_config(2, seed=1)), seed=11)


@pytest.fixture
def tiny_student():
    return spread(init_model(tiny_config(1, seed=2)), seed=12)


@pytest.fixture
def tokens(rng):
    return rng.integers(1, 16, size=(3, 5))
