import numpy as np
import pytest

from layerprune.encoder import EncoderConfig, TokenBatch
from layerprune.fixtures import toy_model


@pytest.fixture
def toy():
    return toy_model(seed=0)


@pytest.fixture
def toy64():
    return toy_model(seed=0, dtype=np.float64)


@pytest.fixture
def tiny_cfg():
    return EncoderConfig(num_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=12,
                         max_positions=6, type_vocab_size=2, ln_epsilon=1e-5)


def random_batch(cfg, B, T, seed, pad=True, labels=None):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, cfg.vocab_size, size=(B, T))
    mask = np.ones((B, T), dtype=bool)
    if pad:
        lengths = rng.integers(2, T + 1, size=B)
        mask = np.arange(T)[None, :] < lengths[:, None]
    lab = None if labels is None else rng.integers(0, labels, size=B)
    return TokenBatch(ids, mask, lab)


@pytest.fixture
def make_batch():
    return random_batch


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    if report.when == "call":
        item.call_failed = report.failed
    return report
