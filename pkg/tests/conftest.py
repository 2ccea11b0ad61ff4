import json
from pathlib import Path

import numpy as np
import pytest

from halluc_probe.model import Engine, ModelConfig, random_weights
from halluc_probe.tiny import synthetic_corpus, tiny_config

DATA = Path(__file__).parent / "data"


def load_golden(name):
    return json.loads((DATA / name).read_text())


@pytest.fixture(scope="session")
def tiny_engine():
    config = tiny_config()
    return Engine(config, random_weights(config, seed=0))


@pytest.fixture(scope="session")
def ortho_engine():
    # hidden == vocab so the unembedding can be a full orthonormal basis
    config = ModelConfig(
        n_layers=1, hidden_size=256, n_heads=4, head_dim=64, vocab_size=256, ffn_hidden=256, max_seq_len=64
    )
    return Engine(config, random_weights(config, seed=3, orthonormal_unembedding=True))


@pytest.fixture(scope="session")
def corpus():
    return synthetic_corpus(12, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def verdict(number, ok, detail):
    """Record and print one acceptance line, then fail the test if ``ok`` is false."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
