"""Built-in oracle checks run by ``halluc-probe selfcheck``."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .directions import pca_first_component
from .model import AttentionBlockSpec, Engine, ModelConfig, random_weights
from .stats import student_t_sf


def t_sf_closed_form(t: float, df: int) -> float:
    """Upper tail of Student's t for integer df via the finite trigonometric series.

    Independent of the incomplete-beta route; loses relative accuracy in far tails.
    """
    theta = math.atan(abs(t) / math.sqrt(df))
    s, c = math.sin(theta), math.cos(theta)
    if df % 2:
        acc, term = 0.0, c
        for k in range(1, (df - 1) // 2 + 1):
            if k > 1:
                term *= c * c * (2 * k - 2) / (2 * k - 1)
            acc += term
        central = 2.0 / math.pi * (theta + (s * acc if df > 1 else 0.0))
    else:
        acc, term = 1.0, 1.0
        for k in range(1, df // 2):
            term *= c * c * (2 * k - 1) / (2 * k)
            acc += term
        central = s * acc
    upper = (1.0 - central) / 2.0
    return upper if t >= 0 else 1.0 - upper


def check_pca(n_datasets: int = 50, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 1.0
    for _ in range(n_datasets):
        n, h = int(rng.integers(3, 101)), int(rng.integers(2, 33))
        x = rng.standard_normal((n, h)) * rng.uniform(0.1, 3.0, size=h)
        d, _ = pca_first_component(x)
        _, vecs = np.linalg.eigh(np.cov(x, rowvar=False))
        worst = min(worst, abs(float(d @ vecs[:, -1])))
    return worst >= 1 - 1e-6, f"min |cos| vs eigh = {worst:.12f}"


def check_t_cdf() -> tuple[bool, str]:
    worst = 0.0
    for df in (1, 2, 3, 5, 10, 30):
        for t in np.linspace(-5.0, 5.0, 41):
            ref = t_sf_closed_form(float(t), df)
            worst = max(worst, abs(student_t_sf(float(t), df) - ref) / ref)
    return worst < 1e-9, f"max relative error vs closed form = {worst:.3e}"


def check_blocking_zero(seed: int = 0) -> tuple[bool, str]:
    config = ModelConfig(
        n_layers=2, hidden_size=32, n_heads=4, head_dim=8, vocab_size=256, ffn_hidden=64, max_seq_len=64
    )
    engine = Engine(config, random_weights(config, seed))
    tokens = engine.tokenize("Question: Q?\nAnswer: A")
    spec = AttentionBlockSpec(config.n_layers, len(tokens) - 1, frozenset(range(0, 10)))
    plain = engine.forward(tokens)
    blocked = engine.forward(tokens, block=spec)
    same = np.array_equal(plain.logits, blocked.logits) and np.array_equal(plain.final_hidden, blocked.final_hidden)
    return same, "threshold = n_layers leaves outputs bitwise unchanged" if same else "outputs changed"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "pca_vs_eigensolver": check_pca,
    "t_cdf_vs_closed_form": check_t_cdf,
    "blocking_zero_case": check_blocking_zero,
}


def run_all() -> list[tuple[str, bool, str]]:
    return [(name, *fn()) for name, fn in CHECKS.items()]
