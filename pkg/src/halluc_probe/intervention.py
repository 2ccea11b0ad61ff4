"""Attention-blocking effect sizes, layer sweeps and steered generation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import DEFAULT_ALPHA, DEFAULT_MASK_VALUE, AttentionBlockSpec, Engine, ModelError, SteeringSpec
from .probe import Branch, ProbeInputs

DEFAULT_THRESHOLDS = (0, 5, 10, 15, 20, 25, 30)
Z_95 = 1.96


def l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance; float32 inputs are widened first, so every square
    is exact and the sum is correctly rounded."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return math.sqrt(math.fsum((diff * diff).tolist()))


def question_block(branch: Branch, layer_threshold: int, mask_value: float = DEFAULT_MASK_VALUE) -> AttentionBlockSpec:
    """Block the last token of ``branch`` from attending to its question segment."""
    return AttentionBlockSpec(layer_threshold, branch.last, frozenset(branch.question_positions), mask_value)


@dataclass(frozen=True)
class EffectSizeRecord:
    sample_id: str
    layer_threshold: int
    e_halluc: float
    e_corr: float

    @property
    def difference(self) -> float:
        return self.e_corr - self.e_halluc


def _check_threshold(engine: Engine, layer_threshold: int) -> None:
    if not 0 <= layer_threshold <= engine.config.n_layers:
        raise ModelError(f"layer_threshold {layer_threshold} outside [0, {engine.config.n_layers}]")


def _branch_effects(engine: Engine, branch: Branch, thresholds: Sequence[int]) -> list[float]:
    blocks = [None] + [question_block(branch, t) for t in thresholds]
    base, *blocked = engine.last_position_variants(branch.tokens, blocks)
    return [l2_distance(base, b) for b in blocked]


def effect_size(engine: Engine, inputs: ProbeInputs, layer_threshold: int) -> EffectSizeRecord:
    _check_threshold(engine, layer_threshold)
    return EffectSizeRecord(
        inputs.sample_id,
        layer_threshold,
        e_halluc=_branch_effects(engine, inputs.hallucinated, [layer_threshold])[0],
        e_corr=_branch_effects(engine, inputs.correct, [layer_threshold])[0],
    )


@dataclass
class SweepResult:
    thresholds: list[int]
    mean_diff: list[float]
    ci_halfwidth: list[float]
    n: int
    records: list[EffectSizeRecord] = field(default_factory=list, repr=False)

    def rows(self):
        for thr, mean, half in zip(self.thresholds, self.mean_diff, self.ci_halfwidth):
            yield thr, mean, half, self.n


def layer_sweep(
    engine: Engine, inputs: Sequence[ProbeInputs], thresholds: Sequence[int] = DEFAULT_THRESHOLDS
) -> SweepResult:
    """Mean (e_corr - e_halluc) per threshold with a normal-approximation 95% CI."""
    if not inputs:
        raise ValueError("layer sweep needs at least one sample")
    thresholds = [int(t) for t in thresholds]
    if not thresholds:
        raise ValueError("no thresholds given")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError(f"thresholds must be strictly increasing: {thresholds}")
    for thr in thresholds:
        _check_threshold(engine, thr)

    per_threshold: dict[int, list[EffectSizeRecord]] = {t: [] for t in thresholds}
    for item in inputs:
        e_h = _branch_effects(engine, item.hallucinated, thresholds)
        e_c = _branch_effects(engine, item.correct, thresholds)
        for thr, eh, ec in zip(thresholds, e_h, e_c):
            per_threshold[thr].append(EffectSizeRecord(item.sample_id, thr, e_halluc=eh, e_corr=ec))

    n = len(inputs)
    means, halves, records = [], [], []
    for thr in thresholds:
        recs = per_threshold[thr]
        records.extend(recs)
        diffs = np.array([r.difference for r in recs], dtype=np.float64)
        means.append(float(diffs.mean()))
        sd = float(diffs.std(ddof=1)) if n > 1 else 0.0
        halves.append(Z_95 * sd / math.sqrt(n))
    return SweepResult(thresholds, means, halves, n, records)


def steer_generate(
    engine: Engine,
    prompt: str,
    direction: np.ndarray,
    alpha: float = DEFAULT_ALPHA,
    max_new_tokens: int = 32,
    eos_id: int | None = None,
) -> tuple[str, str]:
    """Greedy completions of ``prompt`` without and with the ``alpha * direction`` offset."""
    direction = np.asarray(direction)
    if direction.shape != (engine.config.hidden_size,):
        raise ModelError(f"direction length {direction.size} != hidden_size {engine.config.hidden_size}")
    ids = engine.tokenize(prompt)
    original = engine.generate(ids, max_new_tokens, eos_id=eos_id)
    adjusted = engine.generate(ids, max_new_tokens, SteeringSpec(direction, alpha), eos_id=eos_id)
    return engine.detokenize(original), engine.detokenize(adjusted)
