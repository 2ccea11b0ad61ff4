"""Paired correct/hallucinated inputs, the three hidden states, and awareness scores."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .model import ContextOverflowError, Engine, HiddenState
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

ENCOURAGING_PROMPT = "You excel in answering the following question with expertise"
DISCOURAGING_PROMPT = "You have limited expertise in answering the following question"

Anchor = Literal["answer_cue", "question"]


class ProbeError(ValueError):
    pass


class DegenerateStateError(ProbeError):
    """A hidden state with zero norm, for which cosine similarity is undefined."""


@dataclass(frozen=True)
class QASample:
    id: str
    question: str
    correct_answer: str
    hallucinated_answer: str
    knowledge: str | None = None
    adversarial: bool | None = None

    def __post_init__(self):
        for name in ("question", "correct_answer", "hallucinated_answer"):
            if not getattr(self, name).strip():
                raise ProbeError(f"sample {self.id!r}: {name} must be non-empty")

    def swapped(self) -> "QASample":
        return QASample(
            self.id, self.question, self.hallucinated_answer, self.correct_answer, self.knowledge, self.adversarial
        )


@dataclass(frozen=True)
class PromptStrategy:
    kind: Literal["none", "pro", "anti"] = "none"
    encouraging_text: str = ENCOURAGING_PROMPT
    discouraging_text: str = DISCOURAGING_PROMPT

    def __post_init__(self):
        if self.kind not in ("none", "pro", "anti"):
            raise ProbeError(f"unknown prompt strategy {self.kind!r}")

    def prompts(self) -> tuple[str | None, str | None]:
        """(hallucinated-branch prompt, correct-branch prompt)."""
        if self.kind == "pro":
            return self.discouraging_text, self.encouraging_text
        if self.kind == "anti":
            return self.encouraging_text, self.discouraging_text
        return None, None


@dataclass(frozen=True)
class Branch:
    """One tokenized input and the positions of its question segment.

    ``question_start`` is the first token of ``Question:``; ``question_end``
    is the s1 anchor (last token of ``Answer:`` by default).
    """

    tokens: tuple[int, ...]
    question_start: int
    question_end: int

    @property
    def last(self) -> int:
        return len(self.tokens) - 1

    @property
    def question_positions(self) -> range:
        return range(self.question_start, self.question_end + 1)


@dataclass(frozen=True)
class ProbeInputs:
    sample_id: str
    hallucinated: Branch
    correct: Branch

    @property
    def shared_prefix(self) -> bool:
        """Both branches carry identical tokens through the s1 anchor."""
        h, c = self.hallucinated, self.correct
        return h.question_end == c.question_end and h.tokens[: h.question_end + 1] == c.tokens[: c.question_end + 1]

    @property
    def hallucinated_tokens(self) -> tuple[int, ...]:
        return self.hallucinated.tokens

    @property
    def correct_tokens(self) -> tuple[int, ...]:
        return self.correct.tokens

    @property
    def question_end_index(self) -> int:
        if self.hallucinated.question_end != self.correct.question_end:
            raise ProbeError("branches anchor s1 at different positions (per-branch prompts)")
        return self.hallucinated.question_end


def _branch(
    tokenizer: Tokenizer, context: str, question: str, answer: str, anchor: Anchor
) -> Branch:
    # segment-wise tokenization keeps token boundaries at segment edges
    ctx = tokenizer.encode(context) if context else []
    if anchor == "answer_cue":
        q_text = f"Question: {question}\nAnswer:"
        q_ids = tokenizer.encode(q_text)
        rest = tokenizer.encode(f" {answer}")
        end = len(ctx) + len(q_ids) - 1
    else:
        q_ids = tokenizer.encode(f"Question: {question}")
        cue = tokenizer.encode("\nAnswer:")
        rest = cue + tokenizer.encode(f" {answer}")
        end = len(ctx) + len(q_ids) - 1
    return Branch(tuple(ctx + q_ids + rest), len(ctx), end)


def build_inputs(
    sample: QASample,
    strategy: PromptStrategy | None = None,
    include_knowledge: bool = False,
    tokenizer: Tokenizer | None = None,
    anchor: Anchor = "answer_cue",
) -> ProbeInputs:
    """Tokenize the hallucinated and correct inputs for ``sample``.

    Text layout per branch: ``[knowledge\\n][prompt\\n]Question: q\\nAnswer: a``.
    """
    if tokenizer is None:
        raise ProbeError("a tokenizer is required")
    strategy = strategy or PromptStrategy()
    if include_knowledge and not sample.knowledge:
        raise ProbeError(f"sample {sample.id!r}: knowledge requested but absent")
    knowledge = f"{sample.knowledge}\n" if include_knowledge else ""
    p_h, p_c = strategy.prompts()
    ctx_h = knowledge + (f"{p_h}\n" if p_h else "")
    ctx_c = knowledge + (f"{p_c}\n" if p_c else "")

    halluc = _branch(tokenizer, ctx_h, sample.question, sample.hallucinated_answer, anchor)
    correct = _branch(tokenizer, ctx_c, sample.question, sample.correct_answer, anchor)
    inputs = ProbeInputs(sample.id, halluc, correct)
    if ctx_h == ctx_c and not inputs.shared_prefix:
        raise ProbeError(f"sample {sample.id!r}: tokenized prefixes differ between branches")
    return inputs


def branch_text(
    sample: QASample, strategy: PromptStrategy | None, include_knowledge: bool, hallucinated: bool
) -> str:
    """Untokenized text of one branch, for inspection and round-trip checks."""
    strategy = strategy or PromptStrategy()
    p_h, p_c = strategy.prompts()
    prompt = p_h if hallucinated else p_c
    parts = []
    if include_knowledge and sample.knowledge:
        parts.append(sample.knowledge + "\n")
    if prompt:
        parts.append(prompt + "\n")
    answer = sample.hallucinated_answer if hallucinated else sample.correct_answer
    parts.append(f"Question: {sample.question}\nAnswer: {answer}")
    return "".join(parts)


@dataclass(frozen=True)
class HiddenTriple:
    """s1 (question anchor), s2 (end of hallucinated input), s3 (end of correct input).

    When the two branches carry different strategy prompts, s1 is taken per
    branch: ``s1`` from the hallucinated input and ``s1_correct`` from the
    correct one. Otherwise ``s1_correct`` is None and ``s1`` serves both.
    """

    sample_id: str
    s1: HiddenState
    s2: HiddenState
    s3: HiddenState
    s1_correct: HiddenState | None = None

    @property
    def s1_for_correct(self) -> HiddenState:
        return self.s1_correct if self.s1_correct is not None else self.s1


def extract_triple(engine: Engine, inputs: ProbeInputs) -> HiddenTriple:
    last_layer = engine.config.n_layers - 1
    h, c = inputs.hallucinated, inputs.correct
    out_h = engine.forward(h.tokens, capture={(last_layer, h.question_end), (last_layer, h.last)}, logits=False)
    out_c = engine.forward(c.tokens, capture={(last_layer, c.question_end), (last_layer, c.last)}, logits=False)
    s1 = out_h.trace[(last_layer, h.question_end)]
    s1_c = None if inputs.shared_prefix else out_c.trace[(last_layer, c.question_end)]
    return HiddenTriple(
        inputs.sample_id,
        s1=s1,
        s2=out_h.trace[(last_layer, h.last)],
        s3=out_c.trace[(last_layer, c.last)],
        s1_correct=s1_c,
    )


@dataclass(frozen=True)
class AwarenessRecord:
    sample_id: str
    cos_halluc: float
    cos_corr: float
    awareness: float


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    na = math.sqrt(float(a64 @ a64))
    nb = math.sqrt(float(b64 @ b64))
    if na == 0.0 or nb == 0.0:
        raise DegenerateStateError("cosine similarity of a zero-norm hidden state")
    return min(1.0, max(-1.0, float(a64 @ b64) / (na * nb)))


def awareness(triple: HiddenTriple) -> AwarenessRecord:
    cos_h = cosine(triple.s1.values, triple.s2.values)
    cos_c = cosine(triple.s1_for_correct.values, triple.s3.values)
    return AwarenessRecord(triple.sample_id, cos_h, cos_c, cos_h - cos_c)


@dataclass(frozen=True)
class SkipRecord:
    sample_id: str
    reason: str


@dataclass
class ProbeRun:
    records: list[AwarenessRecord]
    triples: list[HiddenTriple]
    inputs: list[ProbeInputs]
    skipped: list[SkipRecord] = field(default_factory=list)


def run_probe_full(
    engine: Engine,
    samples: Sequence[QASample],
    strategy: PromptStrategy | None = None,
    include_knowledge: bool = False,
    anchor: Anchor = "answer_cue",
) -> ProbeRun:
    """Probe every sample in order; over-length inputs are skipped and reported."""
    if not samples:
        raise ProbeError("no samples to probe")
    run = ProbeRun([], [], [])
    limit = engine.config.max_seq_len
    for sample in samples:
        inputs = build_inputs(sample, strategy, include_knowledge, engine.tokenizer, anchor)
        longest = max(len(inputs.hallucinated.tokens), len(inputs.correct.tokens))
        if longest > limit:
            reason = f"input length {longest} exceeds max_seq_len {limit}"
            log.warning("skipping sample %s: %s", sample.id, reason)
            run.skipped.append(SkipRecord(sample.id, reason))
            continue
        try:
            triple = extract_triple(engine, inputs)
        except ContextOverflowError as exc:
            run.skipped.append(SkipRecord(sample.id, str(exc)))
            continue
        run.inputs.append(inputs)
        run.triples.append(triple)
        run.records.append(awareness(triple))
    if not run.records:
        raise ProbeError(f"all {len(samples)} samples were skipped")
    return run


def run_probe(
    engine: Engine,
    samples: Sequence[QASample],
    strategy: PromptStrategy | None = None,
    include_knowledge: bool = False,
) -> list[AwarenessRecord]:
    return run_probe_full(engine, samples, strategy, include_knowledge).records
