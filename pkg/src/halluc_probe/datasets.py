"""Load TruthfulQA-, HaluEval- and generic-shaped QA files into QASample lists."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

from .probe import ProbeError, QASample

log = logging.getLogger(__name__)

Format = Literal["truthfulqa_csv", "halueval_jsonl", "generic_jsonl"]
FORMATS = ("truthfulqa_csv", "halueval_jsonl", "generic_jsonl")

MASK64 = (1 << 64) - 1


class DatasetError(ValueError):
    pass


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


class XorShift64Star:
    """xorshift64* seeded through splitmix64; bit-identical on every platform."""

    def __init__(self, seed: int):
        _, state = splitmix64(seed & MASK64)
        self.state = state or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection of the biased low range."""
        if n < 1:
            raise ValueError("n must be >= 1")
        threshold = (1 << 64) % n
        while True:
            r = self.next_u64()
            if r >= threshold:
                return r % n


def subsample_indices(size: int, k: int, seed: int) -> list[int]:
    """Partial Fisher-Yates selection of ``k`` of ``range(size)``, returned in ascending order."""
    if k > size:
        raise DatasetError(f"sample_n {k} exceeds dataset size {size}")
    if k == size:
        return list(range(size))
    rng = XorShift64Star(seed)
    idx = list(range(size))
    for i in range(k):
        j = i + rng.below(size - i)
        idx[i], idx[j] = idx[j], idx[i]
    return sorted(idx[:k])


@dataclass(frozen=True)
class DatasetSpec:
    path: str
    format: Format = "generic_jsonl"
    category_filter: Literal["adversarial", "non_adversarial"] | None = None
    sample_n: int | None = None
    seed: int = 0
    correct_column: str = "Best Answer"
    incorrect_column: str = "Incorrect Answers"


@dataclass
class LoadReport:
    samples: list[QASample]
    rejected: int
    total_rows: int


def _jsonl_rows(text: str, path: str):
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from None
        if not isinstance(row, dict):
            raise DatasetError(f"{path}:{lineno}: expected a JSON object")
        yield lineno, row


def _parse_generic(text: str, path: str) -> tuple[list[QASample], int, int]:
    out, rejected, total = [], 0, 0
    for lineno, row in _jsonl_rows(text, path):
        total += 1
        knowledge = row.get("knowledge")
        adversarial = row.get("adversarial")
        try:
            if knowledge is not None and not isinstance(knowledge, str):
                raise ProbeError("knowledge must be a string")
            if adversarial is not None and not isinstance(adversarial, bool):
                raise ProbeError("adversarial must be a boolean")
            sample = QASample(
                id=str(row.get("id", f"line-{lineno}")),
                question=_text(row.get("question")),
                correct_answer=_text(row.get("correct_answer")),
                hallucinated_answer=_text(row.get("hallucinated_answer")),
                knowledge=knowledge,
                adversarial=adversarial,
            )
        except ProbeError as exc:
            log.warning("%s:%d: rejected row: %s", path, lineno, exc)
            rejected += 1
            continue
        out.append(sample)
    return out, rejected, total


def _parse_halueval(text: str, path: str) -> tuple[list[QASample], int, int]:
    out, rejected, total = [], 0, 0
    for lineno, row in _jsonl_rows(text, path):
        total += 1
        try:
            sample = QASample(
                id=str(row.get("id", f"halueval-{total - 1}")),
                question=_text(row.get("question")),
                correct_answer=_text(row.get("right_answer")),
                hallucinated_answer=_text(row.get("hallucinated_answer")),
                knowledge=_text(row.get("knowledge")) or None,
            )
        except ProbeError as exc:
            log.warning("%s:%d: rejected row: %s", path, lineno, exc)
            rejected += 1
            continue
        out.append(sample)
    return out, rejected, total


def _parse_truthfulqa(text: str, path: str, spec: DatasetSpec) -> tuple[list[QASample], int, int]:
    reader = csv.DictReader(io.StringIO(text, newline=""))
    needed = {"Type", "Question", spec.correct_column, spec.incorrect_column}
    missing = needed - set(reader.fieldnames or ())
    if missing:
        raise DatasetError(f"{path}: missing columns {sorted(missing)}")
    out, rejected, total = [], 0, 0
    try:
        for row in reader:
            total += 1
            # first listed incorrect answer forms the hallucinated input
            incorrect = [a.strip() for a in (row[spec.incorrect_column] or "").split(";")]
            kind = (row["Type"] or "").strip().lower()
            try:
                if kind not in ("adversarial", "non-adversarial"):
                    raise ProbeError(f"unknown Type {row['Type']!r}")
                sample = QASample(
                    id=f"tqa-{total - 1}",
                    question=_text(row["Question"]),
                    correct_answer=_text(row[spec.correct_column]),
                    hallucinated_answer=incorrect[0],
                    adversarial=kind == "adversarial",
                )
            except ProbeError as exc:
                log.warning("%s:%d: rejected row: %s", path, reader.line_num, exc)
                rejected += 1
                continue
            out.append(sample)
    except csv.Error as exc:
        raise DatasetError(f"{path}:{reader.line_num}: CSV parse failure: {exc}") from None
    return out, rejected, total


def _text(value) -> str:
    if value is None:
        return ""
    if not isinstance(value, str):
        raise ProbeError(f"expected a string, got {type(value).__name__}")
    return value


def load_report(spec: DatasetSpec) -> LoadReport:
    if spec.format not in FORMATS:
        raise DatasetError(f"unknown dataset format {spec.format!r}")
    path = str(spec.path)
    if not os.path.isfile(path):
        raise DatasetError(f"dataset file not found: {path}")
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise DatasetError(f"{path}: not valid UTF-8 ({exc})") from None

    if spec.format == "truthfulqa_csv":
        samples, rejected, total = _parse_truthfulqa(text, path, spec)
    elif spec.format == "halueval_jsonl":
        samples, rejected, total = _parse_halueval(text, path)
    else:
        samples, rejected, total = _parse_generic(text, path)
    if rejected:
        log.warning("%s: rejected %d of %d rows", path, rejected, total)

    if spec.category_filter is not None:
        if spec.category_filter not in ("adversarial", "non_adversarial"):
            raise DatasetError(f"unknown category filter {spec.category_filter!r}")
        if any(s.adversarial is None for s in samples):
            raise DatasetError(f"{path}: category filter needs adversarial labels on every sample")
        want = spec.category_filter == "adversarial"
        samples = [s for s in samples if s.adversarial == want]

    if spec.sample_n is not None:
        if spec.sample_n < 0:
            raise DatasetError("sample_n must be >= 0")
        samples = [samples[i] for i in subsample_indices(len(samples), spec.sample_n, spec.seed)]
    return LoadReport(samples, rejected, total)


def load(spec: DatasetSpec) -> list[QASample]:
    return load_report(spec).samples


def write_generic_jsonl(path: str | os.PathLike, samples: list[QASample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            row = {
                "id": s.id,
                "question": s.question,
                "correct_answer": s.correct_answer,
                "hallucinated_answer": s.hallucinated_answer,
            }
            if s.knowledge is not None:
                row["knowledge"] = s.knowledge
            if s.adversarial is not None:
                row["adversarial"] = s.adversarial
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
