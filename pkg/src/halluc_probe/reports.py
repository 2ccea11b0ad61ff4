"""Machine-readable outputs. Every file is written once via temp-file + rename."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

from .directions import ProjectionRecord, VocabProjection
from .intervention import EffectSizeRecord, SweepResult
from .probe import AwarenessRecord

AWARENESS_HEADER = ("sample_id", "cos_halluc", "cos_corr", "awareness", "strategy", "knowledge_included")
PROJECTION_HEADER = ("sample_id", "p_h", "p_c", "awareness")
SWEEP_HEADER = ("layer_threshold", "mean_diff", "ci_halfwidth", "n")
EFFECT_HEADER = ("sample_id", "layer_threshold", "e_halluc", "e_corr", "difference")
TOKENS_HEADER = ("direction", "rank", "token_id", "token", "score")
STEER_KEYS = ("id", "question", "original", "adjusted", "true_answer")


def fmt(x: float) -> str:
    return f"{x:.9g}"


def write_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def awareness_csv(records: Sequence[AwarenessRecord], strategy: str, knowledge: bool) -> str:
    flag = "true" if knowledge else "false"
    return _csv(
        AWARENESS_HEADER,
        ((r.sample_id, fmt(r.cos_halluc), fmt(r.cos_corr), fmt(r.awareness), strategy, flag) for r in records),
    )


def projection_csv(records: Sequence[ProjectionRecord], awareness: dict[str, float]) -> str:
    return _csv(
        PROJECTION_HEADER,
        ((r.sample_id, fmt(r.p_h), fmt(r.p_c), fmt(awareness[r.sample_id])) for r in records),
    )


def sweep_csv(result: SweepResult) -> str:
    return _csv(SWEEP_HEADER, ((t, fmt(m), fmt(h), n) for t, m, h, n in result.rows()))


def effect_csv(records: Sequence[EffectSizeRecord]) -> str:
    return _csv(
        EFFECT_HEADER,
        ((r.sample_id, r.layer_threshold, fmt(r.e_halluc), fmt(r.e_corr), fmt(r.difference)) for r in records),
    )


def tokens_csv(tables: dict[str, VocabProjection]) -> str:
    rows = []
    for name, proj in tables.items():
        for rank, (tid, tok, score) in enumerate(proj.ranked, start=1):
            rows.append((name, rank, tid, tok, fmt(score)))
    return _csv(TOKENS_HEADER, rows)


def steer_jsonl(rows: Sequence[dict]) -> str:
    lines = []
    for row in rows:
        ordered = {k: row[k] for k in STEER_KEYS if k in row}
        lines.append(json.dumps(ordered, ensure_ascii=False))
    return "".join(line + "\n" for line in lines)
