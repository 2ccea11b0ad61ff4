"""Transition vectors, their first principal directions, vocabulary projection
and per-sample scalar projections."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from .probe import HiddenTriple
from .tensorfile import read_tensors, write_tensors

log = logging.getLogger(__name__)

PCA_TOL = 1e-10
PCA_MAX_ITER = 10_000
SIGN_CONVENTION = "mean_projection_nonneg"


class DegenerateDataError(ValueError):
    pass


@dataclass(frozen=True)
class TransitionVector:
    sample_id: str
    kind: Literal["correct", "hallucinated"]
    v: np.ndarray  # float64


def transition_vectors(triples: Sequence[HiddenTriple]) -> list[TransitionVector]:
    """v_corr = s1 - s3 and v_halluc = s1 - s2 for every triple.

    Differences are formed in float64, where the difference of two float32
    values is exact for all but extreme exponent gaps.
    """
    if not triples:
        raise ValueError("no triples given")
    out: list[TransitionVector] = []
    for t in triples:
        s1 = t.s1.values.astype(np.float64)
        s1_c = t.s1_for_correct.values.astype(np.float64)
        s2 = t.s2.values.astype(np.float64)
        s3 = t.s3.values.astype(np.float64)
        if not (s1.shape == s2.shape == s3.shape == s1_c.shape):
            raise ValueError(f"sample {t.sample_id!r}: hidden state shapes differ")
        out.append(TransitionVector(t.sample_id, "correct", s1_c - s3))
        out.append(TransitionVector(t.sample_id, "hallucinated", s1 - s2))
    return out


def pca_first_component(vectors: Sequence[np.ndarray] | np.ndarray) -> tuple[np.ndarray, float]:
    """Top principal direction of ``vectors`` by power iteration.

    The data are mean-centred; the covariance uses an n-1 denominator and is
    applied implicitly as X^T (X v) / (n-1). Iteration stops when successive
    unit iterates differ by less than 1e-10 in L2 (at most 10,000 steps).
    The sign is chosen so that the source vectors' mean projection is >= 0.

    Returns (unit direction, explained variance = top eigenvalue).
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("vectors must form a 2-D array")
    n = x.shape[0]
    if n < 2:
        raise DegenerateDataError(f"PCA needs at least 2 vectors, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("vectors contain non-finite values")
    xc = x - x.mean(axis=0)
    scale = float(np.max(np.abs(x)))
    if np.all(x == x[0]) or float(np.max(np.abs(xc))) <= 8 * np.finfo(np.float64).eps * scale:
        raise DegenerateDataError("zero covariance: all vectors are identical")

    def cov_apply(v: np.ndarray) -> np.ndarray:
        return xc.T @ (xc @ v) / (n - 1)

    # start from the centred row of largest norm; it cannot lie in the null space
    v = xc[int(np.argmax(np.einsum("ij,ij->i", xc, xc)))]
    v = v / np.linalg.norm(v)
    for _ in range(PCA_MAX_ITER):
        w = cov_apply(v)
        w_norm = np.linalg.norm(w)
        nxt = w / w_norm
        if np.linalg.norm(nxt - v) < PCA_TOL:
            v = nxt
            break
        v = nxt
    else:
        log.warning("power iteration hit %d iterations without converging", PCA_MAX_ITER)
    v = v / np.linalg.norm(v)
    eigenvalue = float(v @ cov_apply(v))
    if float(np.sum(x @ v)) < 0:
        v = -v
    return v, eigenvalue


@dataclass(frozen=True)
class DirectionPair:
    d_corr: np.ndarray
    d_halluc: np.ndarray
    explained_variance_corr: float
    explained_variance_halluc: float
    n_samples: int = 0


def fit_directions(vectors: Sequence[TransitionVector]) -> DirectionPair:
    corr = [tv.v for tv in vectors if tv.kind == "correct"]
    hall = [tv.v for tv in vectors if tv.kind == "hallucinated"]
    d_corr, ev_corr = pca_first_component(np.array(corr))
    d_hall, ev_hall = pca_first_component(np.array(hall))
    return DirectionPair(d_corr, d_hall, ev_corr, ev_hall, len(corr))


def dot_fixed_order(a: np.ndarray, b: np.ndarray) -> float:
    """Left-to-right float64 accumulation of a . b, rounded to float32 at the end."""
    prod = np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64)
    if prod.size == 0:
        return 0.0
    # cumsum adds strictly left to right
    return float(np.float32(np.cumsum(prod)[-1]))


@dataclass(frozen=True)
class ProjectionRecord:
    sample_id: str
    p_h: float
    p_c: float


def project_samples(vectors: Sequence[TransitionVector], pair: DirectionPair) -> list[ProjectionRecord]:
    by_id: dict[str, dict[str, np.ndarray]] = {}
    for tv in vectors:
        by_id.setdefault(tv.sample_id, {})[tv.kind] = tv.v
    out = []
    for sid, kinds in by_id.items():
        missing = {"correct", "hallucinated"} - set(kinds)
        if missing:
            raise ValueError(f"sample {sid!r} lacks a {sorted(missing)[0]} transition vector")
        out.append(
            ProjectionRecord(
                sid,
                p_h=dot_fixed_order(kinds["hallucinated"], pair.d_halluc),
                p_c=dot_fixed_order(kinds["correct"], pair.d_corr),
            )
        )
    return out


@dataclass(frozen=True)
class VocabProjection:
    ranked: list[tuple[int, str, float]]


def vocab_project(
    direction: np.ndarray,
    unembedding: np.ndarray,
    k: int = 10,
    token_string: Callable[[int], str] | None = None,
) -> VocabProjection:
    """Top-``k`` tokens by U . direction, descending; ties go to the lower id."""
    u = np.asarray(unembedding)
    d = np.asarray(direction, dtype=np.float64).reshape(-1)
    if u.ndim != 2 or u.shape[1] != d.size:
        raise ValueError(f"direction length {d.size} does not match unembedding width {u.shape[-1]}")
    if not 1 <= k <= u.shape[0]:
        raise ValueError(f"k must lie in [1, {u.shape[0]}], got {k}")
    scores = u.astype(np.float64) @ d
    ids = np.arange(u.shape[0])
    order = np.lexsort((ids, -scores))[:k]
    name = token_string or str
    return VocabProjection([(int(i), name(int(i)), float(scores[i])) for i in order])


def sidecar_path(path: str | os.PathLike) -> Path:
    return Path(path).with_suffix(".json")


def save_directions(path: str | os.PathLike, pair: DirectionPair) -> None:
    write_tensors(path, {"d_corr": pair.d_corr, "d_halluc": pair.d_halluc}, dtype="f32")
    meta = {
        "explained_variance_corr": pair.explained_variance_corr,
        "explained_variance_halluc": pair.explained_variance_halluc,
        "n_samples": pair.n_samples,
        "sign_convention": SIGN_CONVENTION,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_directions(path: str | os.PathLike) -> DirectionPair:
    tensors = read_tensors(path)
    for name in ("d_corr", "d_halluc"):
        if name not in tensors:
            raise ValueError(f"{path}: missing tensor {name!r}")
    meta_path = sidecar_path(path)
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    return DirectionPair(
        tensors["d_corr"].astype(np.float64),
        tensors["d_halluc"].astype(np.float64),
        float(meta.get("explained_variance_corr", math.nan)),
        float(meta.get("explained_variance_halluc", math.nan)),
        int(meta.get("n_samples", 0)),
    )
