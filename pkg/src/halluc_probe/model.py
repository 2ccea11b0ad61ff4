"""Deterministic LLaMA-style decoder with hidden-state capture, attention
blocking and final-state steering.

The forward pass is evaluated one position at a time against a key/value
cache. Every position therefore runs exactly the same sequence of array
operations, on arrays of exactly the same shapes, no matter how long the
full input is. That makes prefix invariance bitwise rather than approximate,
and makes cached generation bitwise-equal to a from-scratch forward.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Mapping, Sequence

import numpy as np

from .tensorfile import TensorFileError, read_tensors, write_tensors
from .tokenizer import ByteTokenizer, Tokenizer, load_tokenizer

DEFAULT_MASK_VALUE = -65504.0
DEFAULT_ALPHA = 100.0

F32 = np.float32


class ModelError(ValueError):
    """Invalid configuration, weights, or engine call."""


class ContextOverflowError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    hidden_size: int
    n_heads: int
    head_dim: int
    vocab_size: int
    ffn_hidden: int
    rope_theta: float = 10000.0
    norm_epsilon: float = 1e-5
    max_seq_len: int = 2048

    def __post_init__(self):
        for name in ("n_layers", "hidden_size", "n_heads", "head_dim", "vocab_size", "ffn_hidden", "max_seq_len"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ModelError(f"config.{name} must be an integer >= 1, got {value!r}")
        if self.hidden_size != self.n_heads * self.head_dim:
            raise ModelError(
                f"hidden_size ({self.hidden_size}) != n_heads ({self.n_heads}) * head_dim ({self.head_dim})"
            )
        if self.head_dim % 2:
            raise ModelError("head_dim must be even for rotary embeddings")
        if not (self.norm_epsilon > 0 and math.isfinite(self.norm_epsilon)):
            raise ModelError("norm_epsilon must be a positive finite number")
        if not (self.rope_theta > 0 and math.isfinite(self.rope_theta)):
            raise ModelError("rope_theta must be a positive finite number")

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        missing = names - set(raw)
        extra = set(raw) - names
        if missing or extra:
            raise ModelError(f"config fields mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        return cls(**{k: raw[k] for k in names})

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ModelError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ModelError(f"{path}: config does not parse: {exc}") from exc
        if not isinstance(raw, dict):
            raise ModelError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, f, v = config.hidden_size, config.ffn_hidden, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_embeddings": (v, h), "norm": (h,), "output": (v, h)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes[p + "attention.wq"] = (h, h)
        shapes[p + "attention.wk"] = (h, h)
        shapes[p + "attention.wv"] = (h, h)
        shapes[p + "attention.wo"] = (h, h)
        shapes[p + "feed_forward.w1"] = (f, h)
        shapes[p + "feed_forward.w2"] = (h, f)
        shapes[p + "feed_forward.w3"] = (f, h)
        shapes[p + "attention_norm"] = (h,)
        shapes[p + "ffn_norm"] = (h,)
    return shapes


class WeightStore(Mapping[str, np.ndarray]):
    """Immutable, validated mapping of tensor name to float32 array."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray]):
        shapes = expected_shapes(config)
        store: dict[str, np.ndarray] = {}
        for name, shape in shapes.items():
            if name not in tensors:
                raise ModelError(f"missing tensor {name!r}")
            arr = np.array(tensors[name], dtype=F32, copy=True)
            if arr.shape != shape:
                raise ModelError(f"tensor {name!r}: shape {arr.shape} != expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"tensor {name!r}: contains non-finite values")
            arr.setflags(write=False)
            store[name] = arr
        self._tensors = store

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    @property
    def unembedding(self) -> np.ndarray:
        return self._tensors["output"]


def load_model(config_path: str | os.PathLike, weights_path: str | os.PathLike) -> tuple[ModelConfig, WeightStore]:
    config = ModelConfig.load(config_path)
    if not os.path.isfile(weights_path):
        raise ModelError(f"weights file not found: {weights_path}")
    try:
        tensors = read_tensors(weights_path)
    except TensorFileError as exc:
        raise ModelError(str(exc)) from exc
    return config, WeightStore(config, tensors)


def save_model(
    config: ModelConfig,
    weights: Mapping[str, np.ndarray],
    config_path: str | os.PathLike,
    weights_path: str | os.PathLike,
    dtype: str = "f32",
) -> None:
    config.save(config_path)
    write_tensors(weights_path, weights, dtype=dtype)


def random_weights(config: ModelConfig, seed: int = 0, orthonormal_unembedding: bool = False) -> WeightStore:
    """Generic random weights for tests and demos.

    With ``orthonormal_unembedding`` the rows of the unembedding matrix are
    orthonormal, which needs ``vocab_size <= hidden_size``.
    """
    rng = np.random.default_rng(seed)
    h, f = config.hidden_size, config.ffn_hidden

    def gauss(shape, fan_in):
        return (rng.standard_normal(shape) / math.sqrt(fan_in)).astype(F32)

    tensors: dict[str, np.ndarray] = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith("norm"):
            tensors[name] = np.ones(shape, dtype=F32)
        elif name == "tok_embeddings":
            tensors[name] = rng.standard_normal(shape).astype(F32)
        elif name == "output":
            if orthonormal_unembedding:
                if config.vocab_size > h:
                    raise ModelError("orthonormal unembedding needs vocab_size <= hidden_size")
                q, _ = np.linalg.qr(rng.standard_normal((h, h)))
                tensors[name] = q[: config.vocab_size].astype(F32)
            else:
                tensors[name] = gauss(shape, h)
        elif name.endswith("w2"):
            tensors[name] = gauss(shape, f)
        else:
            tensors[name] = gauss(shape, h)
    return WeightStore(config, tensors)


@dataclass(frozen=True)
class HiddenState:
    values: np.ndarray
    layer: int
    position: int


ActivationTrace = dict  # (layer, position) -> HiddenState


@dataclass(frozen=True)
class AttentionBlockSpec:
    """Add ``mask_value`` to the pre-softmax scores from ``query_position``
    to each of ``key_positions`` in every head of every layer >= ``layer_threshold``."""

    layer_threshold: int
    query_position: int
    key_positions: frozenset[int]
    mask_value: float = DEFAULT_MASK_VALUE

    def __post_init__(self):
        object.__setattr__(self, "key_positions", frozenset(int(n) for n in self.key_positions))
        if self.layer_threshold < 0:
            raise ModelError("layer_threshold must be >= 0")
        if not self.mask_value < 0:
            raise ModelError("mask_value must be negative")
        bad = [n for n in self.key_positions if not 0 <= n < self.query_position]
        if bad:
            raise ModelError(f"blocked key positions must lie in [0, {self.query_position}): {sorted(bad)}")


@dataclass(frozen=True)
class SteeringSpec:
    vector: np.ndarray
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=F32).reshape(-1)
        if not np.all(np.isfinite(vec)):
            raise ModelError("steering vector must be finite")
        if not math.isfinite(self.alpha):
            raise ModelError("steering alpha must be finite")
        object.__setattr__(self, "vector", vec)

    def offset(self) -> np.ndarray:
        return F32(self.alpha) * self.vector


@dataclass
class AttentionMaps:
    """Per-layer, per-head attention for one forward pass.

    ``scores`` are the values fed to softmax (scaled, blocking mask
    included); ``probs`` are the softmax outputs. Non-causal entries hold
    -inf and 0 respectively.
    """

    scores: np.ndarray  # [n_layers, n_heads, d, d]
    probs: np.ndarray


@dataclass
class ForwardOutput:
    logits: np.ndarray | None  # [d, vocab_size]
    trace: ActivationTrace
    final_hidden: np.ndarray  # last layer residual at the last position
    attention: AttentionMaps | None = None


@dataclass
class _Layer:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    attn_norm: np.ndarray
    ffn_norm: np.ndarray


@dataclass
class _Cache:
    keys: np.ndarray  # [n_layers, capacity, n_heads, head_dim]
    values: np.ndarray
    length: int = 0


class Engine:
    """Inference engine over a shared, read-only (config, weights) pair.

    Calls are reentrant: all per-call state lives in a private cache.
    """

    def __init__(self, config: ModelConfig, weights: WeightStore, tokenizer: Tokenizer | None = None):
        self.config = config
        self.weights = weights
        self.tokenizer = tokenizer if tokenizer is not None else ByteTokenizer()
        if self.tokenizer.vocab_size > config.vocab_size:
            raise ModelError(
                f"tokenizer vocabulary ({self.tokenizer.vocab_size}) exceeds model vocab_size ({config.vocab_size})"
            )
        self._embed = weights["tok_embeddings"]
        self._norm = weights["norm"]
        self._unembed = weights["output"]
        self._layers = [
            _Layer(
                wq=weights[f"layers.{i}.attention.wq"],
                wk=weights[f"layers.{i}.attention.wk"],
                wv=weights[f"layers.{i}.attention.wv"],
                wo=weights[f"layers.{i}.attention.wo"],
                w1=weights[f"layers.{i}.feed_forward.w1"],
                w2=weights[f"layers.{i}.feed_forward.w2"],
                w3=weights[f"layers.{i}.feed_forward.w3"],
                attn_norm=weights[f"layers.{i}.attention_norm"],
                ffn_norm=weights[f"layers.{i}.ffn_norm"],
            )
            for i in range(config.n_layers)
        ]
        half = config.head_dim // 2
        inv_freq = 1.0 / (config.rope_theta ** (np.arange(half, dtype=np.float64) * 2.0 / config.head_dim))
        angles = np.outer(np.arange(config.max_seq_len, dtype=np.float64), inv_freq)
        self._cos = np.cos(angles).astype(F32)
        self._sin = np.sin(angles).astype(F32)
        self._scale = F32(1.0 / math.sqrt(config.head_dim))
        self._eps = F32(config.norm_epsilon)

    @classmethod
    def from_files(
        cls,
        config_path: str | os.PathLike,
        weights_path: str | os.PathLike,
        tokenizer_path: str | os.PathLike | None = None,
    ) -> "Engine":
        config, weights = load_model(config_path, weights_path)
        return cls(config, weights, load_tokenizer(tokenizer_path))

    # -- tokenization -----------------------------------------------------

    def tokenize(self, text: str) -> list[int]:
        return self.tokenizer.encode(text)

    def detokenize(self, tokens: Sequence[int]) -> str:
        return self.tokenizer.decode(tokens)

    # -- core ---------------------------------------------------------------

    def _check_tokens(self, tokens: Sequence[int]) -> list[int]:
        ids = [int(t) for t in tokens]
        if not ids:
            raise ModelError("token sequence is empty")
        if len(ids) > self.config.max_seq_len:
            raise ContextOverflowError(
                f"sequence length {len(ids)} exceeds max_seq_len {self.config.max_seq_len}"
            )
        for t in ids:
            if not 0 <= t < self.config.vocab_size:
                raise ModelError(f"token id {t} out of range [0, {self.config.vocab_size})")
        return ids

    def _new_cache(self, capacity: int) -> _Cache:
        c = self.config
        # position-major so per-step views never depend on capacity
        shape = (c.n_layers, capacity, c.n_heads, c.head_dim)
        return _Cache(np.zeros(shape, dtype=F32), np.zeros(shape, dtype=F32))

    def _rmsnorm(self, x: np.ndarray, weight: np.ndarray) -> np.ndarray:
        ms = np.mean(x * x, dtype=F32)
        return (x * (F32(1.0) / np.sqrt(ms + self._eps))) * weight

    def _rope(self, x: np.ndarray, pos: int) -> np.ndarray:
        # rotate-half convention; x: [n_heads, head_dim]
        half = self.config.head_dim // 2
        cos, sin = self._cos[pos], self._sin[pos]
        x1, x2 = x[:, :half], x[:, half:]
        return np.concatenate((x1 * cos - x2 * sin, x2 * cos + x1 * sin), axis=1)

    def _step(
        self,
        token: int,
        cache: _Cache,
        block: AttentionBlockSpec | None,
        capture_layers: Iterable[int],
        trace: ActivationTrace | None,
        attention: AttentionMaps | None,
    ) -> np.ndarray:
        """Run one position through every layer, appending to ``cache``.

        Returns the last layer's residual stream at this position.
        """
        c = self.config
        pos = cache.length
        n_keys = pos + 1
        capture_layers = set(capture_layers)
        blocked: list[int] | None = None
        if block is not None and block.query_position == pos and block.key_positions:
            blocked = sorted(block.key_positions)
            mask = F32(block.mask_value)

        x = self._embed[token].copy()
        with np.errstate(over="ignore"):
            for li, layer in enumerate(self._layers):
                h = self._rmsnorm(x, layer.attn_norm)
                q = self._rope((layer.wq @ h).reshape(c.n_heads, c.head_dim), pos)
                k = self._rope((layer.wk @ h).reshape(c.n_heads, c.head_dim), pos)
                v = (layer.wv @ h).reshape(c.n_heads, c.head_dim)
                cache.keys[li, pos] = k
                cache.values[li, pos] = v
                keys = cache.keys[li, :n_keys].transpose(1, 0, 2)  # [n_heads, n_keys, head_dim]
                vals = cache.values[li, :n_keys].transpose(1, 0, 2)

                scores = (keys @ q[:, :, None])[:, :, 0] * self._scale  # [n_heads, n_keys]
                if blocked is not None and li >= block.layer_threshold:
                    scores[:, blocked] += mask
                probs = np.exp(scores - scores.max(axis=1, keepdims=True))
                probs /= probs.sum(axis=1, keepdims=True)
                if attention is not None:
                    attention.scores[li, :, pos, :n_keys] = scores
                    attention.probs[li, :, pos, :n_keys] = probs

                mixed = (probs[:, None, :] @ vals)[:, 0, :].reshape(c.hidden_size)
                x = x + layer.wo @ mixed

                h = self._rmsnorm(x, layer.ffn_norm)
                gate = layer.w1 @ h
                gate = gate / (F32(1.0) + np.exp(-gate))
                x = x + layer.w2 @ (gate * (layer.w3 @ h))

                if li in capture_layers and trace is not None:
                    trace[(li, pos)] = HiddenState(x.copy(), li, pos)
        cache.length = n_keys
        return x

    def _logits(self, residual: np.ndarray, steering: SteeringSpec | None = None) -> np.ndarray:
        h = self._rmsnorm(residual, self._norm)
        if steering is not None:
            h = h + steering.offset()
        return self._unembed @ h

    def forward(
        self,
        tokens: Sequence[int],
        capture: Iterable[tuple[int, int]] = (),
        block: AttentionBlockSpec | None = None,
        *,
        logits: bool = True,
        attention: bool = False,
    ) -> ForwardOutput:
        """Full forward pass over ``tokens``.

        ``capture`` names (layer, position) pairs whose residual-stream output
        is recorded in the returned trace. ``logits=False`` skips the
        unembedding, which dominates cost for large vocabularies.
        """
        ids = self._check_tokens(tokens)
        d = len(ids)
        c = self.config
        wanted: dict[int, set[int]] = {}
        for layer, pos in capture:
            if not 0 <= layer < c.n_layers:
                raise ModelError(f"capture layer {layer} out of range [0, {c.n_layers})")
            if not 0 <= pos < d:
                raise ModelError(f"capture position {pos} out of range [0, {d})")
            wanted.setdefault(pos, set()).add(layer)
        if block is not None and block.query_position >= d:
            raise ModelError(f"block query position {block.query_position} out of range [0, {d})")

        maps = None
        if attention:
            shape = (c.n_layers, c.n_heads, d, d)
            maps = AttentionMaps(np.full(shape, -np.inf, dtype=F32), np.zeros(shape, dtype=F32))

        cache = self._new_cache(d)
        trace: ActivationTrace = {}
        out_logits = np.empty((d, c.vocab_size), dtype=F32) if logits else None
        x = None
        for pos, tok in enumerate(ids):
            x = self._step(tok, cache, block, wanted.get(pos, ()), trace, maps)
            if out_logits is not None:
                out_logits[pos] = self._logits(x)
        return ForwardOutput(out_logits, trace, x, maps)

    def final_hidden(self, tokens: Sequence[int], block: AttentionBlockSpec | None = None) -> np.ndarray:
        """Last-layer residual at the last position."""
        return self.forward(tokens, block=block, logits=False).final_hidden

    def last_position_variants(
        self, tokens: Sequence[int], blocks: Sequence[AttentionBlockSpec | None]
    ) -> list[np.ndarray]:
        """Final hidden state under each of ``blocks`` (None = unblocked).

        Every block must have the last position as its query, so positions
        before it are unaffected and their cache is computed once. Results are
        bitwise equal to separate ``final_hidden`` calls.
        """
        ids = self._check_tokens(tokens)
        last = len(ids) - 1
        for b in blocks:
            if b is not None and b.query_position != last:
                raise ModelError("shared-prefix variants need blocks whose query is the last position")
        cache = self._new_cache(len(ids))
        for tok in ids[:-1]:
            self._step(tok, cache, None, (), None, None)
        out = []
        for b in blocks:
            cache.length = last
            out.append(self._step(ids[-1], cache, b, (), None, None))
        return out

    def next_token_logits(self, tokens: Sequence[int], steering: SteeringSpec | None = None) -> np.ndarray:
        """Logits for the token following ``tokens``, optionally steered."""
        self._check_steering(steering)
        return self._logits(self.final_hidden(tokens), steering)

    def _check_steering(self, steering: SteeringSpec | None) -> None:
        if steering is not None and steering.vector.shape != (self.config.hidden_size,):
            raise ModelError(
                f"steering vector length {steering.vector.shape[0]} != hidden_size {self.config.hidden_size}"
            )

    def generate(
        self,
        prompt: Sequence[int],
        max_new_tokens: int,
        steering: SteeringSpec | None = None,
        eos_id: int | None = None,
    ) -> list[int]:
        """Greedy decoding; returns only the new tokens.

        Steering adds ``alpha * vector`` to the normalized final hidden state
        of the position being predicted, at every step. Generation stops early
        after emitting ``eos_id`` if one is given.
        """
        ids = self._check_tokens(prompt)
        if max_new_tokens < 1:
            raise ModelError("max_new_tokens must be >= 1")
        self._check_steering(steering)
        total = len(ids) + max_new_tokens
        # the last generated token is never fed back, so it needs no slot
        if total - 1 > self.config.max_seq_len:
            raise ContextOverflowError(
                f"prompt ({len(ids)}) + max_new_tokens ({max_new_tokens}) exceeds max_seq_len {self.config.max_seq_len}"
            )
        cache = self._new_cache(total)
        x = None
        for tok in ids:
            x = self._step(tok, cache, None, (), None, None)
        out: list[int] = []
        for step in range(max_new_tokens):
            nxt = int(np.argmax(self._logits(x, steering)))
            out.append(nxt)
            if nxt == eos_id or step == max_new_tokens - 1:
                break
            x = self._step(nxt, cache, None, (), None, None)
        return out
