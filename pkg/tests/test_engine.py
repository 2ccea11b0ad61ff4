import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halluc_probe.model import (
    AttentionBlockSpec,
    ContextOverflowError,
    Engine,
    ModelConfig,
    ModelError,
    SteeringSpec,
    random_weights,
)


def reference_forward(engine, tokens, block=None):
    """Whole-sequence float64 forward with an explicit causal mask."""
    c, w = engine.config, {k: v.astype(np.float64) for k, v in engine.weights.items()}
    d, hd, nh = len(tokens), c.head_dim, c.n_heads

    def norm(x, g):
        return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + c.norm_epsilon) * g

    inv = 1.0 / c.rope_theta ** (np.arange(hd // 2) * 2.0 / hd)
    ang = np.outer(np.arange(d), inv)
    cos, sin = np.cos(ang)[:, None, :], np.sin(ang)[:, None, :]

    def rope(x):  # [d, nh, hd]
        a, b = x[..., : hd // 2], x[..., hd // 2 :]
        return np.concatenate([a * cos - b * sin, b * cos + a * sin], axis=-1)

    x = w["tok_embeddings"][tokens]
    causal = np.triu(np.full((d, d), -np.inf), 1)
    for i in range(c.n_layers):
        p = f"layers.{i}."
        h = norm(x, w[p + "attention_norm"])
        q = rope((h @ w[p + "attention.wq"].T).reshape(d, nh, hd))
        k = rope((h @ w[p + "attention.wk"].T).reshape(d, nh, hd))
        v = (h @ w[p + "attention.wv"].T).reshape(d, nh, hd)
        s = np.einsum("qhd,khd->hqk", q, k) / np.sqrt(hd) + causal
        if block is not None and i >= block.layer_threshold:
            for key in block.key_positions:
                s[:, block.query_position, key] += block.mask_value
        pr = np.exp(s - s.max(-1, keepdims=True))
        pr /= pr.sum(-1, keepdims=True)
        x = x + np.einsum("hqk,khd->qhd", pr, v).reshape(d, -1) @ w[p + "attention.wo"].T
        h = norm(x, w[p + "ffn_norm"])
        g = h @ w[p + "feed_forward.w1"].T
        x = x + ((g / (1 + np.exp(-g))) * (h @ w[p + "feed_forward.w3"].T)) @ w[p + "feed_forward.w2"].T
    return norm(x, w["norm"]) @ w["output"].T, x


def test_matches_float64_reference(tiny_engine, rng):
    tokens = rng.integers(0, 256, size=40).tolist()
    out = tiny_engine.forward(tokens)
    ref_logits, ref_resid = reference_forward(tiny_engine, tokens)
    assert np.max(np.abs(out.logits - ref_logits)) < 1e-3
    assert np.max(np.abs(out.final_hidden - ref_resid[-1])) < 1e-3


def test_blocked_matches_reference(tiny_engine, rng):
    tokens = rng.integers(0, 256, size=30).tolist()
    spec = AttentionBlockSpec(2, 29, frozenset(range(5, 20)))
    out = tiny_engine.forward(tokens, block=spec)
    _, ref_resid = reference_forward(tiny_engine, tokens, spec)
    assert np.max(np.abs(out.final_hidden - ref_resid[-1])) < 1e-3


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=1, max_size=30), st.lists(st.integers(0, 255), max_size=30))
def test_prefix_invariance(tiny_engine, prefix, suffix):
    last = tiny_engine.config.n_layers - 1
    m = len(prefix) - 1
    a = tiny_engine.forward(prefix, capture=[(last, m)], logits=False)
    b = tiny_engine.forward(prefix + suffix, capture=[(last, m)], logits=False)
    assert np.array_equal(a.trace[(last, m)].values, b.trace[(last, m)].values)


def test_deterministic(tiny_engine):
    tokens = tiny_engine.tokenize("Question: why?\nAnswer: because")
    a, b = tiny_engine.forward(tokens), tiny_engine.forward(tokens)
    assert np.array_equal(a.logits, b.logits)


def test_capture_every_layer(tiny_engine):
    tokens = [1, 2, 3, 4]
    caps = [(layer, pos) for layer in range(4) for pos in range(4)]
    out = tiny_engine.forward(tokens, capture=caps)
    assert set(out.trace) == set(caps)
    assert np.array_equal(out.trace[(3, 3)].values, out.final_hidden)
    with pytest.raises(ModelError):
        tiny_engine.forward(tokens, capture=[(4, 0)])
    with pytest.raises(ModelError):
        tiny_engine.forward(tokens, capture=[(0, 4)])


def test_attention_rows_sum_to_one(tiny_engine, rng):
    out = tiny_engine.forward(rng.integers(0, 256, 25).tolist(), attention=True)
    sums = out.attention.probs.sum(axis=-1)
    assert np.all(np.abs(sums - 1) <= 1e-5)
    # nothing above the diagonal
    assert np.all(np.triu(out.attention.probs, 1) == 0)


def test_blocked_edges_suppressed(tiny_engine, rng):
    tokens = rng.integers(0, 256, 30).tolist()
    keys = frozenset(range(3, 17))
    spec = AttentionBlockSpec(1, 29, keys)
    out = tiny_engine.forward(tokens, block=spec, attention=True)
    probs = out.attention.probs
    for layer in range(1, 4):
        assert probs[layer, :, 29, sorted(keys)].max() <= 1e-10
    # below the threshold the same edges are live
    assert probs[0, :, 29, sorted(keys)].max() > 1e-4
    # a hand softmax over the captured scores agrees
    s = out.attention.scores[2, 0, 29, :30].astype(np.float64)
    hand = np.exp(s - s.max())
    hand /= hand.sum()
    assert np.max(hand[sorted(keys)]) <= 1e-10


def test_threshold_n_layers_is_identity(tiny_engine):
    tokens = tiny_engine.tokenize("some text to block")
    spec = AttentionBlockSpec(4, len(tokens) - 1, frozenset(range(5)))
    assert np.array_equal(tiny_engine.final_hidden(tokens), tiny_engine.final_hidden(tokens, spec))


def test_blocking_changes_state(tiny_engine):
    tokens = tiny_engine.tokenize("some text to block")
    spec = AttentionBlockSpec(0, len(tokens) - 1, frozenset(range(5)))
    assert not np.array_equal(tiny_engine.final_hidden(tokens), tiny_engine.final_hidden(tokens, spec))


def test_shared_prefix_variants_bitwise(tiny_engine):
    tokens = tiny_engine.tokenize("Question: where?\nAnswer: here")
    last = len(tokens) - 1
    blocks = [None] + [AttentionBlockSpec(t, last, frozenset(range(2, 10))) for t in range(5)]
    shared = tiny_engine.last_position_variants(tokens, blocks)
    for b, got in zip(blocks, shared):
        assert np.array_equal(got, tiny_engine.final_hidden(tokens, b))
    with pytest.raises(ModelError):
        tiny_engine.last_position_variants(tokens, [AttentionBlockSpec(0, last - 1, frozenset({0}))])


def test_block_spec_validation():
    with pytest.raises(ModelError):
        AttentionBlockSpec(0, 3, frozenset({3}))
    with pytest.raises(ModelError):
        AttentionBlockSpec(0, 3, frozenset({1}), mask_value=0.0)


def test_steering_linearity(tiny_engine, rng):
    tokens = tiny_engine.tokenize("Question: what?\nAnswer:")
    direction = rng.standard_normal(64)
    direction /= np.linalg.norm(direction)
    alpha = 100.0
    base = tiny_engine.next_token_logits(tokens).astype(np.float64)
    steered = tiny_engine.next_token_logits(tokens, SteeringSpec(direction, alpha)).astype(np.float64)
    expected = alpha * (tiny_engine.weights.unembedding.astype(np.float64) @ direction)
    assert np.max(np.abs((steered - base) - expected)) <= 1e-4


def test_alpha_zero_is_unsteered(tiny_engine, rng):
    prompt = tiny_engine.tokenize("Question: who?\nAnswer:")
    direction = rng.standard_normal(64)
    assert tiny_engine.generate(prompt, 8, SteeringSpec(direction, 0.0)) == tiny_engine.generate(prompt, 8)


def test_orthonormal_domination(ortho_engine):
    prompt = ortho_engine.tokenize("Q: x\nA:")
    u = ortho_engine.weights.unembedding
    for j in (0, 17, 200, 255):
        assert ortho_engine.generate(prompt, 3, SteeringSpec(u[j], 1e6)) == [j, j, j]


def test_generate_matches_forward(tiny_engine):
    prompt = tiny_engine.tokenize("Answer:")
    new = tiny_engine.generate(prompt, 6)
    assert len(new) == 6
    full = tiny_engine.forward(prompt + new[:-1])
    assert [int(np.argmax(r)) for r in full.logits[len(prompt) - 1 :]] == new


def test_generate_stops_at_eos(tiny_engine):
    prompt = tiny_engine.tokenize("Answer:")
    first = tiny_engine.generate(prompt, 1)[0]
    assert tiny_engine.generate(prompt, 10, eos_id=first) == [first]


def test_overflow_errors():
    config = ModelConfig(n_layers=1, hidden_size=16, n_heads=2, head_dim=8, vocab_size=256, ffn_hidden=16, max_seq_len=8)
    engine = Engine(config, random_weights(config))
    with pytest.raises(ContextOverflowError):
        engine.forward(list(range(9)))
    engine.generate(list(range(5)), 4)  # 5 + 4 - 1 = 8 slots
    with pytest.raises(ContextOverflowError):
        engine.generate(list(range(5)), 5)
    with pytest.raises(ModelError):
        engine.forward([256])
    with pytest.raises(ModelError):
        engine.forward([])


def test_steering_shape_checked(tiny_engine):
    with pytest.raises(ModelError):
        tiny_engine.next_token_logits([1, 2], SteeringSpec(np.ones(3), 1.0))
