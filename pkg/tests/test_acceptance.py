"""Acceptance gate: one PASS/FAIL line per criterion (see the terminal summary)."""

import filecmp
import os
import subprocess
import sys
import time

import mpmath
import numpy as np
import pytest
import schemas
from conftest import load_golden, verdict

from halluc_probe.directions import pca_first_component
from halluc_probe.intervention import layer_sweep
from halluc_probe.model import AttentionBlockSpec, HiddenState, SteeringSpec
from halluc_probe.probe import HiddenTriple, QASample, awareness, build_inputs, cosine, extract_triple
from halluc_probe.stats import mean_difference_test, ols_simple, one_tailed_ttest_greater, student_t_sf
from halluc_probe.tiny import synthetic_corpus, tiny_config

WORDS = "alpha beta gamma delta river stone cloud seven north copper violin winter".split()


def _random_sample(rng, i):
    q = " ".join(rng.choice(WORDS, size=int(rng.integers(2, 7)))) + "?"
    a = " ".join(rng.choice(WORDS, size=int(rng.integers(1, 5))))
    b = " ".join(rng.choice(WORDS, size=int(rng.integers(1, 5))))
    return QASample(f"r{i}", q, a, b, knowledge=" ".join(rng.choice(WORDS, size=4)))


def test_criterion_1_prefix_invariance(tiny_engine):
    rng = np.random.default_rng(101)
    last = tiny_engine.config.n_layers - 1
    start = time.perf_counter()
    mismatches = 0
    for i in range(100):
        inputs = build_inputs(_random_sample(rng, i), None, bool(i % 2), tiny_engine.tokenizer)
        m = inputs.question_end_index
        h = tiny_engine.forward(inputs.hallucinated.tokens, capture=[(last, m)], logits=False)
        c = tiny_engine.forward(inputs.correct.tokens, capture=[(last, m)], logits=False)
        mismatches += not np.array_equal(h.trace[(last, m)].values, c.trace[(last, m)].values)
    elapsed = time.perf_counter() - start
    verdict(1, mismatches == 0 and elapsed < 10, f"{100 - mismatches}/100 bitwise-equal s1, {elapsed:.2f}s (< 10s)")


def test_criterion_2_blocking_null_case(tiny_engine):
    corpus = synthetic_corpus(50, seed=7)
    start = time.perf_counter()
    inputs = [build_inputs(s, None, True, tiny_engine.tokenizer) for s in corpus]
    n_layers = tiny_engine.config.n_layers
    res = layer_sweep(tiny_engine, inputs, [0, n_layers])
    elapsed = time.perf_counter() - start
    null = [r for r in res.records if r.layer_threshold == n_layers]
    zero = [r for r in res.records if r.layer_threshold == 0]
    null_ok = len(null) == 50 and all(r.e_halluc == 0.0 and r.e_corr == 0.0 for r in null)
    pos_ok = len(zero) == 50 and all(r.e_halluc > 0 and r.e_corr > 0 for r in zero)
    verdict(
        2,
        null_ok and pos_ok and elapsed < 30,
        f"threshold={n_layers}: all zero={null_ok}; threshold=0: all positive={pos_ok}; {elapsed:.2f}s (< 30s)",
    )


def test_criterion_3_blocked_edge_suppression(tiny_engine):
    worst, checked = 0.0, 0
    for sample in synthetic_corpus(5, seed=11):
        inputs = build_inputs(sample, None, True, tiny_engine.tokenizer)
        for branch in (inputs.hallucinated, inputs.correct):
            for thr in range(tiny_engine.config.n_layers):
                spec = AttentionBlockSpec(thr, branch.last, frozenset(branch.question_positions))
                probs = tiny_engine.forward(branch.tokens, block=spec, logits=False, attention=True).attention.probs
                keys = sorted(spec.key_positions)
                for layer in range(thr, tiny_engine.config.n_layers):
                    for head in range(tiny_engine.config.n_heads):
                        worst = max(worst, float(probs[layer, head, branch.last, keys].max()))
                        checked += 1
    verdict(3, worst <= 1e-10, f"max blocked weight {worst:.3e} over {checked} (layer, head) pairs (<= 1e-10)")


def test_criterion_4_pca_oracle():
    rng = np.random.default_rng(404)
    worst_cos, worst_ev = 1.0, 0.0
    for _ in range(200):
        n, h = int(rng.integers(3, 201)), int(rng.integers(2, 65))
        x = rng.standard_normal((n, h)) * rng.uniform(0.1, 3.0, size=h) + rng.standard_normal(h)
        d, ev = pca_first_component(x)
        vals, vecs = np.linalg.eigh(np.cov(x, rowvar=False))
        worst_cos = min(worst_cos, abs(float(d @ vecs[:, -1])))
        worst_ev = max(worst_ev, abs(ev - vals[-1]) / vals[-1])
    ok = worst_cos >= 1 - 1e-6 and worst_ev <= 1e-6
    verdict(4, ok, f"min |cos| {worst_cos:.12f} (>= 1-1e-6), max eigenvalue rel err {worst_ev:.2e} (<= 1e-6)")


def _mp_t_sf(t, df):
    mpmath.mp.dps = 40
    x = mpmath.mpf(df) / (df + mpmath.mpf(t) ** 2)
    half = mpmath.betainc(mpmath.mpf(df) / 2, mpmath.mpf(1) / 2, 0, x, regularized=True) / 2
    return float(half if t >= 0 else 1 - half)


def test_criterion_5_statistics_oracles():
    worst_t = 0.0
    for df in (1, 10, 816, 999):
        for t in np.linspace(-50, 50, 201):
            ref = _mp_t_sf(float(t), df)
            worst_t = max(worst_t, abs(student_t_sf(float(t), df) - ref) / ref)

    golden = load_golden("ols_golden.json")
    fit = ols_simple(golden["x"], golden["y"])
    worst_ols = max(abs(getattr(fit, k) - v) / abs(v) for k, v in golden["expected"].items())

    rng = np.random.default_rng(5)
    paired_ok = True
    for _ in range(50):
        a, b = rng.standard_normal(40), rng.standard_normal(40)
        paired_ok &= mean_difference_test(a, b, paired=True) == one_tailed_ttest_greater(a - b)

    ok = worst_t <= 1e-10 and worst_ols <= 1e-9 and paired_ok
    verdict(
        5,
        ok,
        f"t tail rel err {worst_t:.2e} (<= 1e-10); OLS golden rel err {worst_ols:.2e} (<= 1e-9); "
        f"paired == one-sample on differences bitwise: {paired_ok}",
    )


def test_criterion_6_awareness_algebra(tiny_engine):
    swap_ok = True
    for sample in synthetic_corpus(10, seed=13):
        fwd = awareness(extract_triple(tiny_engine, build_inputs(sample, None, False, tiny_engine.tokenizer)))
        rev = awareness(extract_triple(tiny_engine, build_inputs(sample.swapped(), None, False, tiny_engine.tokenizer)))
        swap_ok &= rev.awareness == -fwd.awareness

    same = QASample("same", "Where is the old mill?", "north", "north")
    zero = awareness(extract_triple(tiny_engine, build_inputs(same, None, False, tiny_engine.tokenizer))).awareness

    rng = np.random.default_rng(6)
    lo, hi = 1.0, -1.0
    for _ in range(1000):
        dim = int(rng.integers(1, 128))
        s1, s2, s3 = (rng.standard_normal(dim).astype(np.float32) * np.float32(rng.uniform(1e-3, 1e3)) for _ in range(3))
        rec = awareness(HiddenTriple("r", *(HiddenState(s, 0, 0) for s in (s1, s2, s3))))
        lo, hi = min(lo, rec.cos_halluc, rec.cos_corr), max(hi, rec.cos_halluc, rec.cos_corr)
        # collinear pairs stress the bounds
        lo = min(lo, cosine(s1, -3 * s1))
        hi = max(hi, cosine(s1, 7 * s1))
    bounds_ok = lo >= -1 - 1e-6 and hi <= 1 + 1e-6
    ok = swap_ok and zero == 0.0 and bounds_ok
    verdict(6, ok, f"swap negates exactly: {swap_ok}; identical answers -> {zero}; cosines in [{lo:.9f}, {hi:.9f}]")


def test_criterion_7_steering(tiny_engine, ortho_engine):
    rng = np.random.default_rng(77)
    direction = rng.standard_normal(tiny_engine.config.hidden_size)
    direction /= np.linalg.norm(direction)
    prompts = [f"Question: {' '.join(rng.choice(WORDS, size=3))}?\nAnswer:" for _ in range(20)]
    zero_ok = all(
        tiny_engine.generate(tiny_engine.tokenize(p), 8, SteeringSpec(direction, 0.0))
        == tiny_engine.generate(tiny_engine.tokenize(p), 8)
        for p in prompts
    )

    u = tiny_engine.weights.unembedding.astype(np.float64)
    worst = 0.0
    for p in prompts[:5]:
        ids = tiny_engine.tokenize(p)
        base = tiny_engine.next_token_logits(ids).astype(np.float64)
        steered = tiny_engine.next_token_logits(ids, SteeringSpec(direction, 100.0)).astype(np.float64)
        worst = max(worst, float(np.max(np.abs(steered - base - 100.0 * (u @ direction)))))

    uo = ortho_engine.weights.unembedding
    prompt = ortho_engine.tokenize("Question: x?\nAnswer:")
    targets = [0, 1, 42, 128, 255]
    dom_ok = all(ortho_engine.generate(prompt, 2, SteeringSpec(uo[j], 1e6)) == [j, j] for j in targets)

    ok = zero_ok and worst <= 1e-4 and dom_ok
    verdict(7, ok, f"alpha=0 identical over 20 prompts: {zero_ok}; linearity max err {worst:.2e} (<= 1e-4); "
                   f"orthonormal domination: {dom_ok}")


def _pipeline(workdir, model_dir, corpus):
    out = workdir / "out"
    common = ["--model", str(model_dir), "--dataset", str(corpus), "--out", str(out), "--seed", "0", "--knowledge"]
    cmds = [
        ["probe"],
        ["directions", "--k", "10"],
        ["sweep", "--thresholds", "0,1,2,3,4"],
        ["steer", "--max-new-tokens", "8"],
    ]
    start = time.perf_counter()
    codes = [subprocess.run([sys.executable, "-m", "halluc_probe", *c, *common], capture_output=True).returncode
             for c in cmds]
    return out, codes, time.perf_counter() - start


def _schemas_ok(out):
    try:
        schemas.check_awareness_csv(out / "awareness.csv")
        schemas.check_ttest_json(out / "ttest.json")
        schemas.check_tokens_csv(out / "top_tokens.csv", 10)
        schemas.check_projections_csv(out / "projections.csv")
        schemas.check_regression_json(out / "regression.json")
        schemas.check_directions_sidecar(out / "directions.json")
        schemas.check_sweep_csv(out / "sweep.csv", [0, 1, 2, 3, 4], 50)
        schemas.check_effect_csv(out / "effect_sizes.csv")
        schemas.check_steer_jsonl(out / "steer.jsonl", 50)
    except (AssertionError, ValueError, KeyError) as exc:
        return f"schema failure: {exc}"
    return None


def test_criterion_8_end_to_end(tmp_path):
    from halluc_probe.datasets import write_generic_jsonl
    from halluc_probe.tiny import write_tiny_model

    model_dir = write_tiny_model(tmp_path / "model", tiny_config(), seed=0)
    corpus = tmp_path / "corpus.jsonl"
    write_generic_jsonl(corpus, synthetic_corpus(50, seed=0))

    runs = [_pipeline(tmp_path / f"run{i}", model_dir, corpus) for i in (1, 2)]
    codes_ok = all(code == 0 for _, codes, _ in runs for code in codes)
    times = [t for _, _, t in runs]
    problem = _schemas_ok(runs[0][0]) if codes_ok else "nonzero exit"
    names = sorted(p.name for p in runs[0][0].iterdir())
    match, mismatch, errors = filecmp.cmpfiles(runs[0][0], runs[1][0], names, shallow=False)
    stable = not mismatch and not errors and len(match) == len(names)
    ok = codes_ok and problem is None and stable and max(times) < 120
    verdict(
        8,
        ok,
        f"exit codes {[c for _, c, _ in runs]}; schemas {'ok' if problem is None else problem}; "
        f"{len(match)}/{len(names)} files byte-identical across runs; runtimes {times[0]:.1f}s, {times[1]:.1f}s (< 120s)",
    )


@pytest.mark.skipif(
    not (os.environ.get("HALLUC_PROBE_CHECKPOINT") and os.environ.get("HALLUC_PROBE_TQA")),
    reason="not gating: set HALLUC_PROBE_CHECKPOINT (bundle dir) and HALLUC_PROBE_TQA (TruthfulQA-style CSV)",
)
def test_criterion_9_real_checkpoint(tmp_path):
    out = tmp_path / "out"
    cmd = [sys.executable, "-m", "halluc_probe", "probe", "--model", os.environ["HALLUC_PROBE_CHECKPOINT"],
           "--dataset", os.environ["HALLUC_PROBE_TQA"], "--format", "truthfulqa_csv", "--out", str(out)]
    if os.environ.get("HALLUC_PROBE_SAMPLE_N"):
        cmd += ["--sample-n", os.environ["HALLUC_PROBE_SAMPLE_N"]]
    code = subprocess.run(cmd, capture_output=True).returncode
    problem = None
    if code == 0:
        try:
            schemas.check_awareness_csv(out / "awareness.csv")
            report = schemas.check_ttest_json(out / "ttest.json")
        except (AssertionError, ValueError) as exc:
            problem = str(exc)
    ok = code == 0 and problem is None
    detail = f"exit {code}" + (f"; {problem}" if problem else "")
    if ok:
        main = report["tests"][0]
        detail += f"; mean {main['value']:.4g}{main['stars']}, t = {main['t']:.4g}, p = {main['p']:.3g}, df = {main['df']}"
    verdict(9, ok, detail + " (not gating)")
