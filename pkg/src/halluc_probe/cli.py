"""Command-line driver: probe, directions, sweep, steer, selfcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 model error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

from . import __version__
from .datasets import FORMATS, DatasetError, DatasetSpec, load_report
from .directions import (
    DegenerateDataError,
    fit_directions,
    load_directions,
    project_samples,
    save_directions,
    transition_vectors,
    vocab_project,
)
from .intervention import DEFAULT_THRESHOLDS, layer_sweep, steer_generate
from .model import DEFAULT_ALPHA, Engine, ModelError
from .probe import (
    DISCOURAGING_PROMPT,
    ENCOURAGING_PROMPT,
    DegenerateStateError,
    ProbeError,
    PromptStrategy,
    QASample,
    run_probe_full,
)
from .reports import (
    awareness_csv,
    dump_json,
    effect_csv,
    projection_csv,
    steer_jsonl,
    sweep_csv,
    tokens_csv,
    write_atomic,
)
from .selfcheck import run_all
from .stats import StatsError, normality_screen, ols_simple, one_tailed_ttest_greater
from .tensorfile import TensorFileError
from .tokenizer import TokenizerError

log = logging.getLogger("halluc_probe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    model: str | None = None
    tokenizer: str | None = None
    dataset: str | None = None
    format: str = "generic_jsonl"
    category: str | None = None
    sample_n: int | None = None
    seed: int = 0
    strategy: str = "none"
    encouraging: str = ENCOURAGING_PROMPT
    discouraging: str = DISCOURAGING_PROMPT
    knowledge: bool = False
    anchor: str = "answer_cue"
    alpha: float = DEFAULT_ALPHA
    thresholds: list[int] | None = None
    k: int = 10
    directions: str | None = None
    fit_dataset: str | None = None
    prompt: str | None = None
    max_new_tokens: int = 32
    out: str = "out"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        raw = json.loads(text)
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"unknown config fields: {sorted(unknown)}")
        return cls(**raw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def dataset_spec(self, path: str | None = None) -> DatasetSpec:
        return DatasetSpec(
            path=path or self.dataset,
            format=self.format,
            category_filter=self.category,
            sample_n=self.sample_n,
            seed=self.seed,
        )

    def prompt_strategy(self) -> PromptStrategy:
        return PromptStrategy(self.strategy, self.encouraging, self.discouraging)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _thresholds(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"thresholds must be comma-separated integers: {text!r}") from None


def _add_shared(p: argparse.ArgumentParser) -> None:
    # every flag defaults to None so that only explicitly given flags override the config file
    p.add_argument("--config", help="JSON experiment config; flags override its fields")
    p.add_argument("--model", help="model directory holding config.json and model.bin")
    p.add_argument("--tokenizer", help="vocabulary JSON; default <model>/tokenizer.json, else byte-level")
    p.add_argument("--dataset", help="input QA file")
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--category", choices=("adversarial", "non_adversarial"))
    p.add_argument("--sample-n", "--sample_n", dest="sample_n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--strategy", choices=("none", "pro", "anti"))
    p.add_argument("--encouraging")
    p.add_argument("--discouraging")
    p.add_argument("--knowledge", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--anchor", choices=("answer_cue", "question"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--thresholds", type=_thresholds, help="comma-separated layer thresholds")
    p.add_argument("--k", type=int, help="tokens per direction in the vocabulary table")
    p.add_argument("--directions", help="direction bundle (steer input)")
    p.add_argument("--fit-dataset", "--fit_dataset", dest="fit_dataset", help="fit directions on this file instead")
    p.add_argument("--prompt", help="single prompt for steer")
    p.add_argument("--max-new-tokens", "--max_new_tokens", dest="max_new_tokens", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="halluc-probe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in (
        ("probe", "awareness scores and one-tailed t-tests"),
        ("directions", "correct/hallucinated directions, token table, projections, regressions"),
        ("sweep", "attention-blocking effect sizes across layer thresholds"),
        ("steer", "greedy generation with and without the correct-direction offset"),
        ("selfcheck", "run the built-in oracle checks"),
    ):
        _add_shared(sub.add_parser(name, help=help_text))
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = ExperimentConfig.from_json(path.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, TypeError) as exc:
            raise UsageError(f"{path}: invalid config: {exc}") from None
    else:
        cfg = ExperimentConfig()
    for f in fields(ExperimentConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(cfg, f.name, value)
    return cfg


def _require(path: str | None, what: str, error=UsageError) -> Path:
    if not path:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise error(f"{what} not found: {p}")
    return p


def load_engine(cfg: ExperimentConfig) -> Engine:
    model_dir = _require(cfg.model, "model", ModelError)
    config_path = model_dir / "config.json"
    weights_path = model_dir / "model.bin"
    for p in (config_path, weights_path):
        if not p.is_file():
            raise ModelError(f"model file not found: {p}")
    tokenizer = cfg.tokenizer
    if tokenizer is None and (model_dir / "tokenizer.json").is_file():
        tokenizer = str(model_dir / "tokenizer.json")
    if tokenizer is not None:
        _require(tokenizer, "tokenizer", ModelError)
    return Engine.from_files(config_path, weights_path, tokenizer)


def _load_samples(cfg: ExperimentConfig, path: str | None = None) -> tuple[list[QASample], int]:
    _require(path or cfg.dataset, "dataset", DatasetError)
    report = load_report(cfg.dataset_spec(path))
    if not report.samples:
        raise DatasetError(f"dataset {path or cfg.dataset} yielded no samples")
    return report.samples, report.rejected


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ttest_entry(name: str, values: list[float]) -> dict:
    try:
        return one_tailed_ttest_greater(values).report(name)
    except StatsError as exc:
        return {"statistic": name, "error": str(exc), "n": len(values)}


def cmd_probe(cfg: ExperimentConfig) -> int:
    engine = load_engine(cfg)
    samples, rejected = _load_samples(cfg)
    out = _out_dir(cfg)
    run = run_probe_full(engine, samples, cfg.prompt_strategy(), cfg.knowledge, cfg.anchor)
    scores = [r.awareness for r in run.records]

    main_test = one_tailed_ttest_greater(scores).report("awareness_score")
    tests = [main_test]
    by_id = {s.id: s for s in samples}
    for label, flag in (("adversarial", True), ("non_adversarial", False)):
        subset = [r.awareness for r in run.records if by_id[r.sample_id].adversarial is flag]
        if subset:
            tests.append(_ttest_entry(f"awareness_score[{label}]", subset))
    report = {
        "tests": tests,
        "n_samples": len(run.records),
        "n_skipped": len(run.skipped),
        "n_rejected_rows": rejected,
        "strategy": cfg.strategy,
        "knowledge_included": cfg.knowledge,
    }
    if len(scores) >= 8:
        screen = normality_screen(scores)
        report["normality"] = {
            "skewness": screen.skewness,
            "excess_kurtosis": screen.excess_kurtosis,
            "pass": screen.passed,
        }
    write_atomic(out / "awareness.csv", awareness_csv(run.records, cfg.strategy, cfg.knowledge))
    write_atomic(out / "ttest.json", dump_json(report))
    write_atomic(out / "skips.json", dump_json([asdict(s) for s in run.skipped]))
    print(
        f"probe: {len(run.records)} samples, mean awareness {main_test['value']:.6g}, "
        f"t = {main_test['t']:.4g}, p = {main_test['p']:.3g} {main_test['stars']}"
    )
    return EXIT_OK


def cmd_directions(cfg: ExperimentConfig) -> int:
    engine = load_engine(cfg)
    samples, _ = _load_samples(cfg)
    out = _out_dir(cfg)
    strategy = cfg.prompt_strategy()
    run = run_probe_full(engine, samples, strategy, cfg.knowledge, cfg.anchor)
    vectors = transition_vectors(run.triples)
    if cfg.fit_dataset:
        fit_samples, _ = _load_samples(cfg, cfg.fit_dataset)
        fit_run = run_probe_full(engine, fit_samples, strategy, cfg.knowledge, cfg.anchor)
        pair = fit_directions(transition_vectors(fit_run.triples))
    else:
        pair = fit_directions(vectors)

    projections = project_samples(vectors, pair)
    awareness = {r.sample_id: r.awareness for r in run.records}
    k = min(cfg.k, engine.config.vocab_size)
    tables = {
        "correct": vocab_project(pair.d_corr, engine.weights.unembedding, k, engine.tokenizer.token_string),
        "hallucinated": vocab_project(pair.d_halluc, engine.weights.unembedding, k, engine.tokenizer.token_string),
    }
    x = [awareness[p.sample_id] for p in projections]
    regressions = {
        "p_h": ols_simple(x, [p.p_h for p in projections]).report("p_h", "awareness_score"),
        "p_c": ols_simple(x, [p.p_c for p in projections]).report("p_c", "awareness_score"),
    }
    save_directions(out / "directions.bin", pair)
    write_atomic(out / "top_tokens.csv", tokens_csv(tables))
    write_atomic(out / "projections.csv", projection_csv(projections, awareness))
    write_atomic(out / "regression.json", dump_json(regressions))
    print(
        f"directions: fitted on {pair.n_samples} samples; explained variance "
        f"corr {pair.explained_variance_corr:.6g}, halluc {pair.explained_variance_halluc:.6g}"
    )
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig) -> int:
    engine = load_engine(cfg)
    samples, _ = _load_samples(cfg)
    out = _out_dir(cfg)
    thresholds = cfg.thresholds
    if thresholds is None:
        thresholds = [t for t in DEFAULT_THRESHOLDS if t <= engine.config.n_layers]
    run = run_probe_full(engine, samples, cfg.prompt_strategy(), cfg.knowledge, cfg.anchor)
    result = layer_sweep(engine, run.inputs, thresholds)
    write_atomic(out / "sweep.csv", sweep_csv(result))
    write_atomic(out / "effect_sizes.csv", effect_csv(result.records))
    print(f"sweep: {result.n} samples x {len(result.thresholds)} thresholds")
    return EXIT_OK


def steer_prompt(sample: QASample, knowledge: bool) -> str:
    context = f"{sample.knowledge}\n" if knowledge and sample.knowledge else ""
    return f"{context}Question: {sample.question}\nAnswer:"


def cmd_steer(cfg: ExperimentConfig) -> int:
    engine = load_engine(cfg)
    out = _out_dir(cfg)
    directions_path = cfg.directions or str(out / "directions.bin")
    _require(directions_path, "directions", DatasetError)
    direction = load_directions(directions_path).d_corr
    rows = []
    if cfg.prompt is not None:
        original, adjusted = steer_generate(engine, cfg.prompt, direction, cfg.alpha, cfg.max_new_tokens)
        rows.append({"id": "prompt", "question": cfg.prompt, "original": original, "adjusted": adjusted})
    else:
        samples, _ = _load_samples(cfg)
        for s in samples:
            original, adjusted = steer_generate(
                engine, steer_prompt(s, cfg.knowledge), direction, cfg.alpha, cfg.max_new_tokens
            )
            rows.append(
                {
                    "id": s.id,
                    "question": s.question,
                    "original": original,
                    "adjusted": adjusted,
                    "true_answer": s.correct_answer,
                }
            )
    write_atomic(out / "steer.jsonl", steer_jsonl(rows))
    changed = sum(r["original"] != r["adjusted"] for r in rows)
    print(f"steer: {len(rows)} prompts, {changed} changed under alpha={cfg.alpha:g}")
    return EXIT_OK


def cmd_selfcheck(cfg: ExperimentConfig) -> int:
    ok = True
    for name, passed, detail in run_all():
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return EXIT_OK if ok else EXIT_MODEL


COMMANDS = {
    "probe": cmd_probe,
    "directions": cmd_directions,
    "sweep": cmd_sweep,
    "steer": cmd_steer,
    "selfcheck": cmd_selfcheck,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelError, TensorFileError, TokenizerError, DegenerateStateError) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (DatasetError, ProbeError, DegenerateDataError, StatsError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
