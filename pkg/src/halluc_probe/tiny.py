"""Desk-scale fixtures: a random-weight model bundle and a synthetic QA corpus.

    python -m halluc_probe.tiny OUT_DIR [--layers 4] [--hidden 64] [--samples 50] [--seed 0]

writes OUT_DIR/model/{config.json,model.bin} and OUT_DIR/corpus.jsonl.
"""

from __future__ import annotations

import argparse
import random
from pathlib import Path

from .datasets import write_generic_jsonl
from .model import ModelConfig, random_weights, save_model
from .probe import QASample

_SUBJECTS = ["the river", "a comet", "the old mill", "Mount Kea", "the violin", "copper", "the senate", "a glacier"]
_ASKS = ["What is {s} known for?", "Where is {s} found?", "Who first described {s}?", "Why does {s} matter?"]
_WORDS = ["salt", "north", "iron", "music", "winter", "granite", "seven", "blue", "Darwin", "the coast", "trade"]


def tiny_config(n_layers: int = 4, hidden_size: int = 64, n_heads: int = 4, vocab_size: int = 256,
                max_seq_len: int = 256) -> ModelConfig:
    return ModelConfig(
        n_layers=n_layers,
        hidden_size=hidden_size,
        n_heads=n_heads,
        head_dim=hidden_size // n_heads,
        vocab_size=vocab_size,
        ffn_hidden=2 * hidden_size,
        max_seq_len=max_seq_len,
    )


def write_tiny_model(model_dir: str | Path, config: ModelConfig | None = None, seed: int = 0) -> Path:
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    config = config or tiny_config()
    save_model(config, random_weights(config, seed), model_dir / "config.json", model_dir / "model.bin")
    return model_dir


def synthetic_corpus(n: int, seed: int = 0, knowledge: bool = True) -> list[QASample]:
    rng = random.Random(seed)
    out = []
    for i in range(n):
        subject = rng.choice(_SUBJECTS)
        right = " ".join(rng.sample(_WORDS, 2))
        wrong = " ".join(rng.sample(_WORDS, rng.randint(1, 3)))
        if wrong == right:
            wrong = wrong + " again"
        out.append(
            QASample(
                id=f"s{i:03d}",
                question=rng.choice(_ASKS).format(s=subject),
                correct_answer=right,
                hallucinated_answer=wrong,
                knowledge=f"Notes: {subject} relates to {right}." if knowledge else None,
                adversarial=bool(i % 2),
            )
        )
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m halluc_probe.tiny", description=__doc__.splitlines()[0])
    p.add_argument("out")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    out = Path(args.out)
    write_tiny_model(out / "model", tiny_config(args.layers, args.hidden), args.seed)
    write_generic_jsonl(out / "corpus.jsonl", synthetic_corpus(args.samples, args.seed))
    print(f"wrote {out / 'model'} and {out / 'corpus.jsonl'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
