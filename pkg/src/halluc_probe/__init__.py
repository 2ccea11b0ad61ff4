"""Hidden-state probing of hallucination awareness on LLaMA-style decoders."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    AttentionBlockSpec,
    Engine,
    ModelConfig,
    SteeringSpec,
    WeightStore,
    load_model,
    random_weights,
    save_model,
)
from .probe import PromptStrategy, QASample, awareness, build_inputs, extract_triple, run_probe  # noqa: E402

__all__ = [
    "AttentionBlockSpec",
    "Engine",
    "ModelConfig",
    "PromptStrategy",
    "QASample",
    "SteeringSpec",
    "WeightStore",
    "awareness",
    "build_inputs",
    "extract_triple",
    "load_model",
    "random_weights",
    "run_probe",
    "save_model",
]
