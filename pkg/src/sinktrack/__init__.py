"""Desk-scale decoder-only transformer with BOS context-anchoring interventions."""

from .anchor import InfoSource, SourceForm, from_external, from_prompt
from .model import (
    CANONICAL_CONFIG,
    CANONICAL_SEED,
    GenerationOutput,
    KVCache,
    ModelConfig,
    ModelWeights,
    decode_step,
    generate,
    prefill,
)
from .weights_io import load_model, make_prompt, make_toy_model, save_model

__all__ = [
    "CANONICAL_CONFIG",
    "CANONICAL_SEED",
    "GenerationOutput",
    "InfoSource",
    "KVCache",
    "ModelConfig",
    "ModelWeights",
    "SourceForm",
    "decode_step",
    "from_external",
    "from_prompt",
    "generate",
    "load_model",
    "make_prompt",
    "make_toy_model",
    "prefill",
    "save_model",
]
