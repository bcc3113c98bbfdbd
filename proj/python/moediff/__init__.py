"""Block-diffusion decoding engine for MoE language models.

The compiled extension carries the whole engine; this package re-exports its
public surface.
"""

from moediff._core import (  # noqa: F401
    TRACE_SCHEMA_VERSION,
    DecodeConfig,
    ModelConfig,
    PlantedConfig,
    StrategyConfig,
    cosine_similarity,
    decode,
    decode_script,
    matmul,
    row_argmax,
    run_experiment,
    softmax_rows,
    summarize_jsonl,
    top_k,
)

__all__ = [
    "TRACE_SCHEMA_VERSION",
    "DecodeConfig",
    "ModelConfig",
    "PlantedConfig",
    "StrategyConfig",
    "cosine_similarity",
    "decode",
    "decode_script",
    "matmul",
    "row_argmax",
    "run_experiment",
    "softmax_rows",
    "summarize_jsonl",
    "top_k",
]
