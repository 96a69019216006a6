"""Global variables."""

import typing as t
from pathlib import Path

CHECKPOINT_FORMAT_VERSION: int = 1

TEMPLATES_DIR: Path = Path(__file__).parent.parent / "templates"

# Context lengths tabulated by the `flops` subcommand
DEFAULT_FLOPS_LENGTHS: t.Tuple[int, ...] = (
    4096,
    8192,
    16384,
    32768,
    65536,
    131072,
)
DEFAULT_GEN_LEN: int = 128

# Published architecture shapes of the 7B families
BUILTIN_PROFILES: t.Dict[str, t.Dict[str, t.Any]] = {
    "mistral-7b": {
        "name": "mistral-7b",
        "n_layers": 32,
        "d_model": 4096,
        "n_heads": 32,
        "n_kv_heads": 8,
        "d_ff": 14336,
        "vocab_size": 32000,
        "gated_mlp": True,
        "tied_embeddings": False,
        "param_count": 7_241_732_096,
    },
    "llama2-7b": {
        "name": "llama2-7b",
        "n_layers": 32,
        "d_model": 4096,
        "n_heads": 32,
        "n_kv_heads": 32,
        "d_ff": 11008,
        "vocab_size": 32000,
        "gated_mlp": True,
        "tied_embeddings": False,
        "param_count": 6_738_415_616,
    },
    "bloom-7b": {
        "name": "bloom-7b",
        "n_layers": 30,
        "d_model": 4096,
        "n_heads": 32,
        "n_kv_heads": 32,
        "d_ff": 16384,
        "vocab_size": 250880,
        "gated_mlp": False,
        "tied_embeddings": True,
        "param_count": 7_069_016_064,
    },
}

# Run artifact names
RESOLVED_CONFIG_FILE: str = "resolved_config.json"
METRICS_FILE: str = "metrics.jsonl"
CHECKPOINT_FILE: str = "checkpoint.npz"
BASE_CHECKPOINT_FILE: str = "base_model.npz"
