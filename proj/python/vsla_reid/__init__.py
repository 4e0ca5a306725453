"""Video-based cross-platform person re-identification (C++ core bindings)."""

import json as _json

from ._core import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    Encoder,
    Error,
    IoError,
    ValidationError,
    checkpoint_tensors,
    chunk_tracklet,
    contrastive_loss,
    evaluate,
    evaluate_rankings,
    gen_toy,
    id_loss,
    manifest_json,
    normalize_rows,
    save_checkpoint_tensors,
    sparse_temporal_sample,
    train,
    triplet_loss,
)

__version__ = "0.1.0"


def load_manifest(path):
    """Validated manifest as a dict."""
    return _json.loads(manifest_json(str(path)))


__all__ = [
    "CheckpointError",
    "ConfigError",
    "DivergenceError",
    "Encoder",
    "Error",
    "IoError",
    "ValidationError",
    "checkpoint_tensors",
    "chunk_tracklet",
    "contrastive_loss",
    "evaluate",
    "evaluate_rankings",
    "gen_toy",
    "id_loss",
    "load_manifest",
    "normalize_rows",
    "save_checkpoint_tensors",
    "sparse_temporal_sample",
    "train",
    "triplet_loss",
]
