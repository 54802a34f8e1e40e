"""Versioned model checkpoints.

A checkpoint is a safetensors file. Its metadata (one JSON string) carries the container
format version, the model kind and architecture version, the model config and
any extra provenance (for generators, the persisted per-subject latent seeds).
Files are byte-identical for identical parameters and metadata.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file
from safetensors import safe_open

from .errors import CheckpointError
from .watermark import (DETECTOR_VERSION, GENERATOR_VERSION, DetectorConfig, DetectorModel,
                        GeneratorConfig, GeneratorModel)

FORMAT_VERSION = 1
_META_KEY = "genmark"

_KINDS = {
    "generator": (GeneratorModel, GeneratorConfig, GENERATOR_VERSION),
    "detector": (DetectorModel, DetectorConfig, DETECTOR_VERSION),
}


def _kind_of(model) -> str:
    if isinstance(model, GeneratorModel):
        return "generator"
    if isinstance(model, DetectorModel):
        return "detector"
    raise CheckpointError(f"cannot checkpoint {type(model).__name__}")


def save_model(model, path: Path, extra: dict | None = None) -> Path:
    kind = _kind_of(model)
    config = dict(vars(model.config))
    config = {k: list(v) if isinstance(v, tuple) else v for k, v in config.items()}
    meta = {
        "format_version": str(FORMAT_VERSION),
        "kind": kind,
        "model_version": model.version,
        "config": json.dumps(config, sort_keys=True),
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    if kind == "detector":
        meta["fine_tuned_for"] = model.fine_tuned_for or ""
    tensors = {k: v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # one metadata key: safetensors stores the map unordered, so several keys
    # would make the header byte order vary between runs
    save_file(tensors, str(path), metadata={_META_KEY: json.dumps(meta, sort_keys=True)})
    return path


def read_metadata(path: Path) -> dict:
    try:
        with safe_open(str(path), framework="pt") as f:
            raw = (f.metadata() or {}).get(_META_KEY, "{}")
        meta = json.loads(raw)
    except (SafetensorError, OSError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != str(FORMAT_VERSION):
        raise CheckpointError(
            f"checkpoint {path} has format version {meta.get('format_version')!r};"
            f" this build reads version {FORMAT_VERSION}"
        )
    return meta


def load_model(path: Path, expect: str | None = None):
    """Load a generator or detector; returns ``(model, extra)``."""
    meta = read_metadata(path)
    kind = meta.get("kind")
    if kind not in _KINDS or (expect and kind != expect):
        raise CheckpointError(f"checkpoint {path} holds {kind!r}, expected {expect or 'a model'}")
    cls, cfg_cls, version = _KINDS[kind]
    if meta.get("model_version") != version:
        raise CheckpointError(
            f"checkpoint {path} was written for {meta.get('model_version')!r}, this build is {version!r}"
        )
    raw = json.loads(meta["config"])
    config = cfg_cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    model = cls(config)
    if kind == "detector":
        model.fine_tuned_for = meta.get("fine_tuned_for") or None
    try:
        model.load_state_dict(load_file(str(path)))
    except (RuntimeError, SafetensorError) as exc:
        raise CheckpointError(f"parameter mismatch in {path}: {exc}") from exc
    for p in model.parameters():
        if not torch.isfinite(p).all():
            raise CheckpointError(f"non-finite parameters in {path}")
    model.eval()
    return model, json.loads(meta.get("extra", "{}"))
