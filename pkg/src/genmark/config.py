"""Layered experiment configuration: defaults < JSON file < environment < flags.

Environment overrides use ``GENMARK_REGISTRY`` for the registry root and
``GENMARK__<SECTION>__<KEY>`` (JSON-decoded value) for anything else, e.g.
``GENMARK__PRETRAIN__STEPS=200``.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import ConfigurationError
from .finetune import FinetuneConfig
from .pipeline import ToyGridConfig
from .pretrain import PretrainConfig
from .registry import REGISTRY_ENV
from .synthesis import ProxyConfig

_SECTIONS = ("pretrain", "proxy", "finetune", "evaluation")
_SCALARS = ("registry", "output", "resolution", "seed", "task", "corpus_size", "family", "synth_steps")


def _evaluation_defaults() -> dict:
    g = asdict(ToyGridConfig())
    drop = {"proxy", "task", "resolution", "family", "images_per_prompt", "finetune_epochs", "finetune_lr",
            "proxy_steps"}
    return {k: v for k, v in g.items() if k not in drop}


def _finetune_defaults() -> dict:
    d = asdict(FinetuneConfig())
    d.pop("subject_id")
    return d


@dataclass
class ExperimentConfig:
    registry: str = "genmark-registry"
    output: str = "genmark-out"
    resolution: int = 64
    seed: int = 0
    task: str = "human_face"
    corpus_size: int = 5000
    family: str = "ddpm"
    synth_steps: int = ProxyConfig().steps
    pretrain: dict = field(default_factory=lambda: asdict(PretrainConfig()))
    proxy: dict = field(default_factory=lambda: asdict(ProxyConfig()))
    finetune: dict = field(default_factory=_finetune_defaults)
    evaluation: dict = field(default_factory=_evaluation_defaults)
    config_path: str | None = None
    sources: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(**{**self.pretrain, "resolution": self.resolution})

    def proxy_config(self) -> ProxyConfig:
        return ProxyConfig(**self.proxy)

    def finetune_config(self, subject_id: str = "") -> FinetuneConfig:
        d = dict(self.finetune)
        if d.get("prompts_used") is not None:
            d["prompts_used"] = tuple(d["prompts_used"])
        return FinetuneConfig(**d, subject_id=subject_id)

    def toy_grid_config(self) -> ToyGridConfig:
        e = copy.deepcopy(self.evaluation)
        for k in ("fractions", "forgery_multiples", "scenarios"):
            e[k] = tuple(e[k])
        e["removal"] = tuple(tuple(r) for r in e["removal"])
        return ToyGridConfig(**e, task=self.task, resolution=self.resolution, family=self.family,
                             proxy=self.proxy_config(), proxy_steps=self.synth_steps,
                             images_per_prompt=self.finetune["images_per_prompt"],
                             finetune_epochs=self.finetune["epochs"], finetune_lr=self.finetune["lr"])


def _set(cfg: ExperimentConfig, key: str, value, source: str) -> None:
    parts = key.split(".")
    if len(parts) == 1 and parts[0] in _SCALARS:
        current = getattr(cfg, parts[0])
        setattr(cfg, parts[0], _coerce(value, current, key))
    elif len(parts) == 2 and parts[0] in _SECTIONS:
        section = getattr(cfg, parts[0])
        if parts[1] not in section:
            raise ConfigurationError(f"unknown config key {key!r}")
        section[parts[1]] = _coerce(value, section[parts[1]], key)
    else:
        raise ConfigurationError(f"unknown config key {key!r}")
    cfg.sources[key] = source


def _coerce(value, current, key: str):
    if isinstance(value, str) and not isinstance(current, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError as exc:
            if current is None:
                return value
            raise ConfigurationError(f"cannot parse {key}={value!r}") from exc
    if isinstance(current, bool) or current is None:
        return value
    if isinstance(current, int) and isinstance(value, (int, float)) and not isinstance(value, bool):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigurationError(f"{key} must be an integer")
        return int(value)
    if isinstance(current, float) and isinstance(value, (int, float)):
        return float(value)
    if isinstance(current, (list, tuple)) and isinstance(value, (list, tuple)):
        return list(value)
    if type(value) is not type(current):
        raise ConfigurationError(f"{key} expects {type(current).__name__}, got {value!r}")
    return value


def _flatten(doc: Mapping, prefix: str = "") -> dict:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping) and k in _SECTIONS and not prefix:
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config(path: Path | str | None = None, env: Mapping[str, str] | None = None,
                overrides: Mapping[str, object] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    env = os.environ if env is None else env
    if path is not None:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError("config file must hold a JSON object")
        for key, value in _flatten(doc).items():
            _set(cfg, key, value, "file")
        cfg.config_path = str(path.resolve())
    if env.get(REGISTRY_ENV):
        _set(cfg, "registry", env[REGISTRY_ENV], "env")
    for name, value in sorted(env.items()):
        if name.startswith("GENMARK__"):
            key = ".".join(p.lower() for p in name[len("GENMARK__"):].split("__"))
            _set(cfg, key, value, "env")
    for key, value in (overrides or {}).items():
        if value is not None:
            _set(cfg, key, value, "flag")
    return cfg


def parse_assignments(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigurationError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


__all__ = ["ExperimentConfig", "load_config", "parse_assignments"]
