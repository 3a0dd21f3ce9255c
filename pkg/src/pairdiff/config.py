"""Declarative run configuration (YAML), overrides, and run metadata."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .corpus import CorpusConfig, CorpusError
from .diffusion import SAMPLER
from .evaluation.experiments import EvalConfig
from .model.denoiser import DenoiserConfig
from .model.prompts import PromptError, PromptSpec
from .training import PRESETS, TrainConfig

OUT_ENV = "PAIRDIFF_OUT"
RESOLVED_NAME = "resolved_config.yaml"
METADATA_NAME = "run.json"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    count: int = 2048
    prompts: tuple[PromptSpec, ...] = ()
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def corpus(self) -> CorpusConfig:
        return self.train.corpus

    @property
    def model(self) -> DenoiserConfig:
        return self.train.model

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        return {
            "seed": self.seed,
            "corpus": {**train.pop("corpus"), "count": self.count,
                       "prompts": [p.to_string() for p in self.prompts]},
            "model": train.pop("model"),
            "train": train,
            "eval": self.eval.to_dict(),
        }

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_SECTIONS = ("preset", "seed", "corpus", "model", "train", "eval")


def _known(section: str, d: dict, fields: set[str]) -> None:
    for k in d:
        if k not in fields:
            raise ConfigError(f"unknown key '{section}.{k}'")


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def from_dict(raw: dict | None) -> RunConfig:
    """Build a RunConfig from a nested mapping; every key is validated."""
    raw = dict(raw or {})
    for k in raw:
        if k not in _SECTIONS:
            raise ConfigError(f"unknown key '{k}'")
    preset_name = raw.get("preset", "desk")
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown key value 'preset={preset_name}'; choose from {sorted(PRESETS)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"'seed' must be a non-negative integer, got {seed!r}")

    corpus_raw = dict(raw.get("corpus") or {})
    count = corpus_raw.pop("count", 2048)
    prompt_strings = corpus_raw.pop("prompts", []) or []
    _known("corpus", corpus_raw, _field_names(CorpusConfig))
    prompts = []
    for i, s in enumerate(prompt_strings):
        try:
            prompts.append(PromptSpec.parse(s))
        except PromptError as exc:
            raise ConfigError(f"'corpus.prompts[{i}]': {exc}") from None
    model_raw = dict(raw.get("model") or {})
    _known("model", model_raw, _field_names(DenoiserConfig))
    train_raw = dict(raw.get("train") or {})
    _known("train", train_raw, _field_names(TrainConfig) - {"model", "corpus", "seed"})
    eval_raw = dict(raw.get("eval") or {})
    _known("eval", eval_raw, _field_names(EvalConfig))
    try:
        corpus = CorpusConfig(**corpus_raw)
        model_defaults = {"codec": "patchify", "image_size": corpus.size,
                          "image_channels": corpus.channels, "num_classes": corpus.num_classes}
        model = DenoiserConfig.from_dict({**model_defaults, **model_raw})
        train = TrainConfig(**{**PRESETS[preset_name], **train_raw, "seed": seed,
                               "model": model, "corpus": corpus})
        ev = EvalConfig.from_dict(eval_raw)
    except (TypeError, ValueError, CorpusError) as exc:
        raise ConfigError(str(exc)) from None
    if not isinstance(count, int) or count < 1:
        raise ConfigError(f"'corpus.count' must be a positive integer, got {count!r}")
    return RunConfig(seed, count, tuple(prompts), train, ev)


def apply_override(raw: dict, assignment: str) -> dict:
    """``section.key=value`` with the value parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' is not of the form key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override '{key}' descends into a non-mapping")
    node[parts[-1]] = yaml.safe_load(value)
    return raw


def load(path=None, overrides=()) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping at the top level")
    for o in overrides:
        apply_override(raw, o)
    return from_dict(raw)


def default_out(command: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / command


def write_run_files(out_dir, cfg: RunConfig, command: str, inputs: dict | None = None,
                    extra: dict | None = None) -> Path:
    """Persist the resolved config and a metadata record next to a command's outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_NAME).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    h = hashlib.sha256()
    h.update(cfg.content_hash().encode())
    for name, value in sorted((inputs or {}).items()):
        h.update(f"{name}={value}".encode())
    meta = {
        "command": command,
        "tool_version": __version__,
        "sampler": SAMPLER,
        "config_hash": cfg.content_hash(),
        "input_hash": h.hexdigest(),
        "inputs": inputs or {},
        "numpy": np.__version__,
        "python": platform.python_version(),
        **(extra or {}),
    }
    path = out / METADATA_NAME
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path
