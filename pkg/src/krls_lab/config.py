"""Run configuration: one JSON document with sections model, corpus, train, reward, sample.

Precedence is command-line flag > file > built-in default. Unknown sections
or keys raise ConfigError.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import CorpusSpec
from .generation import SamplingConfig
from .model import ModelConfig
from .reward import RewardSpec
from .trainer import TrainerConfig


class ConfigError(ValueError):
    pass


def _field_names(cls, exclude=()) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)} - set(exclude)


MODEL_KEYS = _field_names(ModelConfig, exclude=("vocab_size",))
TRAIN_KEYS = _field_names(TrainerConfig, exclude=("reward", "sampling"))
REWARD_KEYS = _field_names(RewardSpec)
SAMPLE_KEYS = _field_names(SamplingConfig)
CORPUS_KEYS = {"path", "spec"}
SECTIONS = {"model": MODEL_KEYS, "corpus": CORPUS_KEYS, "train": TRAIN_KEYS,
            "reward": REWARD_KEYS, "sample": SAMPLE_KEYS}


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    corpus_path: str | None = None
    corpus_spec: CorpusSpec = field(default_factory=CorpusSpec)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **self.model)

    def to_dict(self) -> dict:
        train = self.trainer.to_dict()
        reward = train.pop("reward")
        sample = train.pop("sampling")
        return {
            "model": dict(self.model),
            "corpus": {"path": self.corpus_path, "spec": self.corpus_spec.to_dict()},
            "train": train,
            "reward": reward,
            "sample": sample,
        }


def parse_value(text: str):
    """Interpret a command-line override as JSON when possible, else as a string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, dotted: str, value) -> None:
    section, _, key = dotted.partition(".")
    if not key:
        raise ConfigError(f"override {dotted!r} must look like section.key")
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    if key not in SECTIONS[section]:
        raise ConfigError(f"unknown key {key!r} in section {section!r}")
    doc.setdefault(section, {})[key] = value


def build(doc: dict) -> RunConfig:
    """Validate a raw document and construct the typed configuration."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for section, body in doc.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if body is None:
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be an object")
        unknown = set(body) - SECTIONS[section]
        if unknown:
            raise ConfigError(f"unknown key(s) in section {section!r}: {sorted(unknown)}")
    corpus = doc.get("corpus") or {}
    try:
        spec = CorpusSpec.from_dict(corpus.get("spec") or {})
        reward = RewardSpec(**(doc.get("reward") or {}))
        sample = SamplingConfig(**(doc.get("sample") or {}))
        trainer = TrainerConfig(**(doc.get("train") or {}), reward=reward, sampling=sample)
        model = dict(doc.get("model") or {})
        ModelConfig(vocab_size=8, **model)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(model=model, corpus_path=corpus.get("path"), corpus_spec=spec, trainer=trainer)


def read_document(path: str | Path | None) -> dict:
    """Raw JSON document; a run manifest yields the config it recorded."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if isinstance(doc, dict) and "manifest_version" in doc:
        doc = doc["config"]
    return doc


def load(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    doc = read_document(path)
    doc = json.loads(json.dumps(doc))  # private copy
    for dotted, value in (overrides or {}).items():
        apply_override(doc, dotted, value)
    return build(doc)
