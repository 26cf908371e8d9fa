"""Run configuration: one YAML document covering every tunable component."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .data import SynthSpec
from .encoder import EncoderConfig
from .losses import LossConfig
from .model import ModelConfig
from .prompts import DEFAULT_TEMPLATES
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: Optional[str] = None          # dataset directory; default <out>/data
    train_category: str = "cube"
    test_categories: Optional[list] = None   # default: every other category
    fpr_limit: float = 0.3


@dataclass
class AblationConfig:
    point_counts: list = field(default_factory=lambda: [1024, 2048, 4096, 8192])
    source_points: int = 16384
    clouds_per_class: int = 4
    repeats: int = 2


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    model: dict = field(default_factory=dict)
    loss: LossConfig = field(default_factory=LossConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    prompts: dict = field(default_factory=lambda: dict(DEFAULT_TEMPLATES))
    data: DataConfig = field(default_factory=DataConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    out: str = "runs/default"

    def model_config(self) -> ModelConfig:
        return ModelConfig(encoder=self.encoder, templates=dict(self.prompts),
                           **self.model)

    def data_root(self) -> Path:
        return Path(self.data.root) if self.data.root else Path(self.out) / "data"

    def test_categories(self) -> list:
        if self.data.test_categories is not None:
            return list(self.data.test_categories)
        return [c for c in self.synth.categories if c != self.data.train_category]

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), default=list))

    def digest(self) -> str:
        # where results are written does not change the experiment
        doc = {k: v for k, v in self.to_dict().items() if k != "out"}
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SECTIONS = {"train": TrainConfig, "encoder": EncoderConfig, "loss": LossConfig,
             "synth": SynthSpec, "data": DataConfig, "ablation": AblationConfig}
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"encoder", "templates"}


def _build(cls, values: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in values.items():
        if isinstance(v, list) and cls not in (DataConfig, AblationConfig):
            v = tuple(v)
        elif isinstance(v, str) and type(defaults[k]) in (int, float):
            # YAML 1.1 reads "1e-3" as a string
            try:
                v = float(v) if type(defaults[k]) is float else int(v)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {k}: expected a number, got {v!r}") from exc
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a mapping")
    allowed = set(_SECTIONS) | {"model", "prompts", "out"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    parts = {}
    for name, cls in _SECTIONS.items():
        section = doc.get(name)
        section = {} if section is None else section
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a mapping")
        parts[name] = _build(cls, section, name)
    model = doc.get("model")
    model = {} if model is None else model
    if not isinstance(model, dict):
        raise ConfigError("[model] must be a mapping")
    bad = set(model) - _MODEL_KEYS
    if bad:
        raise ConfigError(f"unknown keys in [model]: {sorted(bad)}")
    model = {k: tuple(v) if isinstance(v, list) else v for k, v in model.items()}
    prompts = doc.get("prompts") or dict(DEFAULT_TEMPLATES)
    if set(prompts) != set(DEFAULT_TEMPLATES):
        raise ConfigError(f"[prompts] must define exactly {sorted(DEFAULT_TEMPLATES)}")
    cfg = RunConfig(model=model, prompts=dict(prompts), out=str(doc.get("out", "runs/default")),
                    **parts)
    try:
        cfg.model_config()
    except TypeError as exc:
        raise ConfigError(f"[model] {exc}") from exc
    return cfg


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    doc = json.loads(json.dumps(doc))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        path = key.strip().split(".")
        if not all(path):
            raise ConfigError(f"bad override key {key!r}")
        node = doc
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[path[-1]] = yaml.safe_load(raw)
    return doc


def load_config(path=None, overrides=()) -> RunConfig:
    doc = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(apply_overrides(doc, overrides))
