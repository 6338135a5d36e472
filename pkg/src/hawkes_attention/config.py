"""Run configuration: one YAML document with flat sections, strictly validated."""
from __future__ import annotations

import re
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError

_FLOAT = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(Section):
    path: Optional[str] = None
    format: Literal["json"] = "json"
    valid_path: Optional[str] = None
    test_path: Optional[str] = None
    split: list[float] = Field(default_factory=lambda: [0.8, 0.1, 0.1])
    eval_split: Literal["train", "valid", "test", "all"] = "test"


class HawkesSection(Section):
    mu: list[float] = Field(default_factory=lambda: [0.3, 0.2])
    alpha: list[list[float]] = Field(default_factory=lambda: [[0.4, 0.2], [0.1, 0.5]])
    beta: float | list[list[float]] = 1.0
    horizon: float = 10.0
    n_sequences: int = 100
    min_events: int = 2


class ModelSection(Section):
    d_model: int = 64
    d_k: int = 64
    d_v: int = 64
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 128
    phi_width: int = 8
    phi_depth: int = 2
    kernel_mode: Literal["per_type", "shared"] = "per_type"
    use_pe: bool = False
    use_rnn: bool = False
    d_rnn: int = 64
    dropout: float = 0.1
    probe_policy: Literal["last_event", "per_type"] = "last_event"


class TrainSection(Section):
    lr: float = 1e-3
    weight_decay: float = 1e-3
    dropout: Optional[float] = None
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    S: int = 20
    seed: Optional[int] = None
    quadrature: Literal["uniform", "midpoint"] = "uniform"


class PredictSection(Section):
    n_samples: int = 50
    bound_factor: float = 5.0
    max_rejections: int = 10_000
    horizon_multiple: float = 20.0
    type_at: Literal["true_time", "predicted_time"] = "true_time"
    seed: Optional[int] = None
    debug: bool = False


class KernelsSection(Section):
    grid_max: Optional[float] = None      # default: 3 mean inter-event times
    grid_points: int = 50
    reference_sequence: int = 0
    reference_position: Optional[int] = None   # default: last event


class TimeseriesSection(Section):
    path: Optional[str] = None
    synthetic_length: int = 2000
    synthetic_period: float = 48.0
    synthetic_trend: float = 0.5
    synthetic_noise: float = 0.05
    input_len: int = 96
    horizon: int = 24
    split: list[float] = Field(default_factory=lambda: [0.7, 0.1, 0.2])
    d_model: int = 32
    d_k: int = 32
    d_v: int = 32
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 64
    phi_width: int = 8
    phi_depth: int = 2
    dropout: float = 0.1
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 3
    stride: int = 1


class RunConfig(Section):
    seed: int = 0
    out: Optional[str] = None
    checkpoint: Optional[str] = None
    data: DataSection = Field(default_factory=DataSection)
    hawkes: HawkesSection = Field(default_factory=HawkesSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    predict: PredictSection = Field(default_factory=PredictSection)
    kernels: KernelsSection = Field(default_factory=KernelsSection)
    timeseries: TimeseriesSection = Field(default_factory=TimeseriesSection)

    def echo(self) -> str:
        return yaml.safe_dump(self.model_dump(), sort_keys=True)


def apply_override(doc: dict, assignment: str) -> None:
    """``section.key=value`` (value parsed as YAML) into ``doc``, in place."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {assignment!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse value in {assignment!r}: {e}") from e
    if isinstance(value, str) and _FLOAT.match(value.strip()):
        value = float(value)          # YAML 1.1 reads "5e-4" as a string
    node = doc
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {assignment!r}: {p!r} is not a section")
        node = nxt
    node[parts[-1]] = value


def load_config(path=None, overrides=(), seed=None, out=None) -> RunConfig:
    doc: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a mapping of sections")
    for item in overrides:
        apply_override(doc, item)
    if seed is not None:
        doc["seed"] = seed
    if out is not None:
        doc["out"] = out
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration:\n{e}") from e
