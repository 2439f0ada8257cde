"""Experiment configuration: a YAML document with a pinned schema version."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .compression import CompressorSpec
from .costs import CostModelConfig
from .data import SCHEMES, TASKS
from .federation import STRATEGIES
from .model import ConfigError, ModelConfig
from .optim import OPTIMIZERS

SCHEMA_VERSION = 1
METHODS = ("fedcybgd", "fed-full", "fedbavg", "centralized-cy")


@dataclass(frozen=True)
class DataSpec:
    task: str = "char-lm"
    size: int = 512
    eval_size: int = 128
    scheme: str = "iid"
    alpha: float = 1.0
    markov_order: int = 1
    n_sources: int = 4
    concentration: float = 0.03
    source_mix: float = 0.5
    separation: float = 3.0
    clusters_per_class: int = 1
    noise: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSpec = field(default_factory=DataSpec)
    compressor: CompressorSpec = field(default_factory=CompressorSpec)
    method: str = "fedcybgd"
    clients: int = 4
    rounds: int = 10
    budget: int | None = None
    local_epochs: int = 1
    local_lr: float = 1e-3
    server_lr: float = 1.0
    optimizer: str = "adam"
    powersgd_rank: int = 4
    batch_size: int | None = 32
    partition: str = "auto"
    sequential_groups: bool = False
    on_client_failure: str = "skip"
    fedbavg_clients_per_block: int | None = None
    seed: int = 0
    output_dir: str = "runs/default"

    def problems(self) -> list[str]:
        out = [f"model: {p}" for p in self.model.problems()]
        out += [f"compressor: {p}" for p in self.compressor.problems()]
        d = self.data
        if d.task not in TASKS:
            out.append(f"data.task must be one of {TASKS}, got {d.task!r}")
        if d.scheme not in SCHEMES:
            out.append(f"data.scheme must be one of {SCHEMES}, got {d.scheme!r}")
        if d.scheme == "dirichlet" and not d.alpha > 0:
            out.append(f"data.alpha must be > 0, got {d.alpha}")
        if d.size < self.clients:
            out.append(f"data.size ({d.size}) must be >= clients ({self.clients})")
        if d.eval_size < 1:
            out.append("data.eval_size must be >= 1")
        if d.markov_order not in (1, 2):
            out.append("data.markov_order must be 1 or 2")
        if not 0.0 <= d.source_mix <= 1.0:
            out.append("data.source_mix must be in [0, 1]")
        if d.n_sources < 1 or d.clusters_per_class < 1:
            out.append("data.n_sources and data.clusters_per_class must be >= 1")
        if d.task == "char-lm" and self.model.family != "tiny-transformer":
            out.append("char-lm needs model.family tiny-transformer")
        if d.task == "cluster-classify" and self.model.family != "mlp":
            out.append("cluster-classify needs model.family mlp")
        if d.task == "char-lm" and self.model.vocab_size < 64:
            out.append("char-lm needs model.vocab_size >= 64")
        if self.method not in METHODS:
            out.append(f"method must be one of {METHODS}, got {self.method!r}")
        if self.clients < 1:
            out.append("clients must be >= 1")
        if self.rounds < 0:
            out.append("rounds must be >= 0")
        if self.budget is not None and self.budget < 0:
            out.append("budget must be >= 0 or null")
        if self.local_epochs < 1:
            out.append("local_epochs must be >= 1")
        if not self.local_lr > 0:
            out.append("local_lr must be > 0")
        if not self.server_lr > 0:
            out.append("server_lr must be > 0")
        if self.optimizer not in OPTIMIZERS:
            out.append(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.powersgd_rank < 1:
            out.append("powersgd_rank must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            out.append("batch_size must be >= 1 or null")
        if self.partition not in STRATEGIES:
            out.append(f"partition must be one of {STRATEGIES}, got {self.partition!r}")
        elif self.partition != "auto":
            m, b = self.clients, self.model.n_layers
            ok = {"one-to-one": m == b, "contiguous-groups": m <= b, "many-clients-per-block": m >= b}
            if not ok[self.partition]:
                out.append(f"partition {self.partition} incompatible with clients={m}, blocks={b}")
        if self.on_client_failure not in ("skip", "abort"):
            out.append("on_client_failure must be 'skip' or 'abort'")
        if self.fedbavg_clients_per_block is not None and self.fedbavg_clients_per_block < 1:
            out.append("fedbavg_clients_per_block must be >= 1 or null")
        if not self.output_dir:
            out.append("output_dir must be non-empty")
        return out

    def validate(self) -> "ExperimentConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def cost_model(self) -> CostModelConfig:
        seq = self.model.seq_len if self.model.family == "tiny-transformer" else 1
        return CostModelConfig(
            bytes_per_param=self.model.np_dtype().itemsize,
            activation_coefficient=17.0,
            checkpointing=False,
            batch_size=self.batch_size or self.data.size,
            seq_len=seq,
        )


_NESTED = {"model": ModelConfig, "data": DataSpec, "compressor": CompressorSpec}


def to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    return {"schema_version": SCHEMA_VERSION, **dataclasses.asdict(cfg)}


def from_dict(data: dict[str, Any]) -> ExperimentConfig:
    data = dict(data)
    version = data.pop("schema_version", None)
    problems = []
    if version != SCHEMA_VERSION:
        problems.append(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    problems += [f"unknown key {k!r}" for k in data if k not in known]
    kwargs = {}
    for k, v in data.items():
        if k not in known:
            continue
        if k in _NESTED:
            sub = _NESTED[k]
            sub_known = {f.name for f in dataclasses.fields(sub)}
            if not isinstance(v, dict):
                problems.append(f"{k} must be a mapping")
                continue
            problems += [f"unknown key {k}.{kk!r}" for kk in v if kk not in sub_known]
            kwargs[k] = sub(**{kk: vv for kk, vv in v.items() if kk in sub_known})
        else:
            kwargs[k] = v
    if problems:
        raise ConfigError(problems)
    try:
        return ExperimentConfig(**kwargs).validate()
    except TypeError as e:
        raise ConfigError([f"bad value type: {e}"]) from None


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(to_dict(cfg), sort_keys=True))
    return path


def load_config(path) -> ExperimentConfig:
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return from_dict(data)


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``key=value`` overrides; dotted keys reach nested sections, values parse as YAML."""
    data = to_dict(cfg)
    problems = []
    for item in overrides:
        if "=" not in item:
            problems.append(f"override {item!r} is not key=value")
            continue
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw) if raw else None
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                problems.append(f"override {key!r}: {p!r} is not a section")
                break
            node = node[p]
        else:
            if parts[-1] not in node:
                problems.append(f"override {key!r}: unknown key")
            else:
                node[parts[-1]] = value
    if problems:
        raise ConfigError(problems)
    return from_dict(data)
