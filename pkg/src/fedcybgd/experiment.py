"""Deterministic experiment driver: data, training, metrics, checkpoint and cost report."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

from . import transport
from .config import ExperimentConfig, save_config
from .costs import emit_cost_report
from .data import Dataset, holdout_split, make_synthetic_dataset, partition_data
from .federation import (FederationConfig, TrainingResult, block_epochs_per_round, run_baseline,
                         run_training)
from .model import build_model
from .optim import OptimizerState

OUTPUT_ROOT_ENV = "FEDCYBGD_OUTPUT_ROOT"
METRIC_KEYS = ("round", "eval_loss", "delta_norm", "download_bytes", "upload_bytes", "client_order")


def output_root(default=".") -> Path:
    """Root that relative output directories resolve against; the env var overrides ``default``."""
    return Path(os.environ.get(OUTPUT_ROOT_ENV, default))


def resolve_output_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    return out if out.is_absolute() else output_root() / out


def build_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d, mc = cfg.data, cfg.model
    full = make_synthetic_dataset(
        d.task, d.size + d.eval_size, cfg.seed, seq_len=mc.seq_len, order=d.markov_order,
        n_sources=d.n_sources, concentration=d.concentration, source_mix=d.source_mix, input_dim=mc.input_dim,
        num_classes=mc.num_classes, separation=d.separation, clusters_per_class=d.clusters_per_class,
        noise=d.noise,
    )
    return holdout_split(full, d.eval_size, cfg.seed)


def federation_config(cfg: ExperimentConfig) -> FederationConfig:
    opt = OptimizerState(cfg.optimizer, lr=cfg.local_lr, rank=cfg.powersgd_rank, seed=cfg.seed)
    fc = FederationConfig(
        rounds=cfg.rounds, local_epochs=cfg.local_epochs, batch_size=cfg.batch_size, optimizer=opt,
        server_lr=cfg.server_lr, compressor=cfg.compressor, strategy=cfg.partition,
        sequential_groups=cfg.sequential_groups, seed=cfg.seed, on_client_failure=cfg.on_client_failure,
        fedbavg_clients_per_block=cfg.fedbavg_clients_per_block, cost_model=cfg.cost_model(),
    )
    if cfg.budget is not None:
        per = block_epochs_per_round(cfg.method, cfg.clients, cfg.model.n_layers, fc)
        fc = FederationConfig(**{**fc.__dict__, "rounds": cfg.budget // per})
    return fc


def train(cfg: ExperimentConfig, fail=None) -> TrainingResult:
    """Run the configured method in memory, without writing anything."""
    cfg.validate()
    train_set, eval_set = build_dataset(cfg)
    shards = partition_data(train_set, cfg.clients, cfg.data.scheme, cfg.data.alpha, cfg.seed)
    model = build_model(cfg.model, cfg.seed)
    fc = federation_config(cfg)
    if cfg.method == "fedcybgd":
        return run_training(model, shards, fc, eval_set.batch(), fail)
    return run_baseline(cfg.method, model, shards, fc, eval_set.batch(), fail)


@dataclass
class ExperimentOutputs:
    directory: Path
    metrics: Path
    checkpoint: Path
    report_json: Path
    report_text: Path
    result: TrainingResult


def _metrics_line(rec) -> str:
    d = rec.to_dict()
    return json.dumps({k: d[k] for k in METRIC_KEYS} | {"skipped": d["skipped"]}, sort_keys=False)


def run_experiment(cfg: ExperimentConfig, fail=None) -> ExperimentOutputs:
    """Train, then write metrics.jsonl, config.yaml, checkpoint/, cost_report.{json,txt}."""
    result = train(cfg, fail)
    out = resolve_output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    metrics = out / "metrics.jsonl"
    metrics.write_text("".join(_metrics_line(r) + "\n" for r in result.records))
    ckpt = transport.save_checkpoint(result.model, out / "checkpoint",
                                     extra={"method": cfg.method, "rounds": len(result.records)})
    (out / "ledger.json").write_text(json.dumps(result.ledger.to_dict(), sort_keys=True) + "\n")
    report = emit_cost_report({cfg.method: result.ledger})
    rj, rt = out / "cost_report.json", out / "cost_report.txt"
    rj.write_text(report.to_json() + "\n")
    rt.write_text(report.to_text())
    return ExperimentOutputs(out, metrics, ckpt, rj, rt, result)


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def noniid_comparison_config(method: str, seed: int,
                             output_dir: str = "runs/noniid-comparison") -> ExperimentConfig:
    """Non-IID comparison preset: dirichlet(0.1) over 4 Markov sources, 8 clients, 4 blocks.

    Methods share a budget of 240 (block x local-epoch) passes; each session
    takes one full-batch Adam step.
    """
    from .config import DataSpec
    from .model import ModelConfig

    return ExperimentConfig(
        model=ModelConfig(family="tiny-transformer", n_layers=4, width=32, n_heads=2, vocab_size=64, seq_len=16),
        data=DataSpec(task="char-lm", size=1600, eval_size=200, scheme="dirichlet", alpha=0.1),
        method=method, clients=8, budget=240, local_epochs=1, local_lr=2e-3, optimizer="adam",
        batch_size=None, seed=seed, output_dir=f"{output_dir}/{method}-seed{seed}",
    )
