"""Analytic memory / FLOP estimators and cost reports.

Estimators are closed-form and only ever used for the estimate columns; byte
columns always come from measured serialized buffers (see ``transport``).

Assumptions behind the estimators:

* parameters are stored at ``bytes_per_param``; gradients exist only for the
  trainable set, at the same width; Adam keeps two fp32 moments per trainable
  parameter.
* activation bytes = ``activation_coefficient * layers * batch * seq * hidden *
  bytes_per_param``, halved when checkpointing is on.
* a forward pass costs ``2 * params * tokens`` FLOPs. Backward splits into an
  activation-gradient pass (``2 * params * tokens`` over the layers it crosses)
  and a parameter-gradient pass (``2 * params * tokens`` over trainable layers).
* with checkpointing the checkpointed layers are re-run during backward and the
  backward sweep crosses the full depth whatever the trainable set is (frozen
  layers still need recomputation and input gradients for the sweep to reach
  the trainable block). Without checkpointing the sweep stops at the shallowest
  trainable block.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

MODES = ("fed-full", "fedcybgd", "lora-like")


@dataclass(frozen=True)
class ModelShape:
    block_params: tuple[int, ...]
    embed_params: int
    head_params: int
    hidden: int

    @property
    def n_blocks(self) -> int:
        return len(self.block_params)

    @property
    def total_params(self) -> int:
        return sum(self.block_params) + self.embed_params + self.head_params

    @classmethod
    def from_model(cls, model) -> "ModelShape":
        """Works for a BlockModel or a CompressedView (dropped blocks count as 0)."""
        emb = sum(v.size for v in model.embedding.values())
        head = sum(v.size for v in model.head.values())
        blocks = []
        for b in model.blocks:
            params = getattr(b, "params", None)
            blocks.append(0 if params is None else sum(v.size for v in params.values()))
        return cls(tuple(int(x) for x in blocks), int(emb), int(head), model.config.width)

    @classmethod
    def llama2_7b(cls) -> "ModelShape":
        hidden, inter, layers, vocab = 4096, 11008, 32, 32000
        block = 4 * hidden * hidden + 3 * hidden * inter + 2 * hidden
        return cls((block,) * layers, vocab * hidden, vocab * hidden + hidden, hidden)


@dataclass(frozen=True)
class CostModelConfig:
    bytes_per_param: int = 2
    optimizer_moments: int = 2
    optimizer_bytes: int = 4
    activation_coefficient: float = 17.0
    checkpointing: bool = True
    batch_size: int = 2
    seq_len: int = 4096
    lora_fraction: float = 0.005

    def __post_init__(self):
        for k in ("bytes_per_param", "optimizer_bytes", "batch_size", "seq_len"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.activation_coefficient < 0 or self.optimizer_moments < 0:
            raise ValueError("coefficients must be non-negative")


def _trainable(shape: ModelShape, mode: str, responsible: Sequence[int] | None, cfg: CostModelConfig) -> float:
    if mode == "fed-full":
        return shape.total_params
    if mode == "lora-like":
        return sum(shape.block_params) * cfg.lora_fraction
    resp = (0,) if responsible is None else responsible
    return sum(shape.block_params[j] for j in resp)


def estimate_memory(shape: ModelShape, mode: str, cfg: CostModelConfig = CostModelConfig(),
                    responsible: Sequence[int] | None = None) -> dict[str, float]:
    """Peak client memory in bytes, split into params / grads / optimizer / activations."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    trainable = _trainable(shape, mode, responsible, cfg)
    bpp = cfg.bytes_per_param
    params = shape.total_params * bpp
    grads = trainable * bpp
    opt = trainable * cfg.optimizer_moments * cfg.optimizer_bytes
    layers = _activation_layers(shape, mode, cfg, responsible)
    act = cfg.activation_coefficient * layers * cfg.batch_size * cfg.seq_len * shape.hidden * bpp
    if cfg.checkpointing:
        act /= 2
    out = {"params": float(params), "grads": float(grads), "optimizer": float(opt), "activations": float(act)}
    out["total"] = sum(out.values())
    return out


def _activation_layers(shape, mode, cfg, responsible) -> int:
    if shape.n_blocks == 0:
        return 0
    if mode != "fedcybgd" or cfg.checkpointing:
        return shape.n_blocks
    shallowest = min(responsible) if responsible else 0
    return shape.n_blocks - shallowest


def estimate_flops(shape: ModelShape, tokens: int, mode: str, responsible: Sequence[int] | None = None,
                   cfg: CostModelConfig = CostModelConfig()) -> tuple[float, float]:
    """(forward, backward) FLOPs for one pass over ``tokens`` tokens."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    blocks = shape.block_params
    fwd = 2.0 * shape.total_params * tokens
    if mode == "fed-full":
        act = 2.0 * tokens * (sum(blocks) + shape.head_params)
        par = 2.0 * tokens * shape.total_params
        recompute = 2.0 * tokens * sum(blocks) if cfg.checkpointing else 0.0
        return fwd, act + par + recompute
    if mode == "lora-like":
        act = 2.0 * tokens * (sum(blocks) + shape.head_params)
        par = 2.0 * tokens * sum(blocks) * cfg.lora_fraction
        recompute = 2.0 * tokens * sum(blocks) if cfg.checkpointing else 0.0
        return fwd, act + par + recompute
    resp = sorted((0,) if responsible is None else responsible)
    if cfg.checkpointing:
        crossed = sum(blocks)
        recompute = 2.0 * tokens * sum(blocks)
    else:
        crossed = sum(blocks[resp[0]:])
        recompute = 0.0
    act = 2.0 * tokens * (crossed + shape.head_params)
    par = 2.0 * tokens * sum(blocks[j] for j in resp)
    return fwd, act + par + recompute


def expected_backward_ratio(shape: ModelShape, cfg: CostModelConfig = CostModelConfig(), tokens: int = 1) -> float:
    """Mean fedcybgd/fed-full backward FLOPs over a uniformly placed single responsible block."""
    full = estimate_flops(shape, tokens, "fed-full", cfg=cfg)[1]
    per = [estimate_flops(shape, tokens, "fedcybgd", (j,), cfg)[1] for j in range(shape.n_blocks)]
    return sum(per) / len(per) / full


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

COLUMNS = ("memory", "download", "upload", "forward", "backward")


@dataclass
class CostReport:
    rows: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"columns": list(COLUMNS), "rows": self.rows}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CostReport":
        data = json.loads(text)
        return cls({k: {c: v[c] for c in COLUMNS} for k, v in data["rows"].items()})

    def to_text(self) -> str:
        header = ["method", "memory", "download", "upload", "forward", "backward"]
        body = [
            [m, _fmt_bytes(r["memory"]), _fmt_bytes(r["download"]), _fmt_bytes(r["upload"]),
             _fmt_flops(r["forward"]), _fmt_flops(r["backward"])]
            for m, r in self.rows.items()
        ]
        widths = [max(len(str(row[i])) for row in [header] + body) for i in range(len(header))]
        lines = ["  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                           for i, (c, w) in enumerate(zip(row, widths))) for row in [header] + body]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines) + "\n"


def _fmt_bytes(x: float) -> str:
    for unit, div in (("GB", 1e9), ("MB", 1e6), ("KB", 1e3)):
        if x >= div:
            return f"{x / div:.2f} {unit}"
    return f"{x:.0f} B"


def _fmt_flops(x: float) -> str:
    for unit, div in (("TFLOP", 1e12), ("GFLOP", 1e9), ("MFLOP", 1e6)):
        if x >= div:
            return f"{x / div:.2f} {unit}"
    return f"{x:.0f} FLOP"


def emit_cost_report(ledgers: Mapping[str, object] | Iterable) -> CostReport:
    """One row per method: peak memory estimate and mean per-session byte/FLOP totals."""
    if isinstance(ledgers, Mapping):
        items = list(ledgers.items())
    else:
        items = [(lg.method, lg) for lg in ledgers]
    if not items:
        raise ValueError("need at least one ledger")
    report = CostReport()
    for method, ledger in items:
        sessions = ledger.sessions
        n = max(len(sessions), 1)
        report.rows[method] = {
            "memory": max((s.peak_memory_bytes for s in sessions), default=0.0),
            "download": sum(s.download_bytes for s in sessions) / n,
            "upload": sum(s.upload_bytes for s in sessions) / n,
            "forward": sum(s.forward_flops for s in sessions) / n,
            "backward": sum(s.backward_flops for s in sessions) / n,
        }
    return report
