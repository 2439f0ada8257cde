"""Encodings of views, deltas and checkpoints, and the measured cost ledger."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import wire
from .compression import PENDING, RESPONSIBLE, UPDATED, CompressedView, DropMask, ViewBlock
from .model import BlockModel, ModelConfig, ParamBlock
from .optim import BlockDelta

CHECKPOINT_FORMAT = 1


def _part_messages(kind, tensors_by_part, round_, client, flags_by_part=None, scale_by_part=None):
    out = []
    for part, tensors in tensors_by_part:
        out.append(
            wire.WireMessage(
                kind=kind, round=round_, client=client, block=part,
                scale=(scale_by_part or {}).get(part, 1.0),
                flags=(flags_by_part or {}).get(part, wire.FLAG_PRESENT),
                tensors=dict(tensors or {}),
            )
        )
    return out


def view_messages(view: CompressedView) -> list[wire.WireMessage]:
    msgs = [wire.WireMessage(wire.KIND_VIEW, view.round, view.client, wire.EMBED_INDEX,
                             tensors=dict(view.embedding))]
    for b in view.blocks:
        flags = wire.FLAG_PRESENT if b.present else 0
        if b.state == RESPONSIBLE:
            flags |= wire.FLAG_RESPONSIBLE
        elif b.state == UPDATED:
            flags |= wire.FLAG_UPDATED
        msgs.append(wire.WireMessage(wire.KIND_VIEW, view.round, view.client, b.index, b.scale,
                                     flags, dict(b.params) if b.present else {}))
    msgs.append(wire.WireMessage(wire.KIND_VIEW, view.round, view.client, wire.HEAD_INDEX,
                                 tensors=dict(view.head)))
    return msgs


def encode_view(view: CompressedView) -> bytes:
    return wire.serialize_stream(view_messages(view))


def decode_view(data: bytes, config: ModelConfig) -> CompressedView:
    msgs = wire.deserialize_stream(data)
    if not msgs or any(m.kind != wire.KIND_VIEW for m in msgs):
        raise ValueError("not a view message stream")
    embedding = head = None
    blocks = []
    for m in msgs:
        if m.block == wire.EMBED_INDEX:
            embedding = m.tensors
        elif m.block == wire.HEAD_INDEX:
            head = m.tensors
        else:
            if m.flags & wire.FLAG_RESPONSIBLE:
                state = RESPONSIBLE
            elif m.flags & wire.FLAG_UPDATED:
                state = UPDATED
            else:
                state = PENDING
            blocks.append(ViewBlock(m.block, state, m.tensors if m.present else None, m.scale))
    if embedding is None or head is None:
        raise ValueError("view stream lacks embedding or head")
    blocks.sort(key=lambda b: b.index)
    responsible = tuple(b.index for b in blocks if b.state == RESPONSIBLE)
    mask = DropMask(tuple(b.present for b in blocks), tuple(b.scale for b in blocks))
    return CompressedView(config, msgs[0].round, msgs[0].client, responsible, tuple(blocks),
                          embedding, head, mask)


def _split_parts(tensors: dict[str, np.ndarray]):
    parts: dict[int, dict[str, np.ndarray]] = {}
    for name, value in tensors.items():
        kind, rest = name.split(".", 1)
        if kind == "embed":
            parts.setdefault(wire.EMBED_INDEX, {})[rest] = value
        elif kind == "head":
            parts.setdefault(wire.HEAD_INDEX, {})[rest] = value
        else:
            idx, leaf = rest.split(".", 1)
            parts.setdefault(int(idx), {})[leaf] = value
    order = sorted(parts, key=lambda p: (p == wire.HEAD_INDEX, p))
    return [(p, parts[p]) for p in order]


def _join_part(part: int, leaf: str) -> str:
    if part == wire.EMBED_INDEX:
        return f"embed.{leaf}"
    if part == wire.HEAD_INDEX:
        return f"head.{leaf}"
    return f"blocks.{part}.{leaf}"


def delta_messages(delta: BlockDelta) -> list[wire.WireMessage]:
    return _part_messages(wire.KIND_DELTA, _split_parts(delta.tensors), delta.round, delta.client)


def encode_delta(delta: BlockDelta) -> bytes:
    return wire.serialize_stream(delta_messages(delta))


def decode_delta(data: bytes) -> BlockDelta:
    msgs = wire.deserialize_stream(data)
    if not msgs or any(m.kind != wire.KIND_DELTA for m in msgs):
        raise ValueError("not a delta message stream")
    tensors, blocks = {}, []
    for m in msgs:
        if m.block >= 0:
            blocks.append(m.block)
        for leaf, v in m.tensors.items():
            tensors[_join_part(m.block, leaf)] = v
    return BlockDelta(msgs[0].client, msgs[0].round, tuple(sorted(blocks)), tensors)


def model_messages(model: BlockModel, kind: int = wire.KIND_CHECKPOINT, round_: int = 0,
                   client: int = -1) -> list[wire.WireMessage]:
    return _part_messages(kind, _split_parts(model.named_parameters()), round_, client)


def model_bytes(model: BlockModel) -> int:
    """Serialized length of the whole model as one view/checkpoint stream."""
    return len(wire.serialize_stream(model_messages(model)))


def save_checkpoint(model: BlockModel, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for msg in model_messages(model):
        raw = wire.serialize_block(msg)
        entries.append({"part": msg.block, "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    (directory / "blocks.bin").write_bytes(b"".join(chunks))
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": dataclasses.asdict(model.config),
        "block_order": [b.index for b in model.blocks],
        "parts": entries,
        "file": "blocks.bin",
    }
    if extra:
        manifest["extra"] = extra
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(directory) -> BlockModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')}")
    config = ModelConfig(**manifest["config"])
    data = (directory / manifest["file"]).read_bytes()
    parts = {}
    for entry in manifest["parts"]:
        chunk = data[entry["offset"]: entry["offset"] + entry["length"]]
        msg = wire.deserialize_block(chunk)
        if msg.block != entry["part"]:
            raise ValueError(f"manifest/part mismatch at offset {entry['offset']}")
        parts[msg.block] = {k: _readonly(v) for k, v in msg.tensors.items()}
    blocks = tuple(ParamBlock(i, parts[i]) for i in manifest["block_order"])
    return BlockModel(config, parts[wire.EMBED_INDEX], blocks, parts[wire.HEAD_INDEX])


def _readonly(arr):
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# ledger
# ---------------------------------------------------------------------------


@dataclass
class SessionCost:
    round: int
    client: int
    download_bytes: int
    upload_bytes: int
    forward_flops: float = 0.0
    backward_flops: float = 0.0
    peak_memory_bytes: float = 0.0


_SUMMED = ("download_bytes", "upload_bytes", "forward_flops", "backward_flops")


@dataclass
class CostLedger:
    method: str = ""
    sessions: list[SessionCost] = field(default_factory=list)

    def record(self, entry: SessionCost) -> None:
        self.sessions.append(entry)

    def totals(self, round: int | None = None) -> dict[str, float]:
        rows = [s for s in self.sessions if round is None or s.round == round]
        out = {k: sum(getattr(s, k) for s in rows) for k in _SUMMED}
        out["peak_memory_bytes"] = max((s.peak_memory_bytes for s in rows), default=0.0)
        out["sessions"] = len(rows)
        return out

    def per_round(self) -> dict[int, dict[str, float]]:
        return {r: self.totals(r) for r in sorted({s.round for s in self.sessions})}

    def to_dict(self) -> dict:
        return {"method": self.method, "sessions": [dataclasses.asdict(s) for s in self.sessions]}

    @classmethod
    def from_dict(cls, data: dict) -> "CostLedger":
        return cls(data.get("method", ""), [SessionCost(**s) for s in data["sessions"]])


def account_session(view_bytes: bytes | int, delta_bytes: bytes | int, ledger: CostLedger, *,
                    round: int = 0, client: int = -1, forward_flops: float = 0.0,
                    backward_flops: float = 0.0, peak_memory_bytes: float = 0.0) -> CostLedger:
    """Record one client session; byte counts come from the serialized buffers."""

    def _len(x):
        return x if isinstance(x, (int, np.integer)) else len(x)

    ledger.record(SessionCost(round, client, int(_len(view_bytes)), int(_len(delta_bytes)),
                              float(forward_flops), float(backward_flops), float(peak_memory_bytes)))
    return ledger

