"""Download-side compression: layer drop, structured pruning and the hybrid scheme.

Blocks already updated in the current round are pruned (deterministically);
blocks still pending are randomly dropped; the responsible blocks and the
embedding/head always travel intact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .model import BlockModel, ModelConfig, ParamBlock

RESPONSIBLE, UPDATED, PENDING = "responsible", "updated", "pending"


@dataclass(frozen=True)
class CompressorSpec:
    drop_probability: float = 0.5
    scaled: bool = False
    prune_ratio: float = 0.25
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if not 0.0 <= self.drop_probability < 1.0:
            out.append(f"drop_probability must be in [0, 1), got {self.drop_probability}")
        if not 0.0 <= self.prune_ratio < 1.0:
            out.append(f"prune_ratio must be in [0, 1), got {self.prune_ratio}")
        return out

    def validate(self) -> "CompressorSpec":
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))
        return self

    @property
    def keep_scale(self) -> float:
        return 1.0 / (1.0 - self.drop_probability) if self.scaled else 1.0


NO_COMPRESSION = CompressorSpec(drop_probability=0.0, prune_ratio=0.0)


@dataclass(frozen=True)
class DropMask:
    keep: tuple[bool, ...]
    scale: tuple[float, ...]

    def kept(self) -> int:
        return sum(self.keep)


@dataclass(frozen=True)
class ViewBlock:
    index: int
    state: str
    params: Mapping[str, np.ndarray] | None
    scale: float = 1.0

    @property
    def present(self) -> bool:
        return self.params is not None

    def num_params(self) -> int:
        return 0 if self.params is None else int(sum(v.size for v in self.params.values()))


@dataclass(frozen=True)
class CompressedView:
    """What one client downloads: enough of the model to train its responsible blocks."""

    config: ModelConfig
    round: int
    client: int
    responsible: tuple[int, ...]
    blocks: tuple[ViewBlock, ...]
    embedding: Mapping[str, np.ndarray]
    head: Mapping[str, np.ndarray]
    mask: DropMask
    _graph_cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def stamp(self, index: int) -> int:
        """Round whose parameters block ``index`` carries (t or t + 1)."""
        return self.round + 1 if self.blocks[index].state == UPDATED else self.round

    def updated_set(self) -> set[int]:
        return {b.index for b in self.blocks if b.state == UPDATED}

    def active_blocks(self) -> list[tuple[int, float]]:
        return [(b.index, b.scale) for b in self.blocks if b.present]

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {f"embed.{k}": v for k, v in self.embedding.items()}
        for b in self.blocks:
            if b.present:
                out.update({f"blocks.{b.index}.{k}": v for k, v in b.params.items()})
        out.update({f"head.{k}": v for k, v in self.head.items()})
        return out

    def num_params(self) -> int:
        return sum(v.size for v in self.named_parameters().values())

    def with_parameters(self, updates: Mapping[str, np.ndarray]) -> "CompressedView":
        emb, head = dict(self.embedding), dict(self.head)
        blocks = {b.index: dict(b.params) if b.present else None for b in self.blocks}
        for name, value in updates.items():
            kind, rest = name.split(".", 1)
            if kind == "embed":
                emb[rest] = value
            elif kind == "head":
                head[rest] = value
            else:
                idx, leaf = rest.split(".", 1)
                if blocks[int(idx)] is None:
                    raise KeyError(f"block {idx} is not present in this view")
                blocks[int(idx)][leaf] = value
        new_blocks = tuple(
            ViewBlock(b.index, b.state, blocks[b.index], b.scale) for b in self.blocks
        )
        return CompressedView(self.config, self.round, self.client, self.responsible,
                              new_blocks, emb, head, self.mask, self._graph_cache)


def _rng_for(spec: CompressorSpec, rng):
    return np.random.default_rng(spec.seed) if rng is None else rng


def layer_drop(model: BlockModel, responsible: Iterable[int], spec: CompressorSpec,
               rng: np.random.Generator | None = None, client: int = -1,
               round: int = 0) -> tuple[CompressedView, DropMask]:
    """Keep each non-responsible block with probability ``1 - p``."""
    view = hybrid_compress(model, responsible, (), spec, rng=rng, client=client, round=round)
    return view, view.mask


def prune_block(block: ParamBlock, ratio: float) -> ParamBlock:
    """Remove the ``ratio`` fraction of MLP hidden units with the smallest fan-in norm.

    A hidden unit's score is the L2 norm of its incoming weights (its column of
    ``mlp.w_up``). Attention and layernorm tensors are untouched.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"prune ratio must be in [0, 1), got {ratio}")
    h = block.hidden_units
    n_remove = math.ceil(ratio * h - 1e-9)
    if n_remove == 0:
        return block
    if n_remove >= h:
        raise ValueError(f"ratio {ratio} would remove all {h} hidden units")
    w_up = block.params["mlp.w_up"]
    norms = np.sqrt(np.sum(w_up.astype(np.float64) ** 2, axis=0))
    order = np.argsort(-norms, kind="stable")
    keep = np.sort(order[: h - n_remove])
    params = dict(block.params)
    params["mlp.w_up"] = w_up[:, keep]
    params["mlp.b_up"] = block.params["mlp.b_up"][keep]
    params["mlp.w_down"] = block.params["mlp.w_down"][keep, :]
    return ParamBlock(block.index, params, block.frozen)


def mlp_param_count(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(params[k].size for k in ("mlp.w_up", "mlp.b_up", "mlp.w_down")))


def hybrid_compress(model: BlockModel, responsible: Iterable[int], updated_set: Iterable[int],
                    spec: CompressorSpec, rng: np.random.Generator | None = None,
                    client: int = -1, round: int = 0) -> CompressedView:
    """Prune updated blocks, drop pending ones, keep responsible blocks intact."""
    spec.validate()
    responsible = tuple(sorted(set(responsible)))
    updated = set(updated_set)
    n = model.n_blocks
    bad = [i for i in responsible if not 0 <= i < n]
    if bad or not responsible:
        raise ValueError(f"invalid responsible block set {responsible} for {n} blocks")
    if updated & set(responsible):
        raise ValueError(f"responsible blocks {sorted(updated & set(responsible))} are in updated_set")
    pending = [i for i in range(n) if i not in updated and i not in responsible]
    rng = _rng_for(spec, rng)
    draws = dict(zip(pending, rng.random(len(pending))))
    p = spec.drop_probability

    out, keep, scale = [], [], []
    for blk in model.blocks:
        i = blk.index
        if i in responsible:
            vb = ViewBlock(i, RESPONSIBLE, blk.params, 1.0)
        elif i in updated:
            vb = ViewBlock(i, UPDATED, prune_block(blk, spec.prune_ratio).params, 1.0)
        elif draws[i] >= p:
            vb = ViewBlock(i, PENDING, blk.params, spec.keep_scale)
        else:
            vb = ViewBlock(i, PENDING, None, 0.0)
        out.append(vb)
        keep.append(vb.present)
        scale.append(vb.scale)
    return CompressedView(model.config, round, client, responsible, tuple(out),
                          model.embedding, model.head, DropMask(tuple(keep), tuple(scale)))


def full_view(model: BlockModel, responsible: Iterable[int], client: int = -1, round: int = 0,
              updated_set: Iterable[int] = ()) -> CompressedView:
    """Uncompressed view (every block present at scale 1)."""
    updated = set(updated_set) - set(responsible)
    return hybrid_compress(model, responsible, updated, NO_COMPRESSION, client=client, round=round)


def compress_vector(theta: np.ndarray, spec: CompressorSpec, rng: np.random.Generator,
                    groups: np.ndarray | None = None) -> np.ndarray:
    """One draw of the drop operator on a flat parameter vector.

    Coordinates are kept independently unless ``groups`` assigns them to
    blocks that are kept or dropped jointly.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if groups is None:
        keep = rng.random(theta.size) >= spec.drop_probability
    else:
        groups = np.asarray(groups).reshape(-1)
        uniq, inv = np.unique(groups, return_inverse=True)
        keep = (rng.random(uniq.size) >= spec.drop_probability)[inv]
    return np.where(keep, theta * spec.keep_scale, 0.0)


def omega_estimate(spec: CompressorSpec, theta: np.ndarray, samples: int,
                   rng: np.random.Generator | None = None,
                   groups: np.ndarray | None = None) -> tuple[float, float | None]:
    """Monte Carlo ``(||E[C(theta)] - theta||, E||C(theta) - theta||^2 / ||theta||^2)``.

    The second element is None when ``theta`` is zero.
    """
    if samples < 100:
        raise ValueError("need at least 100 samples")
    spec.validate()
    rng = _rng_for(spec, rng)
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    total = np.zeros_like(theta)
    sq = 0.0
    for _ in range(samples):
        c = compress_vector(theta, spec, rng, groups)
        total += c
        sq += float(np.sum((c - theta) ** 2))
    bias = float(np.linalg.norm(total / samples - theta))
    norm2 = float(np.sum(theta**2))
    if norm2 == 0.0:
        return bias, None
    return bias, sq / samples / norm2
