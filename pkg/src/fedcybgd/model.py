"""Block-structured models: a residual MLP stack and a tiny pre-LN transformer.

A model is ``embedding -> blocks[0] -> ... -> blocks[B-1] -> head``. Each block
is a residual unit, so a block that is absent from a compressed view is simply
skipped and the residual stream passes through unchanged.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad

FAMILIES = ("mlp", "tiny-transformer")
INIT_STD = 0.02
_DTYPES = {"float64": np.float64, "float32": np.float32}


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class ModelConfig:
    family: str = "tiny-transformer"
    n_layers: int = 4
    width: int = 32
    n_heads: int = 2
    vocab_size: int = 64
    seq_len: int = 16
    mlp_ratio: int = 4
    # mlp family only
    input_dim: int = 16
    num_classes: int = 8
    dtype: str = "float32"

    @property
    def hidden(self) -> int:
        """Hidden units of each block's MLP sublayer."""
        return self.mlp_ratio * self.width

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def problems(self) -> list[str]:
        out = []
        if self.family not in FAMILIES:
            out.append(f"family must be one of {FAMILIES}, got {self.family!r}")
        for name in ("n_layers", "width", "n_heads", "vocab_size", "seq_len", "mlp_ratio",
                     "input_dim", "num_classes"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.n_heads >= 1 and self.width % self.n_heads:
            out.append(f"width {self.width} not divisible by n_heads {self.n_heads}")
        if self.dtype not in _DTYPES:
            out.append(f"dtype must be one of {sorted(_DTYPES)} for training")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self


@dataclass(frozen=True)
class ParamBlock:
    index: int
    params: Mapping[str, np.ndarray]
    frozen: bool = False

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    @property
    def hidden_units(self) -> int:
        return int(self.params["mlp.b_up"].shape[0])


@dataclass(frozen=True)
class DataBatch:
    """``x``: token ids (N, T) or features (N, D); ``y``: targets (N, T) or (N,)."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return int(self.x.shape[0])

    def take(self, idx) -> "DataBatch":
        return DataBatch(self.x[idx], self.y[idx])


def _freeze(arr: np.ndarray) -> np.ndarray:
    if arr.flags.writeable or not arr.flags.c_contiguous:
        arr = np.array(arr, order="C")
    arr.flags.writeable = False
    return arr


def block_tensor_shapes(cfg: ModelConfig, hidden: int | None = None) -> dict[str, tuple[int, ...]]:
    d = cfg.width
    h = cfg.hidden if hidden is None else hidden
    mlp = {"mlp.w_up": (d, h), "mlp.b_up": (h,), "mlp.w_down": (h, d), "mlp.b_down": (d,)}
    if cfg.family == "mlp":
        return {"ln.g": (d,), "ln.b": (d,), **mlp}
    shapes = {"ln1.g": (d,), "ln1.b": (d,)}
    for p in "qkvo":
        shapes[f"attn.w{p}"] = (d, d)
        shapes[f"attn.b{p}"] = (d,)
    shapes.update({"ln2.g": (d,), "ln2.b": (d,)})
    shapes.update(mlp)
    return shapes


def embedding_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    if cfg.family == "mlp":
        return {"w": (cfg.input_dim, cfg.width), "b": (cfg.width,)}
    return {"tok": (cfg.vocab_size, cfg.width), "pos": (cfg.seq_len, cfg.width)}


def head_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    n_out = cfg.num_classes if cfg.family == "mlp" else cfg.vocab_size
    return {"ln.g": (cfg.width,), "ln.b": (cfg.width,), "w": (cfg.width, n_out), "b": (n_out,)}


def _init_tensor(name: str, shape, rng: np.random.Generator, dtype) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        arr = np.ones(shape)
    elif leaf.startswith("b"):
        arr = np.zeros(shape)
    else:
        arr = rng.normal(0.0, INIT_STD, size=shape)
    return _freeze(arr.astype(dtype))


def _init_group(shapes, rng, dtype):
    return {k: _init_tensor(k, s, rng, dtype) for k, s in shapes.items()}


@dataclass(frozen=True)
class BlockModel:
    config: ModelConfig
    embedding: Mapping[str, np.ndarray]
    blocks: tuple[ParamBlock, ...]
    head: Mapping[str, np.ndarray]
    _graph_cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def num_params(self) -> int:
        return sum(v.size for v in self.named_parameters().values())

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {f"embed.{k}": v for k, v in self.embedding.items()}
        for blk in self.blocks:
            out.update({f"blocks.{blk.index}.{k}": v for k, v in blk.params.items()})
        out.update({f"head.{k}": v for k, v in self.head.items()})
        return out

    def trainable_names(self) -> list[str]:
        frozen = {b.index for b in self.blocks if b.frozen}
        return [n for n in self.named_parameters() if part_of(n) not in frozen]

    def active_blocks(self) -> list[tuple[int, float]]:
        return [(b.index, 1.0) for b in self.blocks]

    def with_parameters(self, updates: Mapping[str, np.ndarray]) -> "BlockModel":
        """New model with the named tensors replaced (shapes must match)."""
        emb, head = dict(self.embedding), dict(self.head)
        blocks = [dict(b.params) for b in self.blocks]
        current = self.named_parameters()
        for name, value in updates.items():
            if name not in current:
                raise KeyError(f"unknown parameter {name!r}")
            value = np.asarray(value, dtype=current[name].dtype)
            if value.shape != current[name].shape:
                raise ValueError(f"{name}: shape {value.shape} != {current[name].shape}")
            kind, rest = name.split(".", 1)
            if kind == "embed":
                emb[rest] = _freeze(value)
            elif kind == "head":
                head[rest] = _freeze(value)
            else:
                idx, leaf = rest.split(".", 1)
                blocks[int(idx)][leaf] = _freeze(value)
        new_blocks = tuple(dataclasses.replace(b, params=p) for b, p in zip(self.blocks, blocks))
        return BlockModel(self.config, emb, new_blocks, head, self._graph_cache)

    def freeze(self, indices: Iterable[int], frozen: bool = True) -> "BlockModel":
        idx = set(indices)
        blocks = tuple(dataclasses.replace(b, frozen=frozen) if b.index in idx else b for b in self.blocks)
        return dataclasses.replace(self, blocks=blocks)


def part_of(name: str):
    """'embed', 'head' or the integer block index owning a parameter name."""
    kind, rest = name.split(".", 1)
    if kind == "blocks":
        return int(rest.split(".", 1)[0])
    return kind


def owned_parameter_names(model: BlockModel, block_set: Iterable[int]) -> list[str]:
    """Parameters a client responsible for ``block_set`` trains and uploads.

    The embedding travels with block 0 and the head with the last block.
    """
    owned = set(block_set)
    last = model.n_blocks - 1
    names = []
    for name in model.named_parameters():
        part = part_of(name)
        if part in owned or (part == "embed" and 0 in owned) or (part == "head" and last in owned):
            names.append(name)
    return names


def build_model(config: ModelConfig, seed: int) -> BlockModel:
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = config.np_dtype
    embedding = _init_group(embedding_shapes(config), rng, dtype)
    blocks = tuple(
        ParamBlock(i, _init_group(block_tensor_shapes(config), rng, dtype)) for i in range(config.n_layers)
    )
    head = _init_group(head_shapes(config), rng, dtype)
    return BlockModel(config, embedding, blocks, head)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count of ``build_model(config)``."""
    d, h = config.width, config.hidden
    mlp = d * h + h + h * d + d
    if config.family == "mlp":
        emb = config.input_dim * d + d
        block = 2 * d + mlp
        head = 2 * d + d * config.num_classes + config.num_classes
    else:
        emb = config.vocab_size * d + config.seq_len * d
        block = 2 * d + 4 * (d * d + d) + 2 * d + mlp
        head = 2 * d + d * config.vocab_size + config.vocab_size
    return emb + config.n_layers * block + head


def replace_block(model: BlockModel, index: int, params: ParamBlock) -> BlockModel:
    if not 0 <= index < model.n_blocks:
        raise IndexError(f"block {index} out of range for {model.n_blocks} blocks")
    old = model.blocks[index]
    if set(params.params) != set(old.params):
        raise ValueError(f"block {index}: parameter names differ")
    for k, v in params.params.items():
        if np.shape(v) != old.params[k].shape:
            raise ValueError(f"block {index}.{k}: shape {np.shape(v)} != {old.params[k].shape}")
    new = ParamBlock(
        index,
        {k: _freeze(np.asarray(v, dtype=old.params[k].dtype)) for k, v in params.params.items()},
        params.frozen,
    )
    blocks = model.blocks[:index] + (new,) + model.blocks[index + 1:]
    return dataclasses.replace(model, blocks=blocks)


# ---------------------------------------------------------------------------
# forward graphs
# ---------------------------------------------------------------------------


def _mlp_sublayer(g: ad.GraphBuilder, h: int, prefix: str, act: str) -> int:
    u = g.add(g.matmul(h, g.param(prefix + "mlp.w_up")), g.param(prefix + "mlp.b_up"))
    u = g.relu(u) if act == "relu" else g.gelu(u)
    return g.add(g.matmul(u, g.param(prefix + "mlp.w_down")), g.param(prefix + "mlp.b_down"))


def _residual(g: ad.GraphBuilder, x: int, branch: int, scale: float) -> int:
    if scale != 1.0:
        branch = g.scale(branch, scale)
    return g.add(x, branch)


def _attention(g: ad.GraphBuilder, h: int, prefix: str, cfg: ModelConfig, n: int, t: int) -> int:
    d, nh = cfg.width, cfg.n_heads
    dh = d // nh

    def proj(p):
        y = g.add(g.matmul(h, g.param(f"{prefix}attn.w{p}")), g.param(f"{prefix}attn.b{p}"))
        return g.transpose(g.reshape(y, (n, t, nh, dh)), (0, 2, 1, 3))

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = g.scale(g.matmul(q, g.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = g.softmax(g.causal_mask(scores))
    ctx = g.reshape(g.transpose(g.matmul(probs, v), (0, 2, 1, 3)), (n, t, d))
    return g.add(g.matmul(ctx, g.param(f"{prefix}attn.wo")), g.param(f"{prefix}attn.bo"))


def build_graph(cfg: ModelConfig, active: Sequence[tuple[int, float]], x_shape: tuple[int, ...]) -> ad.ComputeGraph:
    """Loss graph for the given active blocks (index, residual scale) and batch shape."""
    g = ad.GraphBuilder()
    xin, yin = g.input("x"), g.input("y")
    if cfg.family == "mlp":
        x = g.add(g.matmul(xin, g.param("embed.w")), g.param("embed.b"))
        for idx, scale in active:
            p = f"blocks.{idx}."
            h = g.layernorm(x, g.param(p + "ln.g"), g.param(p + "ln.b"))
            x = _residual(g, x, _mlp_sublayer(g, h, p, "relu"), scale)
    else:
        n, t = x_shape
        x = g.add(g.embedding(g.param("embed.tok"), xin), g.param("embed.pos"))
        for idx, scale in active:
            p = f"blocks.{idx}."
            h = g.layernorm(x, g.param(p + "ln1.g"), g.param(p + "ln1.b"))
            x = _residual(g, x, _attention(g, h, p, cfg, n, t), scale)
            h = g.layernorm(x, g.param(p + "ln2.g"), g.param(p + "ln2.b"))
            x = _residual(g, x, _mlp_sublayer(g, h, p, "gelu"), scale)
    h = g.layernorm(x, g.param("head.ln.g"), g.param("head.ln.b"))
    logits = g.add(g.matmul(h, g.param("head.w")), g.param("head.b"))
    g.cross_entropy(logits, yin)
    return g.build()


def _check_batch(cfg: ModelConfig, batch: DataBatch) -> None:
    if len(batch) == 0:
        raise ValueError("empty batch")
    if cfg.family == "tiny-transformer":
        if batch.x.ndim != 2 or batch.x.shape[1] > cfg.seq_len:
            raise ValueError(f"token batch shape {batch.x.shape} incompatible with seq_len {cfg.seq_len}")
        if batch.x.min() < 0 or batch.x.max() >= cfg.vocab_size:
            raise ValueError("token id outside vocabulary")


def forward_loss(model, batch: DataBatch) -> tuple[float, ad.Trace]:
    """Mean cross-entropy of ``model`` (a BlockModel or CompressedView) on ``batch``.

    Returns the loss and the forward trace, which ``autodiff.backward`` accepts.
    """
    cfg: ModelConfig = model.config
    _check_batch(cfg, batch)
    active = tuple(model.active_blocks())
    key = (active, batch.x.shape)
    cache = model._graph_cache
    graph = cache.get(key)
    if graph is None:
        graph = build_graph(cfg, active, batch.x.shape)
        if len(cache) > 256:
            cache.clear()
        cache[key] = graph
    bindings = dict(model.named_parameters())
    x = batch.x
    if cfg.family == "mlp":
        x = np.asarray(x, dtype=cfg.np_dtype)
    else:
        bindings["embed.pos"] = bindings["embed.pos"][: x.shape[1]]
    bindings["x"] = x
    bindings["y"] = batch.y
    trace = ad.forward(graph, bindings)
    return float(trace.output), trace


def model_gradients(model, trace: ad.Trace, names: Iterable[str]) -> dict[str, np.ndarray]:
    """Gradients of the traced loss for ``names``, shaped like the model's tensors.

    Batches shorter than ``seq_len`` bind only the leading rows of the positional
    table; the remaining rows get zero gradient.
    """
    grads = ad.backward(trace, names)
    pos = grads.get("embed.pos")
    if pos is not None:
        full = model.named_parameters()["embed.pos"]
        if pos.shape != full.shape:
            padded = np.zeros_like(full)
            padded[: pos.shape[0]] = pos
            grads["embed.pos"] = padded
    return grads
