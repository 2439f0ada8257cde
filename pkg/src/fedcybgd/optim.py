"""Client-side local training of the responsible blocks."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .model import DataBatch, forward_loss, model_gradients, owned_parameter_names

OPTIMIZERS = ("sgd", "adam", "powersgd")


class LocalTrainingError(RuntimeError):
    pass


@dataclass
class PowerSGDBuffer:
    q: np.ndarray
    error: np.ndarray


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rank: int = 4
    seed: int = 0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    power: dict[str, PowerSGDBuffer] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZERS}")

    def fresh(self) -> "OptimizerState":
        """Same hyperparameters, empty moments and buffers."""
        return OptimizerState(self.kind, self.lr, self.beta1, self.beta2, self.eps, self.rank, self.seed)


def _check_shapes(params, grads):
    for k, g in grads.items():
        if np.shape(g) != np.shape(params[k]):
            raise ValueError(f"{k}: gradient shape {np.shape(g)} != parameter shape {np.shape(params[k])}")


def _sgd_update(state, params, grads):
    lr = state.lr
    return {k: -(params[k].dtype.type(lr) * g) for k, g in grads.items()}


def _adam_update(state, params, grads):
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = {}
    for k, g in grads.items():
        g = np.asarray(g)
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        out[k] = (-state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(params[k].dtype, copy=False)
    return out


def orthonormalize(p: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Gram-Schmidt on columns; columns that collapse to zero stay zero."""
    p = np.array(p, dtype=np.float64)
    for i in range(p.shape[1]):
        col = p[:, i]
        for j in range(i):
            col -= (p[:, j] @ col) * p[:, j]
        norm = np.linalg.norm(col)
        p[:, i] = col / norm if norm > eps else 0.0
    return p


def powersgd_grad(grad: np.ndarray, rank: int, buf: PowerSGDBuffer | None = None,
                  rng: np.random.Generator | None = None):
    """One power-iteration step of rank-``rank`` compression with error feedback.

    Returns ``(P, Q, reconstruction, buffer)``. ``rank`` is clamped to
    ``min(grad.shape)``. The buffer's ``q`` warm-starts the next call and its
    ``error`` carries what the reconstruction missed.
    """
    if grad.ndim != 2:
        raise ValueError("powersgd_grad expects a 2-D matrix")
    if rank < 1:
        raise ValueError("rank must be >= 1")
    mrows, ncols = grad.shape
    r = min(rank, mrows, ncols)
    if buf is None:
        rng = np.random.default_rng(0) if rng is None else rng
        q0 = rng.standard_normal((ncols, min(mrows, ncols)))[:, :r]
        buf = PowerSGDBuffer(q0, np.zeros((mrows, ncols)))
    mat = np.asarray(grad, dtype=np.float64) + buf.error
    p = orthonormalize(mat @ buf.q)
    q = mat.T @ p
    recon = p @ q.T
    buf = PowerSGDBuffer(q, mat - recon)
    return p, q, recon, buf


def _powersgd_update(state, params, grads):
    out = {}
    for k, g in grads.items():
        if g.ndim >= 2:
            mat = g.reshape(g.shape[0], -1)
            rng = np.random.default_rng([state.seed, zlib.crc32(k.encode())])
            _, _, recon, state.power[k] = powersgd_grad(mat, state.rank, state.power.get(k), rng)
            g = recon.reshape(g.shape)
        out[k] = (-state.lr * g).astype(params[k].dtype, copy=False)
    return out


_UPDATES = {"sgd": _sgd_update, "adam": _adam_update, "powersgd": _powersgd_update}


def optimizer_update(state: OptimizerState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]):
    """Advance ``state`` by one step and return the additive update for each parameter."""
    _check_shapes(params, grads)
    state.step += 1
    return _UPDATES[state.kind](state, params, grads)


def optimizer_step(state: OptimizerState, params, grads):
    """One step of ``state.kind``; returns (new params, state)."""
    upd = optimizer_update(state, params, grads)
    return {k: params[k] + u for k, u in upd.items()}, state


def sgd_step(state, params, grads):
    return optimizer_step(_as_kind(state, "sgd"), params, grads)


def adam_step(state, params, grads):
    """Bias-corrected Adam step; returns (new params, state)."""
    return optimizer_step(_as_kind(state, "adam"), params, grads)


def powersgd_step(state, params, grads):
    """SGD on low-rank reconstructions of each matrix gradient; vectors go uncompressed."""
    return optimizer_step(_as_kind(state, "powersgd"), params, grads)


def _as_kind(state, kind):
    if state.kind != kind:
        raise ValueError(f"optimizer state is {state.kind!r}, not {kind!r}")
    return state


@dataclass
class BlockDelta:
    """The uploaded payload: responsible-parameter displacement after local training."""

    client: int
    round: int
    blocks: tuple[int, ...]
    tensors: dict[str, np.ndarray]

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(np.asarray(v, dtype=np.float64) ** 2) for v in self.tensors.values())))


@dataclass
class LocalUpdateResult:
    delta: BlockDelta
    losses: list[float]
    steps: int


def iter_minibatches(shard: DataBatch, batch_size: int | None, rng: np.random.Generator | None):
    n = len(shard)
    if batch_size is None or batch_size >= n:
        yield shard
        return
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield shard.take(order[start:start + batch_size])


def local_train(view, shard: DataBatch, epochs: int, opt: OptimizerState,
                batch_size: int | None = None, rng: np.random.Generator | None = None,
                trainable: list[str] | None = None) -> LocalUpdateResult:
    """Train the responsible parameters of ``view`` for ``epochs`` passes over ``shard``.

    Every other parameter stays frozen. ``batch_size=None`` means full-batch steps.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if len(shard) == 0:
        raise ValueError("empty shard")
    names = owned_parameter_names(view, view.responsible) if trainable is None else list(trainable)
    params = view.named_parameters()
    start = {k: params[k] for k in names}
    current = dict(start)
    delta = {k: np.zeros_like(v) for k, v in start.items()}
    losses = []
    steps = 0
    for _ in range(epochs):
        for batch in iter_minibatches(shard, batch_size, rng):
            model = view.with_parameters(current)
            loss, trace = forward_loss(model, batch)
            if not np.isfinite(loss):
                raise LocalTrainingError(
                    f"client {view.client} round {view.round}: non-finite loss {loss} at step {steps}"
                )
            losses.append(loss)
            grads = model_gradients(model, trace, names)
            for k, u in optimizer_update(opt, current, grads).items():
                delta[k] = delta[k] + u
                current[k] = start[k] + delta[k]
            steps += 1
    return LocalUpdateResult(BlockDelta(view.client, view.round, tuple(view.responsible), delta), losses, steps)
