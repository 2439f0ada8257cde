"""Server side of federated cyclic block training, plus the comparison paradigms.

A round is one cycle: the server draws a fresh random client order, then for
each client in turn sends a compressed view, receives the client's block delta
and applies it before the next client is served. Clients later in the cycle
therefore see the blocks refreshed earlier in the same round.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import transport
from .compression import NO_COMPRESSION, CompressorSpec, full_view, hybrid_compress
from .costs import CostModelConfig, ModelShape, estimate_flops, estimate_memory
from .model import BlockModel, DataBatch, forward_loss, owned_parameter_names
from .optim import BlockDelta, LocalTrainingError, OptimizerState, local_train

STRATEGIES = ("auto", "one-to-one", "contiguous-groups", "many-clients-per-block")
BASELINES = ("fed-full", "fedbavg", "centralized-cy")


class ProtocolError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# partition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PartitionScheme:
    assignments: Mapping[int, tuple[int, ...]]
    strategy: str
    n_blocks: int

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    def clients_for(self, block: int) -> list[int]:
        return [c for c, blocks in self.assignments.items() if block in blocks]

    def coverage(self) -> dict[int, int]:
        out = {b: 0 for b in range(self.n_blocks)}
        for blocks in self.assignments.values():
            for b in blocks:
                out[b] += 1
        return out


def assign_blocks(m: int, B: int, strategy: str = "auto") -> PartitionScheme:
    """Client to responsible-block mapping.

    ``auto`` picks one-to-one for m == B, contiguous groups for m < B and a
    round-robin many-clients-per-block layout for m > B. Contiguous groups are
    balanced: sizes differ by at most one, larger groups first.
    """
    if m < 1 or B < 1:
        raise ValueError(f"need m >= 1 and B >= 1, got m={m}, B={B}")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy == "auto":
        strategy = "one-to-one" if m == B else ("contiguous-groups" if m < B else "many-clients-per-block")
    if strategy == "one-to-one":
        if m != B:
            raise ValueError(f"one-to-one needs m == B, got m={m}, B={B}")
        assignments = {i: (i,) for i in range(m)}
    elif strategy == "contiguous-groups":
        if m > B:
            raise ValueError(f"contiguous-groups needs m <= B, got m={m}, B={B}")
        base, extra = divmod(B, m)
        assignments, start = {}, 0
        for i in range(m):
            size = base + (1 if i < extra else 0)
            assignments[i] = tuple(range(start, start + size))
            start += size
    else:
        if m < B:
            raise ValueError(f"many-clients-per-block needs m >= B, got m={m}, B={B}")
        assignments = {i: (i % B,) for i in range(m)}
    return PartitionScheme(assignments, strategy, B)


# ---------------------------------------------------------------------------
# server state machine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Session:
    client: int
    blocks: tuple[int, ...]


@dataclass
class _Outstanding:
    session: Session
    download_bytes: int
    shape: ModelShape


@dataclass
class ServerState:
    model: BlockModel
    partition: PartitionScheme
    lr: float = 1.0
    compressor: CompressorSpec = NO_COMPRESSION
    seed: int = 0
    sequential_groups: bool = False
    cost_model: CostModelConfig = field(default_factory=CostModelConfig)
    ledger: transport.CostLedger = field(default_factory=lambda: transport.CostLedger("fedcybgd"))
    round: int = 0
    plan: list[Session] | None = None
    cursor: int = 0
    updated: set[int] = field(default_factory=set)
    stamps: dict[int, int] = field(default_factory=dict)
    applied: dict[int, int] = field(default_factory=dict)
    skipped: list[int] = field(default_factory=list)
    delta_sq: dict[int, float] = field(default_factory=dict)
    aborted: str | None = None
    outstanding: _Outstanding | None = None

    def __post_init__(self):
        if self.partition.n_blocks != self.model.n_blocks:
            raise ValueError(
                f"partition covers {self.partition.n_blocks} blocks, model has {self.model.n_blocks}"
            )
        self.cycle_rng = np.random.default_rng([self.seed, 1])
        self.drop_rng = np.random.default_rng([self.seed, 2])
        self.stamps = {b: 0 for b in range(self.model.n_blocks)}

    @property
    def client_order(self) -> list[int]:
        seen = []
        for s in self.plan or []:
            if s.client not in seen:
                seen.append(s.client)
        return seen


def plan_cycle(state: ServerState) -> list[int]:
    """Start a round: draw a fresh random client order and lay out its sessions."""
    if state.plan is not None and state.cursor < len(state.plan):
        raise ProtocolError(f"round {state.round} still has {len(state.plan) - state.cursor} sessions")
    order = [int(c) for c in state.cycle_rng.permutation(sorted(state.partition.assignments))]
    plan = []
    for c in order:
        blocks = state.partition.assignments[c]
        if state.sequential_groups:
            plan.extend(Session(c, (b,)) for b in blocks)
        else:
            plan.append(Session(c, tuple(blocks)))
    state.plan, state.cursor = plan, 0
    state.updated, state.applied, state.skipped, state.delta_sq = set(), {}, [], {}
    state.aborted = None
    return order


def _next_session(state: ServerState, client: int) -> Session:
    if state.aborted:
        raise ProtocolError(f"round {state.round} aborted: {state.aborted}")
    if state.plan is None or state.cursor >= len(state.plan):
        raise ProtocolError("no session pending; call plan_cycle first")
    session = state.plan[state.cursor]
    if session.client != client:
        raise ProtocolError(
            f"out-of-order dispatch: client {client} requested, client {session.client} is next"
        )
    return session


def dispatch(state: ServerState, client: int, spec: CompressorSpec | None = None):
    """Send ``client`` its compressed view; what it receives is decoded from the wire bytes."""
    if state.outstanding is not None:
        raise ProtocolError(f"client {state.outstanding.session.client} has not reported yet")
    session = _next_session(state, client)
    spec = state.compressor if spec is None else spec
    updated = state.updated - set(session.blocks)
    view = hybrid_compress(state.model, session.blocks, updated, spec, rng=state.drop_rng,
                           client=client, round=state.round)
    data = transport.encode_view(view)
    received = transport.decode_view(data, state.model.config)
    state.outstanding = _Outstanding(session, len(data), ModelShape.from_model(received))
    return received


def skip(state: ServerState, client: int) -> None:
    """Drop the pending session of ``client``; its blocks stay at the round-start values."""
    if state.outstanding is not None and state.outstanding.session.client == client:
        out = state.outstanding
        state.ledger.record(transport.SessionCost(state.round, client, out.download_bytes, 0))
        state.outstanding = None
    else:
        _next_session(state, client)
    state.skipped.append(client)
    state.cursor += 1


def _expected_names(model: BlockModel, blocks) -> dict[str, tuple[int, ...]]:
    params = model.named_parameters()
    return {n: params[n].shape for n in owned_parameter_names(model, blocks)}


def apply_update(state: ServerState, client: int, delta: BlockDelta | bytes, tokens: int = 0) -> ServerState:
    """theta[blocks] += lr * delta for the reporting client's responsible blocks."""
    out = state.outstanding
    if out is None or out.session.client != client:
        raise ProtocolError(f"client {client} has no outstanding session")
    data = delta if isinstance(delta, (bytes, bytearray)) else transport.encode_delta(delta)
    received = transport.decode_delta(bytes(data))
    expected = _expected_names(state.model, out.session.blocks)
    problems = []
    for name, shape in expected.items():
        if name not in received.tensors:
            problems.append(f"missing {name}")
        elif received.tensors[name].shape != shape:
            problems.append(f"{name}: shape {received.tensors[name].shape} != {shape}")
    problems += [f"unexpected {n}" for n in received.tensors if n not in expected]
    if problems:
        state.aborted = f"client {client} delta rejected: " + "; ".join(problems)
        state.outstanding = None
        raise ProtocolError(state.aborted)

    params = state.model.named_parameters()
    new = {}
    for name, d in received.tensors.items():
        cur = params[name]
        step = d.astype(cur.dtype, copy=False)
        if state.lr != 1.0:
            step = cur.dtype.type(state.lr) * step
        new[name] = cur + step
    state.model = state.model.with_parameters(new)

    blocks = out.session.blocks
    cm = state.cost_model
    fwd, bwd = estimate_flops(out.shape, tokens, "fedcybgd", blocks, cm)
    mem = estimate_memory(out.shape, "fedcybgd", cm, blocks)["total"]
    state.ledger.record(transport.SessionCost(state.round, client, out.download_bytes, len(data), fwd, bwd, mem))
    for b in blocks:
        state.updated.add(b)
        state.stamps[b] = state.round + 1
        state.applied[b] = state.applied.get(b, 0) + 1
    state.delta_sq[client] = state.delta_sq.get(client, 0.0) + received.norm() ** 2
    state.outstanding = None
    state.cursor += 1
    return state


def finish_round(state: ServerState) -> None:
    if state.plan is None or state.cursor != len(state.plan):
        raise ProtocolError(f"round {state.round} has unfinished sessions")
    state.round += 1
    state.plan = None


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 10
    local_epochs: int = 1
    batch_size: int | None = None
    optimizer: OptimizerState = field(default_factory=lambda: OptimizerState("adam"))
    server_lr: float = 1.0
    compressor: CompressorSpec = NO_COMPRESSION
    strategy: str = "auto"
    sequential_groups: bool = False
    seed: int = 0
    on_client_failure: str = "skip"
    fedbavg_clients_per_block: int | None = None
    cost_model: CostModelConfig = field(default_factory=CostModelConfig)

    def problems(self) -> list[str]:
        out = []
        if self.rounds < 0:
            out.append("rounds must be >= 0")
        if self.local_epochs < 1:
            out.append("local_epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            out.append("batch_size must be >= 1 or null")
        if not math.isfinite(self.server_lr) or self.server_lr <= 0:
            out.append("server_lr must be positive")
        if self.strategy not in STRATEGIES:
            out.append(f"strategy must be one of {STRATEGIES}")
        if self.on_client_failure not in ("skip", "abort"):
            out.append("on_client_failure must be 'skip' or 'abort'")
        if self.fedbavg_clients_per_block is not None and self.fedbavg_clients_per_block < 1:
            out.append("fedbavg_clients_per_block must be >= 1 or null")
        out += self.compressor.problems()
        return out


@dataclass
class RoundRecord:
    round: int
    client_order: list[int]
    delta_norm: dict[int, float]
    eval_loss: float | None
    download_bytes: int = 0
    upload_bytes: int = 0
    skipped: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "eval_loss": self.eval_loss,
            "delta_norm": {str(k): v for k, v in sorted(self.delta_norm.items())},
            "download_bytes": self.download_bytes,
            "upload_bytes": self.upload_bytes,
            "client_order": list(self.client_order),
            "skipped": list(self.skipped),
        }


@dataclass
class TrainingResult:
    model: BlockModel
    records: list[RoundRecord]
    ledger: transport.CostLedger


FailureHook = Callable[[int, int], bool]


def _eval(model, batch):
    return None if batch is None else float(forward_loss(model, batch)[0])


def _tokens(shard: DataBatch, epochs: int) -> int:
    per = shard.x.shape[1] if shard.x.ndim == 2 and np.issubdtype(shard.x.dtype, np.integer) else 1
    return int(epochs * len(shard) * per)


def _client_rng(seed, round_, client, session):
    return np.random.default_rng([seed, 3, round_, client, session])


def _train_session(view, shard, cfg, round_, client, session, trainable=None):
    res = local_train(view, shard, cfg.local_epochs, cfg.optimizer.fresh(), cfg.batch_size,
                      _client_rng(cfg.seed, round_, client, session), trainable)
    return res.delta


def _round_record(ledger, round_, order, norms, loss, skipped=()):
    tot = ledger.totals(round_)
    return RoundRecord(round_, list(order), dict(norms), loss, int(tot["download_bytes"]),
                       int(tot["upload_bytes"]), list(skipped))


def _check(model, shards, cfg):
    problems = cfg.problems()
    if problems:
        raise ValueError("; ".join(problems))
    if not shards:
        raise ValueError("need at least one client shard")


def run_training(model: BlockModel, shards: Sequence[DataBatch], cfg: FederationConfig,
                 eval_batch: DataBatch | None = None, fail: FailureHook | None = None,
                 on_round: Callable[[int, BlockModel], None] | None = None) -> TrainingResult:
    """Federated cyclic block training for ``cfg.rounds`` rounds.

    ``fail(round, client)`` returning True simulates that client crashing
    during its session. ``on_round(round, model)`` sees the server model after
    every round.
    """
    _check(model, shards, cfg)
    partition = assign_blocks(len(shards), model.n_blocks, cfg.strategy)
    state = ServerState(model, partition, cfg.server_lr, cfg.compressor, cfg.seed,
                        cfg.sequential_groups, cfg.cost_model)
    records = []
    for _ in range(cfg.rounds):
        t = state.round
        plan_cycle(state)
        for k, session in enumerate(list(state.plan)):
            c = session.client
            view = dispatch(state, c)
            try:
                if fail is not None and fail(t, c):
                    raise LocalTrainingError(f"client {c} failed in round {t}")
                delta = _train_session(view, shards[c], cfg, t, c, k)
            except LocalTrainingError:
                if cfg.on_client_failure == "abort":
                    raise
                skip(state, c)
                continue
            apply_update(state, c, delta, _tokens(shards[c], cfg.local_epochs))
        norms = {c: math.sqrt(v) for c, v in state.delta_sq.items()}
        order, skipped = state.client_order, list(state.skipped)
        finish_round(state)
        records.append(_round_record(state.ledger, t, order, norms, _eval(state.model, eval_batch), skipped))
        if on_round is not None:
            on_round(t, state.model)
    return TrainingResult(state.model, records, state.ledger)


def _weighted_apply(model, deltas, weights, lr):
    params = model.named_parameters()
    total = float(sum(weights))
    acc: dict[str, np.ndarray] = {}
    for delta, w in zip(deltas, weights):
        for name, d in delta.tensors.items():
            term = (w / total) * d.astype(np.float64)
            acc[name] = term if name not in acc else acc[name] + term
    new = {}
    for name, d in acc.items():
        cur = params[name]
        new[name] = cur + (lr * d).astype(cur.dtype)
    return model.with_parameters(new)


def _session_cost(ledger, mode, t, c, view, down, up, tokens, blocks, cm):
    shape = ModelShape.from_model(view)
    fwd, bwd = estimate_flops(shape, tokens, mode, blocks, cm)
    mem = estimate_memory(shape, mode, cm, blocks)["total"]
    ledger.record(transport.SessionCost(t, c, down, up, fwd, bwd, mem))


def _client_round(view, shard, cfg, t, c, k, trainable, fail):
    if fail is not None and fail(t, c):
        raise LocalTrainingError(f"client {c} failed in round {t}")
    return _train_session(view, shard, cfg, t, c, k, trainable)


def _fed_full(model, shards, cfg, eval_batch, fail):
    ledger = transport.CostLedger("fed-full")
    rng = np.random.default_rng([cfg.seed, 1])
    all_blocks = tuple(range(model.n_blocks))
    records = []
    for t in range(cfg.rounds):
        order = [int(c) for c in rng.permutation(len(shards))]
        deltas, weights, norms, skipped = [], [], {}, []
        for k, c in enumerate(order):
            data = transport.encode_view(full_view(model, all_blocks, client=c, round=t))
            view = transport.decode_view(data, model.config)
            try:
                delta = _client_round(view, shards[c], cfg, t, c, k, None, fail)
            except LocalTrainingError:
                if cfg.on_client_failure == "abort":
                    raise
                ledger.record(transport.SessionCost(t, c, len(data), 0))
                skipped.append(c)
                continue
            up = transport.encode_delta(delta)
            delta = transport.decode_delta(up)
            _session_cost(ledger, "fed-full", t, c, view, len(data), len(up),
                          _tokens(shards[c], cfg.local_epochs), all_blocks, cfg.cost_model)
            deltas.append(delta)
            weights.append(len(shards[c]))
            norms[c] = delta.norm()
        if deltas:
            model = _weighted_apply(model, deltas, weights, cfg.server_lr)
        records.append(_round_record(ledger, t, order, norms, _eval(model, eval_batch), skipped))
    return TrainingResult(model, records, ledger)


def _fedbavg(model, shards, cfg, eval_batch, fail):
    ledger = transport.CostLedger("fedbavg")
    partition = assign_blocks(len(shards), model.n_blocks, cfg.strategy)
    block_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    pick_rng = np.random.default_rng([cfg.seed, 4])
    records = []
    for t in range(cfg.rounds):
        block_order = [int(b) for b in block_rng.permutation(model.n_blocks)]
        updated: set[int] = set()
        order, norms_sq, skipped = [], {}, []
        k = 0
        for b in block_order:
            clients = partition.clients_for(b)
            n_pick = cfg.fedbavg_clients_per_block
            if n_pick is not None and n_pick < len(clients):
                clients = sorted(int(c) for c in pick_rng.choice(clients, n_pick, replace=False))
            deltas, weights = [], []
            for c in clients:
                view = hybrid_compress(model, (b,), updated - {b}, cfg.compressor, rng=drop_rng,
                                       client=c, round=t)
                data = transport.encode_view(view)
                view = transport.decode_view(data, model.config)
                if c not in order:
                    order.append(c)
                try:
                    delta = _client_round(view, shards[c], cfg, t, c, k, None, fail)
                except LocalTrainingError:
                    if cfg.on_client_failure == "abort":
                        raise
                    ledger.record(transport.SessionCost(t, c, len(data), 0))
                    skipped.append(c)
                    continue
                finally:
                    k += 1
                up = transport.encode_delta(delta)
                delta = transport.decode_delta(up)
                _session_cost(ledger, "fedcybgd", t, c, view, len(data), len(up),
                              _tokens(shards[c], cfg.local_epochs), (b,), cfg.cost_model)
                deltas.append(delta)
                weights.append(len(shards[c]))
                norms_sq[c] = norms_sq.get(c, 0.0) + delta.norm() ** 2
            if deltas:
                model = _weighted_apply(model, deltas, weights, cfg.server_lr)
            updated.add(b)
        norms = {c: math.sqrt(v) for c, v in norms_sq.items()}
        records.append(_round_record(ledger, t, order, norms, _eval(model, eval_batch), skipped))
    return TrainingResult(model, records, ledger)


def _centralized_cy(model, shards, cfg, eval_batch, fail):
    ledger = transport.CostLedger("centralized-cy")
    data = DataBatch(np.concatenate([s.x for s in shards]), np.concatenate([s.y for s in shards]))
    records = []
    for t in range(cfg.rounds):
        sq = 0.0
        for b in range(model.n_blocks):
            view = full_view(model, (b,), client=0, round=t, updated_set=range(b))
            delta = _train_session(view, data, cfg, t, 0, b)
            _session_cost(ledger, "fedcybgd", t, 0, view, 0, 0, _tokens(data, cfg.local_epochs),
                          (b,), cfg.cost_model)
            model = model.with_parameters({k: model.named_parameters()[k] + d for k, d in delta.tensors.items()})
            sq += delta.norm() ** 2
        records.append(_round_record(ledger, t, [0], {0: math.sqrt(sq)}, _eval(model, eval_batch)))
    return TrainingResult(model, records, ledger)


def run_baseline(kind: str, model: BlockModel, shards: Sequence[DataBatch], cfg: FederationConfig,
                 eval_batch: DataBatch | None = None, fail: FailureHook | None = None) -> TrainingResult:
    """fed-full (FedAvg of full-model deltas), fedbavg (averaged per-block deltas) or centralized-cy."""
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    _check(model, shards, cfg)
    runner = {"fed-full": _fed_full, "fedbavg": _fedbavg, "centralized-cy": _centralized_cy}[kind]
    return runner(model, shards, cfg, eval_batch, fail)


def block_epochs_per_round(kind: str, n_clients: int, n_blocks: int, cfg: FederationConfig) -> int:
    """Compute budget of one round, counted in (block, local epoch) passes."""
    partition = assign_blocks(n_clients, n_blocks, cfg.strategy)
    assigned = sum(len(b) for b in partition.assignments.values())
    if kind == "fedcybgd":
        units = assigned
    elif kind == "fed-full":
        units = n_clients * n_blocks
    elif kind == "fedbavg":
        per = cfg.fedbavg_clients_per_block
        units = assigned if per is None else sum(min(per, len(partition.clients_for(b))) for b in range(n_blocks))
    elif kind == "centralized-cy":
        units = n_blocks
    else:
        raise ValueError(f"unknown method {kind!r}")
    return units * cfg.local_epochs
