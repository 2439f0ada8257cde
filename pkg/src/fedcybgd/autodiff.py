"""
Graph-based reverse-mode differentiation on numpy arrays.

Tensors are plain ``numpy.ndarray`` values (float64, float32 or float16;
float16 is storage-only and never used for arithmetic). A ``ComputeGraph`` is
an immutable, topologically ordered list of nodes built with ``GraphBuilder``.
``forward`` evaluates a graph and keeps every activation in a ``Trace`` which
``backward`` consumes.

Backward only touches nodes that depend on a requested parameter, so frozen
parameters never get gradient storage and backpropagation stops at the
shallowest trainable parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

ARITH_DTYPES = (np.float64, np.float32)
_MASK_VALUE = -1e9
_GELU_C = math.sqrt(2.0 / math.pi)


class GraphError(Exception):
    """Raised for malformed graphs or bad bindings."""


class ShapeError(GraphError):
    def __init__(self, node_id: int, op: str, detail: str):
        super().__init__(f"node {node_id} ({op}): {detail}")
        self.node_id = node_id
        self.op = op


class NumericOverflowError(ArithmeticError):
    def __init__(self, node_id: int, op: str):
        super().__init__(f"non-finite value produced at node {node_id} ({op})")
        self.node_id = node_id
        self.op = op


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...] = ()
    name: str | None = None
    attrs: tuple = ()

    def attr(self, key, default=None):
        for k, v in self.attrs:
            if k == key:
                return v
        return default


@dataclass(frozen=True)
class ComputeGraph:
    nodes: tuple[Node, ...]
    output: int
    params: Mapping[str, int]
    inputs: Mapping[str, int]

    def __len__(self) -> int:
        return len(self.nodes)

    def consumers(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.nodes]
        for i, node in enumerate(self.nodes):
            for j in node.inputs:
                out[j].append(i)
        return out


class GraphBuilder:
    """Incrementally records nodes; every op returns the new node id."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._params: dict[str, int] = {}
        self._inputs: dict[str, int] = {}

    def _add(self, op: str, inputs: Iterable[int] = (), name=None, **attrs) -> int:
        inputs = tuple(inputs)
        for i in inputs:
            if not 0 <= i < len(self._nodes):
                raise GraphError(f"{op}: input {i} does not precede the new node")
        self._nodes.append(Node(op, inputs, name, tuple(sorted(attrs.items()))))
        return len(self._nodes) - 1

    def param(self, name: str) -> int:
        if name in self._params:
            return self._params[name]
        nid = self._add("param", name=name)
        self._params[name] = nid
        return nid

    def input(self, name: str) -> int:
        if name in self._inputs:
            return self._inputs[name]
        nid = self._add("input", name=name)
        self._inputs[name] = nid
        return nid

    def matmul(self, a: int, b: int) -> int:
        return self._add("matmul", (a, b))

    def add(self, a: int, b: int) -> int:
        return self._add("add", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self._add("mul", (a, b))

    def scale(self, a: int, c: float) -> int:
        return self._add("scale", (a,), c=float(c))

    def relu(self, a: int) -> int:
        return self._add("relu", (a,))

    def gelu(self, a: int) -> int:
        return self._add("gelu", (a,))

    def softmax(self, a: int) -> int:
        return self._add("softmax", (a,))

    def layernorm(self, x: int, gain: int, bias: int, eps: float = 1e-5) -> int:
        return self._add("layernorm", (x, gain, bias), eps=float(eps))

    def embedding(self, table: int, ids: int) -> int:
        return self._add("embedding", (table, ids))

    def cross_entropy(self, logits: int, targets: int) -> int:
        return self._add("cross_entropy", (logits, targets))

    def reshape(self, a: int, shape: tuple[int, ...]) -> int:
        return self._add("reshape", (a,), shape=tuple(shape))

    def transpose(self, a: int, axes: tuple[int, ...]) -> int:
        return self._add("transpose", (a,), axes=tuple(axes))

    def causal_mask(self, a: int) -> int:
        return self._add("causal_mask", (a,))

    def sum(self, a: int) -> int:
        return self._add("sum", (a,))

    def build(self, output: int | None = None) -> ComputeGraph:
        if not self._nodes:
            raise GraphError("empty graph")
        out = len(self._nodes) - 1 if output is None else output
        return ComputeGraph(tuple(self._nodes), out, dict(self._params), dict(self._inputs))


@dataclass
class Trace:
    """Forward activations of one evaluation; input to ``backward``."""

    graph: ComputeGraph
    values: list[np.ndarray]
    cache: dict[int, tuple] = field(default_factory=dict)

    @property
    def output(self) -> np.ndarray:
        return self.values[self.graph.output]


# ---------------------------------------------------------------------------
# forward kernels
# ---------------------------------------------------------------------------


def _gelu(x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), t


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _layernorm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd)


def _cross_entropy_fwd(logits, targets):
    if not np.issubdtype(targets.dtype, np.integer):
        raise ValueError("targets must be integer class ids")
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {logits.shape} vs targets {targets.shape}")
    if targets.size == 0:
        raise ValueError("empty target set")
    c = logits.shape[-1]
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError(f"target id out of range [0, {c})")
    flat = logits.reshape(-1, c)
    t = targets.reshape(-1)
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(t.size), t]
    probs = np.exp(z - lse[:, None])
    return np.asarray(nll.mean(), dtype=logits.dtype), probs


def _run_node(nid: int, node: Node, args: list[np.ndarray], trace: Trace) -> np.ndarray:
    op = node.op
    if op == "matmul":
        a, b = args
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
        return np.matmul(a, b)
    if op == "add":
        return args[0] + args[1]
    if op == "mul":
        return args[0] * args[1]
    if op == "scale":
        return args[0] * args[0].dtype.type(node.attr("c"))
    if op == "relu":
        return np.maximum(args[0], 0)
    if op == "gelu":
        y, t = _gelu(args[0])
        trace.cache[nid] = (t,)
        return y
    if op == "softmax":
        return _softmax(args[0])
    if op == "layernorm":
        x, g, b = args
        if g.shape != x.shape[-1:] or b.shape != x.shape[-1:]:
            raise ValueError(f"gain/bias {g.shape}/{b.shape} do not match features {x.shape[-1:]}")
        y, saved = _layernorm_fwd(x, g, b, node.attr("eps"))
        trace.cache[nid] = saved
        return y
    if op == "embedding":
        table, ids = args
        if not np.issubdtype(ids.dtype, np.integer):
            raise ValueError("embedding ids must be integers")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ValueError(f"id out of range for table with {table.shape[0]} rows")
        return table[ids]
    if op == "cross_entropy":
        loss, probs = _cross_entropy_fwd(*args)
        trace.cache[nid] = (probs,)
        return loss
    if op == "reshape":
        return args[0].reshape(node.attr("shape"))
    if op == "transpose":
        return np.transpose(args[0], node.attr("axes"))
    if op == "causal_mask":
        x = args[0]
        t, s = x.shape[-2:]
        mask = np.triu(np.ones((t, s), dtype=bool), k=1)
        return np.where(mask, x.dtype.type(_MASK_VALUE), x)
    if op == "sum":
        return np.asarray(args[0].sum(), dtype=args[0].dtype)
    raise GraphError(f"unknown op {op!r}")


def forward(graph: ComputeGraph, bindings: Mapping[str, np.ndarray]) -> Trace:
    """Evaluate every node of ``graph``; ``bindings`` maps param/input names to arrays."""
    missing = [n for n in list(graph.params) + list(graph.inputs) if n not in bindings]
    if missing:
        raise GraphError(f"unbound graph names: {sorted(missing)}")
    trace = Trace(graph, [None] * len(graph.nodes))  # type: ignore[list-item]
    values = trace.values
    for nid, node in enumerate(graph.nodes):
        if node.op in ("param", "input"):
            values[nid] = np.asarray(bindings[node.name])
            continue
        args = [values[i] for i in node.inputs]
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                out = _run_node(nid, node, args, trace)
        except (ValueError, IndexError) as exc:
            raise ShapeError(nid, node.op, str(exc)) from None
        if out.dtype == np.float16:
            raise GraphError(f"node {nid} ({node.op}): float16 arithmetic is not supported")
        if out.dtype == np.float32 and not np.all(np.isfinite(out)):
            raise NumericOverflowError(nid, node.op)
        values[nid] = out
    return trace


def evaluate(graph: ComputeGraph, bindings: Mapping[str, np.ndarray]) -> np.ndarray:
    return forward(graph, bindings).output


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _swap(x):
    return np.swapaxes(x, -1, -2)


def _vjp(nid: int, node: Node, g: np.ndarray, trace: Trace, want: tuple[bool, ...]):
    """Vector-Jacobian products for the inputs flagged in ``want``."""
    vals = trace.values
    ins = [vals[i] for i in node.inputs]
    op = node.op
    if op == "matmul":
        a, b = ins
        ga = _unbroadcast(np.matmul(g, _swap(b)), a.shape) if want[0] else None
        gb = _unbroadcast(np.matmul(_swap(a), g), b.shape) if want[1] else None
        return ga, gb
    if op == "add":
        a, b = ins
        return (
            _unbroadcast(g, a.shape) if want[0] else None,
            _unbroadcast(g, b.shape) if want[1] else None,
        )
    if op == "mul":
        a, b = ins
        return (
            _unbroadcast(g * b, a.shape) if want[0] else None,
            _unbroadcast(g * a, b.shape) if want[1] else None,
        )
    if op == "scale":
        return (g * g.dtype.type(node.attr("c")),)
    if op == "relu":
        return (g * (ins[0] > 0),)
    if op == "gelu":
        x = ins[0]
        (t,) = trace.cache[nid]
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)
    if op == "softmax":
        y = vals[nid]
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    if op == "layernorm":
        xhat, rstd = trace.cache[nid]
        gain = ins[1]
        gx = ggain = gbias = None
        red = tuple(range(g.ndim - 1))
        if want[0]:
            gh = g * gain
            gx = rstd * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        if want[1]:
            ggain = (g * xhat).sum(axis=red)
        if want[2]:
            gbias = g.sum(axis=red)
        return gx, ggain, gbias
    if op == "embedding":
        table, ids = ins
        gt = None
        if want[0]:
            gt = np.zeros_like(table)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return gt, None
    if op == "cross_entropy":
        logits, targets = ins
        (probs,) = trace.cache[nid]
        if not want[0]:
            return None, None
        t = targets.reshape(-1)
        d = probs.copy()
        d[np.arange(t.size), t] -= 1.0
        d *= g / t.size
        return d.reshape(logits.shape).astype(logits.dtype, copy=False), None
    if op == "reshape":
        return (g.reshape(ins[0].shape),)
    if op == "transpose":
        axes = node.attr("axes")
        return (np.transpose(g, np.argsort(axes)),)
    if op == "causal_mask":
        t, s = g.shape[-2:]
        mask = np.triu(np.ones((t, s), dtype=bool), k=1)
        return (np.where(mask, g.dtype.type(0), g),)
    if op == "sum":
        return (np.broadcast_to(g, ins[0].shape).copy(),)
    raise GraphError(f"no gradient rule for op {op!r}")


def backward_nodes(trace: Trace, wrt: Iterable[str], loss_node: int | None = None) -> dict[int, np.ndarray]:
    """Gradients for every node on a path from a ``wrt`` parameter to the loss.

    Returned keys are node ids; nodes that do not depend on ``wrt`` are absent.
    """
    graph = trace.graph
    loss_node = graph.output if loss_node is None else loss_node
    wrt = list(wrt)
    unknown = [w for w in wrt if w not in graph.params]
    if unknown:
        raise GraphError(f"parameters not in graph: {sorted(unknown)}")
    loss = trace.values[loss_node]
    if loss.ndim != 0:
        raise GraphError(f"loss node {loss_node} is not scalar (shape {loss.shape})")

    live = np.zeros(len(graph.nodes), dtype=bool)
    for w in wrt:
        live[graph.params[w]] = True
    for nid, node in enumerate(graph.nodes):
        if not live[nid] and any(live[i] for i in node.inputs):
            live[nid] = True

    grads: dict[int, np.ndarray] = {}
    if not live[loss_node]:
        return grads
    grads[loss_node] = np.ones((), dtype=loss.dtype)
    for nid in range(loss_node, -1, -1):
        node = graph.nodes[nid]
        g = grads.get(nid)
        if g is None or not node.inputs:
            continue
        want = tuple(bool(live[i]) for i in node.inputs)
        if not any(want):
            continue
        for i, gi in zip(node.inputs, _vjp(nid, node, g, trace, want)):
            if gi is None or not live[i]:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
        if node.op != "param":
            del grads[nid]
    return grads


def backward(trace: Trace, wrt: Iterable[str], loss_node: int | None = None) -> dict[str, np.ndarray]:
    """Gradient of the scalar loss with respect to each named parameter in ``wrt``."""
    wrt = list(wrt)
    node_grads = backward_nodes(trace, wrt, loss_node)
    out = {}
    for name in wrt:
        nid = trace.graph.params[name]
        g = node_grads.get(nid)
        if g is None:
            g = np.zeros_like(trace.values[nid])
        out[name] = g
    return out


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], params: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``params`` (evaluated in float64)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.array(params, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        fp = float(loss_fn(theta))
        flat[j] = orig - eps
        fm = float(loss_fn(theta))
        flat[j] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ArithmeticError(f"non-finite loss while perturbing coordinate {j}")
        gflat[j] = (fp - fm) / (2 * eps)
    return grad
