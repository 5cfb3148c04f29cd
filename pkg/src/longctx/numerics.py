"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A ``Graph`` is a frozen DAG of primitive operations built once and then bound
to named input arrays as many times as needed.  ``forward`` produces a
``Tape`` (all intermediate values), ``backward`` walks the tape in reverse
and returns one gradient array per graph input.  Everything runs in float64
by default; float32 is selectable per graph for speed.

Primitives operate on the last axis where an axis matters (softmax,
log-sum-exp, layer norm, l2 normalization).  Broadcasting is limited to
leading-batch and bias-add patterns; any other mismatch raises ``ShapeError``
naming the offending node.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError, UsageError

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715
LAYERNORM_EPS = 1e-5


class Node:
    """One primitive operation (or free input) in a Graph."""

    __slots__ = ("idx", "op", "name", "args", "attrs")

    def __init__(self, idx, op, name, args, attrs):
        self.idx = idx
        self.op = op
        self.name = name
        self.args = args
        self.attrs = attrs

    def __repr__(self):
        return f"Node({self.name}:{self.op})"


class Graph:
    """Builder for a frozen computation DAG.

    Nodes are appended in topological order by construction.  Inputs are
    declared by name and bound at evaluation time, so one graph can be
    reused across parameter updates and batches of the same shape.
    """

    def __init__(self, dtype="float64"):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self.outputs: dict[str, Node] = {}
        self._names: set[str] = set()

    def _register(self, op, args, name=None, **attrs) -> Node:
        if name is None:
            name = f"{op}_{len(self.nodes)}"
        if name in self._names:
            raise UsageError(f"duplicate node name {name!r}")
        for a in args:
            if not isinstance(a, Node) or a.idx >= len(self.nodes) or self.nodes[a.idx] is not a:
                raise UsageError(f"node {name!r} wired to a node from another graph")
        node = Node(len(self.nodes), op, name, tuple(args), attrs)
        self.nodes.append(node)
        self._names.add(name)
        return node

    def input(self, name: str) -> Node:
        node = self._register("input", (), name=name)
        self.inputs[name] = node
        return node

    def output(self, node: Node, name: str | None = None) -> Node:
        self.outputs[name or node.name] = node
        return node

    # -- primitive builders -------------------------------------------------

    def matmul(self, a, b, name=None):
        return self._register("matmul", (a, b), name)

    def add(self, a, b, name=None):
        return self._register("add", (a, b), name)

    def mul(self, a, b, name=None):
        return self._register("mul", (a, b), name)

    def sub(self, a, b, name=None):
        return self.add(a, self.scale(b, -1.0), name)

    def scale(self, a, c, name=None):
        return self._register("scale", (a,), name, c=float(c))

    def gelu(self, a, name=None):
        return self._register("gelu", (a,), name)

    def exp(self, a, name=None):
        return self._register("exp", (a,), name)

    def softmax(self, a, name=None):
        return self._register("softmax", (a,), name)

    def logsumexp(self, a, name=None):
        return self._register("logsumexp", (a,), name)

    def layer_norm(self, a, gain, bias, name=None):
        return self._register("layer_norm", (a, gain, bias), name)

    def l2_normalize(self, a, name=None):
        return self._register("l2_normalize", (a,), name)

    def embedding(self, table, ids, name=None):
        return self._register("embedding", (table, ids), name)

    def gather_rows(self, a, idx, name=None):
        return self._register("gather_rows", (a, idx), name)

    def diag(self, a, name=None):
        return self._register("diag", (a,), name)

    def transpose(self, a, axes, name=None):
        return self._register("transpose", (a,), name, axes=tuple(axes))

    def reshape(self, a, shape, name=None):
        return self._register("reshape", (a,), name, shape=tuple(shape))

    def slice_rows(self, a, n, name=None):
        return self._register("slice_rows", (a,), name, n=int(n))

    def mean(self, a, name=None):
        return self._register("mean", (a,), name)


class Tape:
    """Values of every node from one forward pass, consumed by backward.

    ``aux`` holds per-node intermediates (tanh terms, norm statistics) so the
    backward pass never recomputes transcendentals.
    """

    def __init__(self, graph: Graph, values, bound_inputs, aux):
        self.graph = graph
        self.values = values
        self.bound_inputs = bound_inputs
        self.aux = aux

    @property
    def outputs(self) -> dict[str, np.ndarray]:
        return {name: self.values[n.idx] for name, n in self.graph.outputs.items()}

    def value(self, node: Node) -> np.ndarray:
        return self.values[node.idx]


def _check_finite(value, node):
    # a single-pass reduction: any NaN poisons the sum, +/-Inf survives it
    # (pairwise float64 summation cannot overflow for arrays this size)
    if value.size and not np.isfinite(value.sum(dtype=np.float64)):
        if np.isfinite(value.min()) and np.isfinite(value.max()):
            return  # genuine cancellation overflow cannot happen in float64
        raise NumericError(f"non-finite values produced by node {node.name!r} ({node.op})")


def _require(cond, node, msg):
    if not cond:
        raise ShapeError(f"node {node.name!r} ({node.op}): {msg}")


def _broadcastable(sa, sb):
    for da, db in zip(reversed(sa), reversed(sb)):
        if da != db and da != 1 and db != 1:
            return False
    return True


def _sum_to_shape(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _softmax_last(x):
    e = x - x.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def _gelu_tanh(x):
    x2 = x * x
    t = _GELU_A * x2 * x
    t += x
    t *= _GELU_C
    np.tanh(t, out=t)
    return 0.5 * x * (1.0 + t), (t, x2)


def _gelu_grad(x, t, x2):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)


def _layer_norm_parts(x):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = (x - mu) * inv
    return xhat, inv


# -- forward rules -----------------------------------------------------------


def _fwd(node, xs):
    """Returns (value, aux); aux carries intermediates the VJP reuses."""
    op = node.op
    if op == "matmul":
        a, b = xs
        _require(a.ndim >= 2 and b.ndim >= 2, node, "matmul needs >=2-d operands")
        _require(a.shape[-1] == b.shape[-2], node,
                 f"inner dims differ: {a.shape} @ {b.shape}")
        _require(_broadcastable(a.shape[:-2], b.shape[:-2]), node,
                 f"leading dims not broadcastable: {a.shape} @ {b.shape}")
        return np.matmul(a, b), None
    if op == "add" or op == "mul":
        a, b = xs
        _require(_broadcastable(a.shape, b.shape), node,
                 f"shapes not broadcastable: {a.shape} vs {b.shape}")
        return (a + b if op == "add" else a * b), None
    if op == "scale":
        return xs[0] * node.attrs["c"], None
    if op == "gelu":
        return _gelu_tanh(xs[0])
    if op == "exp":
        return np.exp(xs[0]), None
    if op == "softmax":
        _require(xs[0].ndim >= 1, node, "softmax needs >=1-d input")
        return _softmax_last(xs[0]), None
    if op == "logsumexp":
        x = xs[0]
        _require(x.ndim >= 1, node, "logsumexp needs >=1-d input")
        m = x.max(axis=-1, keepdims=True)
        e = np.exp(x - m)
        s = e.sum(axis=-1, keepdims=True)
        return np.squeeze(m, -1) + np.log(np.squeeze(s, -1)), e / s
    if op == "layer_norm":
        x, gain, bias = xs
        _require(x.ndim >= 1, node, "layer_norm needs >=1-d input")
        _require(_broadcastable(x.shape, gain.shape) and _broadcastable(x.shape, bias.shape),
                 node, "gain/bias not broadcastable to input")
        xhat, inv = _layer_norm_parts(x)
        return xhat * gain + bias, (xhat, inv)
    if op == "l2_normalize":
        x = xs[0]
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        _require(bool(np.all(n > 0)), node, "zero-norm row cannot be normalized")
        return x / n, n
    if op == "embedding":
        table, ids = xs
        _require(table.ndim == 2, node, "embedding table must be 2-d")
        _require(np.issubdtype(ids.dtype, np.integer), node, "ids must be integers")
        _require(ids.size == 0 or (ids.min() >= 0 and ids.max() < table.shape[0]),
                 node, "token id out of range")
        return table[ids], None
    if op == "gather_rows":
        x, idx = xs
        _require(x.ndim >= 2 and idx.ndim == 1 and idx.shape[0] == x.shape[0],
                 node, f"gather_rows expects [B,...] and [B] index, got {x.shape}, {idx.shape}")
        _require(np.issubdtype(idx.dtype, np.integer), node, "indices must be integers")
        _require(idx.size == 0 or (idx.min() >= 0 and idx.max() < x.shape[1]),
                 node, "row index out of range")
        return x[np.arange(x.shape[0]), idx], None
    if op == "diag":
        x = xs[0]
        _require(x.ndim == 2 and x.shape[0] == x.shape[1], node,
                 f"diag needs a square matrix, got {x.shape}")
        return np.diagonal(x).copy(), None
    if op == "transpose":
        axes = node.attrs["axes"]
        _require(len(axes) == xs[0].ndim, node,
                 f"axes {axes} do not match rank {xs[0].ndim}")
        return np.transpose(xs[0], axes), None
    if op == "reshape":
        shape = node.attrs["shape"]
        _require(int(np.prod(shape)) == xs[0].size, node,
                 f"cannot reshape {xs[0].shape} to {shape}")
        return xs[0].reshape(shape), None
    if op == "slice_rows":
        n = node.attrs["n"]
        _require(0 < n <= xs[0].shape[0], node,
                 f"slice of {n} rows from shape {xs[0].shape}")
        return xs[0][:n], None
    if op == "mean":
        return np.asarray(xs[0].mean()), None
    raise UsageError(f"unknown primitive {op!r}")


# -- backward rules (vector-Jacobian products) --------------------------------


def _vjp(node, xs, y, gy, aux):
    op = node.op
    if op == "matmul":
        a, b = xs
        ga = np.matmul(gy, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), gy)
        return [_sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape)]
    if op == "add":
        return [_sum_to_shape(gy, xs[0].shape), _sum_to_shape(gy, xs[1].shape)]
    if op == "mul":
        a, b = xs
        return [_sum_to_shape(gy * b, a.shape), _sum_to_shape(gy * a, b.shape)]
    if op == "scale":
        return [gy * node.attrs["c"]]
    if op == "gelu":
        t, x2 = aux
        return [gy * _gelu_grad(xs[0], t, x2)]
    if op == "exp":
        return [gy * y]
    if op == "softmax":
        return [y * (gy - (gy * y).sum(axis=-1, keepdims=True))]
    if op == "logsumexp":
        return [aux * gy[..., None]]
    if op == "layer_norm":
        x, gain, bias = xs
        xhat, inv = aux
        dxhat = gy * gain
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgain = _sum_to_shape(gy * xhat, gain.shape)
        dbias = _sum_to_shape(gy, bias.shape)
        return [dx, dgain, dbias]
    if op == "l2_normalize":
        return [(gy - y * (gy * y).sum(axis=-1, keepdims=True)) / aux]
    if op == "embedding":
        table, ids = xs
        gt = np.zeros_like(table)
        np.add.at(gt, ids, gy)
        return [gt, None]
    if op == "gather_rows":
        x, idx = xs
        gx = np.zeros_like(x)
        gx[np.arange(x.shape[0]), idx] = gy
        return [gx, None]
    if op == "diag":
        gx = np.zeros_like(xs[0])
        np.fill_diagonal(gx, gy)
        return [gx]
    if op == "transpose":
        return [np.transpose(gy, np.argsort(node.attrs["axes"]))]
    if op == "reshape":
        return [gy.reshape(xs[0].shape)]
    if op == "slice_rows":
        gx = np.zeros_like(xs[0])
        gx[: node.attrs["n"]] = gy
        return [gx]
    if op == "mean":
        return [np.full_like(xs[0], gy / xs[0].size)]
    raise UsageError(f"unknown primitive {op!r}")


# -- public API ----------------------------------------------------------------


def forward(graph: Graph, bindings: dict[str, np.ndarray]) -> Tape:
    """Evaluate every node; returns the Tape of intermediate values.

    Raises ``UsageError`` on unbound/unknown names, ``ShapeError`` on shape
    rule violations, ``NumericError`` if any node emits NaN/Inf.
    """
    unknown = set(bindings) - set(graph.inputs)
    if unknown:
        raise UsageError(f"bindings for unknown inputs: {sorted(unknown)}")
    missing = set(graph.inputs) - set(bindings)
    if missing:
        raise UsageError(f"unbound graph inputs: {sorted(missing)}")
    values = [None] * len(graph.nodes)
    aux = [None] * len(graph.nodes)
    bound = {}
    for name, node in graph.inputs.items():
        v = np.asarray(bindings[name])
        if not np.issubdtype(v.dtype, np.integer):
            v = v.astype(graph.dtype, copy=False)
            _check_finite(v, node)
        values[node.idx] = v
        bound[name] = v
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for node in graph.nodes:
            if node.op == "input":
                continue
            xs = [values[a.idx] for a in node.args]
            out, extra = _fwd(node, xs)
            _check_finite(out, node)
            values[node.idx] = out
            aux[node.idx] = extra
    return Tape(graph, values, bound, aux)


def evaluate(graph: Graph, bindings: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Pure forward pass: returns the graph's named outputs."""
    if not graph.outputs:
        raise UsageError("graph declares no outputs")
    return forward(graph, bindings).outputs


def backward(tape: Tape, output: str | None = None, seed=None) -> dict[str, np.ndarray]:
    """Gradients of one output w.r.t. every graph input.

    ``seed`` defaults to 1 for scalar outputs; non-scalar outputs require a
    seed of matching shape.  Inputs that do not reach the output (or are
    integer-valued, like token ids) get zero gradients.
    """
    graph = tape.graph
    if output is None:
        if len(graph.outputs) != 1:
            raise UsageError("graph has multiple outputs; name one")
        output = next(iter(graph.outputs))
    if output not in graph.outputs:
        raise UsageError(f"unknown output {output!r}")
    out_node = graph.outputs[output]
    out_val = tape.values[out_node.idx]
    if seed is None:
        if out_val.size != 1:
            raise UsageError("non-scalar output needs an explicit seed")
        seed = np.ones_like(out_val)
    else:
        seed = np.asarray(seed, dtype=graph.dtype)
        if seed.shape != out_val.shape:
            raise UsageError(f"seed shape {seed.shape} != output shape {out_val.shape}")
    grads = [None] * len(graph.nodes)
    grads[out_node.idx] = seed
    for node in reversed(graph.nodes):
        gy = grads[node.idx]
        if gy is None or node.op == "input":
            continue
        xs = [tape.values[a.idx] for a in node.args]
        parts = _vjp(node, xs, tape.values[node.idx], gy, tape.aux[node.idx])
        for arg, part in zip(node.args, parts):
            if part is None:
                continue
            if grads[arg.idx] is None:
                grads[arg.idx] = part
            else:
                grads[arg.idx] = grads[arg.idx] + part
    result = {}
    for name, node in graph.inputs.items():
        g = grads[node.idx]
        v = tape.values[node.idx]
        if np.issubdtype(v.dtype, np.integer):
            continue
        result[name] = np.zeros_like(v) if g is None else g
    return result


def finite_difference_grad(graph: Graph, bindings: dict[str, np.ndarray],
                           wrt: str, h: float = 1e-5,
                           output: str | None = None) -> np.ndarray:
    """Central-difference gradient of a scalar output w.r.t. one input.

    This is the test oracle: it never touches the backward rules.
    """
    if h <= 0:
        raise UsageError("h must be positive")
    if output is None:
        if len(graph.outputs) != 1:
            raise UsageError("graph has multiple outputs; name one")
        output = next(iter(graph.outputs))
    if wrt not in graph.inputs:
        raise UsageError(f"unknown input {wrt!r}")
    base = np.asarray(bindings[wrt], dtype=np.float64)
    probe = evaluate(graph, bindings)[output]
    if probe.size != 1:
        raise UsageError("finite differences require a scalar output")
    grad = np.zeros_like(base)
    flat = base.ravel()
    gflat = grad.ravel()
    work = dict(bindings)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        work[wrt] = base
        hi = float(evaluate(graph, work)[output])
        flat[i] = orig - h
        lo = float(evaluate(graph, work)[output])
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad
