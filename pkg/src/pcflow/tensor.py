"""Dense float64 tensors plus a recorded computation graph with exact
reverse-mode gradients.

A Graph is built once per network architecture and re-evaluated with fresh
bindings; shapes are checked at evaluation time, so one graph serves every
batch size. The primitive set is deliberately small: matrix product, add
(with bias-row broadcast), elementwise multiply / exp / tanh / log, negate,
concatenate and slice along the last axis, sum reduction, and multiplication
by a Python scalar. Everything is float64; float32 is not supported.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "evaluate",
    "backward",
    "value_and_grad",
    "finite_diff_check",
    "TensorError",
    "ShapeError",
    "NonFiniteError",
    "ContractError",
]


class TensorError(Exception):
    """Base class for tensor and graph contract violations."""


class ShapeError(TensorError):
    """Operand shapes do not satisfy a primitive's contract."""


class NonFiniteError(TensorError):
    """A tensor or graph node produced NaN or +/-Inf."""


class ContractError(TensorError):
    """An API precondition was violated (bad binding, bad seed, ...)."""


class Tensor:
    """Row-major float64 array; rejects non-finite values on construction."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if arr.size and not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains non-finite values")
        self.data = arr

    @classmethod
    def _wrap(cls, arr):
        # Internal fast path: caller guarantees float64 and finiteness.
        out = object.__new__(cls)
        out.data = arr
        return out

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def _as_array(value):
    if isinstance(value, Tensor):
        return value.data
    if isinstance(value, np.ndarray) and value.dtype == np.float64:
        return value
    return np.asarray(value, dtype=np.float64)


class _Node:
    __slots__ = ("idx", "name", "op", "args", "attrs")

    def __init__(self, idx, name, op, args, attrs):
        self.idx = idx
        self.name = name
        self.op = op
        self.args = args      # tuple of operand indices
        self.attrs = attrs


_LEAF_OPS = ("input", "parameter", "constant")


class Graph:
    """A static DAG of primitive applications over named leaf tensors.

    Leaves are either trainable ``parameter`` tensors (with a stored value
    that bindings may override), non-trainable ``input`` tensors (must be
    bound per call), or ``constant`` tensors baked at build time. Structure
    is immutable once built; only parameter values may be replaced via
    :meth:`set_parameter`, which callers must serialize against evaluation.
    """

    def __init__(self):
        self._nodes = []
        self._by_name = {}
        self.parameters = {}   # name -> stored np.ndarray value
        self.inputs = []       # names, in declaration order
        self._constants = {}   # name -> np.ndarray
        self._counter = 0

    # -- construction -----------------------------------------------------

    def _add(self, name, op, arg_names, attrs=None):
        if name is None:
            name = f"{op}:{self._counter}"
            self._counter += 1
        if name in self._by_name:
            raise ContractError(f"duplicate node name '{name}'")
        try:
            args = tuple(self._by_name[a].idx for a in arg_names)
        except KeyError as exc:
            raise ContractError(f"unknown operand {exc} for node '{name}'") from None
        node = _Node(len(self._nodes), name, op, args, attrs or {})
        self._nodes.append(node)
        self._by_name[name] = node
        return name

    def input(self, name):
        """Declare a non-trainable leaf; must be bound at every evaluation."""
        out = self._add(name, "input", ())
        self.inputs.append(out)
        return out

    def parameter(self, name, value):
        """Declare a trainable leaf with an initial stored value."""
        arr = _as_array(value)
        out = self._add(name, "parameter", ())
        self.parameters[out] = arr
        return out

    def constant(self, value, name=None):
        """Declare a fixed leaf baked into the graph."""
        arr = _as_array(value)
        out = self._add(name, "constant", ())
        self._constants[out] = arr
        return out

    def set_parameter(self, name, value):
        """Replace a parameter's stored value (external to evaluate/backward)."""
        if name not in self.parameters:
            raise ContractError(f"'{name}' is not a parameter of this graph")
        self.parameters[name] = _as_array(value)

    # primitive applications; each returns the new node's name

    def matmul(self, a, b, name=None):
        return self._add(name, "matmul", (a, b))

    def add(self, a, b, name=None):
        return self._add(name, "add", (a, b))

    def mul(self, a, b, name=None):
        return self._add(name, "mul", (a, b))

    def exp(self, a, name=None):
        return self._add(name, "exp", (a,))

    def tanh(self, a, name=None):
        return self._add(name, "tanh", (a,))

    def log(self, a, name=None):
        return self._add(name, "log", (a,))

    def neg(self, a, name=None):
        return self._add(name, "neg", (a,))

    def concat(self, parts, name=None):
        if len(parts) < 2:
            raise ContractError("concat needs at least two operands")
        return self._add(name, "concat", tuple(parts))

    def slice_last(self, a, start, stop, name=None):
        return self._add(name, "slice", (a,), {"start": int(start), "stop": int(stop)})

    def sum(self, a, axis=None, name=None):
        if axis not in (None, -1):
            raise ContractError("sum supports axis=None or axis=-1 only")
        return self._add(name, "sum", (a,), {"axis": axis})

    def scalar_mul(self, a, c, name=None):
        return self._add(name, "scalar_mul", (a,), {"c": float(c)})

    # -- introspection ----------------------------------------------------

    def has_node(self, name):
        return name in self._by_name

    def node_names(self):
        return [n.name for n in self._nodes]

    def _needed(self, outputs):
        """Boolean mask over nodes: ancestors of the requested outputs."""
        if outputs is None:
            return None
        need = [False] * len(self._nodes)
        stack = []
        for name in outputs:
            node = self._by_name.get(name)
            if node is None:
                raise ContractError(f"unknown output node '{name}'")
            stack.append(node.idx)
        while stack:
            i = stack.pop()
            if need[i]:
                continue
            need[i] = True
            stack.extend(self._nodes[i].args)
        return need


# -- forward primitives ----------------------------------------------------


def _shape_err(node, detail):
    raise ShapeError(f"node '{node.name}' ({node.op}): {detail}")


def _fw_matmul(node, a, b):
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            _shape_err(node, f"inner dims differ: {a.shape} @ {b.shape}")
        return a @ b
    if a.ndim == 2 and b.ndim == 1:
        if a.shape[1] != b.shape[0]:
            _shape_err(node, f"inner dims differ: {a.shape} @ {b.shape}")
        return a @ b
    if a.ndim == 1 and b.ndim == 2:
        if a.shape[0] != b.shape[0]:
            _shape_err(node, f"inner dims differ: {a.shape} @ {b.shape}")
        return a @ b
    _shape_err(node, f"unsupported ranks for matmul: {a.shape} @ {b.shape}")


def _fw_add(node, a, b):
    if a.shape == b.shape:
        return a + b
    # The one permitted broadcast: bias vector added to each row of a matrix.
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return a + b
    _shape_err(node, f"add of incompatible shapes {a.shape} + {b.shape}")


def _fw_mul(node, a, b):
    if a.shape != b.shape:
        _shape_err(node, f"mul of unequal shapes {a.shape} * {b.shape}")
    return a * b


def _fw_concat(node, *parts):
    base = parts[0]
    for p in parts[1:]:
        if p.ndim != base.ndim or p.ndim < 1 or p.shape[:-1] != base.shape[:-1]:
            _shape_err(node, f"concat of incompatible shapes {[p.shape for p in parts]}")
    return np.concatenate(parts, axis=-1)


def _fw_slice(node, a, start, stop):
    if a.ndim < 1 or not (0 <= start < stop <= a.shape[-1]):
        _shape_err(node, f"slice [{start}:{stop}] out of range for shape {a.shape}")
    return np.ascontiguousarray(a[..., start:stop])


def _fw_sum(node, a, axis):
    if axis is None:
        return np.asarray(np.sum(a))
    if a.ndim < 1:
        _shape_err(node, "sum over last axis needs rank >= 1")
    return np.sum(a, axis=-1)


def _evaluate_raw(graph, bindings, outputs=None, check=True):
    """Run the forward pass; returns (values list indexed by node idx, need mask)."""
    bound = {}
    if bindings:
        for key, value in bindings.items():
            bound[key] = _as_array(value)
    need = graph._needed(outputs)
    nodes = graph._nodes
    vals = [None] * len(nodes)
    for node in nodes:
        if need is not None and not need[node.idx]:
            continue
        op = node.op
        if op == "input":
            try:
                out = bound[node.name]
            except KeyError:
                raise ContractError(f"input '{node.name}' is not bound") from None
        elif op == "parameter":
            out = bound.get(node.name)
            if out is None:
                out = graph.parameters[node.name]
        elif op == "constant":
            out = graph._constants[node.name]
        elif op == "matmul":
            a, b = (vals[i] for i in node.args)
            out = _fw_matmul(node, a, b)
        elif op == "add":
            a, b = (vals[i] for i in node.args)
            out = _fw_add(node, a, b)
        elif op == "mul":
            a, b = (vals[i] for i in node.args)
            out = _fw_mul(node, a, b)
        elif op == "exp":
            out = np.exp(vals[node.args[0]])
        elif op == "tanh":
            out = np.tanh(vals[node.args[0]])
        elif op == "log":
            a = vals[node.args[0]]
            if np.any(a <= 0.0):
                raise ContractError(f"node '{node.name}': log of non-positive tensor")
            out = np.log(a)
        elif op == "neg":
            out = -vals[node.args[0]]
        elif op == "concat":
            out = _fw_concat(node, *(vals[i] for i in node.args))
        elif op == "slice":
            out = _fw_slice(node, vals[node.args[0]], node.attrs["start"], node.attrs["stop"])
        elif op == "sum":
            out = _fw_sum(node, vals[node.args[0]], node.attrs["axis"])
        elif op == "scalar_mul":
            out = node.attrs["c"] * vals[node.args[0]]
        else:  # pragma: no cover - construction guards against this
            raise ContractError(f"unknown op '{op}'")
        if check and op not in _LEAF_OPS and not np.isfinite(out).all():
            raise NonFiniteError(f"non-finite values in node '{node.name}' ({op})")
        vals[node.idx] = out
    return vals, need


def evaluate(graph, bindings=None, outputs=None, check=True):
    """Evaluate the graph under the given leaf bindings.

    ``bindings`` must cover every input leaf and may override parameter
    values. Returns a dict mapping every computed node name (all nodes, or
    the ancestors of ``outputs`` when given) to its Tensor value. Purely
    functional: stored parameter values are never mutated.
    """
    vals, need = _evaluate_raw(graph, bindings, outputs, check)
    out = {}
    for node in graph._nodes:
        if need is not None and not need[node.idx]:
            continue
        out[node.name] = Tensor._wrap(vals[node.idx])
    return out


def _grad_targets(graph, wrt):
    if wrt is None:
        return list(graph.parameters)
    for name in wrt:
        node = graph._by_name.get(name)
        if node is None or node.op not in ("parameter", "input"):
            raise ContractError(f"'{name}' is not a leaf of this graph")
    return list(wrt)


def _needs_grad_mask(graph, targets):
    target_set = set(targets)
    needs = [False] * len(graph._nodes)
    for node in graph._nodes:
        if node.op in _LEAF_OPS:
            needs[node.idx] = node.name in target_set
        else:
            needs[node.idx] = any(needs[i] for i in node.args)
    return needs


def _backward_raw(graph, bindings, seed_node, wrt=None, check=True):
    targets = _grad_targets(graph, wrt)
    seed = graph._by_name.get(seed_node)
    if seed is None:
        raise ContractError(f"unknown seed node '{seed_node}'")
    vals, need = _evaluate_raw(graph, bindings, outputs=[seed_node], check=check)
    if vals[seed.idx].shape != ():
        raise ContractError(
            f"seed node '{seed_node}' must be scalar, has shape {vals[seed.idx].shape}"
        )
    needs = _needs_grad_mask(graph, targets)

    adj = [None] * len(graph._nodes)
    adj[seed.idx] = np.ones((), dtype=np.float64)

    def acc(idx, contrib):
        if not needs[idx]:
            return
        if adj[idx] is None:
            adj[idx] = contrib
        else:
            adj[idx] = adj[idx] + contrib

    for node in reversed(graph._nodes):
        if need is not None and not need[node.idx]:
            continue
        g = adj[node.idx]
        if g is None or node.op in _LEAF_OPS or not needs[node.idx]:
            continue
        op = node.op
        if op == "matmul":
            ia, ib = node.args
            a, b = vals[ia], vals[ib]
            if a.ndim == 2 and b.ndim == 2:
                if needs[ia]:
                    acc(ia, g @ b.T)
                if needs[ib]:
                    acc(ib, a.T @ g)
            elif a.ndim == 2 and b.ndim == 1:
                if needs[ia]:
                    acc(ia, np.outer(g, b))
                if needs[ib]:
                    acc(ib, a.T @ g)
            else:  # 1-D @ 2-D
                if needs[ia]:
                    acc(ia, b @ g)
                if needs[ib]:
                    acc(ib, np.outer(a, g))
        elif op == "add":
            ia, ib = node.args
            acc(ia, g)
            if vals[ib].shape != g.shape:  # bias-row broadcast
                acc(ib, g.sum(axis=0))
            else:
                acc(ib, g)
        elif op == "mul":
            ia, ib = node.args
            if needs[ia]:
                acc(ia, g * vals[ib])
            if needs[ib]:
                acc(ib, g * vals[ia])
        elif op == "exp":
            acc(node.args[0], g * vals[node.idx])
        elif op == "tanh":
            y = vals[node.idx]
            acc(node.args[0], g * (1.0 - y * y))
        elif op == "log":
            acc(node.args[0], g / vals[node.args[0]])
        elif op == "neg":
            acc(node.args[0], -g)
        elif op == "concat":
            offset = 0
            for i in node.args:
                width = vals[i].shape[-1]
                acc(i, g[..., offset:offset + width])
                offset += width
        elif op == "slice":
            ia = node.args[0]
            buf = np.zeros_like(vals[ia])
            buf[..., node.attrs["start"]:node.attrs["stop"]] = g
            acc(ia, buf)
        elif op == "sum":
            ia = node.args[0]
            if node.attrs["axis"] is None:
                acc(ia, np.full(vals[ia].shape, float(g)))
            else:
                acc(ia, np.broadcast_to(np.expand_dims(g, -1), vals[ia].shape).copy())
        elif op == "scalar_mul":
            acc(node.args[0], node.attrs["c"] * g)

    grads = {}
    for name in targets:
        node = graph._by_name[name]
        g = adj[node.idx]
        if g is None:
            if node.op == "parameter":
                base = graph.parameters[name]
            else:
                base = _as_array(bindings[name])
            g = np.zeros_like(base)
        grads[name] = g
    return vals[seed.idx], grads


def backward(graph, bindings, seed_node, wrt=None, check=True):
    """Reverse-mode gradients of the scalar ``seed_node``.

    Returns d(seed)/d(p) for every trainable parameter (or for the leaves
    listed in ``wrt``). Exact accumulation in float64; the seed must
    evaluate to a scalar.
    """
    _, grads = _backward_raw(graph, bindings, seed_node, wrt, check)
    return {name: Tensor._wrap(g) for name, g in grads.items()}


def value_and_grad(graph, bindings, seed_node, wrt=None, check=True):
    """Forward value of ``seed_node`` plus its gradients, sharing one pass."""
    value, grads = _backward_raw(graph, bindings, seed_node, wrt, check)
    return float(value), {name: Tensor._wrap(g) for name, g in grads.items()}


def finite_diff_check(graph, bindings, seed_node, eps=1e-6, wrt=None):
    """Worst relative error of backward() against central finite differences.

    Perturbs every coordinate of every checked leaf by +/-eps; the relative
    error denominator is max(|analytic|, |numeric|, 1e-12).
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    targets = _grad_targets(graph, wrt)
    _, grads = _backward_raw(graph, bindings, seed_node, targets)
    bound = dict(bindings) if bindings else {}
    seed_idx = graph._by_name[seed_node].idx

    def seed_value():
        vals, _ = _evaluate_raw(graph, bound, outputs=[seed_node], check=False)
        return float(vals[seed_idx])

    worst = 0.0
    for name in targets:
        if name in bound:
            base = _as_array(bound[name])
        else:
            base = graph.parameters[name]
        analytic = grads[name].reshape(-1)
        work = base.copy()
        flat = work.reshape(-1)
        bound[name] = work
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            f_hi = seed_value()
            flat[k] = orig - eps
            f_lo = seed_value()
            flat[k] = orig
            numeric = (f_hi - f_lo) / (2.0 * eps)
            a = float(analytic[k])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            if err > worst:
                worst = err
        bound[name] = base
    return worst
