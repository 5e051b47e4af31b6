"""Tape-based reverse-mode differentiation over the numkit kernels.

A :class:`CompGraph` records kernel applications in construction order. Each
recorded node keeps its forward rule, so the tape can be *replayed* with new
leaf values; :func:`finite_diff_check` relies on this to perturb a parameter
and re-evaluate the exact same computation.

Discrete decisions (top-K index sets, dispatch row lists, sampled noise) are
made while the graph is built and are frozen into it as constants. Replays
and backward passes therefore treat them as fixed, which is the subgradient
convention used for routing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk


class GraphError(RuntimeError):
    pass


class Node:
    __slots__ = ("graph", "value", "parents", "fwd", "bwd", "ctx", "name", "trainable", "index")
    # make ndarray (op) Node dispatch to Node's reflected operators
    __array_ufunc__ = None

    def __init__(self, graph, value, parents=(), fwd=None, bwd=None, ctx=None, name=None, trainable=False):
        self.graph = graph
        self.value = value
        self.parents = parents
        self.fwd = fwd
        self.bwd = bwd
        self.ctx = ctx
        self.name = name
        self.trainable = trainable
        self.index = len(graph.nodes)
        graph.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        label = self.name or (self.fwd.__qualname__ if self.fwd else "const")
        return f"Node({label}, shape={self.value.shape})"


class CompGraph:
    """Ordered record of kernel applications with named trainable leaves."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.evaluated = True

    def param(self, name: str, value: np.ndarray, trainable: bool = True) -> Node:
        if name in self.params:
            raise GraphError(f"duplicate parameter {name!r}")
        node = Node(self, nk.tensor(value, self.dtype), name=name, trainable=trainable)
        self.params[name] = node
        return node

    def const(self, value) -> Node:
        return Node(self, np.asarray(value, dtype=self.dtype))

    def lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise GraphError("node belongs to a different graph")
            return x
        return self.const(x)

    def set_param(self, name: str, value: np.ndarray) -> None:
        node = self.params[name]
        node.value = np.asarray(value, dtype=self.dtype).reshape(node.value.shape)
        self.evaluated = False

    def replay(self) -> None:
        """Recompute every op node from current leaf values."""
        for node in self.nodes:
            if node.fwd is not None:
                node.value, node.ctx = node.fwd(*[p.value for p in node.parents])
                nk.check_finite(node.value, f"replay of {node!r}")
        self.evaluated = True

    @property
    def output(self) -> Node:
        return self.nodes[-1]


def _graph_of(*xs) -> CompGraph:
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    raise GraphError("operation needs at least one graph node")


def _apply(fwd, bwd, *inputs) -> Node:
    g = _graph_of(*inputs)
    parents = tuple(g.lift(x) for x in inputs)
    value, ctx = fwd(*[p.value for p in parents])
    nk.check_finite(value, fwd.__qualname__)
    return Node(g, value, parents, fwd, bwd, ctx)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ------------------------------------------------------------------- ops


def add(a, b) -> Node:
    def fwd(x, y):
        return x + y, (x.shape, y.shape)

    def bwd(g, ctx, x, y):
        return _unbroadcast(g, ctx[0]), _unbroadcast(g, ctx[1])

    return _apply(fwd, bwd, a, b)


def sub(a, b) -> Node:
    def fwd(x, y):
        return x - y, (x.shape, y.shape)

    def bwd(g, ctx, x, y):
        return _unbroadcast(g, ctx[0]), -_unbroadcast(g, ctx[1])

    return _apply(fwd, bwd, a, b)


def mul(a, b) -> Node:
    def fwd(x, y):
        return x * y, None

    def bwd(g, ctx, x, y):
        return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

    return _apply(fwd, bwd, a, b)


def scale(a, c: float) -> Node:
    def fwd(x):
        return x * x.dtype.type(c), None

    def bwd(g, ctx, x):
        return (g * g.dtype.type(c),)

    return _apply(fwd, bwd, a)


def square(a) -> Node:
    def fwd(x):
        return x * x, None

    def bwd(g, ctx, x):
        return (2 * g * x,)

    return _apply(fwd, bwd, a)


def log(a) -> Node:
    def fwd(x):
        if np.any(x <= 0):
            raise nk.NonFiniteError("log of non-positive value")
        return np.log(x), None

    def bwd(g, ctx, x):
        return (g / x,)

    return _apply(fwd, bwd, a)


def matmul(a, b) -> Node:
    def fwd(x, y):
        return nk.matmul(x, y), None

    def bwd(g, ctx, x, y):
        return nk.matmul(g, y.T), nk.matmul(x.T, g)

    return _apply(fwd, bwd, a, b)


def bmm(a, b) -> Node:
    def fwd(x, y):
        return nk.batched_matmul(x, y), None

    def bwd(g, ctx, x, y):
        return (
            nk.batched_matmul(g, np.swapaxes(y, -1, -2)),
            nk.batched_matmul(np.swapaxes(x, -1, -2), g),
        )

    return _apply(fwd, bwd, a, b)


def reshape(a, shape) -> Node:
    def fwd(x):
        return x.reshape(shape), x.shape

    def bwd(g, ctx, x):
        return (g.reshape(ctx),)

    return _apply(fwd, bwd, a)


def transpose(a, axes) -> Node:
    inv = np.argsort(axes)

    def fwd(x):
        return np.ascontiguousarray(np.transpose(x, axes)), None

    def bwd(g, ctx, x):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _apply(fwd, bwd, a)


def gelu(a) -> Node:
    def fwd(x):
        return nk.gelu(x), None

    def bwd(g, ctx, x):
        return (g * nk.gelu_grad(x),)

    return _apply(fwd, bwd, a)


def softplus(a) -> Node:
    def fwd(x):
        return nk.softplus(x), None

    def bwd(g, ctx, x):
        return (g * nk.sigmoid(x),)

    return _apply(fwd, bwd, a)


def softmax(a, axis: int = -1) -> Node:
    def fwd(x):
        return nk.softmax(x, axis), None

    def bwd(g, ctx, x):
        s = nk.softmax(x, axis)
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _apply(fwd, bwd, a)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Node:
    def fwd(v, gn, bs):
        xhat, inv = nk._normalize(v, eps)
        return xhat * gn + bs, (xhat, inv)

    def bwd(g, ctx, v, gn, bs):
        xhat, inv = ctx
        dxhat = g * gn
        dx = inv * (
            dxhat
            - np.mean(dxhat, axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)

    return _apply(fwd, bwd, x, gain, bias)


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    def fwd(x):
        return np.asarray(np.sum(x, axis=axis, keepdims=keepdims), dtype=x.dtype), None

    def bwd(g, ctx, x):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _apply(fwd, bwd, a)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    def fwd(x):
        return np.asarray(np.mean(x, axis=axis, keepdims=keepdims), dtype=x.dtype), None

    def bwd(g, ctx, x):
        n = x.size if axis is None else x.shape[axis]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, x.shape) / x.dtype.type(n)).astype(x.dtype),)

    return _apply(fwd, bwd, a)


def getitem(a, key) -> Node:
    def fwd(x):
        return np.ascontiguousarray(x[key]), None

    def bwd(g, ctx, x):
        out = np.zeros_like(x)
        np.add.at(out, key, g)
        return (out,)

    return _apply(fwd, bwd, a)


def gather_rows(a, rows: np.ndarray) -> Node:
    rows = np.asarray(rows, dtype=np.int64)

    def fwd(x):
        return x[rows], None

    def bwd(g, ctx, x):
        out = np.zeros_like(x)
        np.add.at(out, rows, g)
        return (out,)

    return _apply(fwd, bwd, a)


def scatter_rows(a, rows: np.ndarray, n: int) -> Node:
    """Place the rows of ``a`` at ``rows`` of an ``n``-row zero tensor."""
    rows = np.asarray(rows, dtype=np.int64)

    def fwd(x):
        out = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
        out[rows] = x
        return out, None

    def bwd(g, ctx, x):
        return (g[rows],)

    return _apply(fwd, bwd, a)


def where(mask: np.ndarray, a, b) -> Node:
    mask = np.asarray(mask, dtype=bool)

    def fwd(x, y):
        return np.where(mask, x, y), (x.shape, y.shape)

    def bwd(g, ctx, x, y):
        return _unbroadcast(np.where(mask, g, 0), ctx[0]), _unbroadcast(np.where(mask, 0, g), ctx[1])

    return _apply(fwd, bwd, a, b)


# --------------------------------------------------------------- backward


def backward(graph: CompGraph, output: Node | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``output`` (default: last node) w.r.t. trainable leaves."""
    if not graph.evaluated:
        raise GraphError("graph leaves changed since last evaluation; call replay()")
    out = graph.output if output is None else output
    if out.value.size != 1:
        raise GraphError(f"backward needs a scalar output, got shape {out.value.shape}")
    grads: dict[int, np.ndarray] = {out.index: np.ones_like(out.value)}
    for node in reversed(graph.nodes[: out.index + 1]):
        g = grads.pop(node.index, None)
        if g is None or node.bwd is None:
            if g is not None:
                grads[node.index] = g
            continue
        pgrads = node.bwd(g, node.ctx, *[p.value for p in node.parents])
        for p, pg in zip(node.parents, pgrads):
            if pg is None or (p.bwd is None and not p.trainable):
                continue
            if p.index in grads:
                grads[p.index] = grads[p.index] + pg
            else:
                grads[p.index] = pg
    result = {}
    for name, leaf in graph.params.items():
        if leaf.trainable:
            result[name] = grads.get(leaf.index, np.zeros_like(leaf.value)).astype(leaf.value.dtype)
    return result


# -------------------------------------------------------- finite differences


@dataclass
class GradReport:
    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]
    coords: dict[str, np.ndarray]
    rel_err: dict[str, float]
    max_rel_err: float
    tol: float
    passed: bool = field(init=False)
    max_coord_rel_err: float = 0.0  # componentwise worst, for diagnostics

    def __post_init__(self):
        self.passed = bool(self.max_rel_err <= self.tol)


def rel_error(a, n) -> np.ndarray:
    """Componentwise ``|a - n| / max(|a|, |n|, 1e-8)``."""
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def param_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|, 1e-8)`` for one parameter, ``|.|`` the max-norm over its checked coordinates.

    Measuring each parameter tensor as a whole keeps coordinates whose true
    gradient is near zero from being judged against their own rounding noise.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), 1e-8)
    return float(np.max(np.abs(a - n))) / scale


def compare_gradients(analytic: dict, numeric: dict, coords: dict, tol: float) -> "GradReport":
    errs, worst_coord = {}, 0.0
    for k in numeric:
        a = analytic[k].reshape(-1)[coords[k]]
        errs[k] = param_rel_error(a, numeric[k])
        worst_coord = max(worst_coord, float(np.max(rel_error(a, numeric[k]), initial=0.0)))
    report = GradReport(analytic, numeric, coords, errs, max(errs.values(), default=0.0), tol)
    report.max_coord_rel_err = worst_coord
    return report


def finite_diff_check(
    graph: CompGraph,
    eps: float = 1e-5,
    tol: float = 1e-4,
    *,
    numeric_graph: CompGraph | None = None,
    params: list[str] | None = None,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradReport:
    """Compare ``backward(graph)`` to central differences.

    Errors are per parameter tensor (see :func:`param_rel_error`).

    ``numeric_graph`` may hold the same computation at another precision
    (typically float64 for a float32 ``graph``); perturbations are applied
    there. ``max_coords`` samples at most that many coordinates per
    parameter, reproducibly from ``seed``.
    """
    ref = graph if numeric_graph is None else numeric_graph
    analytic = backward(graph)
    names = list(analytic) if params is None else params
    pick = nk.SeededRng(seed)
    numeric, coords = {}, {}
    for name in names:
        leaf = ref.params[name]
        base = leaf.value.copy()
        flat = base.reshape(-1)
        if max_coords is None or max_coords >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(pick.spawn(leaf.index).permutation(flat.size)[:max_coords])
        vals = np.empty(idx.size, dtype=np.float64)
        for j, c in enumerate(idx):
            work = flat.copy()
            work[c] = flat[c] + eps
            ref.set_param(name, work)
            ref.replay()
            fp = ref.output.value.reshape(())
            work[c] = flat[c] - eps
            ref.set_param(name, work)
            ref.replay()
            fm = ref.output.value.reshape(())
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise nk.NonFiniteError(f"loss non-finite when perturbing {name}[{c}]")
            # difference taken in the reference precision before rounding to float64
            vals[j] = (fp - fm) / (2 * ref.dtype.type(eps))
        ref.set_param(name, base)
        ref.replay()
        numeric[name] = vals
        coords[name] = idx
    return compare_gradients(analytic, numeric, coords, tol)
