"""Dense float64 tensors and a static computation graph with reverse-mode autodiff.

The graph is built explicitly (define-by-construction): models declare their
leaves (inputs and parameters) and wire operator nodes once, then evaluate the
same graph many times under different bindings. Graphs and bound tensors are
immutable during evaluation, so concurrent forward/grad calls on one graph are
safe.

Operator coverage is the minimum needed by the classifiers and attribution
methods in this package: dense and convolutional arithmetic, smooth and
non-smooth activations, pooling (hard max and log-sum-exp), softmax, layer
normalization, embedding lookup and cross-entropy, plus shape plumbing.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Graph",
    "Node",
    "GraphError",
    "forward",
    "forward_trace",
    "grad",
    "value_and_grad",
    "finite_diff_grad",
    "lse_pool",
]


class GraphError(ValueError):
    """Raised for malformed graphs, bindings or operator misuse.

    Carries the offending node/leaf name in ``node`` when known.
    """

    def __init__(self, message: str, node: str | None = None):
        super().__init__(message if node is None else f"{message} (node '{node}')")
        self.node = node


class Tensor:
    """An n-dimensional array of 64-bit floats with shape metadata.

    The backing buffer is C-ordered and frozen (read-only); constructing a
    Tensor copies its input. ``data`` exposes the flat row-major view.
    """

    __slots__ = ("_array",)

    def __init__(self, values, shape: Sequence[int] | None = None):
        arr = np.array(values, dtype=np.float64, order="C", copy=True)
        if shape is not None:
            arr = np.ascontiguousarray(arr.reshape(tuple(shape)))
        arr.setflags(write=False)
        self._array = arr

    @property
    def array(self) -> np.ndarray:
        """Read-only ndarray view of the values."""
        return self._array

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the buffer (read-only)."""
        return self._array.reshape(-1)

    def item(self) -> float:
        if self._array.size != 1:
            raise ValueError(f"item() on tensor of size {self._array.size}")
        return float(self._array.reshape(-1)[0])

    def tolist(self):
        return self._array.tolist()

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return Tensor(self._array, shape=shape)

    @staticmethod
    def zeros(shape: Sequence[int]) -> "Tensor":
        return Tensor(np.zeros(tuple(shape), dtype=np.float64))

    @staticmethod
    def full(shape: Sequence[int], value: float) -> "Tensor":
        return Tensor(np.full(tuple(shape), value, dtype=np.float64))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def as_array(x) -> np.ndarray:
    """Coerce a Tensor or array-like to a float64 ndarray (no copy if possible)."""
    if isinstance(x, Tensor):
        return x.array
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# numerically stable scalar kernels shared by ops and public helpers


def _softplus(x: np.ndarray, beta: float) -> np.ndarray:
    # max(x,0) + log1p(exp(-beta|x|))/beta never overflows
    return np.maximum(x, 0.0) + np.log1p(np.exp(-beta * np.abs(x))) / beta


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def lse_pool(values, t: float) -> float:
    """Smooth maximum of a window: (1/t) * log(sum(exp(t * v))).

    Computed with max-subtraction so large magnitudes cannot overflow.
    Always >= max(values), approaching it as t grows.
    """
    if t <= 0:
        raise GraphError(f"lse_pool temperature must be positive, got {t}")
    v = as_array(values).reshape(-1)
    if v.size == 0:
        raise GraphError("lse_pool window must be nonempty")
    m = float(np.max(v))
    return m + float(np.log(np.sum(np.exp(t * (v - m))))) / t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pool_windows(x: np.ndarray, k: int) -> np.ndarray:
    """(C,H,W) -> (C, H/k, W/k, k*k) non-overlapping windows, row-major order."""
    c, h, w = x.shape
    return (
        x.reshape(c, h // k, k, w // k, k)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c, h // k, w // k, k * k)
    )


def _unpool_windows(gwin: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    c = gwin.shape[0]
    return (
        gwin.reshape(c, h // k, w // k, k, k)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c, h, w)
    )


# ---------------------------------------------------------------------------
# graph structure


class Node:
    """One operator application (or leaf/const) in a Graph."""

    __slots__ = ("name", "op", "inputs", "attrs", "shape")

    def __init__(self, name: str, op: str, inputs: tuple["Node", ...], attrs: dict, shape: tuple[int, ...]):
        self.name = name
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.shape = shape

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    def __repr__(self) -> str:
        return f"Node({self.name}: {self.op}{self.shape})"


def _matmul_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if not a or not b:
        raise ValueError("matmul operands must have ndim >= 1")
    if len(a) == 1 and len(b) == 1:
        if a[0] != b[0]:
            raise ValueError(f"matmul size mismatch {a} @ {b}")
        return ()
    if len(b) == 1:
        if a[-1] != b[0]:
            raise ValueError(f"matmul size mismatch {a} @ {b}")
        return a[:-1]
    if len(a) == 1:
        if a[0] != b[-2]:
            raise ValueError(f"matmul size mismatch {a} @ {b}")
        return b[:-2] + b[-1:]
    if a[-1] != b[-2]:
        raise ValueError(f"matmul size mismatch {a} @ {b}")
    batch = np.broadcast_shapes(a[:-2], b[:-2])
    return batch + (a[-2], b[-1])


class Graph:
    """A static, acyclic operator graph with named leaves and outputs.

    Nodes are appended in construction order, which is therefore a valid
    topological order; forward and backward each visit a node at most once.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, Node] = {}
        self.outputs: dict[str, Node] = {}
        self._names: set[str] = set()

    # -- construction -------------------------------------------------

    def _register(self, node: Node) -> Node:
        if node.name in self._names:
            raise GraphError(f"duplicate node name '{node.name}'")
        self._names.add(node.name)
        self.nodes.append(node)
        return node

    def _op(self, op: str, inputs: Sequence[Node], attrs: dict, shape: tuple[int, ...], name: str | None = None) -> Node:
        for inp in inputs:
            if inp.name not in self._names:
                raise GraphError(f"input node '{inp.name}' does not belong to this graph")
        node = Node(name or f"{op}_{len(self.nodes)}", op, tuple(inputs), attrs, shape)
        return self._register(node)

    def leaf(self, name: str, shape: Sequence[int]) -> Node:
        """Declare a named leaf (input or parameter) to be bound at call time."""
        node = Node(name, "leaf", (), {}, tuple(int(s) for s in shape))
        self._register(node)
        self.leaves[name] = node
        return node

    def const(self, values, name: str | None = None) -> Node:
        arr = np.array(values, dtype=np.float64, order="C", copy=True)
        arr.setflags(write=False)
        node = Node(name or f"const_{len(self.nodes)}", "const", (), {"value": arr}, arr.shape)
        return self._register(node)

    def output(self, name: str, node: Node) -> Node:
        if node.name not in self._names:
            raise GraphError(f"output node '{node.name}' does not belong to this graph")
        self.outputs[name] = node
        return node

    # -- elementwise / broadcast arithmetic ----------------------------

    def _broadcast_op(self, op: str, a: Node, b: Node) -> Node:
        try:
            shape = np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise GraphError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast",
                             node=f"{op}_{len(self.nodes)}") from None
        return self._op(op, (a, b), {}, shape)

    def add(self, a: Node, b: Node) -> Node:
        return self._broadcast_op("add", a, b)

    def sub(self, a: Node, b: Node) -> Node:
        return self._broadcast_op("sub", a, b)

    def mul(self, a: Node, b: Node) -> Node:
        return self._broadcast_op("mul", a, b)

    def scale(self, a: Node, c: float) -> Node:
        return self._op("scale", (a,), {"c": float(c)}, a.shape)

    def matmul(self, a: Node, b: Node) -> Node:
        try:
            shape = _matmul_shape(a.shape, b.shape)
        except ValueError as exc:
            raise GraphError(str(exc), node=f"matmul_{len(self.nodes)}") from None
        return self._op("matmul", (a, b), {}, shape)

    # -- activations ----------------------------------------------------

    def relu(self, a: Node) -> Node:
        return self._op("relu", (a,), {}, a.shape)

    def softplus(self, a: Node, beta: float = 1.0) -> Node:
        if beta <= 0:
            raise GraphError(f"softplus beta must be positive, got {beta}")
        return self._op("softplus", (a,), {"beta": float(beta)}, a.shape)

    def tanh(self, a: Node) -> Node:
        return self._op("tanh", (a,), {}, a.shape)

    def exp(self, a: Node) -> Node:
        return self._op("exp", (a,), {}, a.shape)

    def log(self, a: Node) -> Node:
        return self._op("log", (a,), {}, a.shape)

    # -- convolution / pooling ------------------------------------------

    def conv2d(self, x: Node, w: Node, stride: int = 1, padding: int = 0) -> Node:
        if len(x.shape) != 3 or len(w.shape) != 4:
            raise GraphError(f"conv2d expects x (C,H,W) and w (O,C,kh,kw), got {x.shape}, {w.shape}")
        cin, h, wd = x.shape
        cout, cin_w, kh, kw = w.shape
        if cin != cin_w:
            raise GraphError(f"conv2d channel mismatch: x has {cin}, w expects {cin_w}",
                             node=f"conv2d_{len(self.nodes)}")
        if stride < 1 or padding < 0:
            raise GraphError(f"conv2d bad stride/padding ({stride}, {padding})")
        ho = (h + 2 * padding - kh) // stride + 1
        wo = (wd + 2 * padding - kw) // stride + 1
        if ho < 1 or wo < 1:
            raise GraphError(f"conv2d output would be empty for input {x.shape}, kernel {w.shape}")
        return self._op("conv2d", (x, w), {"stride": stride, "padding": padding}, (cout, ho, wo))

    def _pool_shape(self, x: Node, k: int, opname: str) -> tuple[int, ...]:
        if len(x.shape) != 3:
            raise GraphError(f"{opname} expects (C,H,W), got {x.shape}")
        c, h, w = x.shape
        if k < 1 or h % k or w % k:
            raise GraphError(f"{opname} window {k} must evenly divide spatial dims {h}x{w}")
        return (c, h // k, w // k)

    def maxpool2d(self, x: Node, k: int = 2) -> Node:
        shape = self._pool_shape(x, k, "maxpool2d")
        return self._op("maxpool2d", (x,), {"k": k}, shape)

    def lsepool2d(self, x: Node, k: int = 2, t: float = 10.0) -> Node:
        if t <= 0:
            raise GraphError(f"lsepool2d temperature must be positive, got {t}")
        shape = self._pool_shape(x, k, "lsepool2d")
        return self._op("lsepool2d", (x,), {"k": k, "t": float(t)}, shape)

    # -- reductions / normalization --------------------------------------

    def _axes(self, a: Node, axes) -> tuple[int, ...]:
        if axes is None:
            return tuple(range(len(a.shape)))
        if isinstance(axes, int):
            axes = (axes,)
        return tuple(ax % len(a.shape) for ax in axes)

    def sum(self, a: Node, axes=None, keepdims: bool = False) -> Node:
        axes = self._axes(a, axes)
        shape = tuple(
            (1 if i in axes else n) for i, n in enumerate(a.shape) if keepdims or i not in axes
        )
        return self._op("sum", (a,), {"axes": axes, "keepdims": keepdims}, shape)

    def mean(self, a: Node, axes=None, keepdims: bool = False) -> Node:
        axes = self._axes(a, axes)
        shape = tuple(
            (1 if i in axes else n) for i, n in enumerate(a.shape) if keepdims or i not in axes
        )
        return self._op("mean", (a,), {"axes": axes, "keepdims": keepdims}, shape)

    def softmax(self, a: Node, axis: int = -1) -> Node:
        return self._op("softmax", (a,), {"axis": axis % len(a.shape)}, a.shape)

    def layer_norm(self, x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
        m = x.shape[-1]
        if gain.shape != (m,) or bias.shape != (m,):
            raise GraphError(f"layer_norm gain/bias must be ({m},), got {gain.shape}, {bias.shape}")
        return self._op("layer_norm", (x, gain, bias), {"eps": float(eps)}, x.shape)

    # -- lookup / loss ----------------------------------------------------

    def gather_rows(self, table: Node, ids: Node) -> Node:
        if len(table.shape) != 2 or len(ids.shape) != 1:
            raise GraphError(f"gather_rows expects table (V,d) and ids (L,), got {table.shape}, {ids.shape}")
        return self._op("gather_rows", (table, ids), {}, (ids.shape[0], table.shape[1]))

    def cross_entropy(self, logits: Node, onehot: Node) -> Node:
        if logits.shape != onehot.shape or len(logits.shape) != 1:
            raise GraphError(f"cross_entropy expects matching 1-D logits/target, got {logits.shape}, {onehot.shape}")
        return self._op("cross_entropy", (logits, onehot), {}, ())

    # -- shape plumbing ----------------------------------------------------

    def concat(self, parts: Sequence[Node], axis: int = 0) -> Node:
        if not parts:
            raise GraphError("concat needs at least one input")
        nd = len(parts[0].shape)
        axis = axis % nd
        base = list(parts[0].shape)
        total = 0
        for p in parts:
            if len(p.shape) != nd or any(p.shape[i] != base[i] for i in range(nd) if i != axis):
                raise GraphError(f"concat shape mismatch along axis {axis}: {[p.shape for p in parts]}")
            total += p.shape[axis]
        base[axis] = total
        return self._op("concat", tuple(parts), {"axis": axis}, tuple(base))

    def reshape(self, a: Node, shape: Sequence[int]) -> Node:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != a.size:
            raise GraphError(f"reshape {a.shape} -> {shape} changes element count")
        return self._op("reshape", (a,), {"shape": shape}, shape)

    def transpose(self, a: Node, axes: Sequence[int]) -> Node:
        axes = tuple(int(ax) for ax in axes)
        if sorted(axes) != list(range(len(a.shape))):
            raise GraphError(f"transpose axes {axes} are not a permutation of {a.shape}")
        return self._op("transpose", (a,), {"axes": axes}, tuple(a.shape[i] for i in axes))


# ---------------------------------------------------------------------------
# forward rules


def _fwd(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    op, attrs = node.op, node.attrs
    if op == "add":
        return vals[0] + vals[1]
    if op == "sub":
        return vals[0] - vals[1]
    if op == "mul":
        return vals[0] * vals[1]
    if op == "scale":
        return attrs["c"] * vals[0]
    if op == "matmul":
        return np.matmul(vals[0], vals[1])
    if op == "relu":
        return np.maximum(vals[0], 0.0)
    if op == "softplus":
        return _softplus(vals[0], attrs["beta"])
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "exp":
        return np.exp(vals[0])
    if op == "log":
        return np.log(vals[0])
    if op == "conv2d":
        return _conv2d_forward(vals[0], vals[1], attrs["stride"], attrs["padding"])
    if op == "maxpool2d":
        win = _pool_windows(vals[0], attrs["k"])
        return np.max(win, axis=-1)
    if op == "lsepool2d":
        win = _pool_windows(vals[0], attrs["k"])
        t = attrs["t"]
        m = np.max(win, axis=-1, keepdims=True)
        return m[..., 0] + np.log(np.sum(np.exp(t * (win - m)), axis=-1)) / t
    if op == "sum":
        return np.sum(vals[0], axis=attrs["axes"], keepdims=attrs["keepdims"])
    if op == "mean":
        return np.mean(vals[0], axis=attrs["axes"], keepdims=attrs["keepdims"])
    if op == "softmax":
        ax = attrs["axis"]
        z = vals[0] - np.max(vals[0], axis=ax, keepdims=True)
        e = np.exp(z)
        return e / np.sum(e, axis=ax, keepdims=True)
    if op == "layer_norm":
        x, gain, bias = vals
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + attrs["eps"])
        return xc * inv * gain + bias
    if op == "gather_rows":
        table, ids = vals
        idx = _row_ids(ids, table.shape[0], node.name)
        return table[idx]
    if op == "cross_entropy":
        logits, onehot = vals
        m = np.max(logits)
        lse = m + np.log(np.sum(np.exp(logits - m)))
        return np.asarray(-(onehot * (logits - lse)).sum())
    if op == "concat":
        return np.concatenate(vals, axis=attrs["axis"])
    if op == "reshape":
        return vals[0].reshape(attrs["shape"])
    if op == "transpose":
        return np.transpose(vals[0], attrs["axes"])
    raise GraphError(f"unknown operator '{op}'", node=node.name)


def _row_ids(ids: np.ndarray, nrows: int, node_name: str) -> np.ndarray:
    idx = np.rint(ids).astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= nrows):
        raise GraphError(f"gather index out of range [0, {nrows})", node=node_name)
    return idx


def _conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    kh, kw = w.shape[2], w.shape[3]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return np.einsum("oiab,ijkab->ojk", w, win)


# ---------------------------------------------------------------------------
# backward rules: return per-input gradients (None for non-differentiable)


def _bwd(node: Node, vals: list[np.ndarray], out: np.ndarray, g: np.ndarray, guided: bool):
    op, attrs = node.op, node.attrs
    if op == "add":
        return (_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape))
    if op == "sub":
        return (_unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape))
    if op == "mul":
        return (
            _unbroadcast(g * vals[1], vals[0].shape),
            _unbroadcast(g * vals[0], vals[1].shape),
        )
    if op == "scale":
        return (attrs["c"] * g,)
    if op == "matmul":
        return _matmul_backward(vals[0], vals[1], g)
    if op == "relu":
        mask = vals[0] > 0
        if guided:
            # guided backprop: also gate on the sign of the incoming gradient
            return (np.where(mask & (g > 0), g, 0.0),)
        return (np.where(mask, g, 0.0),)
    if op == "softplus":
        return (g * _sigmoid(attrs["beta"] * vals[0]),)
    if op == "tanh":
        return (g * (1.0 - out * out),)
    if op == "exp":
        return (g * out,)
    if op == "log":
        return (g / vals[0],)
    if op == "conv2d":
        return _conv2d_backward(vals[0], vals[1], g, attrs["stride"], attrs["padding"])
    if op == "maxpool2d":
        k = attrs["k"]
        win = _pool_windows(vals[0], k)
        # ties route to the first maximal element in row-major window order
        idx = np.argmax(win, axis=-1)
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        return (_unpool_windows(gwin, k, vals[0].shape[1], vals[0].shape[2]),)
    if op == "lsepool2d":
        k, t = attrs["k"], attrs["t"]
        win = _pool_windows(vals[0], k)
        z = t * (win - np.max(win, axis=-1, keepdims=True))
        e = np.exp(z)
        soft = e / np.sum(e, axis=-1, keepdims=True)
        return (_unpool_windows(g[..., None] * soft, k, vals[0].shape[1], vals[0].shape[2]),)
    if op == "sum":
        return (_spread(g, vals[0].shape, attrs["axes"], attrs["keepdims"]),)
    if op == "mean":
        count = np.prod([vals[0].shape[ax] for ax in attrs["axes"]])
        return (_spread(g, vals[0].shape, attrs["axes"], attrs["keepdims"]) / count,)
    if op == "softmax":
        ax = attrs["axis"]
        inner = np.sum(g * out, axis=ax, keepdims=True)
        return (out * (g - inner),)
    if op == "layer_norm":
        return _layer_norm_backward(vals[0], vals[1], g, attrs["eps"])
    if op == "gather_rows":
        table, ids = vals
        idx = _row_ids(ids, table.shape[0], node.name)
        dtable = np.zeros_like(table)
        np.add.at(dtable, idx, g)
        return (dtable, None)
    if op == "cross_entropy":
        logits, onehot = vals
        z = logits - np.max(logits)
        e = np.exp(z)
        soft = e / e.sum()
        lse = np.max(logits) + np.log(e.sum())
        return (g * (soft * onehot.sum() - onehot), g * (lse - logits))
    if op == "concat":
        ax = attrs["axis"]
        sizes = [v.shape[ax] for v in vals]
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=ax))
    if op == "reshape":
        return (g.reshape(vals[0].shape),)
    if op == "transpose":
        return (np.transpose(g, np.argsort(attrs["axes"])),)
    raise GraphError(f"no backward rule for '{op}'", node=node.name)


def _spread(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def _matmul_backward(a: np.ndarray, b: np.ndarray, g: np.ndarray):
    if a.ndim == 1 and b.ndim == 1:
        return (g * b, g * a)
    if b.ndim == 1:
        db = np.swapaxes(a, -1, -2) @ g if a.ndim > 2 else a.T @ g
        return (np.expand_dims(g, -1) * b, _unbroadcast(db, b.shape))
    if a.ndim == 1:
        da = b @ g if b.ndim == 2 else np.matmul(b, np.expand_dims(g, -1))[..., 0]
        db = np.outer(a, g) if b.ndim == 2 else np.einsum("k,...n->...kn", a, g)
        return (_unbroadcast(da, a.shape), _unbroadcast(db, b.shape))
    da = np.matmul(g, np.swapaxes(b, -1, -2))
    db = np.matmul(np.swapaxes(a, -1, -2), g)
    return (_unbroadcast(da, a.shape), _unbroadcast(db, b.shape))


def _conv2d_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray, stride: int, padding: int):
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = g.shape[1], g.shape[2]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    dw = np.einsum("ojk,ijkab->oiab", g, win)
    dxp = np.zeros_like(xp)
    for a in range(kh):
        for b in range(kw):
            contrib = np.einsum("ojk,oi->ijk", g, w[:, :, a, b])
            dxp[:, a : a + stride * ho : stride, b : b + stride * wo : stride] += contrib
    if padding:
        dxp = dxp[:, padding : padding + x.shape[1], padding : padding + x.shape[2]]
    return (dxp, dw)


def _layer_norm_backward(x: np.ndarray, gain: np.ndarray, g: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xh = xc * inv
    dxh = g * gain
    dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True))
    lead = tuple(range(x.ndim - 1))
    return (dx, (g * xh).sum(axis=lead), g.sum(axis=lead))


# ---------------------------------------------------------------------------
# evaluation


def _needed_from(targets: Iterable[Node]) -> set[str]:
    needed: set[str] = set()
    stack = list(targets)
    while stack:
        node = stack.pop()
        if node.name in needed:
            continue
        needed.add(node.name)
        stack.extend(node.inputs)
    return needed


def _run_forward(graph: Graph, bindings: Mapping[str, Tensor], targets: Sequence[Node]) -> dict[str, np.ndarray]:
    needed = _needed_from(targets)
    values: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        if node.name not in needed:
            continue
        if node.op == "leaf":
            if node.name not in bindings:
                raise GraphError("unbound leaf", node=node.name)
            arr = as_array(bindings[node.name])
            if arr.shape != node.shape:
                raise GraphError(f"binding shape {arr.shape} does not match declared {node.shape}",
                                 node=node.name)
            values[node.name] = arr
        elif node.op == "const":
            values[node.name] = node.attrs["value"]
        else:
            values[node.name] = _fwd(node, [values[i.name] for i in node.inputs])
    return values


def _resolve_output(graph: Graph, output: str | None) -> tuple[str, Node]:
    if output is None:
        if len(graph.outputs) != 1:
            raise GraphError(f"graph has outputs {sorted(graph.outputs)}; specify one")
        output = next(iter(graph.outputs))
    if output not in graph.outputs:
        raise GraphError(f"unknown output '{output}'")
    return output, graph.outputs[output]


def forward(graph: Graph, bindings: Mapping[str, Tensor], outputs: Sequence[str] | None = None) -> dict[str, Tensor]:
    """Evaluate named outputs under the given leaf bindings.

    Only the subgraph feeding the requested outputs is computed, so leaves
    irrelevant to them may stay unbound. Deterministic given bindings.
    """
    names = list(outputs) if outputs is not None else list(graph.outputs)
    for name in names:
        if name not in graph.outputs:
            raise GraphError(f"unknown output '{name}'")
    targets = [graph.outputs[n] for n in names]
    values = _run_forward(graph, bindings, targets)
    return {n: Tensor(values[graph.outputs[n].name]) for n in names}


def forward_trace(graph: Graph, bindings: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Evaluate every node reachable from any output; values keyed by node name."""
    values = _run_forward(graph, bindings, list(graph.outputs.values()))
    return {name: Tensor(arr) for name, arr in values.items()}


def value_and_grad(
    graph: Graph,
    bindings: Mapping[str, Tensor],
    wrt: Iterable[str],
    output: str | None = None,
    index: int | None = None,
    guided_relu: bool = False,
) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    """Like :func:`grad`, but also returns every graph output the differentiated
    one depends on (at no extra forward cost)."""
    wrt = list(wrt)
    for name in wrt:
        if name not in graph.leaves:
            raise GraphError(f"'{name}' is not a leaf of this graph")
    _, out_node = _resolve_output(graph, output)
    if index is None:
        if out_node.size != 1:
            raise GraphError(f"output '{out_node.name}' has {out_node.size} elements; an index is required")
        index = 0
    if not (0 <= index < out_node.size):
        raise GraphError(f"output index {index} out of range for shape {out_node.shape}")

    values = _run_forward(graph, bindings, [out_node])
    seed = np.zeros(out_node.size, dtype=np.float64)
    seed[index] = 1.0
    adjoint: dict[str, np.ndarray] = {out_node.name: seed.reshape(out_node.shape)}

    for node in reversed(graph.nodes):
        g = adjoint.get(node.name)
        if g is None or node.op in ("leaf", "const"):
            continue
        vals = [values[i.name] for i in node.inputs]
        grads = _bwd(node, vals, values[node.name], g, guided_relu)
        for inp, gin in zip(node.inputs, grads):
            if gin is None or inp.op == "const":
                continue
            if inp.name in adjoint:
                adjoint[inp.name] = adjoint[inp.name] + gin
            else:
                adjoint[inp.name] = gin

    result = {}
    for name in wrt:
        leaf = graph.leaves[name]
        result[name] = Tensor(adjoint.get(name, np.zeros(leaf.shape, dtype=np.float64)))
    outputs = {
        name: Tensor(values[node.name])
        for name, node in graph.outputs.items()
        if node.name in values
    }
    return outputs, result


def grad(
    graph: Graph,
    bindings: Mapping[str, Tensor],
    wrt: Iterable[str],
    output: str | None = None,
    index: int | None = None,
    guided_relu: bool = False,
) -> dict[str, Tensor]:
    """Reverse-mode gradient of one scalar output element w.r.t. named leaves.

    ``index`` selects a flat element of the output; it may be omitted only
    for outputs that already hold a single value. ``guided_relu`` switches
    every relu adjoint to guided-backprop gating.
    """
    return value_and_grad(graph, bindings, wrt, output, index, guided_relu)[1]


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, the oracle for grad().

    (f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps) per element.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = np.array(x.array, dtype=np.float64, copy=True)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(base)))
        flat[i] = orig - eps
        fm = float(f(Tensor(base)))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return Tensor(out.reshape(x.shape))
