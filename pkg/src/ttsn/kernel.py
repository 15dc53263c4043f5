"""Dense float64 tensor kernel with reverse-mode automatic differentiation.

Tensors are C-contiguous ``numpy`` float64 arrays. A :class:`Node` wraps one
tensor together with a gradient buffer and a record of the operation that
produced it; the op functions below build the graph eagerly and
:func:`backward` differentiates it by reverse-topological traversal.

The kernel is deliberately small and strict: 64-bit floats everywhere, no
broadcasting except scaling by a scalar parameter, and gradient accumulation
(never overwrite) with an explicit zeroing API. Forward results are asserted
finite for finite inputs (disabled under ``python -O``).
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DimensionError",
    "ConfigError",
    "ContractError",
    "Node",
    "Parameter",
    "as_tensor",
    "constant",
    "variable",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "relu",
    "ewise",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "reverse_axis",
    "index_select",
    "softmax_rows",
    "conv2d",
    "global_avg_pool",
    "mean_axis",
    "sum_all",
    "linear",
    "cross_entropy",
    "backward",
    "sgd_step",
    "zero_gradients",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is invalid or internally inconsistent."""


class ContractError(RuntimeError):
    """An operation was invoked outside its contract."""


def as_tensor(data) -> np.ndarray:
    """Coerce ``data`` to a C-contiguous float64 array with all axes >= 1."""
    arr = np.asarray(data, dtype=np.float64, order="C")
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if any(n < 1 for n in arr.shape):
        raise DimensionError(f"tensor axes must have length >= 1, got shape {arr.shape}")
    return arr


class Node:
    """A value in the computation graph plus its gradient buffer.

    ``value`` and ``grad`` always share a shape. ``_parents`` and
    ``_backward`` record the producing operation (empty / ``None`` for
    leaves); the recorded graph is acyclic by construction.
    """

    __slots__ = ("value", "requires_grad", "_grad", "_parents", "_backward")

    def __init__(self, value: np.ndarray, parents: Sequence["Node"] = (),
                 backward_fn=None, requires_grad: bool = False):
        assert np.isfinite(value).all(), "non-finite values in forward result"
        self.value = value
        self.requires_grad = requires_grad
        self._grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward = backward_fn if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """Named learnable tensor; value and gradient live on the wrapped node."""

    __slots__ = ("name", "node")

    def __init__(self, name: str, value) -> None:
        self.name = name
        self.node = Node(as_tensor(value), requires_grad=True)

    @property
    def value(self) -> np.ndarray:
        return self.node.value

    @property
    def grad(self) -> np.ndarray:
        return self.node.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.node.value.shape})"


def constant(data) -> Node:
    """Leaf node that never receives a gradient."""
    return Node(as_tensor(data))


def variable(data) -> Node:
    """Leaf node that accumulates a gradient (an unnamed parameter)."""
    return Node(as_tensor(data), requires_grad=True)


def _node(x) -> Node:
    if isinstance(x, Parameter):
        return x.node
    if not isinstance(x, Node):
        raise TypeError(f"expected Node or Parameter, got {type(x).__name__}")
    return x


def _require_same_shape(a: Node, b: Node, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{op}: operand shapes differ, {a.value.shape} vs {b.value.shape}")


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Node:
    a, b = _node(a), _node(b)
    _require_same_shape(a, b, "add")

    def bwd(g):
        return g, g

    return Node(a.value + b.value, (a, b), bwd, a.requires_grad or b.requires_grad)


def sub(a, b) -> Node:
    a, b = _node(a), _node(b)
    _require_same_shape(a, b, "sub")

    def bwd(g):
        return g, -g

    return Node(a.value - b.value, (a, b), bwd, a.requires_grad or b.requires_grad)


def neg(x) -> Node:
    x = _node(x)

    def bwd(g):
        return (-g,)

    return Node(-x.value, (x,), bwd, x.requires_grad)


def mul(a, b) -> Node:
    a, b = _node(a), _node(b)
    _require_same_shape(a, b, "mul")
    av, bv = a.value, b.value

    def bwd(g):
        return g * bv, g * av

    return Node(av * bv, (a, b), bwd, a.requires_grad or b.requires_grad)


def scale(x, s) -> Node:
    """Multiply every element of ``x`` by the scalar parameter ``s``.

    The single permitted broadcast in the kernel.
    """
    x, s = _node(x), _node(s)
    if s.value.size != 1:
        raise DimensionError(f"scale: scaling factor must be a scalar, got shape {s.value.shape}")
    xv, sv = x.value, float(s.value)

    def bwd(g):
        gx = g * sv if x.requires_grad else None
        gs = np.full(s.value.shape, np.vdot(g, xv)) if s.requires_grad else None
        return gx, gs

    return Node(xv * sv, (x, s), bwd, x.requires_grad or s.requires_grad)


def relu(x) -> Node:
    x = _node(x)
    gate = x.value > 0.0  # gradient defined as 0 at exactly 0

    def bwd(g):
        return (g * gate,)

    return Node(np.maximum(x.value, 0.0), (x,), bwd, x.requires_grad)


_EWISE = {"add": add, "mul": mul, "scale": scale, "relu": relu}


def ewise(kind: str, *operands) -> Node:
    """Dispatch an elementwise op by name: add, mul, scale, relu."""
    try:
        fn = _EWISE[kind]
    except KeyError:
        raise ConfigError(f"unknown elementwise op {kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = _node(a), _node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.value.shape} and {b.value.shape}")
    av, bv = a.value, b.value

    def bwd(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return Node(av @ bv, (a, b), bwd, a.requires_grad or b.requires_grad)


def transpose(x) -> Node:
    x = _node(x)
    if x.value.ndim != 2:
        raise DimensionError(f"transpose: expected rank-2, got shape {x.value.shape}")

    def bwd(g):
        return (np.ascontiguousarray(g.T),)

    return Node(np.ascontiguousarray(x.value.T), (x,), bwd, x.requires_grad)


def softmax_rows(z) -> Node:
    """Row-wise softmax of a rank-2 tensor, stabilized by per-row max subtraction."""
    z = _node(z)
    if z.value.ndim != 2:
        raise DimensionError(f"softmax_rows: expected rank-2, got shape {z.value.shape}")
    shifted = z.value - z.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Node(s, (z,), bwd, z.requires_grad)


def linear(x, w, b=None) -> Node:
    """Affine map ``x @ w + b``; the bias row is tiled explicitly (no broadcast)."""
    out = matmul(x, w)
    if b is None:
        return out
    b = _node(b)
    if b.value.shape != (1, out.value.shape[1]):
        raise DimensionError(f"linear: bias shape {b.value.shape} does not match output width "
                             f"{out.value.shape[1]}")
    ones = constant(np.ones((out.value.shape[0], 1)))
    return add(out, matmul(ones, b))


# ---------------------------------------------------------------------------
# data movement
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Node:
    x = _node(x)
    shape = tuple(int(n) for n in shape)
    if any(n < 1 for n in shape):
        raise DimensionError(f"reshape: axes must be >= 1, got {shape}")
    if int(np.prod(shape, dtype=np.int64)) != x.value.size:
        raise DimensionError(f"reshape: cannot view {x.value.shape} as {shape}")
    old = x.value.shape

    def bwd(g):
        return (g.reshape(old),)

    return Node(x.value.reshape(shape), (x,), bwd, x.requires_grad)


def concat(xs, axis: int) -> Node:
    nodes = [_node(x) for x in xs]
    if not nodes:
        raise DimensionError("concat: need at least one operand")
    ndim = nodes[0].value.ndim
    if not -ndim <= axis < ndim:
        raise IndexError(f"concat: axis {axis} out of range for rank {ndim}")
    axis = axis % ndim
    base = list(nodes[0].value.shape)
    for n in nodes[1:]:
        other = list(n.value.shape)
        if len(other) != ndim or other[:axis] + other[axis + 1:] != base[:axis] + base[axis + 1:]:
            raise DimensionError(f"concat: shape {n.value.shape} incompatible with "
                                 f"{nodes[0].value.shape} on axis {axis}")
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for i in range(len(nodes)):
            sl = [slice(None)] * ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return Node(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes), bwd,
                any(n.requires_grad for n in nodes))


def reverse_axis(x, axis: int) -> Node:
    x = _node(x)
    ndim = x.value.ndim
    if not -ndim <= axis < ndim:
        raise IndexError(f"reverse_axis: axis {axis} out of range for rank {ndim}")

    def bwd(g):
        return (np.flip(g, axis=axis),)

    return Node(np.ascontiguousarray(np.flip(x.value, axis=axis)), (x,), bwd, x.requires_grad)


def index_select(x, axis: int, index: int) -> Node:
    """Select one index along ``axis``, dropping that axis."""
    x = _node(x)
    ndim = x.value.ndim
    if not -ndim <= axis < ndim:
        raise IndexError(f"index_select: axis {axis} out of range for rank {ndim}")
    axis = axis % ndim
    if not -x.value.shape[axis] <= index < x.value.shape[axis]:
        raise IndexError(f"index_select: index {index} out of range for axis of length "
                         f"{x.value.shape[axis]}")
    index = index % x.value.shape[axis]
    sl = (slice(None),) * axis + (index,)

    def bwd(g):
        gx = np.zeros_like(x.value)
        gx[sl] = g
        return (gx,)

    return Node(np.ascontiguousarray(x.value[sl]), (x,), bwd, x.requires_grad)


# ---------------------------------------------------------------------------
# convolution and reductions
# ---------------------------------------------------------------------------

def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Node:
    """2-D cross-correlation over [C,H,W] or a stack [B,C,H,W].

    ``kernel`` is [C_out, C_in, kh, kw]. The output spatial size
    (H + 2*padding - kh) / stride + 1 must be integral.
    """
    x, kernel = _node(x), _node(kernel)
    if kernel.value.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be rank-4, got shape {kernel.value.shape}")
    squeeze = x.value.ndim == 3
    xv = x.value[None] if squeeze else x.value
    if xv.ndim != 4:
        raise DimensionError(f"conv2d: input must be rank-3 or rank-4, got shape {x.value.shape}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    bsz, cin, h, w = xv.shape
    cout, kcin, kh, kw = kernel.value.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: input channels {cin} do not match kernel shape "
                             f"{kernel.value.shape}")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride \
            or h + 2 * padding < kh or w + 2 * padding < kw:
        raise ConfigError(f"conv2d: non-integral output size for input {xv.shape[2:]}, "
                          f"kernel {kh}x{kw}, stride {stride}, padding {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(bsz * ho * wo, cin * kh * kw)
    kmat = kernel.value.reshape(cout, cin * kh * kw)
    out = np.ascontiguousarray((cols @ kmat.T).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))

    def bwd(g):
        gv = g[None] if squeeze else g
        g2 = gv.transpose(0, 2, 3, 1).reshape(bsz * ho * wo, cout)
        gk = (g2.T @ cols).reshape(cout, cin, kh, kw) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gwin = (g2 @ kmat).reshape(bsz, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += \
                        gwin[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
            if squeeze:
                gx = gx[0]
        return gx, gk

    return Node(out[0] if squeeze else out, (x, kernel), bwd,
                x.requires_grad or kernel.requires_grad)


def global_avg_pool(x) -> Node:
    """Mean over the trailing two (spatial) axes, kept as size-1 axes."""
    x = _node(x)
    if x.value.ndim < 2:
        raise DimensionError(f"global_avg_pool: need trailing spatial axes, got shape "
                             f"{x.value.shape}")
    h, w = x.value.shape[-2:]
    shape = x.value.shape

    def bwd(g):
        return (np.broadcast_to(g / (h * w), shape),)

    return Node(x.value.mean(axis=(-2, -1), keepdims=True), (x,), bwd, x.requires_grad)


def mean_axis(x, axis: int) -> Node:
    """Mean over one axis, dropping it."""
    x = _node(x)
    ndim = x.value.ndim
    if not -ndim <= axis < ndim:
        raise IndexError(f"mean_axis: axis {axis} out of range for rank {ndim}")
    axis = axis % ndim
    n = x.value.shape[axis]
    shape = x.value.shape

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape),)

    return Node(x.value.mean(axis=axis), (x,), bwd, x.requires_grad)


def sum_all(x) -> Node:
    x = _node(x)
    shape = x.value.shape

    def bwd(g):
        return (np.broadcast_to(g, shape),)

    return Node(np.asarray(x.value.sum()), (x,), bwd, x.requires_grad)


def cross_entropy(logits, labels) -> Node:
    """Mean negative log-likelihood of integer class labels, via log-sum-exp."""
    logits = _node(logits)
    if logits.value.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be rank-2, got shape "
                             f"{logits.value.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.value.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: labels shape {labels.shape} does not match "
                             f"{n} rows of logits")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"cross_entropy: label out of range [0, {c})")
    z = logits.value
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    loss = float((lse[:, 0] - z[np.arange(n), labels]).mean())
    probs = np.exp(z - lse)

    def bwd(g):
        gz = probs.copy()
        gz[np.arange(n), labels] -= 1.0
        return (gz * (float(g) / n),)

    return Node(np.asarray(loss), (logits,), bwd, logits.requires_grad)


# ---------------------------------------------------------------------------
# backward pass and optimizer
# ---------------------------------------------------------------------------

def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents precede consumers


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``grad`` of every requires-grad node.

    Repeated calls without zeroing sum their contributions. Fan-out is
    handled by summing over consumers before a node itself is processed.
    """
    loss = _node(loss)
    if loss.value.shape != ():
        raise ContractError(f"backward: root must be a scalar, got shape {loss.value.shape}")
    if not loss.requires_grad:
        return
    flow: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(_topo_order(loss)):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        buf = node.grad
        buf += g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            flow[key] = flow[key] + pg if key in flow else pg


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    """In-place update p <- p - lr * grad(p); gradients are zeroed afterwards."""
    for p in params:
        node = p.node
        if node._grad is not None:
            node.value -= lr * node._grad
            node._grad[...] = 0.0


def zero_gradients(params: Iterable[Parameter]) -> None:
    for p in params:
        p.node.zero_grad()
