"""Dense tensors with a fixed differentiable op set and reverse-mode gradients.

Values are row-major numpy arrays, double precision by default (gradient
checks demand it); float32 is an opt-in storage mode and is excluded from
gradient tolerance guarantees. Tensors are immutable values after
construction: ops allocate fresh output arrays and never write into their
inputs. There is no broadcasting beyond scalar-with-tensor; any other shape
mismatch raises ``ShapeError`` naming both shapes.

Each op records its inputs and a backward closure on the output node, so the
graph reachable from a loss is an op tape in topological order;
``Tensor.backward`` linearizes it and visits every node exactly once.
Concurrent reads of tensors are safe; a graph/tape belongs to one logical
thread, and parallel evaluation needs independent graphs.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import sampling


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GraphError(ValueError):
    """Backward was invoked on an unusable graph (non-scalar loss, no tape)."""


class Tensor:
    """A dense multi-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def zeros(cls, shape: Sequence[int], requires_grad: bool = False, dtype=np.float64) -> Tensor:
        return cls(np.zeros(tuple(shape), dtype=dtype), requires_grad=requires_grad, dtype=dtype)

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward_fn = backward_fn
            out._op = op
        else:
            # untracked subgraphs are pruned so backward never visits them
            out._parents = ()
            out._backward_fn = None
            out._op = op
        return out

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def is_leaf(self) -> bool:
        return self._backward_fn is None

    # -- gradient machinery ----------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def linearize(self) -> list[Tensor]:
        """Tracked nodes reachable from self, inputs before consumers."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if parent.requires_grad:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad leaf below this scalar.

        Leaves that do not require gradients are left untouched. Leaf grads
        accumulate across calls; intermediate grads are reset per call.
        """
        if self.shape != ():
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor with requires_grad")
        order = self.linearize()
        for node in order:
            if not node.is_leaf():
                node.grad = None
        self._accumulate(np.ones((), dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward_fn is None or node.grad is None:
                continue
            node._backward_fn(node.grad)

    # -- elementwise ops ---------------------------------------------------

    def __add__(self, other) -> Tensor:
        other = _coerce(other)
        _check_elementwise("add", self, other)
        out_data = self.data + other.data

        def backward(g):
            _accum_maybe_scalar(self, g)
            _accum_maybe_scalar(other, g)

        return Tensor._from_op(out_data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        def backward(g):
            if self.requires_grad:
                self._accumulate(-g)

        return Tensor._from_op(-self.data, (self,), backward, "neg")

    def __sub__(self, other) -> Tensor:
        return self + (-_coerce(other))

    def __rsub__(self, other) -> Tensor:
        return _coerce(other) + (-self)

    def __mul__(self, other) -> Tensor:
        other = _coerce(other)
        _check_elementwise("mul", self, other)
        a_data, b_data = self.data, other.data
        out_data = a_data * b_data

        def backward(g):
            _accum_maybe_scalar(self, g * b_data)
            _accum_maybe_scalar(other, g * a_data)

        return Tensor._from_op(out_data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def sigmoid(self) -> Tensor:
        x = self.data
        y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

        def backward(g):
            self._accumulate(g * y * (1.0 - y))

        return Tensor._from_op(y, (self,), backward, "sigmoid")

    def tanh(self) -> Tensor:
        y = np.tanh(self.data)

        def backward(g):
            self._accumulate(g * (1.0 - y * y))

        return Tensor._from_op(y, (self,), backward, "tanh")

    def relu(self) -> Tensor:
        mask = self.data > 0

        def backward(g):
            self._accumulate(g * mask)

        return Tensor._from_op(np.where(mask, self.data, 0.0), (self,), backward, "relu")

    def log(self) -> Tensor:
        x = self.data

        def backward(g):
            self._accumulate(g / x)

        return Tensor._from_op(np.log(x), (self,), backward, "log")

    def softmax(self, axis: int = -1) -> Tensor:
        shifted = self.data - np.max(self.data, axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / np.sum(e, axis=axis, keepdims=True)

        def backward(g):
            inner = np.sum(g * y, axis=axis, keepdims=True)
            self._accumulate(y * (g - inner))

        return Tensor._from_op(y, (self,), backward, "softmax")

    def log_softmax(self, axis: int = -1) -> Tensor:
        """Fused softmax-then-log; stays finite where the composition would not."""
        shifted = self.data - np.max(self.data, axis=axis, keepdims=True)
        lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
        y = shifted - lse

        def backward(g):
            soft = np.exp(y)
            self._accumulate(g - soft * np.sum(g, axis=axis, keepdims=True))

        return Tensor._from_op(y, (self,), backward, "log_softmax")

    # -- reductions --------------------------------------------------------

    def sum(self, axis: int | tuple[int, ...] | None = None) -> Tensor:
        axes = _normalize_axes(axis, self.ndim)
        out_data = np.sum(self.data, axis=axes)
        in_shape = self.shape

        def backward(g):
            self._accumulate(_expand_reduced(g, in_shape, axes))

        return Tensor._from_op(out_data, (self,), backward, "sum")

    def mean(self, axis: int | tuple[int, ...] | None = None) -> Tensor:
        axes = _normalize_axes(axis, self.ndim)
        out_data = np.mean(self.data, axis=axes)
        in_shape = self.shape
        count = self.size if axes is None else int(np.prod([in_shape[a] for a in axes]))

        def backward(g):
            self._accumulate(_expand_reduced(g, in_shape, axes) / count)

        return Tensor._from_op(out_data, (self,), backward, "mean")

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.shape
        out_data = self.data.reshape(shape).copy()

        def backward(g):
            self._accumulate(g.reshape(old_shape))

        return Tensor._from_op(out_data, (self,), backward, "reshape")

    def transpose(self) -> Tensor:
        if self.ndim != 2:
            raise ShapeError(f"transpose expects a matrix, got shape {self.shape}")
        out_data = self.data.T.copy()

        def backward(g):
            self._accumulate(g.T)

        return Tensor._from_op(out_data, (self,), backward, "transpose")

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def narrow(self, axis: int, start: int, length: int) -> Tensor:
        """Contiguous slice of ``length`` entries along ``axis``."""
        if not 0 <= axis < self.ndim:
            raise ShapeError(f"narrow axis {axis} out of range for shape {self.shape}")
        if start < 0 or length < 0 or start + length > self.shape[axis]:
            raise ShapeError(
                f"narrow range [{start}, {start + length}) exceeds extent {self.shape[axis]}"
            )
        index = tuple(slice(None) if d != axis else slice(start, start + length) for d in range(self.ndim))
        out_data = self.data[index].copy()
        in_shape = self.shape

        def backward(g):
            full = np.zeros(in_shape, dtype=g.dtype)
            full[index] = g
            self._accumulate(full)

        return Tensor._from_op(out_data, (self,), backward, "narrow")

    # -- matrix ops ----------------------------------------------------------

    def __matmul__(self, other: Tensor) -> Tensor:
        other = _coerce(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ShapeError(f"matmul expects matrices, got {self.shape} @ {other.shape}")
        if self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul inner dims disagree: {self.shape} @ {other.shape}")
        a_data, b_data = self.data, other.data
        out_data = a_data @ b_data

        def backward(g):
            if self.requires_grad:
                self._accumulate(g @ b_data.T)
            if other.requires_grad:
                other._accumulate(a_data.T @ g)

        return Tensor._from_op(out_data, (self, other), backward, "matmul")


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, (int, float, np.floating, np.integer)):
        return Tensor(np.float64(value))
    raise TypeError(f"cannot use {type(value).__name__} as a tensor operand")


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{op} requires equal shapes (or a scalar), got {a.shape} and {b.shape}")


def _accum_maybe_scalar(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.shape == () and np.ndim(g) != 0:
        t._accumulate(np.sum(g))
    else:
        t._accumulate(g)


def _normalize_axes(axis, ndim) -> tuple[int, ...] | None:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(sorted(a % ndim for a in axis))
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate reduction axes {axis}")
    return axes


def _expand_reduced(g: np.ndarray, in_shape: tuple[int, ...], axes) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(g, in_shape)
    expanded = g
    for a in axes:
        expanded = np.expand_dims(expanded, a)
    return np.broadcast_to(expanded, in_shape)


# -- module-level ops ----------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; all other extents must agree."""
    if not tensors:
        raise ShapeError("concat of an empty tensor list")
    ndim = tensors[0].ndim
    axis = axis % ndim
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != ndim or any(other[d] != base[d] for d in range(ndim) if d != axis):
            raise ShapeError(f"concat shapes disagree off axis {axis}: {tensors[0].shape} vs {t.shape}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, ext in zip(tensors, extents):
            if t.requires_grad and ext > 0:
                index = tuple(
                    slice(None) if d != axis else slice(offset, offset + ext) for d in range(ndim)
                )
                t._accumulate(g[index])
            offset += ext

    return Tensor._from_op(out_data, tuple(tensors), backward, "concat")


def conv1d(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 1D convolution along the token axis.

    ``x`` is [N, C_in], ``w`` is [C_out, C_in, k] with odd k, ``bias`` is
    [C_out]; output is [N, C_out]. Padding is with zeros on both ends, so
    kernel size 1 degenerates to a per-token linear map.
    """
    if x.ndim != 2 or w.ndim != 3 or bias.ndim != 1:
        raise ShapeError(f"conv1d expects x[N,Cin], w[Cout,Cin,k], bias[Cout]; got {x.shape}, {w.shape}, {bias.shape}")
    n, c_in = x.shape
    c_out, w_cin, k = w.shape
    if w_cin != c_in:
        raise ShapeError(f"conv1d channel mismatch: x has {c_in}, w has {w_cin}")
    if bias.shape[0] != c_out:
        raise ShapeError(f"conv1d bias width {bias.shape[0]} != C_out {c_out}")
    if k % 2 == 0:
        raise ShapeError(f"conv1d kernel size must be odd, got {k}")
    pad = k // 2
    x_data, w_data, b_data = x.data, w.data, bias.data
    xpad = np.zeros((n + 2 * pad, c_in), dtype=x_data.dtype)
    xpad[pad: pad + n] = x_data
    acc = np.zeros((n, c_out), dtype=x_data.dtype)
    for j in range(k):
        acc += xpad[j: j + n] @ w_data[:, :, j].T
    out_data = acc + b_data

    def backward(g):
        if x.requires_grad:
            gpad = np.zeros((n + 2 * pad, c_in), dtype=g.dtype)
            for j in range(k):
                gpad[j: j + n] += g @ w_data[:, :, j]
            x._accumulate(gpad[pad: pad + n])
        if w.requires_grad:
            gw = np.empty_like(w_data)
            for j in range(k):
                gw[:, :, j] = g.T @ xpad[j: j + n]
            w._accumulate(gw)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return Tensor._from_op(out_data, (x, w, bias), backward, "conv1d")


def bilinear_sample(grid: Tensor, points: np.ndarray) -> Tensor:
    """Differentiable bilinear sampling of ``grid`` [h, w, C] at ``points`` [P, 2].

    Points are (y, x) in the cell-unit convention of :mod:`visionflow.sampling`
    and are treated as constants; gradients flow to the grid values only.
    """
    if grid.ndim != 3:
        raise ShapeError(f"bilinear_sample expects a [h, w, C] grid, got {grid.shape}")
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"bilinear_sample expects [P, 2] points, got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ValueError("bilinear_sample points must be finite")
    h, w, c = grid.shape
    i0, i1, j0, j1, wts = sampling.corner_weights(h, w, points)
    g_data = grid.data
    out_data = (
        g_data[i0, j0] * wts[:, 0:1]
        + g_data[i0, j1] * wts[:, 1:2]
        + g_data[i1, j0] * wts[:, 2:3]
        + g_data[i1, j1] * wts[:, 3:4]
    )

    def backward(g):
        dgrid = np.zeros((h, w, c), dtype=g.dtype)
        np.add.at(dgrid, (i0, j0), g * wts[:, 0:1])
        np.add.at(dgrid, (i0, j1), g * wts[:, 1:2])
        np.add.at(dgrid, (i1, j0), g * wts[:, 2:3])
        np.add.at(dgrid, (i1, j1), g * wts[:, 3:4])
        grid._accumulate(dgrid)

    return Tensor._from_op(out_data, (grid,), backward, "bilinear_sample")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w`` plus a per-column bias.

    The bias row is expanded with a constant ones-column matmul so the strict
    no-broadcasting rule holds; its gradient is the usual per-column sum.
    """
    if b.ndim != 1:
        raise ShapeError(f"affine bias must be a vector, got shape {b.shape}")
    rows = x.shape[0]
    return x @ w + Tensor(np.ones((rows, 1), dtype=x.data.dtype)) @ b.reshape(1, b.shape[0])


def one_hot(indices: Iterable[int], depth: int) -> Tensor:
    """Constant one-hot rows; the in-vocabulary route to embedding lookups."""
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= depth):
        raise ValueError(f"one_hot indices out of range [0, {depth})")
    rows = np.zeros((idx.size, depth), dtype=np.float64)
    if idx.size:
        rows[np.arange(idx.size), idx] = 1.0
    return Tensor(rows)


# -- JSON wire format ---------------------------------------------------------


def to_json_dict(t: Tensor) -> dict:
    """Serialize as {"shape": [...], "data": [...]} with row-major data."""
    return {"shape": list(t.shape), "data": [float(v) for v in t.data.ravel()]}


def from_json_dict(obj: dict) -> Tensor:
    shape = tuple(int(s) for s in obj["shape"])
    data = np.asarray(obj["data"], dtype=np.float64)
    expected = int(np.prod(shape)) if shape else 1
    if data.size != expected:
        raise ValueError(f"tensor data length {data.size} does not match shape {shape}")
    return Tensor(data.reshape(shape))
