"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every differentiable operation returns a new :class:`Tensor` that remembers
its inputs and a closure mapping the output gradient to input gradients.
``Tensor.backward`` replays those closures in reverse topological order and
accumulates into ``.grad`` of leaf tensors that have ``requires_grad`` set.

Conventions fixed for reproducibility:

* ReLU passes no gradient at exactly 0.
* ``max`` routes gradient to the first maximal cell (C order) of each slice.
* ``avg_pool2d`` always divides by ``k*k`` (zero padding counts).

The piecewise choices (ReLU masks, ``max`` winners, ``maximum_scalar`` masks)
can be recorded at one point and replayed at another with
:func:`record_selections` / :func:`replay_selections`. Replaying evaluates the
smooth piece of the function that contains the recorded point, which is what
finite-difference checks need near kinks.
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    GraphUsageError,
    NumericDegenerateError,
)

_GRAD_ENABLED = contextvars.ContextVar("pdt_hfr_grad_enabled", default=True)
_SELECTIONS = contextvars.ContextVar("pdt_hfr_selections", default=None)

# rows of the im2col matrix materialised at once in conv2d
_CONV_CHUNK_ROWS = 200_000
_COLS_BLOCK_BYTES = 1 << 20  # keeps a stride-1 column block inside L2


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


class SelectionPattern:
    """Ordered log of the discrete choices made by piecewise operations."""

    def __init__(self):
        self.choices: list[np.ndarray] = []
        self.replaying = False
        self.cursor = 0
        self.flips = 0

    def choose(self, natural: np.ndarray) -> np.ndarray:
        if not self.replaying:
            self.choices.append(natural)
            return natural
        if self.cursor >= len(self.choices):
            raise GraphUsageError("replayed graph makes more piecewise choices than were recorded")
        recorded = self.choices[self.cursor]
        if recorded.shape != natural.shape:
            raise GraphUsageError(
                f"piecewise choice {self.cursor} has shape {natural.shape}, recorded {recorded.shape}"
            )
        self.cursor += 1
        self.flips += int(np.count_nonzero(recorded != natural))
        return recorded


def _choose(natural: np.ndarray) -> np.ndarray:
    pattern = _SELECTIONS.get()
    return natural if pattern is None else pattern.choose(natural)


@contextmanager
def record_selections():
    """Log every ReLU mask and max winner computed inside the block."""
    pattern = SelectionPattern()
    token = _SELECTIONS.set(pattern)
    try:
        yield pattern
    finally:
        _SELECTIONS.reset(token)


@contextmanager
def replay_selections(pattern: SelectionPattern):
    """Reuse the choices logged in ``pattern`` instead of recomputing them.

    ``pattern.flips`` counts the cells whose natural choice differed.
    """
    pattern.replaying = True
    pattern.cursor = 0
    token = _SELECTIONS.set(pattern)
    try:
        yield pattern
    finally:
        _SELECTIONS.reset(token)
        pattern.replaying = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphUsageError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # --- autodiff --------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf."""
        if self.data.size != 1:
            raise GraphUsageError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphUsageError("loss is not connected to any tensor requiring grad")
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(_topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # --- operators -------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, "mean", axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, "max", axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grad(params: Iterable[Tensor]) -> None:
    """Drop gradient buffers; parameter values are untouched."""
    for p in params:
        p.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# --- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward, "div")


def power(x: Tensor, exponent: float) -> Tensor:
    x = as_tensor(x)
    p = float(exponent)

    def backward(g):
        return (g * p * x.data ** (p - 1.0),)

    return Tensor._result(x.data**p, (x,), backward, "pow")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return Tensor._result(out, (x,), backward, "exp")


def sqrt(x: Tensor) -> Tensor:
    """Square root whose gradient at 0 is taken as 0 instead of infinity."""
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return Tensor._result(out, (x,), backward, "sqrt")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = _choose(x.data > 0)

    def backward(g):
        return (g * mask,)

    # multiplying (rather than np.where) lets NaN through, so divergence stays visible
    return Tensor._result(x.data * mask, (x,), backward, "relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._result(out, (x,), backward, "sigmoid")


def maximum_scalar(x: Tensor, floor: float) -> Tensor:
    """``max(x, floor)`` elementwise; gradient flows only where x > floor."""
    x = as_tensor(x)
    mask = _choose(x.data > floor)

    def backward(g):
        return (g * mask,)

    return Tensor._result(np.where(mask | np.isnan(x.data), x.data, floor), (x,), backward, "maximum")


# --- shape ----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor._result(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return Tensor._result(x.data.transpose(axes), (x,), backward, "transpose")


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(out, dtype=np.float64), (x,), backward, "getitem")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    ref = parts[0]
    axis = axis % ref.ndim
    for i, p in enumerate(parts[1:], start=1):
        if p.ndim != ref.ndim:
            raise DimensionError(f"part {i} has rank {p.ndim}, expected {ref.ndim}")
        for ax in range(ref.ndim):
            if ax != axis and p.shape[ax] != ref.shape[ax]:
                raise DimensionError(
                    f"part {i} has size {p.shape[ax]} on axis {ax}, expected {ref.shape[ax]}"
                )
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        sl = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    data = np.concatenate([p.data for p in parts], axis=axis)
    return Tensor._result(data, parts, backward, "concat")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis, in argument order."""
    parts = [as_tensor(p) for p in parts]
    for i, p in enumerate(parts):
        if p.ndim != 4:
            raise DimensionError(f"part {i} must be NCHW, got rank {p.ndim}")
    return concat(parts, axis=1)


# --- reductions and linear algebra ---------------------------------------

def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(sorted(a % ndim for a in axis))
    if len(set(axes)) != len(axes):
        raise DimensionError(f"repeated axis in {axis}")
    return axes


def reduce(x: Tensor, kind: str, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    if kind == "sum":
        out = x.data.sum(axis=axes, keepdims=True)

        def backward(g):
            return (np.broadcast_to(g.reshape(kept_shape), x.shape).copy(),)

    elif kind == "mean":
        count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        out = x.data.mean(axis=axes, keepdims=True)

        def backward(g):
            return (np.broadcast_to(g.reshape(kept_shape) / count, x.shape).copy(),)

    elif kind == "max":
        rest = [a for a in range(x.ndim) if a not in axes]
        moved = x.data.transpose(rest + list(axes))
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        winner = _choose(flat.argmax(axis=-1))
        out = np.take_along_axis(flat, winner[..., None], axis=-1).reshape(kept_shape)

        def backward(g):
            mask = np.zeros_like(flat)
            np.put_along_axis(mask, winner[..., None], 1.0, axis=-1)
            mask = mask.reshape(moved.shape).transpose(np.argsort(rest + list(axes)))
            return (mask * g.reshape(kept_shape),)

    else:
        raise ConfigError(f"unknown reduction {kind!r}")

    if not keepdims:
        out = out.reshape(tuple(n for i, n in enumerate(x.shape) if i not in axes))
    return Tensor._result(out, (x,), backward, kind)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner axis mismatch: {a.shape[1]} (axis 1 of left) vs {b.shape[0]} (axis 0 of right)"
        )

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data @ b.data, (a, b), backward, "matmul")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of an [N, D] tensor to unit Euclidean norm."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize expects [N, D], got {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if np.any(norm <= eps):
        bad = int(np.argmax(norm[:, 0] <= eps))
        raise NumericDegenerateError(f"row {bad} has norm {norm[bad, 0]:.3e} <= {eps}")
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norm,)

    return Tensor._result(out, (x,), backward, "l2_normalize")


# --- convolution and pooling ---------------------------------------------

def _out_size(size: int, k: int, stride: int, padding: int, axis: str, floor: bool) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ConfigError(f"kernel {k} larger than padded input {size + 2 * padding} on axis {axis}")
    if span % stride and not floor:
        raise ConfigError(
            f"output size on axis {axis} is not an integer: ({size} + 2*{padding} - {k})/{stride} + 1"
        )
    return span // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[n, C, Hp, Wp] -> [n, C*kh*kw, ho*wo] (channel-major, then kernel row, column)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _flat_blocks(xf: np.ndarray, kh: int, kw: int, wp: int, length: int):
    """Stride-1 im2col on flattened padded rows, one cache-sized block at a time.

    With images flattened to ``Hp*Wp`` (plus ``kw - 1`` trailing zeros), kernel
    offset (i, j) is a contiguous slice starting at ``i*Wp + j``. Output columns
    come out ``Wp`` wide; the last ``kw - 1`` of each row are discarded later.
    Yields ``(sample, lo, cols)`` with ``cols`` of shape [C*kh*kw, L] covering
    output columns ``lo:lo+L``. ``cols`` is a reused buffer.
    """
    n, c = xf.shape[:2]
    rows = c * kh * kw
    seg = max(wp, _COLS_BLOCK_BYTES // (8 * rows) // wp * wp)
    buf = np.empty((c, kh, kw, min(seg, length)))
    offsets = [(i, j, i * wp + j) for i in range(kh) for j in range(kw)]
    for sample in range(n):
        x = xf[sample]
        for lo in range(0, length, seg):
            size = min(seg, length - lo)
            cols = buf[..., :size]
            for i, j, off in offsets:
                cols[:, i, j] = x[:, off + lo : off + lo + size]
            yield sample, lo, cols.reshape(rows, size)


def _flatten_padded(xp: np.ndarray, kw: int) -> np.ndarray:
    n, c, hp, wp = xp.shape
    flat = xp.reshape(n, c, hp * wp)
    return np.pad(flat, ((0, 0), (0, 0), (0, kw - 1))) if kw > 1 else flat


def _chunk(per_sample: int) -> int:
    return max(1, _CONV_CHUNK_ROWS // per_sample)


def _correlate(xp: np.ndarray, wmat: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Cross-correlation of an already padded batch; returns [N, Cout, ho, wo]."""
    n, cin, _, wp = xp.shape
    cout = wmat.shape[0]
    if kh == kw == 1 and stride == 1:
        out = np.empty((n, cout, ho * wo))
        np.matmul(wmat, xp.reshape(n, cin, ho * wo), out=out)
        return out.reshape(n, cout, ho, wo)
    if stride == 1:
        length = ho * wp
        xf = _flatten_padded(xp, kw)
        wide = np.empty((n, cout, length))
        for sample, lo, cols in _flat_blocks(xf, kh, kw, wp, length):
            np.matmul(wmat, cols, out=wide[sample, :, lo : lo + cols.shape[1]])
        return np.ascontiguousarray(wide.reshape(n, cout, ho, wp)[:, :, :, :wo])
    out = np.empty((n, cout, ho * wo))
    step = _chunk(ho * wo)
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        np.matmul(wmat, _im2col(xp[lo:hi], kh, kw, stride, ho, wo), out=out[lo:hi])
    return out.reshape(n, cout, ho, wo)


def _conv_weight_grad(g: np.ndarray, xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, cin, _, wp = xp.shape
    cout, ho, wo = g.shape[1:]
    if kh == kw == 1 and stride == 1:
        return np.matmul(g.reshape(n, cout, -1), xp.reshape(n, cin, -1).transpose(0, 2, 1)).sum(axis=0)
    gw = np.zeros((cout, cin * kh * kw))
    if stride == 1:
        length = ho * wp
        xf = _flatten_padded(xp, kw)
        wide = np.zeros((n, cout, ho, wp))
        wide[:, :, :, :wo] = g
        wide = wide.reshape(n, cout, length)
        for sample, lo, cols in _flat_blocks(xf, kh, kw, wp, length):
            gw += wide[sample, :, lo : lo + cols.shape[1]] @ cols.T
        return gw
    gflat = g.reshape(n, cout, ho * wo)
    step = _chunk(ho * wo)
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        cols = _im2col(xp[lo:hi], kh, kw, stride, ho, wo)
        gw += np.matmul(gflat[lo:hi], cols.transpose(0, 2, 1)).sum(axis=0)
    return gw


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    floor: bool = False,
) -> Tensor:
    """2-D cross-correlation of an NCHW batch.

    Output sizes must be exact unless ``floor`` is set, in which case trailing
    rows/columns that do not fill a stride step are dropped.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be NCHW, got shape {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be [Cout, Cin, kh, kw], got {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"channel axis mismatch: input has {cin}, weight expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"kernel must be odd-sized, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"invalid stride {stride} / padding {padding}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"bias must have shape ({cout},), got {bias.shape}")
    ho = _out_size(h, kh, stride, padding, "H", floor)
    wo = _out_size(w, kw, stride, padding, "W", floor)

    xp = _pad(x.data, padding)
    wmat = weight.data.reshape(cout, -1)
    out = _correlate(xp, wmat, kh, kw, stride, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if weight.requires_grad:
            gw = _conv_weight_grad(g, xp, kh, kw, stride).reshape(weight.shape)
        if x.requires_grad:
            gx = _conv_input_grad(g, weight.data, x.shape, stride, padding)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, backward, "conv2d")


def _conv_input_grad(g: np.ndarray, weight: np.ndarray, in_shape, stride: int, padding: int) -> np.ndarray:
    n, cin, h, w = in_shape
    cout, _, kh, kw = weight.shape
    ho, wo = g.shape[2:]
    if stride == 1 and padding <= kh - 1 and padding <= kw - 1:
        # full correlation with the flipped, channel-transposed kernel
        flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - padding,) * 2, (kw - 1 - padding,) * 2))
        return _correlate(gp, np.ascontiguousarray(flipped), kh, kw, 1, h, w)
    wmat = weight.reshape(cout, -1)
    gxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding))
    gflat = g.reshape(n, cout, ho * wo)
    span_h, span_w = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    step = _chunk(ho * wo)
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        gcols = np.matmul(wmat.T, gflat[lo:hi]).reshape(hi - lo, cin, kh, kw, ho, wo)
        target = gxp[lo:hi]
        for i in range(kh):
            for j in range(kw):
                target[:, :, i : i + span_h : stride, j : j + span_w : stride] += gcols[:, :, i, j]
    return gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp


def avg_pool2d(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Window mean with a fixed ``k*k`` divisor (padded zeros are counted)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d input must be NCHW, got shape {x.shape}")
    if k < 1 or stride < 1 or padding < 0:
        raise ConfigError(f"invalid pooling geometry k={k} stride={stride} padding={padding}")
    n, c, h, w = x.shape
    ho = _out_size(h, k, stride, padding, "H", False)
    wo = _out_size(w, k, stride, padding, "W", False)
    xp = _pad(x.data, padding)
    out = np.zeros((n, c, ho, wo))
    span_h = (ho - 1) * stride + 1
    span_w = (wo - 1) * stride + 1
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + span_h : stride, j : j + span_w : stride]
    out /= k * k

    def backward(g):
        gxp = np.zeros_like(xp)
        share = g / (k * k)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + span_h : stride, j : j + span_w : stride] += share
        return (gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp,)

    return Tensor._result(out, (x,), backward, "avg_pool2d")
