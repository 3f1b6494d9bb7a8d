"""Dense numpy tensors with reverse-mode automatic differentiation.

Every op builds a node that remembers its parents and a closure mapping the
output gradient to parent gradients. ``Tensor.backward`` walks the graph in
reverse topological order and accumulates gradients into leaf tensors.

Broadcasting is deliberately narrow: a binary op accepts equal shapes or a
scalar operand, and per-channel affine transforms have their own op.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-d float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op})"

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` of every leaf reachable from this scalar."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor requiring grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(
                        f"{node.op}: backward produced {pg.shape} for parent {parent.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return elementwise(self, other, "add")

    def __radd__(self, other):
        return elementwise(self, other, "add")

    def __sub__(self, other):
        return elementwise(self, other, "sub")

    def __rsub__(self, other):
        return elementwise(neg(self), other, "add")

    def __mul__(self, other):
        return elementwise(self, other, "mul")

    def __rmul__(self, other):
        return elementwise(self, other, "mul")

    def __truediv__(self, other):
        return elementwise(self, other, "div")

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, "mean", axis, keepdims)

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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a finite sum rules out nan/inf; an overflowing sum falls through to the exact test
    if np.isfinite(arr.sum()):
        return
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"dtype mismatch: {sorted(d.name for d in dtypes)}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

_BINARY = {"add", "sub", "mul", "div"}
_UNARY = {"neg", "relu", "leaky_relu", "tanh", "sigmoid", "square", "softplus",
          "max_with_scalar", "sqrt", "exp"}


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast_scalar(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def elementwise(a, b=None, kind: str = "add", *, slope: float = 0.01, c: float = 0.0) -> Tensor:
    """Apply a pointwise op. ``b`` may be a tensor of equal shape or a scalar."""
    if kind in _BINARY:
        return _binary(as_tensor(a), b, kind)
    if kind not in _UNARY:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if b is not None:
        raise ValueError(f"{kind} is unary")
    a = as_tensor(a)
    x = a.data
    if kind == "neg":
        return _make(-x, (a,), lambda g: (-g,), kind)
    if kind == "relu":
        mask = x > 0
        return _make(np.maximum(x, x.dtype.type(0)), (a,), lambda g: (g * mask,), kind)
    if kind == "leaky_relu":
        # float arithmetic on the mask is much faster than boolean selection
        scale = (x > 0).astype(x.dtype)
        scale *= x.dtype.type(1 - slope)
        scale += x.dtype.type(slope)
        return _make(x * scale, (a,), lambda g: (g * scale,), kind)
    if kind == "tanh":
        y = np.tanh(x)
        return _make(y, (a,), lambda g: (g * (1 - y * y),), kind)
    if kind == "sigmoid":
        y = _sigmoid(x)
        return _make(y, (a,), lambda g: (g * y * (1 - y),), kind)
    if kind == "square":
        return _make(x * x, (a,), lambda g: (2 * g * x,), kind)
    if kind == "softplus":
        y = np.logaddexp(0, x).astype(x.dtype)
        return _make(y, (a,), lambda g: (g * _sigmoid(x),), kind)
    if kind == "max_with_scalar":
        # subgradient 0 at the kink
        mask = x > c
        y = np.where(mask, x, np.asarray(c, dtype=x.dtype))
        return _make(y, (a,), lambda g: (g * mask,), kind)
    if kind == "sqrt":
        y = np.sqrt(x)
        return _make(y, (a,), lambda g: (g / (2 * y),), kind)
    if kind == "exp":
        y = np.exp(x)
        return _make(y, (a,), lambda g: (g * y,), kind)
    raise AssertionError(kind)


def _binary(a: Tensor, b, kind: str) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    _same_dtype(a, b)
    if a.shape == b.shape:
        target = a.shape
    elif b.size == 1:
        target = a.shape
    elif a.size == 1:
        target = b.shape
    else:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not match")
    same = a.shape == b.shape
    xs = a.data if same or a.size != 1 else a.data.reshape(())
    ys = b.data if same or b.size != 1 else b.data.reshape(())
    if kind == "add":
        out = xs + ys
        back = lambda g: (_unbroadcast_scalar(g, a.shape), _unbroadcast_scalar(g, b.shape))
    elif kind == "sub":
        out = xs - ys
        back = lambda g: (_unbroadcast_scalar(g, a.shape), _unbroadcast_scalar(-g, b.shape))
    elif kind == "mul":
        out = xs * ys
        back = lambda g: (
            _unbroadcast_scalar(g * ys, a.shape) if a.requires_grad else None,
            _unbroadcast_scalar(g * xs, b.shape) if b.requires_grad else None,
        )
    else:
        out = xs / ys
        back = lambda g: (
            _unbroadcast_scalar(g / ys, a.shape) if a.requires_grad else None,
            _unbroadcast_scalar(-g * xs / (ys * ys), b.shape) if b.requires_grad else None,
        )
    out = np.asarray(out, dtype=a.dtype).reshape(target)
    return _make(out, (a, b), back, kind)


def add(a, b):
    return elementwise(a, b, "add")


def sub(a, b):
    return elementwise(a, b, "sub")


def mul(a, b):
    return elementwise(a, b, "mul")


def div(a, b):
    return elementwise(a, b, "div")


def neg(a):
    return elementwise(a, None, "neg")


def relu(a):
    return elementwise(a, None, "relu")


def leaky_relu(a, slope: float = 0.1):
    return elementwise(a, None, "leaky_relu", slope=slope)


def tanh(a):
    return elementwise(a, None, "tanh")


def sigmoid(a):
    return elementwise(a, None, "sigmoid")


def square(a):
    return elementwise(a, None, "square")


def softplus(a):
    return elementwise(a, None, "softplus")


def max_with_scalar(a, c: float = 0.0):
    return elementwise(a, None, "max_with_scalar", c=c)


def sqrt(a):
    return elementwise(a, None, "sqrt")


def exp(a):
    return elementwise(a, None, "exp")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate on backward."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take expects a 1-d index array")
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"index out of range for axis of size {n}")
    out = np.take(a.data, idx, axis=axis)

    def back(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return _make(out, (a,), back, "take")


def narrow(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice ``a[start:stop]`` along the leading axis."""
    if not 0 <= start <= stop <= a.shape[0]:
        raise IndexError(f"slice [{start}:{stop}] out of range for {a.shape[0]}")
    out = a.data[start:stop]

    def back(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return _make(out, (a,), back, "narrow")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    _same_dtype(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, back, "concat")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} invalid for {ndim}-d tensor")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(norm))


def reduce(x: Tensor, kind: str = "sum", axes=None, keepdims: bool = False) -> Tensor:
    """Sum, mean, max or min over ``axes`` (all axes when None)."""
    axes = _normalize_axes(axes, x.ndim)
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
    count = int(np.prod([x.shape[i] for i in axes])) if axes else 1
    if kind == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        back = lambda g: (np.broadcast_to(g.reshape(kept_shape), x.shape).copy(),)
    elif kind == "mean":
        out = x.data.mean(axis=axes, keepdims=keepdims)
        back = lambda g: (np.broadcast_to(g.reshape(kept_shape) / count, x.shape).astype(x.dtype),)
    elif kind in ("max", "min"):
        if count == 0:
            raise ShapeError(f"{kind} over an empty axis")
        # flatten reduced axes to the back so argmax picks a single winner
        rest = [i for i in range(x.ndim) if i not in axes]
        moved = np.transpose(x.data, rest + list(axes))
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        pick = flat.argmax(axis=-1) if kind == "max" else flat.argmin(axis=-1)
        best = np.take_along_axis(flat, pick[..., None], axis=-1)[..., 0]
        out = best.reshape(kept_shape) if keepdims else best

        def back(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, pick[..., None], g.reshape(pick.shape)[..., None], axis=-1)
            gm = gflat.reshape(moved.shape)
            return (np.transpose(gm, np.argsort(rest + list(axes))),)
    else:
        raise ValueError(f"unknown reduce kind {kind!r}")
    return _make(np.asarray(out, dtype=x.dtype), (x,), back, f"reduce_{kind}")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce(x, "sum", axis, keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return reduce(x, "mean", axis, keepdims)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    _same_dtype(a, b)
    out = a.data @ b.data

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back, "matmul")


def l2_normalize(x: Tensor, axis: int = -1, min_norm: float = 1e-12) -> Tensor:
    """Scale each vector along ``axis`` to unit Euclidean length."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if (norm <= min_norm).any():
        raise ValueError("cannot normalize a (near-)zero vector")
    y = x.data / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (x,), back, "l2_normalize")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv extent not integral: ({n} + 2*{pad} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def _channel_major(x: np.ndarray) -> bool:
    return x.ndim == 4 and x.transpose(1, 0, 2, 3).flags.c_contiguous


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return x
    b, c, h, w = x.shape
    if _channel_major(x):
        out = np.zeros((c, b, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        out[:, :, pad:pad + h, pad:pad + w] = x.transpose(1, 0, 2, 3)
        return out.transpose(1, 0, 2, 3)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Columns of shape (C*k*k, B*Ho*Wo) plus the output extents."""
    b, c, h, w = x.shape
    ho = _out_extent(h, k, stride, pad)
    wo = _out_extent(w, k, stride, pad)
    s = stride
    xt = _pad_hw(x, pad).transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, b, ho, wo), dtype=x.dtype)
    if s == 1:
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xt[:, :, i:i + ho, j:j + wo]
    else:
        # one strided pass into stride^2 phase images, then contiguous windows
        phases = {}
        for r in range(min(s, k)):
            for q in range(min(s, k)):
                phases[r, q] = np.ascontiguousarray(xt[:, :, r::s, q::s])
        for i in range(k):
            for j in range(k):
                ph = phases[i % s, j % s]
                a, bb = i // s, j // s
                cols[:, i, j] = ph[:, :, a:a + ho, bb:bb + wo]
    return cols.reshape(c * k * k, b * ho * wo), ho, wo


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int, stride: int,
            pad: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add columns (C*k*k, B*Ho*Wo) back into an image batch (B,C,H,W)."""
    b, c, h, w = shape
    cols = cols.reshape(c, k, k, b, ho, wo)
    out = np.zeros((c, b, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + hspan:stride, j:j + wspan:stride] += cols[:, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out.transpose(1, 0, 2, 3)


def _transposed_core(x: np.ndarray, kernel: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Transposed convolution of (B,C,H,W) with a (C,F,k,k) kernel, in numpy."""
    b, c, h, w = x.shape
    f, k = kernel.shape[1], kernel.shape[2]
    s = stride
    ho = (h - 1) * s - 2 * pad + k
    wo = (w - 1) * s - 2 * pad + k
    if k != 2 * s:
        return _col2im(kernel.reshape(c, -1).T @ _to_rows(x), (b, f, ho, wo), k, s, pad, h, w)
    # sub-pixel form: output phase (r, q) is a 2x2 correlation of the
    # once-padded input with taps kernel[..., s*(1-w)+r, s*(1-v)+q]
    cols, _, _ = _im2col(x, 2, 1, 1)
    taps = kernel.reshape(c, f, 2, s, 2, s)[:, :, ::-1, :, ::-1, :]
    wsub = taps.transpose(3, 5, 1, 0, 2, 4).reshape(s * s * f, c * 4)
    y = (wsub @ cols).reshape(s, s, f, b, h + 1, w + 1)
    out = np.empty((f, b, ho, wo), dtype=x.dtype)
    for r in range(s):
        # padded row s*n + r maps to output row s*n + r - pad
        n0 = -((r - pad) // s)
        y0 = s * n0 + r - pad
        for q in range(s):
            m0 = -((q - pad) // s)
            x0 = s * m0 + q - pad
            rows = len(range(y0, ho, s))
            cols_ = len(range(x0, wo, s))
            out[:, :, y0::s, x0::s] = y[r, q][:, :, n0:n0 + rows, m0:m0 + cols_]
    return out.transpose(1, 0, 2, 3)


def _to_rows(y: np.ndarray) -> np.ndarray:
    # (B,F,H,W) -> (F, B*H*W)
    f = y.shape[1]
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3)).reshape(f, -1)


def _from_rows(y2: np.ndarray, b: int, h: int, w: int) -> np.ndarray:
    # (F, B*H*W) -> (B,F,H,W) as a view; channel-major memory carries through
    # elementwise ops, which makes the next _to_rows free
    return y2.reshape(-1, b, h, w).transpose(1, 0, 2, 3)


def _shift_sum(y: np.ndarray, k: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """out[f,b,u,v] = sum_ij y[f,i,j,b,u+i-pad,v+j-pad], zero outside the image."""
    f, _, _, b, h, w = y.shape
    yp = y
    if pad:
        yp = np.zeros(y.shape[:4] + (h + 2 * pad, w + 2 * pad), dtype=y.dtype)
        yp[..., pad:pad + h, pad:pad + w] = y
    out = np.zeros((f, b, ho, wo), dtype=y.dtype)
    for i in range(k):
        for j in range(k):
            out += yp[:, i, j, :, i:i + ho, j:j + wo]
    return out


def _shifted_copies(g: np.ndarray, k: int, pad: int, h: int, w: int) -> np.ndarray:
    """S[(f,i,j), (b,u,v)] = g[f,b,u-i+pad,v-j+pad], zero outside the output."""
    f, b, ho, wo = g.shape
    gp = _pad_hw(g, k)
    out = np.empty((f, k, k, b, h, w), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i, j] = gp[:, :, k + pad - i:k + pad - i + h, k + pad - j:k + pad - j + w]
    return out.reshape(f * k * k, -1)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (B,C,H,W) input with a (F,C,k,k) kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and kernel")
    f, c, k, k2 = kernel.shape
    if k != k2:
        raise ShapeError("square kernels only")
    if x.shape[1] != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[1]} vs kernel {c}")
    _same_dtype(x, kernel)
    if stride == 1 and f < c:
        return _conv2d_narrow(x, kernel, pad)
    b = x.shape[0]
    cols, ho, wo = _im2col(x.data, k, stride, pad)
    wmat = kernel.data.reshape(f, -1)
    out = _from_rows(wmat @ cols, b, ho, wo)

    def back(g):
        g2 = _to_rows(g)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _transposed_core(g, kernel.data, stride, pad)
        return gx, gk

    return _make(out, (x, kernel), back, "conv2d")


def _conv2d_narrow(x: Tensor, kernel: Tensor, pad: int) -> Tensor:
    # stride-1 conv with few output channels: every intermediate scales with F, not C
    f, c, k, _ = kernel.shape
    b, _, h, w = x.shape
    ho = _out_extent(h, k, 1, pad)
    wo = _out_extent(w, k, 1, pad)
    x2 = _to_rows(x.data)
    wst = kernel.data.transpose(0, 2, 3, 1).reshape(f * k * k, c)
    y = (wst @ x2).reshape(f, k, k, b, h, w)
    out = _shift_sum(y, k, pad, ho, wo).transpose(1, 0, 2, 3)

    def back(g):
        shifted = _shifted_copies(np.ascontiguousarray(g.transpose(1, 0, 2, 3)), k, pad, h, w)
        gx = gk = None
        if x.requires_grad:
            wr = kernel.data.transpose(1, 0, 2, 3).reshape(c, f * k * k)
            gx = _from_rows(wr @ shifted, b, h, w)
        if kernel.requires_grad:
            gk = np.ascontiguousarray((shifted @ x2.T).reshape(f, k, k, c).transpose(0, 3, 1, 2))
        return gx, gk

    return _make(out, (x, kernel), back, "conv2d")


def conv2d_transpose(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution of (B,C,H,W) input with a (C,F,k,k) kernel.

    Equals the input-gradient of ``conv2d`` with the same kernel, so the output
    extent is ``(H - 1) * stride - 2 * pad + k``.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d_transpose expects 4-d input and kernel")
    c, f, k, k2 = kernel.shape
    if k != k2:
        raise ShapeError("square kernels only")
    if x.shape[1] != c:
        raise ShapeError(f"conv2d_transpose channel mismatch: input {x.shape[1]} vs kernel {c}")
    _same_dtype(x, kernel)
    b, _, h, w = x.shape
    ho = (h - 1) * stride - 2 * pad + k
    wo = (w - 1) * stride - 2 * pad + k
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d_transpose output extent non-positive ({ho}x{wo})")
    x2 = _to_rows(x.data)
    kmat = kernel.data.reshape(c, -1)
    out = _transposed_core(x.data, kernel.data, stride, pad)

    def back(g):
        cols, gh, gw = _im2col(g, k, stride, pad)
        assert (gh, gw) == (h, w)
        gx = _from_rows(kmat @ cols, b, h, w) if x.requires_grad else None
        gk = (x2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        return gx, gk

    return _make(out, (x, kernel), back, "conv2d_transpose")


# ---------------------------------------------------------------------------
# normalization and affine
# ---------------------------------------------------------------------------

class BatchNormState:
    """Running mean/variance for one batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.9):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    # (C,) or (B,C) -> broadcastable against (B,C,...)
    if v.ndim == 1:
        return v.reshape((1, -1) + (1,) * (ndim - 2))
    return v.reshape(v.shape + (1,) * (ndim - 2))


def _channel_sum(a: np.ndarray, per_sample: bool = False) -> np.ndarray:
    # sums over everything but the channel axis (and the batch axis if per_sample)
    b, c = a.shape[:2]
    flat = a.reshape(b, c, -1).sum(axis=2)
    return flat if per_sample else flat.sum(axis=0)


def normalize_batch(x: Tensor, state: BatchNormState | None, mode: str = "train",
                    eps: float = 1e-5) -> Tensor:
    """Per-channel standardization over batch and spatial axes (no affine)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.ndim < 2:
        raise ShapeError("batch norm needs at least (B, C)")
    axes = (0,) + tuple(range(2, x.ndim))
    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeError("batch norm in train mode needs batch size >= 2")
        n = x.size // x.shape[1]
        mu = _channel_sum(x.data) / n
        centered = x.data - _channel_view(mu, x.ndim)
        var = _channel_sum(centered * centered) / n
        if state is not None:
            n = x.size // x.shape[1]
            m = state.momentum
            state.running_mean[...] = m * state.running_mean + (1 - m) * mu
            state.running_var[...] = m * state.running_var + (1 - m) * var * n / max(n - 1, 1)
    elif mode == "eval":
        if state is None:
            raise ValueError("eval mode needs running statistics")
        mu, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    mu_b = _channel_view(mu.astype(x.dtype), x.ndim)
    inv_b = _channel_view(inv_std, x.ndim)
    if mode == "train":
        xhat = centered * inv_b

        def back(g):
            gs = _channel_view(_channel_sum(g), x.ndim)
            gxs = _channel_view(_channel_sum(g * xhat), x.ndim)
            return ((inv_b / n) * (n * g - gs - xhat * gxs),)
    else:
        xhat = (x.data - mu_b) * inv_b

        def back(g):
            return (g * inv_b,)

    return _make(xhat, (x,), back, "batch_norm")


def channel_affine(x: Tensor, scale: Tensor | None, shift: Tensor | None) -> Tensor:
    """``x * scale + shift`` with (C,) or (B,C) parameters broadcast over the rest."""
    if x.ndim < 2:
        raise ShapeError("channel_affine needs at least (B, C)")
    b, c = x.shape[:2]
    parents = [x]
    for p in (scale, shift):
        if p is None:
            continue
        if p.shape not in ((c,), (b, c)):
            raise ShapeError(f"affine parameter shape {p.shape} incompatible with {x.shape}")
        _same_dtype(x, p)
        parents.append(p)
    s = _channel_view(scale.data, x.ndim) if scale is not None else None
    t = _channel_view(shift.data, x.ndim) if shift is not None else None
    out = x.data
    if s is not None:
        out = out * s
    if t is not None:
        out = out + t

    def reduce_to(g, p):
        return _channel_sum(g, per_sample=p.ndim == 2)

    def back(g):
        grads = [g * s if s is not None else g]
        if scale is not None:
            grads.append(reduce_to(g * x.data, scale) if scale.requires_grad else None)
        if shift is not None:
            grads.append(reduce_to(g, shift) if shift.requires_grad else None)
        return tuple(grads)

    return _make(np.asarray(out, dtype=x.dtype), parents, back, "channel_affine")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState | None = None,
               mode: str = "train", eps: float = 1e-5) -> Tensor:
    return channel_affine(normalize_batch(x, state, mode, eps), gamma, beta)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
               max_elements: int | None = None, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    Error per element is ``|analytic - numeric| / max(1, |numeric|)``. With
    ``max_elements`` set, at most that many randomly chosen entries per
    parameter are probed.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
        p.requires_grad = True
        p.zero_grad()
        p.data = np.ascontiguousarray(p.data)

    base = f()
    again = f()
    if not np.array_equal(base.data, again.data):
        raise RuntimeError("grad_check: function is not deterministic")
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = rng.choice(flat.size, max_elements, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                err = abs(ga.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


def backward(loss: Tensor) -> None:
    """Functional spelling of ``loss.backward()``."""
    loss.backward()
