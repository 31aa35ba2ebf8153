"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float32 by default, float64 available for
verification runs). Every public operation validates finiteness of its
result; a NaN/Inf anywhere is an error, never a silent value. Tensors are
immutable after construction: ops return fresh tensors and the underlying
buffers are write-protected.

Gradient tracking is opt-in per leaf (``requires_grad=True``). An op
records a backward closure only when at least one input is live, so
untraced evaluation carries no graph overhead.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class TraceError(RuntimeError):
    """backward() called on an untraced or non-scalar tensor."""


_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32


def set_default_dtype(name: str) -> None:
    """Select the scalar type for newly built tensors ("float32"/"float64")."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unsupported dtype {name!r}")
    _default_dtype = _DTYPES[name]


def get_default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextlib.contextmanager
def default_dtype(name: str):
    """Temporarily switch the default dtype (used by verification suites)."""
    prev = get_default_dtype().name
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(prev)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """Immutable dense array node, optionally part of an autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or get_default_dtype(), copy=True)
        _check_finite(arr, "tensor")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, arr: np.ndarray, op: str, parents: tuple["Tensor", ...],
                 vjp: Callable[[np.ndarray], None] | None) -> "Tensor":
        _check_finite(arr, op)
        out = cls.__new__(cls)
        arr.setflags(write=False)
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out._op = op
        if vjp is not None and any(p._live for p in parents):
            out._parents = parents
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    @property
    def _live(self) -> bool:
        return self.requires_grad or self._vjp is not None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self._op})"

    # operator sugar; scalar operands are allowed, tensor shapes must match
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_constant(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_constant(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t._live:
        if t.grad is None:
            t.grad = g.copy()
        else:
            t.grad = t.grad + g


def _binary_args(a, b, op: str) -> tuple[Tensor, Tensor, bool, bool]:
    """Coerce operands; returns (a, b, a_scalar, b_scalar)."""
    if not isinstance(a, Tensor):
        a = _as_constant(a, b.dtype)
    if not isinstance(b, Tensor):
        b = _as_constant(b, a.dtype)
    a_scalar = a.size == 1 and a.ndim == 0
    b_scalar = b.size == 1 and b.ndim == 0
    if a.shape != b.shape and not (a_scalar or b_scalar):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ "
                         "(only scalar-tensor broadcasting is supported)")
    return a, b, a_scalar, b_scalar


def add(a, b) -> Tensor:
    a, b, a_s, b_s = _binary_args(a, b, "add")
    out_arr = a.data + b.data

    def vjp(g):
        _accum(a, g.sum().reshape(()) if a_s and g.ndim else g)
        _accum(b, g.sum().reshape(()) if b_s and g.ndim else g)

    return Tensor._from_op(out_arr, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b, a_s, b_s = _binary_args(a, b, "sub")
    out_arr = a.data - b.data

    def vjp(g):
        _accum(a, g.sum().reshape(()) if a_s and g.ndim else g)
        _accum(b, -(g.sum().reshape(())) if b_s and g.ndim else -g)

    return Tensor._from_op(out_arr, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b, a_s, b_s = _binary_args(a, b, "mul")
    out_arr = a.data * b.data

    def vjp(g):
        ga = g * b.data
        gb = g * a.data
        _accum(a, ga.sum().reshape(()) if a_s and ga.ndim else ga)
        _accum(b, gb.sum().reshape(()) if b_s and gb.ndim else gb)

    return Tensor._from_op(out_arr, "mul", (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    # python-float scalars never upcast the array dtype
    out_arr = a.data * c

    def vjp(g):
        _accum(a, g * c)

    return Tensor._from_op(out_arr, "scale", (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    out_arr = a.data @ b.data

    def vjp(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return Tensor._from_op(out_arr, "matmul", (a, b), vjp)


def relu(a: Tensor) -> Tensor:
    out_arr = np.maximum(a.data, 0)
    mask = a.data > 0

    def vjp(g):
        _accum(a, g * mask)

    return Tensor._from_op(out_arr, "relu", (a,), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out_arr = a.data.reshape(shape).copy()

    def vjp(g):
        _accum(a, g.reshape(a.shape))

    return Tensor._from_op(out_arr, "reshape", (a,), vjp)


def tsum(a: Tensor) -> Tensor:
    out_arr = np.asarray(a.data.sum(), dtype=a.dtype)

    def vjp(g):
        _accum(a, np.full(a.shape, g, dtype=a.dtype))

    return Tensor._from_op(out_arr, "sum", (a,), vjp)


def tmean(a: Tensor) -> Tensor:
    n = a.size
    out_arr = np.asarray(a.data.mean(), dtype=a.dtype)

    def vjp(g):
        _accum(a, np.full(a.shape, g / n, dtype=a.dtype))

    return Tensor._from_op(out_arr, "mean", (a,), vjp)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D convolution (cross-correlation), NCHW input, OIHW kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW kernel")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {ci}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride >= 1 and padding >= 0 required")
    hp, wp = h + 2 * padding, w + 2 * padding
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError("conv2d: kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_arr = np.zeros((n, o, h_out, w_out), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u:u + stride * h_out:stride, v:v + stride * w_out:stride]
            out_arr += np.einsum("nchw,oc->nohw", patch, kernel.data[:, :, u, v])

    def vjp(g):
        if x._live:
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u:u + stride * h_out:stride, v:v + stride * w_out:stride] += \
                        np.einsum("nohw,oc->nchw", g, kernel.data[:, :, u, v])
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            _accum(x, gxp)
        if kernel._live:
            gk = np.zeros_like(kernel.data)
            for u in range(kh):
                for v in range(kw):
                    patch = xp[:, :, u:u + stride * h_out:stride, v:v + stride * w_out:stride]
                    gk[:, :, u, v] = np.einsum("nohw,nchw->oc", g, patch)
            _accum(kernel, gk)

    return Tensor._from_op(out_arr, "conv2d", (x, kernel), vjp)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias vector to an NCHW feature map."""
    if x.ndim != 4 or bias.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise ShapeError(f"add_channel_bias: {x.shape} with bias {bias.shape}")
    out_arr = x.data + bias.data[None, :, None, None]

    def vjp(g):
        _accum(x, g)
        _accum(bias, g.sum(axis=(0, 2, 3)))

    return Tensor._from_op(out_arr, "add_channel_bias", (x, bias), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool expects NCHW")
    n, c, h, w = x.shape
    out_arr = x.data.mean(axis=(2, 3))

    def vjp(g):
        _accum(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy())

    return Tensor._from_op(out_arr, "global_avg_pool", (x,), vjp)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of the trailing two (spatial) axes."""
    if x.ndim < 2:
        raise ShapeError("upsample_nearest needs at least 2 dims")
    if factor < 1:
        raise ShapeError("upsample_nearest: factor >= 1")
    out_arr = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

    def vjp(g):
        h, w = x.shape[-2], x.shape[-1]
        gr = g.reshape(g.shape[:-2] + (h, factor, w, factor))
        _accum(x, gr.sum(axis=(-3, -1)))

    return Tensor._from_op(out_arr, "upsample_nearest", (x,), vjp)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels: empty input")
    base = xs[0]
    for t in xs[1:]:
        if t.ndim != 4 or t.shape[0] != base.shape[0] or t.shape[2:] != base.shape[2:]:
            raise ShapeError("concat_channels: incompatible shapes")
    out_arr = np.concatenate([t.data for t in xs], axis=1)
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]

    def vjp(g):
        for t, gpart in zip(xs, np.split(g, splits, axis=1)):
            _accum(t, gpart)

    return Tensor._from_op(out_arr, "concat_channels", tuple(xs), vjp)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the whole tensor to unit Euclidean norm."""
    flat = x.data.ravel()
    nrm = float(np.sqrt(flat @ flat))
    if nrm < eps:
        raise NonFiniteError("l2_normalize: zero-norm input")
    out_arr = x.data / x.dtype.type(nrm)
    y = out_arr

    def vjp(g):
        # d/dx (x/|x|) applied to g: (g - y (y.g)) / |x|
        dot = float((y.ravel() @ g.ravel()))
        _accum(x, (g - y * x.dtype.type(dot)) / x.dtype.type(nrm))

    return Tensor._from_op(out_arr, "l2_normalize", (x,), vjp)


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two tensors viewed as flat vectors, in [-1, 1]."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine: shapes {a.shape} and {b.shape} differ")
    fa, fb = a.data.ravel(), b.data.ravel()
    na = float(np.sqrt(fa @ fa))
    nb = float(np.sqrt(fb @ fb))
    if na < 1e-12 or nb < 1e-12:
        raise NonFiniteError("cosine: zero-norm input")
    raw = float(fa @ fb) / (na * nb)
    cos = min(1.0, max(-1.0, raw))
    out_arr = np.asarray(cos, dtype=a.dtype)

    def vjp(g):
        gs = float(g)
        # grad of the unclamped cosine; at |cos| = 1 it vanishes anyway
        _accum(a, (b.data / (na * nb) - a.data * (raw / (na * na))) * a.dtype.type(gs))
        _accum(b, (a.data / (na * nb) - b.data * (raw / (nb * nb))) * b.dtype.type(gs))

    return Tensor._from_op(out_arr, "cosine", (a, b), vjp)


def _toposort(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a traced scalar w.r.t. the given tensors.

    Tensors that did not participate in the trace get zero gradients.
    Each graph node's closure runs exactly once, in reverse topological
    order.
    """
    wrt = list(wrt)
    if root.size != 1:
        raise TraceError("backward root must be scalar")
    if root._vjp is None and not root.requires_grad:
        raise TraceError("backward root is not part of a trace")

    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones(root.shape, dtype=root.dtype)
    for node in reversed(order):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)

    grads = []
    for t in wrt:
        if t.grad is None:
            grads.append(np.zeros(t.shape, dtype=t.dtype))
        else:
            _check_finite(t.grad, "backward")
            grads.append(t.grad.copy())
    return grads


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |analytic - numeric| / (|numeric| + 1e-8).
    """
    leaf = Tensor(x.data, requires_grad=True, dtype=x.dtype)
    analytic = backward(f(leaf), [leaf])[0]

    numeric = np.zeros_like(x.data)
    base = x.data
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        hi = base.copy()
        hi[idx] += h
        lo = base.copy()
        lo[idx] -= h
        fp = f(Tensor(hi, dtype=x.dtype)).item()
        fm = f(Tensor(lo, dtype=x.dtype)).item()
        numeric[idx] = (fp - fm) / (2 * h)
        it.iternext()

    err = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    return float(err.max()) if err.size else 0.0
