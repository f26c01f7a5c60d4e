"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded on the active :class:`Tape` only when one of their
inputs requires gradient. Outside a tape context every op is a plain numpy
computation, which is what sampling and evaluation use.

Backward rules live in ``BACKWARD_RULES`` keyed by op name so that each rule
can be inspected (and, in tests, deliberately broken) independently.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from pixelgen.errors import ContractError, DimensionError, StateError

_DTYPE = [np.float32]


def default_dtype() -> type:
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (float32 or float64)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported precision {dtype}")
    _DTYPE.append(dtype)
    try:
        yield
    finally:
        _DTYPE.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_recorded")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._recorded = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        tape = Tape.current()
        if tape is None:
            raise StateError("backward() called outside of a tape context")
        tape.backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)


class _Record:
    __slots__ = ("name", "inputs", "output", "ctx")

    def __init__(self, name, inputs, output, ctx):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.ctx = ctx


class Tape:
    """Ordered record of executed differentiable ops.

    Use as a context manager around one forward pass, then call
    :meth:`backward` once. ``reset()`` clears the record for reuse.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        for rec in self.records:
            rec.output._recorded = False
        self.records.clear()
        self.consumed = False

    def record(self, name: str, inputs: tuple, output: Tensor, ctx) -> None:
        if self.consumed:
            raise StateError("tape already consumed by backward(); call reset() first")
        output._recorded = True
        self.records.append(_Record(name, inputs, output, ctx))

    def backward(self, loss: Tensor, visit: Callable[[str], None] | None = None) -> None:
        if self.consumed:
            raise StateError("backward() already ran on this tape; call reset() first")
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not self.records:
            raise ContractError("backward() on an empty tape")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if visit is not None:
                visit(rec.name)
            if g is None:
                continue
            in_grads = BACKWARD_RULES[rec.name](rec.ctx, g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.data.shape:
                    gi = _unbroadcast(gi, inp.data.shape)
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if not inp._recorded:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = g.astype(leaf.data.dtype, copy=False)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def no_tape():
    """Context in which no op is recorded, even inside an enclosing tape."""
    return _Suspend()


class _Suspend:
    def __enter__(self):
        self._saved = list(Tape._stack)
        Tape._stack.clear()

    def __exit__(self, *exc):
        Tape._stack[:] = self._saved


BACKWARD_RULES: dict[str, Callable] = {}


def register(name: str):
    def deco(fn):
        BACKWARD_RULES[name] = fn
        return fn

    return deco


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(name: str, out_data: np.ndarray, inputs: tuple, ctx=None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out._recorded = False
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(name, inputs, out, ctx)
    else:
        out.requires_grad = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _emit("add", a.data + b.data, (a, b))


@register("add")
def _add_bw(ctx, g):
    return g, g


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _emit("sub", a.data - b.data, (a, b))


@register("sub")
def _sub_bw(ctx, g):
    return g, -g


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _emit("mul", a.data * b.data, (a, b), (a.data, b.data))


@register("mul")
def _mul_bw(ctx, g):
    a, b = ctx
    return g * b, g * a


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data
    return _emit("div", out, (a, b), (b.data, out))


@register("div")
def _div_bw(ctx, g):
    b, out = ctx
    ga = g / b
    return ga, -ga * out


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,))


@register("neg")
def _neg_bw(ctx, g):
    return (-g,)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), out)


@register("exp")
def _exp_bw(out, g):
    return (g * out,)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _emit("log", np.log(a.data), (a,), a.data)


@register("log")
def _log_bw(x, g):
    return (g / x,)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), out)


@register("sqrt")
def _sqrt_bw(out, g):
    return (g * 0.5 / out,)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit("square", a.data * a.data, (a,), a.data)


@register("square")
def _square_bw(x, g):
    return (2.0 * g * x,)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for any x
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _emit("sigmoid", out, (a,), out)


@register("sigmoid")
def _sigmoid_bw(s, g):
    return (g * s * (1.0 - s),)


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _emit("silu", a.data * s, (a,), (a.data, s))


@register("silu")
def _silu_bw(ctx, g):
    x, s = ctx
    return (g * s * (1.0 + x * (1.0 - s)),)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu_tanh(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    return _emit("gelu_tanh", 0.5 * x * (1.0 + th), (a,), (x, th))


@register("gelu_tanh")
def _gelu_bw(ctx, g):
    x, th = ctx
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    return _emit("clamp_min", np.maximum(a.data, floor), (a,), a.data >= floor)


@register("clamp_min")
def _clamp_min_bw(mask, g):
    return (g * mask,)


# ------------------------------------------------------------------ reductions


def _norm_axes(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)
    return _emit("sum", np.asarray(out), (a,), (a.shape, axes, keepdims))


@register("sum")
def _sum_bw(ctx, g):
    shape, axes, keepdims = ctx
    if axes is not None and not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g, shape),)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = np.mean(a.data, axis=axes, keepdims=keepdims)
    count = a.data.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return _emit("mean", np.asarray(out, dtype=a.data.dtype), (a,), (a.shape, axes, keepdims, count))


@register("mean")
def _mean_bw(ctx, g):
    shape, axes, keepdims, count = ctx
    if axes is not None and not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g / count, shape),)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    (ax,) = _norm_axes(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)
    return _emit("softmax", out, (a,), (out, ax))


@register("softmax")
def _softmax_bw(ctx, g):
    s, ax = ctx
    return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)


# --------------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b), (a.data, b.data))


@register("matmul")
def _matmul_bw(ctx, g):
    a, b = ctx
    return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (any leading shape)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        inputs = (x, w, b)
    else:
        inputs = (x, w)
    return _emit("linear", out.reshape(*lead, w.shape[1]), inputs, (x2, w.data, b is not None))


@register("linear")
def _linear_bw(ctx, g):
    x2, w, has_b = ctx
    g2 = g.reshape(-1, w.shape[1])
    gx = (g2 @ w.T).reshape(*g.shape[:-1], w.shape[0])
    gw = x2.T @ g2
    if has_b:
        return gx, gw, g2.sum(axis=0)
    return gx, gw


# ------------------------------------------------------------------- shaping


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _emit("reshape", out, (a,), a.shape)


@register("reshape")
def _reshape_bw(shape, g):
    return (g.reshape(shape),)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    return _emit("transpose", a.data.transpose(axes), (a,), np.argsort(axes))


@register("transpose")
def _transpose_bw(inv, g):
    return (g.transpose(inv),)


def take_rows(table, index) -> Tensor:
    """Gather rows ``table[index]``; the backward pass scatter-adds."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    return _emit("take_rows", table.data[index], (table,), (table.shape, index))


@register("take_rows")
def _take_rows_bw(ctx, g):
    shape, index = ctx
    out = np.zeros(shape, dtype=g.dtype)
    np.add.at(out, index, g)
    return (out,)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _emit("concat", out, ts, (np.cumsum(sizes)[:-1], axis))


@register("concat")
def _concat_bw(ctx, g):
    splits, axis = ctx
    return tuple(np.split(g, splits, axis=axis))


# ---------------------------------------------------------------- convolution


def _im2col(x: np.ndarray, stride: int) -> tuple[np.ndarray, int, int]:
    bsz, c, h, w = x.shape
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((bsz, c, 3, 3, ho, wo), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    # rows: (b, ho, wo); columns: (c, kh, kw)
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(bsz * ho * wo, c * 9), ho, wo


def _col2im(cols: np.ndarray, shape: tuple, stride: int, ho: int, wo: int) -> np.ndarray:
    bsz, c, h, w = shape
    cols = cols.reshape(bsz, ho, wo, c, 3, 3).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((bsz, c, h + 2, w + 2), dtype=cols.dtype)
    for i in range(3):
        for j in range(3):
            xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, :, i, j]
    return xp[:, :, 1:-1, 1:-1]


def conv2d(x, k, stride: int = 1, bias=None) -> Tensor:
    """3x3 convolution with padding 1 (cross-correlation, NCHW / OIHW)."""
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 4 or k.ndim != 4 or k.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d expects B×C×H×W and O×C×3×3, got {x.shape} and {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    if x.shape[2] < 3 or x.shape[3] < 3:
        raise DimensionError(f"conv2d needs H, W >= 3, got {x.shape}")
    cols, ho, wo = _im2col(x.data, stride)
    kmat = k.data.reshape(k.shape[0], -1)
    out = cols @ kmat.T
    inputs = (x, k)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        inputs = (x, k, bias)
    out = out.reshape(x.shape[0], ho, wo, k.shape[0]).transpose(0, 3, 1, 2)
    ctx = (cols, kmat, x.shape, k.shape, stride, ho, wo, bias is not None)
    return _emit("conv2d", np.ascontiguousarray(out), inputs, ctx)


@register("conv2d")
def _conv2d_bw(ctx, g):
    cols, kmat, xshape, kshape, stride, ho, wo, has_b = ctx
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, kshape[0])
    gk = (g2.T @ cols).reshape(kshape)
    gx = _col2im(g2 @ kmat, xshape, stride, ho, wo)
    if has_b:
        return gx, gk, g2.sum(axis=0)
    return gx, gk


# ----------------------------------------------------------------- utilities


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must map ``x`` to a scalar tensor. Runs in 64-bit precision;
    ``x.data`` is restored afterwards.
    """
    with precision(np.float64):
        x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
        with Tape() as tape:
            loss = f(x64)
            analytic = np.zeros_like(x64.data)
            if tape.records:
                tape.backward(loss)
                if x64.grad is not None:
                    analytic = x64.grad
        numeric = np.zeros_like(x64.data)
        flat = x64.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(x64.data.copy())).data)
            flat[i] = orig - h
            fm = float(f(Tensor(x64.data.copy())).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)
    return float(err.max()) if err.size else 0.0


def param_finite_diff_check(
    f: Callable[[], Tensor], params: Iterable[tuple[str, Tensor]], h: float = 1e-5
) -> tuple[float, str]:
    """Like :func:`finite_diff_check` but over every entry of several leaf tensors.

    ``f`` closes over the named ``params`` and is re-evaluated after in-place
    perturbation of their data. Returns ``(max_rel_err, worst_param_name)``.
    """
    params = list(params)
    for _, p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    worst, worst_name = 0.0, ""
    for pname, p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            num[i] = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)
        err = np.abs(a - num) / (np.abs(a) + 1e-8)
        if err.size and err.max() > worst:
            worst, worst_name = float(err.max()), pname
    return worst, worst_name
