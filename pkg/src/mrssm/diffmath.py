"""Reverse-mode automatic differentiation over dense numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in
execution order; ``Tape.gradient`` walks that record backwards. Outside a
tape every operation is a plain numpy evaluation, which is what inference
and finite-difference probes use.

Broadcasting is deliberately narrow: two operands must have equal shapes,
or one must be a scalar, or one shape must be a trailing suffix of the
other (a missing leading batch dimension). Anything else raises
:class:`ShapeError`; use :func:`expand` to be explicit.
"""

from __future__ import annotations

import contextlib
import threading
from collections.abc import Mapping, Sequence
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "precision",
    "default_dtype",
    "tensor",
    "backward",
    "grad_check",
    "grad_errors",
]


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


_local = threading.local()


def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with (thread-local)."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


def _active_tape():
    return getattr(_local, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

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

    def __getitem__(self, key):
        return getitem(self, key)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # constants adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor._wrap(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor._wrap(np.asarray(a, dtype=b.data.dtype)), b
    return _as_tensor(a), _as_tensor(b)


class _Node:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of primitive operations executed while active.

    Each thread has its own active tape, so independent tapes may run on
    different threads concurrently.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        self._prev = None

    def first_nonfinite(self) -> str | None:
        """Name the earliest recorded operation whose output is not finite."""
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.out.data)):
                return f"op #{i} '{node.op}' -> shape {node.out.shape}"
        return None

    def gradient(self, output: Tensor, params):
        """Gradients of scalar ``output`` with respect to ``params``.

        ``params`` may be a mapping (a dict of arrays is returned) or a
        sequence (a list is returned). Parameters not on the path to the
        output receive zeros.
        """
        if output.data.size != 1:
            raise ShapeError("backward", f"output must be scalar, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            needs = tuple(t.requires_grad for t in node.inputs)
            for t, gi in zip(node.inputs, node.backward(g, needs)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

        def lookup(p: Tensor) -> np.ndarray:
            g = grads.get(id(p))
            if g is None:
                return np.zeros_like(p.data)
            return np.asarray(g, dtype=p.data.dtype).reshape(p.shape)

        if isinstance(params, Mapping):
            return {k: lookup(p) for k, p in params.items()}
        return [lookup(p) for p in params]


def backward(tape: Tape, output: Tensor, params):
    return tape.gradient(output, params)


def _record(op: str, out_arr, inputs: tuple[Tensor, ...], back) -> Tensor:
    out = Tensor._wrap(out_arr)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(op, inputs, out, back))
    return out


# ----------------------------------------------------------------------
# elementwise


def _check_binary(op, a: Tensor, b: Tensor):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(small) == 0 or (len(small) < len(big) and big[len(big) - len(small):] == small):
        return
    raise ShapeError(op, f"shapes {sa} and {sb} differ beyond leading dimensions")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if shape else g.sum()


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_binary("add", a, b)

    def back(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _record("add", a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_binary("sub", a, b)

    def back(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _record("sub", a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_binary("mul", a, b)

    def back(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _record("mul", a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_binary("div", a, b)
    out = a.data / b.data

    def back(g, needs):
        return (_unbroadcast(g / b.data, a.shape) if needs[0] else None,
                _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None)

    return _record("div", out, (a, b), back)


def _unary(op, a, out, dfn) -> Tensor:
    a = _as_tensor(a)
    return _record(op, out, (a,), lambda g, needs: (dfn(g),))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _unary("neg", a, -a.data, lambda g: -g)


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _unary("square", a, a.data * a.data, lambda g: 2 * g * a.data)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _unary("sqrt", a, out, lambda g: 0.5 * g / out)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _unary("exp", a, out, lambda g: g * out)


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _unary("log", a, np.log(a.data), lambda g: g / a.data)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _unary("tanh", a, out, lambda g: g * (1 - out * out))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = expit(a.data)
    return _unary("sigmoid", a, out, lambda g: g * out * (1 - out))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    return _unary("softplus", a, np.logaddexp(0, a.data), lambda g: g * expit(a.data))


# ----------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``b`` a matrix; ``a`` may carry leading batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")
    k, m = b.shape

    def back(g, needs):
        da = g @ b.data.T if needs[0] else None
        db = None
        if needs[1]:
            db = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        return da, db

    return _record("matmul", a.data @ b.data, (a, b), back)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def back(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", out, (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


# ----------------------------------------------------------------------
# structural


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat", "no inputs")
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError("concat", f"shapes {[t.shape for t in ts]} disagree off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def back(g, needs):
        return tuple(np.split(g, splits, axis=ax))

    return _record("concat", np.concatenate([t.data for t in ts], axis=ax), ts, back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts or any(t.shape != ts[0].shape for t in ts):
        raise ShapeError("stack", f"shapes {[t.shape for t in ts]} must be equal and nonempty")
    ax = axis % (ts[0].ndim + 1)

    def back(g, needs):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _record("stack", np.stack([t.data for t in ts], axis=ax), ts, back)


def getitem(a, key) -> Tensor:
    """Basic slicing only (ints, slices, Ellipsis, None)."""
    a = _as_tensor(a)
    keys = key if isinstance(key, tuple) else (key,)
    for k in keys:
        if not (k is None or k is Ellipsis or isinstance(k, (int, np.integer, slice))):
            raise ShapeError("slice", f"unsupported index {k!r}")

    def back(g, needs):
        out = np.zeros_like(a.data)
        out[key] = g
        return (out,)

    return _record("slice", a.data[key], (a,), back)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", str(exc)) from None
    return _record("reshape", out, (a,), lambda g, needs: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", f"axes {axes} are not a permutation for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g, needs: (g.transpose(inv),))


def expand(a, shape) -> Tensor:
    """Broadcast ``a`` to ``shape`` by adding leading dimensions."""
    a = _as_tensor(a)
    shape = tuple(shape)
    if len(shape) < a.ndim or shape[len(shape) - a.ndim:] != a.shape:
        raise ShapeError("expand", f"cannot expand {a.shape} to {shape}")
    lead = tuple(range(len(shape) - a.ndim))
    return _record("expand", np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g, needs: (g.sum(axis=lead) if lead else g,))


# ----------------------------------------------------------------------
# convolution (NCHW input, OIHW weight, zero padding, no dilation)


def _windows(x, kh, kw, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _conv_forward(x, w, stride, pad):
    kh, kw = w.shape[2:]
    win = _windows(x, kh, kw, stride, pad)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2)


def _conv_grad_weight(g, x, w_shape, stride, pad):
    kh, kw = w_shape[2:]
    win = _windows(x, kh, kw, stride, pad)
    ho, wo = g.shape[2:]
    win = win[:, :, :ho, :wo]
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def _conv_grad_input(g, w, x_shape, stride, pad):
    b, c, h, wd = x_shape
    kh, kw = w.shape[2:]
    ho, wo = g.shape[2:]
    cols = np.tensordot(w, g, axes=([0], [1]))  # C, kh, kw, B, Ho, Wo
    hp, wp = h + 2 * pad, wd + 2 * pad
    dx = np.zeros((c, b, hp, wp), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    return dx[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3)


def conv2d(x, w, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """2-D cross-correlation; ``bias`` (one value per output channel) is optional."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", f"input {x.shape} incompatible with weight {w.shape}")
    h, wd = x.shape[2:]
    kh, kw = w.shape[2:]
    if _conv_out_size(h, kh, stride, padding) < 1 or _conv_out_size(wd, kw, stride, padding) < 1:
        raise ShapeError("conv2d", f"kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")
    out = _conv_forward(x.data, w.data, stride, padding)
    inputs = (x, w)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (w.shape[0],):
            raise ShapeError("conv2d", f"bias {bias.shape} does not match {w.shape[0]} output channels")
        out = out + bias.data[:, None, None]
        inputs = (x, w, bias)

    def back(g, needs):
        dx = _conv_grad_input(g, w.data, x.shape, stride, padding) if needs[0] else None
        dw = _conv_grad_weight(g, x.data, w.shape, stride, padding) if needs[1] else None
        if len(needs) == 3:
            return dx, dw, (g.sum(axis=(0, 2, 3)) if needs[2] else None)
        return dx, dw

    return _record("conv2d", out, inputs, back)


def conv_transpose2d(x, w, stride: int = 1, padding: int = 0, output_size=None, bias=None) -> Tensor:
    """Gradient of :func:`conv2d` with respect to its input, plus optional bias.

    ``w`` has the layout of the matching convolution, (C_conv_out, C_conv_in,
    kh, kw); ``x`` carries ``C_conv_out`` channels and the result carries
    ``C_conv_in``. ``output_size`` (H, W) defaults to the smallest size whose
    convolution yields ``x``'s spatial shape.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError("conv_transpose2d", f"input {x.shape} incompatible with weight {w.shape}")
    kh, kw = w.shape[2:]
    h_in, w_in = x.shape[2:]
    if output_size is None:
        output_size = ((h_in - 1) * stride - 2 * padding + kh, (w_in - 1) * stride - 2 * padding + kw)
    oh, ow = output_size
    if _conv_out_size(oh, kh, stride, padding) != h_in or _conv_out_size(ow, kw, stride, padding) != w_in:
        raise ShapeError("conv_transpose2d", f"output size {output_size} does not map back to {x.shape[2:]}")
    out = np.ascontiguousarray(_conv_grad_input(x.data, w.data, (x.shape[0], w.shape[1], oh, ow), stride, padding))
    inputs = (x, w)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (w.shape[1],):
            raise ShapeError("conv_transpose2d", f"bias {bias.shape} does not match {w.shape[1]} output channels")
        out += bias.data[:, None, None]
        inputs = (x, w, bias)

    def back(g, needs):
        dx = _conv_forward(g, w.data, stride, padding) if needs[0] else None
        dw = _conv_grad_weight(x.data, g, w.shape, stride, padding) if needs[1] else None
        if len(needs) == 3:
            return dx, dw, (g.sum(axis=(0, 2, 3)) if needs[2] else None)
        return dx, dw

    return _record("conv_transpose2d", out, inputs, back)


# ----------------------------------------------------------------------
# finite-difference checking


def grad_errors(fn: Callable, point, step: float = 1e-6, max_coords: int | None = None,
                rng: np.random.Generator | None = None, dtype=np.float64) -> dict[str, float]:
    """Per-input maximum relative error between tape and central differences.

    ``point`` is either one array (``fn`` then takes one Tensor) or a mapping
    of arrays (``fn`` takes a dict of Tensors). Evaluation happens at
    ``dtype`` precision. ``max_coords`` limits the probed coordinates per
    input to a random sample.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    single = not isinstance(point, Mapping)
    raw = {"x": point} if single else dict(point)
    rng = rng if rng is not None else np.random.default_rng(0)
    with precision(dtype):
        params = {k: Tensor(np.array(v, dtype=dtype), requires_grad=True) for k, v in raw.items()}

        def call():
            out = fn(params["x"]) if single else fn(params)
            return out

        with Tape() as tape:
            out = call()
        analytic = tape.gradient(out, params)
        errors = {}
        for name, p in params.items():
            flat = p.data.reshape(-1)
            ana = analytic[name].reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = rng.choice(flat.size, size=max_coords, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = float(call().data)
                flat[i] = orig - step
                fm = float(call().data)
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                err = abs(ana[i] - num) / max(1e-8, abs(ana[i]) + abs(num))
                worst = max(worst, float(err))
            errors[name] = worst
    return errors


def grad_check(fn: Callable, point, step: float = 1e-6, **kwargs) -> float:
    """Max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)."""
    errs = grad_errors(fn, point, step=step, **kwargs)
    return max(errs.values()) if errs else 0.0
