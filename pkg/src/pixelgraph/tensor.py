"""Dense float64 tensors with a reverse-mode gradient tape.

Every learnable parameter and every intermediate of the segmentation
pipeline is a :class:`Tensor`. Operations record backward closures on the
active :class:`GradientTape`; replaying the record in reverse order yields
gradients for all leaves. Tensors are immutable values (the wrapped numpy
buffer is marked read-only), so they are safe to share between threads;
the tape itself is single-writer.

Broadcasting is deliberately restricted to exact-shape and tensor-vs-scalar:
the projection algebra downstream is all explicit matrix shapes, and silent
numpy broadcasting is the main source of orientation bugs there.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    DimensionError,
    DomainError,
    NumericError,
    OracleError,
    ParameterError,
    TapeError,
)

Array = np.ndarray

_ACTIVE_TAPES: list["GradientTape"] = []

# Testing hook: multiply the named op's input gradients by a wrong factor.
# Used by the grad-check negative control; never set in production paths.
_FAULT_OP: Optional[str] = None
_FAULT_FACTOR: float = 1.0


def set_backward_fault(op_name: Optional[str], factor: float = 1.01) -> None:
    """Install (or clear, with ``None``) a deliberate backward-pass fault."""
    global _FAULT_OP, _FAULT_FACTOR
    _FAULT_OP = op_name
    _FAULT_FACTOR = factor


class Tensor:
    """Immutable dense array of float64 values, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(n <= 0 for n in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None

    @classmethod
    def _wrap(cls, arr: Array) -> "Tensor":
        """Wrap an array we own without copying."""
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        try:
            arr.flags.writeable = False
        except ValueError:
            arr = arr.copy()
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; all semantics live in the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(np.full(self.shape, float(other))), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def constant(data) -> Tensor:
    """A tensor that never requires gradients."""
    return Tensor(data, requires_grad=False)


class GradientTape:
    """Ordered record of operations with backward closures.

    The record is appended in execution order, which for an eagerly built
    graph is a topological order; backward replays it exactly reversed.
    Calling :meth:`backward` twice without recording a new forward pass is
    an error. Recording after a backward pass starts a fresh record.
    """

    def __init__(self):
        self._ops: list[tuple[str, Tensor, tuple[Tensor, ...], Callable]] = []
        self._parameters: dict[str, Tensor] = {}
        self._spent = False

    def __enter__(self) -> "GradientTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPES.remove(self)
        return False

    def register_parameter(self, name: str, tensor: Tensor) -> None:
        if not tensor.requires_grad:
            raise TapeError(f"parameter {name!r} does not require gradients")
        self._parameters[name] = tensor

    @property
    def parameters(self) -> dict[str, Tensor]:
        return dict(self._parameters)

    def _record(self, op: str, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        if self._spent:
            self._ops.clear()
            self._spent = False
        if op == _FAULT_OP:
            # Scale and shift so the corruption is visible even where the
            # true gradient is tiny.
            inner, bias = backward, _FAULT_FACTOR - 1.0
            backward = lambda g: tuple(
                None if gi is None else gi * _FAULT_FACTOR + bias for gi in inner(g)
            )
        self._ops.append((op, out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(leaf) into every reachable tensor's ``.grad``."""
        if self._spent:
            raise TapeError(
                "backward already ran on this tape; record a new forward pass first"
            )
        if loss.shape != ():
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        for _, out, inputs, _ in self._ops:
            out.grad = None
            for t in inputs:
                t.grad = None
        loss.grad = np.array(1.0)
        for op, out, inputs, backward in reversed(self._ops):
            if out.grad is None:
                continue
            grads = backward(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if g.shape != t.shape:
                    raise DimensionError(
                        f"{op} backward produced gradient of shape {g.shape} "
                        f"for input of shape {t.shape}"
                    )
                t.grad = g if t.grad is None else t.grad + g
        for name, p in self._parameters.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
        self._spent = True


def _active_tape() -> Optional[GradientTape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _result(op: str, data: Array, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor._wrap(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = _active_tape()
        if tape is not None:
            tape._record(op, out, inputs, backward)
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return constant(float(x))
    raise DimensionError(f"expected Tensor or scalar, got {type(x).__name__}")


def _check_pair(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast "
                         "(only identical shapes or tensor-vs-scalar)")


def _reduce_to(g: Array, shape) -> Array:
    # Collapse a broadcast gradient back onto a scalar operand.
    if g.shape == tuple(shape):
        return g
    return np.array(g.sum(), dtype=np.float64).reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise suite
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair("add", a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair("sub", a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair("mul", a, b)
    with np.errstate(over="ignore"):
        data = a.data * b.data

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result("mul", data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

    return _result("div", data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def backward(g):
        return (g * mask,)

    return _result("relu", np.where(mask, x.data, 0.0), (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError("log of non-positive value")

    def backward(g):
        return (g / x.data,)

    return _result("log", np.log(x.data), (x,), backward)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(x.data)

    def backward(g):
        return (g * data,)

    return _result("exp", data, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    # Subgradient at 0 defined as 0, mirroring relu'(0); keeps coincident
    # centroid distances from poisoning the backward pass with infinities.
    if np.any(x.data < 0.0):
        raise DomainError("sqrt of negative value")
    data = np.sqrt(x.data)

    def backward(g):
        return (np.where(x.data > 0.0, 0.5 * g / np.where(data > 0.0, data, 1.0), 0.0),)

    return _result("sqrt", data, (x,), backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the full gradient to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair("maximum", a, b)
    take_a = a.data >= b.data

    def backward(g):
        return (_reduce_to(g * take_a, a.shape),
                _reduce_to(g * ~take_a, b.shape))

    return _result("maximum", np.where(take_a, a.data, b.data), (a, b), backward)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, x.shape).copy(),)

    return _result("sum", data, (x,), backward)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    data = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge / n, x.shape).copy(),)

    return _result("mean", data, (x,), backward)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")

    def backward(g):
        return (np.ascontiguousarray(g.T),)

    return _result("transpose", np.ascontiguousarray(x.data.T), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")

    def backward(g):
        return (g.reshape(x.shape),)

    return _result("reshape", x.data.reshape(shape), (x,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise DimensionError("concat of zero tensors")
    nd = parts[0].ndim
    for p in parts[1:]:
        if p.ndim != nd:
            raise DimensionError("concat rank mismatch")
        for d in range(nd):
            if d != axis % nd and p.shape[d] != parts[0].shape[d]:
                raise DimensionError(
                    f"concat: shapes {parts[0].shape} and {p.shape} differ off axis {axis}"
                )
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(parts))
        )

    return _result("concat", np.concatenate([p.data for p in parts], axis=axis),
                   parts, backward)


# ---------------------------------------------------------------------------
# Linear algebra and spatial ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", data, (a, b), backward)


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _result("softmax", s, (x,), backward)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a C,H,W map with an O,C,kh,kw kernel bank."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d expects C,H,W input and O,C,kh,kw kernel, got {x.shape} and {kernel.shape}"
        )
    c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, kernel {ck}")
    if kh not in (1, 3) or kw not in (1, 3):
        raise DimensionError(f"conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ParameterError("conv2d needs stride >= 1 and padding >= 0")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d output would be empty")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kh, kw, ho, wo), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, ki, kj] = xp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
    cols2 = cols.reshape(c * kh * kw, ho * wo)
    kflat = kernel.data.reshape(o, c * kh * kw)
    out = (kflat @ cols2).reshape(o, ho, wo)

    def backward(g):
        gflat = g.reshape(o, ho * wo)
        gk = (gflat @ cols2.T).reshape(kernel.shape)
        gcols = (kflat.T @ gflat).reshape(c, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                gxp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += gcols[:, ki, kj]
        gx = gxp[:, padding:padding + h, padding:padding + w]
        return np.ascontiguousarray(gx), gk

    return _result("conv2d", out, (x, kernel), backward)


def _bilinear_axis(n_in: int, factor: int):
    # Half-pixel-centre source coordinates, clamped at the borders.
    out = np.arange(n_in * factor, dtype=np.float64)
    src = np.clip((out + 0.5) / factor - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    return i0, i1, w1


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if x.ndim != 3:
        raise DimensionError(f"upsample_bilinear expects C,H,W, got {x.shape}")
    if factor < 1:
        raise ParameterError("upsample factor must be >= 1")
    c, h, w = x.shape
    iy0, iy1, wy = _bilinear_axis(h, factor)
    ix0, ix1, wx = _bilinear_axis(w, factor)
    wy = wy[:, None]
    wx = wx[None, :]
    d = x.data
    out = ((1 - wy) * (1 - wx) * d[:, iy0[:, None], ix0[None, :]]
           + (1 - wy) * wx * d[:, iy0[:, None], ix1[None, :]]
           + wy * (1 - wx) * d[:, iy1[:, None], ix0[None, :]]
           + wy * wx * d[:, iy1[:, None], ix1[None, :]])

    def backward(g):
        gx = np.zeros((c, h, w), dtype=np.float64)
        ch = np.arange(c)[:, None, None]
        for iy, ww_y in ((iy0, 1 - wy), (iy1, wy)):
            for ix, ww_x in ((ix0, 1 - wx), (ix1, wx)):
                np.add.at(gx, (ch, iy[None, :, None], ix[None, None, :]), g * (ww_y * ww_x))
        return (gx,)

    return _result("upsample_bilinear", out, (x,), backward)


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------

def finite_difference_check(f, params: Sequence[Tensor], epsilon: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes the parameter list and returns a scalar Tensor; it must be
    deterministic (verified by evaluating twice) and must not manage its own
    tapes. Every coordinate of every parameter is perturbed, so this is the
    trusted but slow side of the dual-route gradient check.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ParameterError(f"epsilon {epsilon} outside [1e-7, 1e-4]")
    params = list(params)
    v1 = f(params).item()
    v2 = f(params).item()
    if v1 != v2:
        raise OracleError("target function is not deterministic; oracle invalid")

    tape = GradientTape()
    with tape:
        loss = f(params)
    tape.backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    max_rel = 0.0
    for i, p in enumerate(params):
        flat = p.data.ravel()
        for j in range(flat.size):
            def eval_at(delta):
                bumped = flat.copy()
                bumped[j] += delta
                trial = params.copy()
                trial[i] = Tensor(bumped.reshape(p.shape))
                return f(trial).item()

            g_fd = (eval_at(epsilon) - eval_at(-epsilon)) / (2.0 * epsilon)
            g_tape = analytic[i].ravel()[j]
            rel = abs(g_tape - g_fd) / max(1.0, abs(g_fd))
            if rel > max_rel:
                max_rel = rel
    return max_rel


def uniform_init(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    """Leaf parameter drawn uniformly from +-1/sqrt(fan_in)."""
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
