"""Minimal reverse-mode autodiff over numpy arrays.

Every differentiable op computes its forward result with numpy and, when any
input requires a gradient, appends a record to the active :class:`Tape`.
``backward`` replays that tape in reverse and accumulates ``.grad`` on leaf
tensors.  Only the primitives the risk model needs are provided; broadcasting
is limited to scalar-vs-tensor.

Compute defaults to float32.  Wrap gradient checks in ``precision(np.float64)``.
"""

from __future__ import annotations

import itertools
import threading
import weakref
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class DomainError(ValueError):
    """An op was evaluated outside its mathematical domain."""


class TapeError(RuntimeError):
    """Misuse of the tape (empty tape, non-scalar loss, double backward)."""


class NumericalError(FloatingPointError):
    """A forward op produced NaN or Inf from its inputs."""


# name -> callable, for gradient-check coverage
DIFFERENTIABLE_OPS: dict[str, Callable] = {}


def differentiable(name: str):
    def register(fn):
        DIFFERENTIABLE_OPS[name] = fn
        return fn

    return register


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True
        self.tapes: list[Tape] = []


_state = _State()


def default_dtype():
    return _state.dtype


def set_default_dtype(dtype) -> None:
    _state.dtype = np.dtype(dtype).type


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (e.g. float64 for grad checks)."""
    prev = _state.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def grad_enabled() -> bool:
    return _state.grad_enabled


class Tensor:
    """n-d array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_is_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _state.dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._is_leaf = True

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._is_leaf = not requires_grad
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise TapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_state.dtype), requires_grad=requires_grad)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _state.dtype
    return Tensor._wrap(np.asarray(x, dtype=dtype), False)


class _Record:
    __slots__ = ("op", "out", "out_id", "parents", "backward")

    def __init__(self, op, out, parents, backward, keep_out=True):
        self.op = op
        self.out = out if keep_out else None
        self.out_id = id(out)
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered log of executed ops for one forward pass.

    Usable as a context manager to isolate a computation; otherwise a
    per-thread default tape collects everything.
    """

    def __init__(self):
        self._log: list[_Record] = []

    @property
    def records(self) -> list[_Record]:
        return list(self._log)

    def __len__(self):
        return len(self._log)

    def __enter__(self):
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.remove(self)
        return False

    def record(self, op: str, out: Tensor, parents: Sequence[Tensor], backward_fn) -> None:
        self._log.append(_Record(op, out, tuple(parents), backward_fn))

    def ops(self) -> list[str]:
        return [r.op for r in self.records]

    def reset(self) -> None:
        self._log.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        records = self.records
        if not records:
            raise TapeError("tape is empty: nothing recorded, or backward already ran for this forward pass")
        if not loss.requires_grad:
            raise TapeError("loss does not depend on any tensor that requires grad")
        grads = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(records):
            g = grads.pop(rec.out_id, None)
            if g is None:
                continue
            parent_grads = rec.backward(g)
            for p, pg in zip(rec.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._is_leaf:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else prev + pg
        self.reset()


class _DefaultTape(Tape):
    """Per-thread fallback tape.

    Holds outputs weakly: a record is dropped once its output tensor is
    garbage, so grad-enabled forward passes that never call backward do not
    accumulate. Anything still reachable from a live loss stays recorded.
    """

    def __init__(self):
        self._log: dict[int, _Record] = {}
        self._seq = itertools.count()

    @property
    def records(self) -> list[_Record]:
        return list(self._log.values())

    def record(self, op: str, out: Tensor, parents: Sequence[Tensor], backward_fn) -> None:
        key = next(self._seq)
        self._log[key] = _Record(op, out, tuple(parents), backward_fn, keep_out=False)
        weakref.finalize(out, self._log.pop, key, None)

    def reset(self) -> None:
        self._log.clear()


_default_tapes: dict[int, Tape] = {}


def current_tape() -> Tape:
    if _state.tapes:
        return _state.tapes[-1]
    key = threading.get_ident()
    tape = _default_tapes.get(key)
    if tape is None:
        tape = _default_tapes[key] = _DefaultTape()
    return tape


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires-grad leaf's ``.grad``."""
    current_tape().backward(loss)


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    needs = _state.grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, needs)
    if needs:
        current_tape().record(op, out, parents, backward_fn)
    return out


# ---------------------------------------------------------------------------
# elementwise


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}; only scalar broadcasting is supported")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


@differentiable("add")
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result("add", a.data + b.data, (a, b), bw)


@differentiable("sub")
def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), bw)


@differentiable("mul")
def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), bw)


@differentiable("relu")
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _result("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), bw)


@differentiable("sigmoid")
def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def bw(g):
        return (g * out * (1 - out),)

    return _result("sigmoid", out, (x,), bw)


@differentiable("exp")
def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _result("exp", out, (x,), bw)


@differentiable("log")
def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError(f"log of non-positive value (min {x.data.min()!r})")

    def bw(g):
        return (g / x.data,)

    return _result("log", np.log(x.data), (x,), bw)


@differentiable("square")
def square(x: Tensor) -> Tensor:
    def bw(g):
        return (2 * g * x.data,)

    return _result("square", x.data * x.data, (x,), bw)


@differentiable("clip")
def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input is strictly inside."""
    inside = (x.data > lo) & (x.data < hi)

    def bw(g):
        return (g * inside,)

    return _result("clip", np.clip(x.data, lo, hi), (x,), bw)


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch by name: relu | sigmoid | exp | log | add | sub | mul | square."""
    fns = {"relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log,
           "add": add, "sub": sub, "mul": mul, "square": square}
    if kind not in fns:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return fns[kind](*args)


# ---------------------------------------------------------------------------
# shape / reduction


@differentiable("sum")
def tsum(x: Tensor, axis=None) -> Tensor:
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result("sum", np.asarray(x.data.sum(axis=axis)), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis), 1.0 / count)


@differentiable("reshape")
def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from err
    return _result("reshape", out, (x,), bw)


@differentiable("broadcast_to")
def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit broadcast (size-1 or missing leading axes); gradient sums back."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as err:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from err
    lead = len(shape) - x.ndim
    keep = tuple(i for i, n in enumerate(x.shape) if n == 1 and shape[lead + i] != 1)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g.reshape(x.shape),)

    return _result("broadcast_to", out, (x,), bw)


@differentiable("getitem")
def getitem(x: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result("getitem", np.array(x.data[index]), (x,), bw)


@differentiable("concat")
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise DimensionError(f"cannot concat shapes {[t.shape for t in tensors]}") from err

    def bw(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _result("concat", out, tensors, bw)


@differentiable("contract")
def contract(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum.  Every input index must appear in the output or the other operand."""
    ins, out_sub = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        if any(ch not in out_sub and ch not in other for ch in own):
            raise ValueError(f"contract spec {spec!r} sums an index private to one operand")
    try:
        out = np.einsum(spec, a.data, b.data)
    except ValueError as err:
        raise DimensionError(f"contract {spec!r}: {a.shape} vs {b.shape}") from err

    def bw(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.data) if a.requires_grad else None
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.data) if b.requires_grad else None
        return ga, gb

    return _result("contract", np.asarray(out), (a, b), bw)


@differentiable("l2norm")
def l2norm(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis.  Gradient at the origin is taken as zero."""
    n = np.sqrt((x.data * x.data).sum(axis=-1))

    def bw(g):
        safe = np.where(n > 0, n, 1)
        return (np.where((n > 0)[..., None], x.data / safe[..., None], 0) * g[..., None],)

    return _result("l2norm", n, (x,), bw)


# ---------------------------------------------------------------------------
# layers


@differentiable("linear")
def linear(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: x {x.shape} and w {w.shape} inner dimensions disagree")
    if bias is not None and bias.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not match output width {w.shape[1]}")
    out = x.data @ w.data
    if bias is not None:
        out = out + bias.data
    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _result("linear", out, parents, bw)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = shape[:2]
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


@differentiable("conv2d")
def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0, bias: Optional[Tensor] = None) -> Tensor:
    """Cross-correlation with zero padding. x: b×c_in×h×w, k: c_out×c_in×kh×kw."""
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {k.shape}")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    b, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: non-positive output size {ho}x{wo} for input {x.shape}, kernel {k.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    kmat = k.data.reshape(cout, -1)
    out = np.matmul(kmat, cols).reshape(b, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    parents = (x, k) if bias is None else (x, k, bias)

    def bw(g):
        g2 = g.reshape(b, cout, ho * wo)
        gk = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(k.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(kmat.T, g2)
            gxp = _col2im(gcols, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result("conv2d", out, parents, bw)


class BatchNormState:
    """Running statistics for one batchnorm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.initialized = False


@differentiable("batchnorm2d")
def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm2d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    b, c, h, w = x.shape
    gm = gamma.data.reshape(1, c, 1, 1)
    if mode == "train":
        count = b * h * w
        if count < 2:
            raise DimensionError("batchnorm2d: train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = xc * inv_std
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu.reshape(c)
        state.running_var = (1 - m) * state.running_var + m * var.reshape(c) * count / (count - 1)
        state.initialized = True

        def bw(g):
            dxhat = g * gm
            gx = inv_std * (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    elif mode == "eval":
        if not state.initialized:
            raise TapeError("batchnorm2d: eval mode before any train step (running stats uninitialized)")
        rm = state.running_mean.reshape(1, c, 1, 1).astype(x.dtype)
        inv_std = (1.0 / np.sqrt(state.running_var + state.eps)).reshape(1, c, 1, 1).astype(x.dtype)
        xhat = (x.data - rm) * inv_std

        def bw(g):
            return g * gm * inv_std, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    out = (xhat * gm + beta.data.reshape(1, c, 1, 1)).astype(x.dtype)
    return _result("batchnorm2d", out, (x, gamma, beta), bw)


@differentiable("softmax")
def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result("softmax", out, (x,), bw)


def bilinear_sample(f: np.ndarray, py: np.ndarray, px: np.ndarray):
    """Sample f (b×c×h×w) at per-pixel coordinates py, px (b×h'×w'), border clamped.

    Returns the samples plus the pieces needed for the backward pass.
    """
    b, c, h, w = f.shape
    py = np.clip(py, 0, h - 1)
    px = np.clip(px, 0, w - 1)
    y0 = np.floor(py).astype(np.intp)
    x0 = np.floor(px).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (py - y0).astype(f.dtype)
    wx = (px - x0).astype(f.dtype)
    flat = f.reshape(b, c, h * w)
    out_shape = py.shape

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, -1)
        return np.take_along_axis(flat, np.broadcast_to(idx, (b, c, idx.shape[2])), axis=2).reshape(b, c, *out_shape[1:])

    v00, v01, v10, v11 = gather(y0, x0), gather(y0, x1), gather(y1, x0), gather(y1, x1)
    wy_, wx_ = wy[:, None], wx[:, None]
    out = v00 * (1 - wy_) * (1 - wx_) + v01 * (1 - wy_) * wx_ + v10 * wy_ * (1 - wx_) + v11 * wy_ * wx_
    parts = dict(y0=y0, x0=x0, y1=y1, x1=x1, wy=wy, wx=wx, v=(v00, v01, v10, v11))
    return out, parts


@differentiable("spatial_transform")
def spatial_transform(f: Tensor, phi: Tensor) -> Tensor:
    """Warp f by a per-pixel displacement field phi = (dy, dx) in pixel units.

    out[:, :, y, x] = bilinear sample of f at (y + dy, x + dx); coordinates
    outside the grid are clamped to the border (zero gradient w.r.t. phi there).
    """
    if f.ndim != 4 or phi.ndim != 4 or phi.shape != (f.shape[0], 2, f.shape[2], f.shape[3]):
        raise DimensionError(f"spatial_transform: features {f.shape} vs field {phi.shape}")
    b, c, h, w = f.shape
    gy, gx = np.meshgrid(np.arange(h, dtype=f.dtype), np.arange(w, dtype=f.dtype), indexing="ij")
    ry = gy[None] + phi.data[:, 0]
    rx = gx[None] + phi.data[:, 1]
    out, p = bilinear_sample(f.data, ry, rx)

    def bw(g):
        gf = gphi = None
        wy, wx = p["wy"][:, None], p["wx"][:, None]
        if f.requires_grad:
            gflat = np.zeros((b, c, h * w), dtype=f.dtype)
            terms = ((p["y0"], p["x0"], (1 - wy) * (1 - wx)), (p["y0"], p["x1"], (1 - wy) * wx),
                     (p["y1"], p["x0"], wy * (1 - wx)), (p["y1"], p["x1"], wy * wx))
            bidx = np.arange(b)[:, None, None]
            cidx = np.arange(c)[None, :, None]
            for yi, xi, wt in terms:
                idx = (yi * w + xi).reshape(b, 1, -1)
                np.add.at(gflat, (bidx, cidx, idx), (g * wt).reshape(b, c, -1))
            gf = gflat.reshape(f.shape)
        if phi.requires_grad:
            v00, v01, v10, v11 = p["v"]
            dy = ((1 - wx) * (v10 - v00) + wx * (v11 - v01)) * g
            dx = ((1 - wy) * (v01 - v00) + wy * (v11 - v10)) * g
            in_y = (ry > 0) & (ry < h - 1)
            in_x = (rx > 0) & (rx < w - 1)
            gphi = np.stack([dy.sum(axis=1) * in_y, dx.sum(axis=1) * in_x], axis=1).astype(phi.dtype)
        return gf, gphi

    return _result("spatial_transform", out.astype(f.dtype), (f, phi), bw)


def attention_softmax_pool(f: Tensor, score_w: Tensor) -> tuple[Tensor, Tensor]:
    """Score each location with score_w·f[:, :, y, x], softmax over the grid, pool.

    Returns the attention map a (b×h×w) and the pooled vector v (b×c).
    """
    if f.ndim != 4 or score_w.shape != (f.shape[1],):
        raise DimensionError(f"attention pool: features {f.shape} vs score weights {score_w.shape}")
    b, c, h, w = f.shape
    scores = contract("bchw,c->bhw", f, score_w)
    a = softmax(reshape(scores, (b, h * w)))
    v = contract("bcj,bj->bc", reshape(f, (b, c, h * w)), a)
    return reshape(a, (b, h, w)), v


# ---------------------------------------------------------------------------
# verification


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6, refine: int = 0,
               tol: float = 1e-4) -> float:
    """Max relative error between autodiff and central differences.

    Per coordinate: |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    Inputs sitting exactly on a kink (relu at 0, clip bounds, integer sample
    points of spatial_transform) are outside the contract; perturb them first.

    With ``refine > 0``, coordinates above ``tol`` are re-estimated with steps
    eps/10, eps/100, ... and keep their best agreement: a difference that
    straddles a kink shrinks with the step, a wrong backward does not.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check needs a float64 tensor; wrap in precision(np.float64)")
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        loss = fn(x)
        tape.backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    a_flat = analytic.reshape(-1)

    def central(i: int, h: float) -> float:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x).item()
        flat[i] = orig - h
        fm = fn(x).item()
        flat[i] = orig
        return (fp - fm) / (2 * h)

    def rel(a: float, n: float) -> float:
        return abs(a - n) / max(1e-8, abs(a) + abs(n))

    with no_grad():
        err = np.array([rel(a_flat[i], central(i, eps)) for i in range(flat.size)])
        for i in np.flatnonzero(err > tol) if refine else ():
            h = eps
            for _ in range(refine):
                h /= 10
                err[i] = min(err[i], rel(a_flat[i], central(i, h)))
    return float(err.max()) if err.size else 0.0
