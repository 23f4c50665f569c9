"""Float64 n-dimensional tensors with a reverse-mode gradient tape and Adam.

All data is stored as 64-bit floats in row-major order. Operations record
onto the innermost active :class:`GradTape` whenever any input participates
in gradient tracking; :func:`backward` replays the tape once in reverse and
the tape is then spent. Without an active tape, ops are plain numpy calls.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(RuntimeError):
    """An operation was called outside its stated preconditions."""


# Sentinel for log(0) in log-domain computations. Large enough that exp()
# underflows to exactly 0, small enough that sums of a few stay finite.
LOG_ZERO = -1.0e30


_tape_stack: list["GradTape"] = []
_access_log: "AccessLog | None" = None


class AccessLog:
    """Names of every named tensor read or written while monitoring."""

    def __init__(self):
        self.reads: set[str] = set()
        self.writes: set[str] = set()

    def __enter__(self):
        global _access_log
        if _access_log is not None:
            raise ContractError("access monitoring is not reentrant")
        _access_log = self
        return self

    def __exit__(self, *exc):
        global _access_log
        _access_log = None
        return False


def log_write(tensor: "Tensor") -> None:
    """Record a parameter mutation with the active access monitor, if any."""
    if _access_log is not None and tensor.name is not None:
        _access_log.writes.add(tensor.name)


class Tensor:
    """A float64 array plus optional gradient buffer and tape participation.

    Invariants: ``data`` is C-contiguous float64; ``grad`` when present has
    the same shape as ``data``.
    """

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._taped = False
        self._tape: "GradTape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        head = f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}"
        if self.name:
            head += f", name={self.name!r}"
        return head + ")"

    # Arithmetic sugar; the module-level functions do the real work.
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


class GradTape:
    """Ordered record of executed ops; append order is topological."""

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], callable]] = []
        self._spent = False

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def __len__(self):
        return len(self._entries)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _trace(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Log reads and, if a tape is active and any input tracks gradients,
    record the op. ``backward_fn(g)`` must return one gradient (or None)
    per input, as numpy arrays."""
    if _access_log is not None:
        for t in inputs:
            if t.name is not None:
                _access_log.reads.add(t.name)
    if _tape_stack:
        if any(t.requires_grad or t._taped for t in inputs):
            tape = _tape_stack[-1]
            out._taped = True
            out._tape = tape
            tape._entries.append((out, inputs, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every gradient-tracking tensor reachable from
    ``loss``; tracked tensors on the tape that do not reach the loss get a
    zero gradient. The tape is consumed."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape if loss._taped else None
    if tape is None:
        raise ContractError("loss was not produced under an active tape")
    if tape._spent:
        raise ContractError("tape already consumed by a previous backward()")
    tape._spent = True

    loss.grad = np.ones_like(loss.data)
    tracked: list[Tensor] = []
    for out, inputs, backward_fn in reversed(tape._entries):
        for t in inputs:
            if t.requires_grad:
                tracked.append(t)
        g = out.grad
        if g is None:
            continue
        grads = backward_fn(g)
        for t, gi in zip(inputs, grads):
            if gi is None or not (t.requires_grad or t._taped):
                continue
            if t.grad is None:
                t.grad = np.array(gi, dtype=np.float64, copy=True)
            else:
                t.grad = t.grad + gi
    for t in tracked:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    tape._entries.clear()


def zero_grads(params) -> None:
    """Clear gradients on an iterable (or mapping) of tensors."""
    values = params.values() if hasattr(params, "values") else params
    for p in values:
        p.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


OPS: dict[str, callable] = {}


def _operation(fn):
    OPS[fn.__name__] = fn
    return fn


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------

@_operation
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _trace(out, (a, b), bw)


@_operation
def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _trace(out, (a, b), bw)


@_operation
def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _trace(out, (a, b), bw)


@_operation
def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if np.any(b.data == 0.0):
        raise ContractError("division by zero")
    out = Tensor(a.data / b.data)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _trace(out, (a, b), bw)


@_operation
def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)

    def bw(g):
        return (-g,)

    return _trace(out, (a,), bw)


@_operation
def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0

    def bw(g):
        return (g * mask,)

    return _trace(out, (a,), bw)


@_operation
def exp(a) -> Tensor:
    a = _as_tensor(a)
    res = np.exp(a.data)
    if not np.all(np.isfinite(res)):
        raise ContractError("exp() overflowed")
    out = Tensor(res)

    def bw(g):
        return (g * res,)

    return _trace(out, (a,), bw)


@_operation
def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ContractError("log() of a non-positive value")
    out = Tensor(np.log(a.data))

    def bw(g):
        return (g / a.data,)

    return _trace(out, (a,), bw)


@_operation
def logaddexp(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    res = np.logaddexp(a.data, b.data)
    out = Tensor(res)

    def bw(g):
        wa = np.exp(a.data - res)
        wb = np.exp(b.data - res)
        return _unbroadcast(g * wa, a.shape), _unbroadcast(g * wb, b.shape)

    return _trace(out, (a, b), bw)


@_operation
def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _trace(out, (a,), bw)


@_operation
def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size if axis is None else a.data.size // out.data.size

    def bw(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy() / count,)

    return _trace(out, (a,), bw)


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------

@_operation
def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bw(g):
        return (g.reshape(a.shape),)

    return _trace(out, (a,), bw)


@_operation
def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        if a.data.ndim != 2:
            raise ShapeError("transpose() without axes expects a matrix")
        axes = (1, 0)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    inverse = np.argsort(axes)

    def bw(g):
        return (g.transpose(inverse),)

    return _trace(out, (a,), bw)


@_operation
def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = _as_tensor(a)
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} "
            f"of shape {a.shape}"
        )
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(np.ascontiguousarray(a.data[index]))

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _trace(out, (a,), bw)


@_operation
def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat() of an empty sequence")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        pieces = []
        for i in range(len(tensors)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(bounds[i], bounds[i + 1])
            pieces.append(g[tuple(index)])
        return tuple(pieces)

    return _trace(out, tensors, bw)


@_operation
def take(a, indices) -> Tensor:
    """Gather from the flattened tensor; output has the index array's shape."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.size):
        raise ShapeError("take() index out of range")
    out = Tensor(a.data.reshape(-1)[idx.reshape(-1)].reshape(idx.shape))

    def bw(g):
        flat = np.bincount(
            idx.reshape(-1), weights=g.reshape(-1), minlength=a.size
        )
        return (flat.reshape(a.shape),)

    return _trace(out, (a,), bw)


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------

@_operation
def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _trace(out, (a, b), bw)


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int,
            ho: int, wo: int) -> np.ndarray:
    """Unfold a padded [C, H, W] map into a [C*kh*kw, ho*wo] matrix."""
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (c, kh, kw, ho, wo), (s0, s1, s2, s1 * sh, s2 * sw)
    )
    return view.reshape(c * kh * kw, ho * wo)


def _corr_raw(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Stride-1 unpadded cross-correlation of [Ci,H,W] with [Co,Ci,kh,kw]."""
    co, ci, kh, kw = k.shape
    ho = x.shape[1] - kh + 1
    wo = x.shape[2] - kw + 1
    cols = _im2col(x, kh, kw, 1, 1, ho, wo)
    return (k.reshape(co, ci * kh * kw) @ cols).reshape(co, ho, wo)


def _conv_input_grad(g: np.ndarray, k: np.ndarray, x_shape, stride, padding):
    """Gradient of conv2d w.r.t. its input, as a stride-1 correlation of the
    zero-dilated output gradient with the flipped kernel."""
    _, h, w = x_shape
    co, ci, kh, kw = k.shape
    sh, sw = stride
    ph, pw = padding
    ho, wo = g.shape[1:]
    hd, wd = (ho - 1) * sh + 1, (wo - 1) * sw + 1
    gd = np.zeros((co, hd, wd))
    gd[:, ::sh, ::sw] = g
    extra_h = (h + 2 * ph) - (hd + kh - 1)
    extra_w = (w + 2 * pw) - (wd + kw - 1)
    gp = np.pad(gd, ((0, 0), (kh - 1, kh - 1 + extra_h), (kw - 1, kw - 1 + extra_w)))
    k_flip = np.ascontiguousarray(k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dxp = _corr_raw(gp, k_flip)
    return np.ascontiguousarray(dxp[:, ph:ph + h, pw:pw + w])


@_operation
def conv2d(x, kernel, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Cross-correlate a [C_in,H,W] map with a [C_out,C_in,kh,kw] bank."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects [C,H,W] and [Co,Ci,kh,kw], got {x.shape} and {kernel.shape}"
        )
    ci, h, w = x.shape
    co, kci, kh, kw = kernel.shape
    if kci != ci:
        raise ShapeError(f"conv2d channel mismatch: input {ci}, kernel {kci}")
    sh, sw = stride
    ph, pw = padding
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ShapeError(f"bad stride {stride} or padding {padding}")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}"
        )
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    out = Tensor((kernel.data.reshape(co, -1) @ cols).reshape(co, ho, wo))

    def bw(g):
        g2 = g.reshape(co, -1)
        # im2col is recomputed here rather than kept alive by the closure;
        # retaining it would multiply peak memory by the kernel footprint.
        cols_b = _im2col(xp, kh, kw, sh, sw, ho, wo)
        gk = (g2 @ cols_b.T).reshape(kernel.shape)
        gx = _conv_input_grad(g, kernel.data, x.shape, (sh, sw), (ph, pw))
        return gx, gk

    return _trace(out, (x, kernel), bw)


# ---------------------------------------------------------------------------
# Normalization and softmax primitives
# ---------------------------------------------------------------------------

@_operation
def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, computed via max subtraction."""
    x = _as_tensor(x)
    if x.data.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_rows needs a non-empty last axis, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _trace(out, (x,), bw)


@_operation
def log_softmax_rows(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"log_softmax_rows needs a non-empty last axis, got {x.shape}")
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True)) + m
    out = Tensor(x.data - lse)
    soft = np.exp(out.data)

    def bw(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _trace(out, (x,), bw)


def _norm_forward(x, stat_axes, gain, bias, eps):
    mu = x.mean(axis=stat_axes, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=stat_axes, keepdims=True)
    s = np.maximum(np.sqrt(var), eps)
    xhat = (x - mu) / s
    return xhat, s, np.sqrt(var) > eps


def _norm_input_grad(dxhat, xhat, s, live, stat_axes):
    m1 = dxhat.mean(axis=stat_axes, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=stat_axes, keepdims=True)
    return (dxhat - m1 - live * xhat * m2) / s


@_operation
def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply an
    affine map. The scale is floored at ``eps`` so constant rows map to the
    bias instead of dividing by zero."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match axis {n}"
        )
    xhat, s, live = _norm_forward(x.data, -1, gain.data, bias.data, eps)
    out = Tensor(xhat * gain.data + bias.data)
    lead = tuple(range(x.data.ndim - 1))

    def bw(g):
        dxhat = g * gain.data
        gx = _norm_input_grad(dxhat, xhat, s, live, -1)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _trace(out, (x, gain, bias), bw)


@_operation
def channel_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each channel of a [C,H,W] map over its spatial extent, with
    a per-channel affine map. Same eps floor as layer_norm."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.data.ndim != 3:
        raise ShapeError(f"channel_norm expects [C,H,W], got {x.shape}")
    c = x.shape[0]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(
            f"channel_norm affine shapes {gain.shape}/{bias.shape} do not match {c} channels"
        )
    g3 = gain.data[:, None, None]
    b3 = bias.data[:, None, None]
    xhat, s, live = _norm_forward(x.data, (1, 2), g3, b3, eps)
    out = Tensor(xhat * g3 + b3)

    def bw(g):
        dxhat = g * g3
        gx = _norm_input_grad(dxhat, xhat, s, live, (1, 2))
        return gx, (g * xhat).sum(axis=(1, 2)), g.sum(axis=(1, 2))

    return _trace(out, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment buffers and step counter for a named parameter set."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update over ``params`` (name -> Tensor).

    Gradients are read, never modified; the caller clears them.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"trainable parameter {name!r} has no gradient")
        if name not in state.m:
            raise ContractError(f"parameter {name!r} unknown to this AdamState")
        if state.m[name].shape != p.data.shape:
            raise ContractError(f"moment shape mismatch for {name!r}")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        log_write(p)
