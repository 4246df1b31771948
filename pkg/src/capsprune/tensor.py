"""Dense float tensors with tape-based reverse-mode differentiation.

Every operation is a plain function that returns a new :class:`Tensor`.  When a
:class:`Tape` is active on the current thread and at least one input requires a
gradient, the operation is recorded together with its backward rule;
:func:`backward` then replays the tape in reverse.  Outside a tape nothing is
recorded, which is how inference runs.

Arrays are ``float32`` by default.  ``float64`` inputs stay ``float64`` so the
gradient checker can replay a computation at double precision.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ArgumentError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    """Immutable dense array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "retains_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        keep = isinstance(data, (np.ndarray, Tensor)) and arr.dtype in (np.float32, np.float64)
        if dtype is None and not keep:
            arr = arr.astype(DEFAULT_DTYPE)
        _init(self, arr, requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # no copy: used for freshly allocated op outputs
        t = cls.__new__(cls)
        _init(t, arr, requires_grad)
        return t

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar()

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of this (non-leaf) tensor after :func:`backward`."""
        self.retains_grad = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _init(t: Tensor, arr: np.ndarray, requires_grad: bool) -> None:
    if not isinstance(arr, np.ndarray):
        arr = np.asarray(arr)
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value in tensor of shape {arr.shape}")
    arr.flags.writeable = False
    t.data = arr
    t.requires_grad = bool(requires_grad)
    t.grad = None
    t.retains_grad = False


def _raise_not_scalar():
    raise ArgumentError("item() requires a single-element tensor")


class Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple, output: Tensor, backward: Callable):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_local = threading.local()


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest, and the innermost one records.
    A tape belongs to the thread that entered it.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def detach(x: Tensor) -> Tensor:
    return Tensor._wrap(x.data)


def _result(arr: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value in op output of shape {np.shape(arr)}")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(inputs, out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a: ArrayLike, b: ArrayLike) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------- elementwise


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), bw)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _result(out, (a, b), bw)


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the gradient at exactly zero is zero."""
    mask = x.data > 0
    out = np.maximum(x.data, 0)
    return _result(out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _result(out, (x,), lambda g: (g * out * (1 - out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ArgumentError(f"axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw)


def norm(x: Tensor, axis: int = -1, eps: float = 1e-9) -> Tensor:
    """Euclidean norm along ``axis``; ``eps`` guards the gradient denominator only."""
    n = np.sqrt((x.data * x.data).sum(axis=axis))

    def bw(g):
        ge = np.expand_dims(g / (n + eps), axis)
        return (ge * x.data,)

    return _result(n, (x,), bw)


# ---------------------------------------------------------------- reductions / shape


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _result(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; indices must be unique."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = x.shape
    axis = axis % x.ndim

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        sl = (slice(None),) * axis + (idx,)
        full[sl] = g
        return (full,)

    return _result(np.take(x.data, idx, axis=axis), (x,), bw)


def concatenate(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    if len(xs) == 1:
        return xs[0]
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in xs], axis=axis), xs, bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), bw)


def matvec_bank(weights: Tensor, vectors: Tensor) -> Tensor:
    """Apply a bank of matrices to per-row vectors.

    ``weights`` is ``[I, J, d_out, d_in]`` and ``vectors`` is ``[..., I, d_in]``;
    the result is ``[..., I, J, d_out]`` with ``out[..., i, j] = weights[i, j] @ vectors[..., i]``.
    """
    if weights.ndim != 4 or vectors.ndim < 2:
        raise DimensionError("matvec_bank expects weights [I,J,dOut,dIn] and vectors [...,I,dIn]")
    I, J, d_out, d_in = weights.shape
    if vectors.shape[-2:] != (I, d_in):
        raise DimensionError(f"vectors {vectors.shape} do not match weights {weights.shape}")
    lead = vectors.shape[:-2]
    B = int(np.prod(lead)) if lead else 1
    w2 = weights.data.reshape(I, J * d_out, d_in)
    vt = vectors.data.reshape(B, I, d_in).transpose(1, 2, 0)  # I, d_in, B
    out = (w2 @ vt).transpose(2, 0, 1).reshape(*lead, I, J, d_out)

    def bw(g):
        gt = g.reshape(B, I, J * d_out).transpose(1, 2, 0)  # I, J*d_out, B
        gw = (gt @ vt.transpose(0, 2, 1)).reshape(weights.shape)
        gv = (w2.transpose(0, 2, 1) @ gt).transpose(2, 0, 1).reshape(vectors.shape)
        return gw, gv

    return _result(np.ascontiguousarray(out), (weights, vectors), bw)


def _out_size(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D cross-correlation, ``[N,C,H,W] * [F,C,kH,kW]``."""
    if not isinstance(stride, (int, np.integer)) or stride <= 0:
        raise ArgumentError(f"stride must be a positive int, got {stride!r}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects rank-4 input and kernel")
    N, C, H, W = x.shape
    F, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise DimensionError(f"kernel channels {Ck} != input channels {C}")
    if kh > H or kw > W:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {H}x{W}")
    Ho, Wo = _out_size(H, kh, stride), _out_size(W, kw, stride)
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    k2 = kernel.data.reshape(F, -1)
    out = (cols @ k2.T).reshape(N, Ho, Wo, F).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, F)
        gk = (g2.T @ cols).reshape(kernel.shape)
        dcols = (g2 @ k2).reshape(N, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gx = np.zeros(x.shape, dtype=g.dtype)
        hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, :, i, j]
        return gx, gk

    return _result(np.ascontiguousarray(out), (x, kernel), bw)


def patches(x: Tensor, kh: int, kw: int, stride: int, positions) -> Tensor:
    """Flattened receptive fields at selected output positions.

    ``positions`` index the row-major output grid of a valid ``kh x kw``
    convolution.  Returns ``[N, len(positions), C*kh*kw]`` laid out like a
    flattened ``[C, kh, kw]`` kernel, so a matmul with such kernels equals the
    convolution evaluated only at those positions.
    """
    N, C, H, W = x.shape
    Wo = _out_size(W, kw, stride)
    pos = np.asarray(positions, dtype=np.int64)
    ys, xs = np.divmod(pos, Wo)
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = win[:, :, ys, xs].transpose(0, 2, 1, 3, 4).reshape(N, len(pos), C * kh * kw)

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gr = g.reshape(N, len(pos), C, kh, kw)
        for p, (y0, x0) in enumerate(zip(ys * stride, xs * stride)):
            gx[:, :, y0:y0 + kh, x0:x0 + kw] += gr[:, p]
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), bw)


def conv2d_at(x: Tensor, kernel: Tensor, stride: int, positions, channels) -> Tensor:
    """Valid convolution evaluated only at chosen (output position, channel) pairs.

    ``positions[i]`` is a row-major output position and ``channels[i]`` the
    kernel rows computed there.  Returns ``[N, sum(len(c) for c in channels)]``
    ordered position by position.  Cost is proportional to the number of pairs.
    """
    N, C, H, W = x.shape
    F, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise DimensionError(f"kernel channels {Ck} != input channels {C}")
    Wo = _out_size(W, kw, stride)
    chans = [np.asarray(c, dtype=np.int64) for c in channels]
    origins = [(int(p) // Wo * stride, int(p) % Wo * stride) for p in positions]
    # channels-last layout makes every receptive field a run of contiguous rows
    xt = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    rows = np.unique(np.concatenate(chans)) if chans else np.zeros(0, dtype=np.int64)
    lookup = np.full(F, -1, dtype=np.int64)
    lookup[rows] = np.arange(len(rows))
    kt = np.ascontiguousarray(kernel.data[rows].transpose(0, 2, 3, 1)).reshape(len(rows), -1)
    local = [lookup[c] for c in chans]
    parts = []
    for (y0, x0), ch in zip(origins, local):
        win = xt[:, y0:y0 + kh, x0:x0 + kw, :].reshape(N, -1)
        parts.append(win @ kt[ch].T)
    out = np.concatenate(parts, axis=1) if parts else np.zeros((N, 0), dtype=x.dtype)

    def bw(g):
        gxt = np.zeros(xt.shape, dtype=g.dtype)
        gkt = np.zeros(kt.shape, dtype=g.dtype)
        off = 0
        for (y0, x0), ch in zip(origins, local):
            gp = g[:, off:off + len(ch)]
            off += len(ch)
            win = xt[:, y0:y0 + kh, x0:x0 + kw, :].reshape(N, -1)
            np.add.at(gkt, ch, gp.T @ win)
            gxt[:, y0:y0 + kh, x0:x0 + kw, :] += (gp @ kt[ch]).reshape(N, kh, kw, C)
        gk = np.zeros(kernel.shape, dtype=g.dtype)
        gk[rows] = gkt.reshape(len(rows), kh, kw, C).transpose(0, 3, 1, 2)
        return gxt.transpose(0, 3, 1, 2), gk

    return _result(np.ascontiguousarray(out), (x, kernel), bw)


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss`` on ``tape``.

    Gradients accumulate into an existing ``.grad``.  Non-leaf tensors receive
    ``.grad`` only when :meth:`Tensor.retain_grad` was called on them.
    """
    if loss.size != 1:
        raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        if node.output.retains_grad:
            _store(node.output, g)
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            seen[key] = t
            grads[key] = grads[key] + gi if key in grads else gi
    for key, g in grads.items():
        _store(seen[key], g)


def _store(t: Tensor, g: np.ndarray) -> None:
    g = np.ascontiguousarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------- gradient check


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    *,
    eps: float = 1e-6,
    samples: int = 20,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Inputs are promoted to float64.  A non-scalar output is reduced with a
    fixed random projection.  Up to ``samples`` elements per input are probed;
    the error is ``|analytic - numeric| / (|analytic| + floor)``.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    proj = None

    def scalar(arrs, record):
        nonlocal proj
        ts = [Tensor(a, requires_grad=record) for a in arrs]
        with Tape() as tape:
            out = fn(*ts)
            if out.size != 1:
                if proj is None:
                    proj = rng.standard_normal(out.shape)
                out = tsum(out * proj)
        return out, ts, tape

    out, ts, tape = scalar(arrays, True)
    backward(tape, out)
    worst = 0.0
    for k, a in enumerate(arrays):
        analytic = ts[k].grad if ts[k].grad is not None else np.zeros_like(a)
        flat = np.arange(a.size)
        pick = flat if a.size <= samples else rng.choice(flat, size=samples, replace=False)
        for e in pick:
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[k].reshape(-1)[e] += eps
            minus[k].reshape(-1)[e] -= eps
            fp = scalar(plus, False)[0].item()
            fm = scalar(minus, False)[0].item()
            num = (fp - fm) / (2 * eps)
            an = analytic.reshape(-1)[e]
            worst = max(worst, abs(an - num) / (abs(an) + floor))
    return worst
