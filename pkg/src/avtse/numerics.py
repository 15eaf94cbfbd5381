"""Dense-array compute core with tape-based reverse-mode gradients.

Every tensor the extractor touches is a plain numpy array (float32 by
default) wrapped in a :class:`Tensor`. Ops execute eagerly; while a
:class:`Tape` is active each op also records a closure that accumulates
gradients into its inputs during the reverse pass. With no active tape the
ops are pure vectorized numpy, which is the fast path the finite-difference
checker relies on.

Scalar reductions (sum / mean / dot products / cross-entropy) accumulate and
stay in float64: losses are tiny scalar tails of the graph, and keeping them
in doubles is what makes finite-difference checks and dB-scale comparisons
meaningful. Bulk tensors stay in the working dtype.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class ContractError(RuntimeError):
    """An op was called outside its protocol (non-scalar loss, bad eps...)."""


_DTYPE = np.float32


def default_dtype():
    return _DTYPE


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the working dtype (float32 or float64).

    Tensors capture the dtype at creation time; do not mix tensors created
    under different settings in one graph.
    """
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    prev = _DTYPE
    _DTYPE = dtype
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    """A dense real-valued array plus (transient) gradient storage."""

    __slots__ = ("data", "grad")

    def __init__(self, data, copy=False):
        arr = np.array(data, dtype=_DTYPE, copy=True) if copy else np.asarray(data, dtype=_DTYPE)
        self.data = arr
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Param(Tensor):
    """A trainable leaf tensor with a persistent gradient buffer."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable=True):
        super().__init__(data, copy=True)
        self.grad = np.zeros_like(self.data)
        self.trainable = trainable


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap(arr) -> Tensor:
    """Wrap an array as a Tensor without dtype coercion (float64 scalars)."""
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(arr)
    t.grad = None
    return t


def zero_grads(params):
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad[...] = 0.0


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------

_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed ops; replays them LIFO for the reverse pass.

    A tape is single-owner: record and run the reverse pass from one thread.
    """

    def __init__(self):
        self._ops = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._ops):
            if out.grad is not None:
                fn(out.grad)


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def backward(loss: Tensor):
    """Run the reverse pass of the innermost active tape."""
    tape = _active_tape()
    if tape is None:
        raise ContractError("backward() called with no active tape")
    tape.backward(loss)


def _record(out: Tensor, fn):
    tape = _active_tape()
    if tape is not None:
        tape._ops.append((out, fn))


def _acc(t: Tensor, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_same_shape(op, x, y):
    if x.data.shape != y.data.shape:
        raise ShapeError(f"{op}: shape mismatch {x.data.shape} vs {y.data.shape}")


# ---------------------------------------------------------------------------
# Elementwise and scalar ops
# ---------------------------------------------------------------------------

def add(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape("add", x, y)
    out = _wrap(x.data + y.data)

    def back(g):
        _acc(x, g)
        _acc(y, g)

    _record(out, back)
    return out


def sub(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape("sub", x, y)
    out = _wrap(x.data - y.data)

    def back(g):
        _acc(x, g)
        _acc(y, -g)

    _record(out, back)
    return out


def mul(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape("mul", x, y)
    out = _wrap(x.data * y.data)

    def back(g):
        _acc(x, g * y.data)
        _acc(y, g * x.data)

    _record(out, back)
    return out


def div(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape("div", x, y)
    out = _wrap(x.data / y.data)

    def back(g):
        _acc(x, g / y.data)
        _acc(y, -g * x.data / (y.data * y.data))

    _record(out, back)
    return out


def smul(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    out = _wrap(x.data * x.data.dtype.type(c))

    def back(g):
        _acc(x, g * x.data.dtype.type(c))

    _record(out, back)
    return out


def sadd(x: Tensor, c: float) -> Tensor:
    """Add a python constant."""
    out = _wrap(x.data + x.data.dtype.type(c))

    def back(g):
        _acc(x, g)

    _record(out, back)
    return out


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a size-1 tensor (scalar broadcast)."""
    if s.data.size != 1:
        raise ShapeError(f"scale: scale factor must be size 1, got shape {s.data.shape}")
    out = _wrap(x.data * s.data.reshape(()))

    def back(g):
        _acc(x, g * s.data.reshape(()))
        _acc(s, np.sum(g * x.data, dtype=np.float64).astype(s.data.dtype).reshape(s.data.shape))

    _record(out, back)
    return out


def sub_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Subtract a size-1 tensor from every entry."""
    if s.data.size != 1:
        raise ShapeError(f"sub_scalar: operand must be size 1, got shape {s.data.shape}")
    out = _wrap(x.data - s.data.reshape(()))

    def back(g):
        _acc(x, g)
        _acc(s, -np.sum(g, dtype=np.float64).astype(s.data.dtype).reshape(s.data.shape))

    _record(out, back)
    return out


def tanh(x: Tensor) -> Tensor:
    out = _wrap(np.tanh(x.data))
    y = out.data

    def back(g):
        _acc(x, g * (1.0 - y * y))

    _record(out, back)
    return out


def relu(x: Tensor) -> Tensor:
    out = _wrap(np.maximum(x.data, 0.0))
    mask = x.data > 0.0

    def back(g):
        _acc(x, g * mask)

    _record(out, back)
    return out


def log(x: Tensor) -> Tensor:
    out = _wrap(np.log(x.data))

    def back(g):
        _acc(x, g / x.data)

    _record(out, back)
    return out


def clip_max(x: Tensor, cap: float) -> Tensor:
    """Elementwise min(x, cap); gradient passes through where x < cap."""
    out = _wrap(np.minimum(x.data, x.data.dtype.type(cap)))
    mask = x.data < cap

    def back(g):
        _acc(x, g * mask)

    _record(out, back)
    return out


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def tsum(x: Tensor) -> Tensor:
    """Sum of all entries, as a float64 scalar tensor."""
    out = _wrap(np.sum(x.data, dtype=np.float64))

    def back(g):
        _acc(x, np.broadcast_to(g, x.data.shape))

    _record(out, back)
    return out


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    out = _wrap(np.sum(x.data, dtype=np.float64) / n)

    def back(g):
        _acc(x, np.broadcast_to(g / n, x.data.shape))

    _record(out, back)
    return out


def dot(x: Tensor, y: Tensor) -> Tensor:
    """Inner product of two same-shape tensors, as a float64 scalar tensor."""
    _check_same_shape("dot", x, y)
    out = _wrap(np.sum(x.data.astype(np.float64) * y.data, dtype=np.float64))

    def back(g):
        _acc(x, g * y.data)
        _acc(y, g * x.data)

    _record(out, back)
    return out


def mean_over_time(x: Tensor) -> Tensor:
    """H x L -> H x 1 arithmetic mean along the time axis."""
    if x.data.ndim != 2:
        raise ShapeError(f"mean_over_time expects a 2-D tensor, got shape {x.data.shape}")
    n = x.data.shape[1]
    out = _wrap((np.sum(x.data, axis=1, keepdims=True, dtype=np.float64) / n).astype(x.data.dtype))

    def back(g):
        _acc(x, np.broadcast_to(g / n, x.data.shape))

    _record(out, back)
    return out


# ---------------------------------------------------------------------------
# Shape / layout ops
# ---------------------------------------------------------------------------

def concat_channels(x: Tensor, y: Tensor) -> Tensor:
    if x.data.ndim != 2 or y.data.ndim != 2 or x.data.shape[1] != y.data.shape[1]:
        raise ShapeError(f"concat_channels: incompatible shapes {x.data.shape}, {y.data.shape}")
    h = x.data.shape[0]
    out = _wrap(np.concatenate([x.data, y.data], axis=0))

    def back(g):
        _acc(x, g[:h])
        _acc(y, g[h:])

    _record(out, back)
    return out


def repeat_columns(e: Tensor, n: int) -> Tensor:
    """H x 1 -> H x n, n identical columns."""
    if e.data.ndim != 2 or e.data.shape[1] != 1:
        raise ShapeError(f"repeat_columns expects H x 1, got shape {e.data.shape}")
    out = _wrap(np.repeat(e.data, n, axis=1))

    def back(g):
        _acc(e, np.sum(g, axis=1, keepdims=True))

    _record(out, back)
    return out


def upsample_columns(x: Tensor, u: int) -> Tensor:
    """Repeat each column u times (frame-rate to latent-rate upsampling)."""
    if u < 1:
        raise ShapeError(f"upsample_columns: u must be >= 1, got {u}")
    h, n = x.data.shape
    out = _wrap(np.repeat(x.data, u, axis=1))

    def back(g):
        _acc(x, g.reshape(h, n, u).sum(axis=2))

    _record(out, back)
    return out


def slice_columns(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= x.data.shape[1]):
        raise ShapeError(f"slice_columns: [{start}, {stop}) out of range for shape {x.data.shape}")
    out = _wrap(x.data[:, start:stop].copy())

    def back(g):
        buf = np.zeros_like(x.data)
        buf[:, start:stop] = g
        _acc(x, buf)

    _record(out, back)
    return out


def pad_time(x: Tensor, left: int, right: int, mode: str = "zero") -> Tensor:
    """Pad a H x L tensor along time; mode is "zero" or "edge"."""
    if mode not in ("zero", "edge"):
        raise ValueError(f"pad_time: unknown mode {mode!r}")
    np_mode = "constant" if mode == "zero" else "edge"
    out = _wrap(np.pad(x.data, ((0, 0), (left, right)), mode=np_mode))
    n = x.data.shape[1]

    def back(g):
        core = g[:, left:left + n].copy()
        if mode == "edge":
            if left:
                core[:, 0] += g[:, :left].sum(axis=1)
            if right:
                core[:, -1] += g[:, left + n:].sum(axis=1)
        _acc(x, core)

    _record(out, back)
    return out


def scale_columns(x: Tensor, a: Tensor) -> Tensor:
    """Multiply H x L by a 1 x L weight row, broadcast down the channels."""
    if a.data.shape != (1, x.data.shape[1]):
        raise ShapeError(f"scale_columns: weights {a.data.shape} vs tensor {x.data.shape}")
    out = _wrap(x.data * a.data)

    def back(g):
        _acc(x, g * a.data)
        _acc(a, np.sum(g * x.data, axis=0, keepdims=True))

    _record(out, back)
    return out


# ---------------------------------------------------------------------------
# Linear and convolution ops
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-column affine map: out[:, l] = w @ x[:, l] + b."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear expects 2-D operands, got {x.data.shape}, {w.data.shape}")
    if w.data.shape[1] != x.data.shape[0]:
        raise ShapeError(f"linear: inner dims disagree, w {w.data.shape} vs x {x.data.shape}")
    y = w.data @ x.data
    if b is not None:
        if b.data.shape != (w.data.shape[0],):
            raise ShapeError(f"linear: bias shape {b.data.shape}, expected ({w.data.shape[0]},)")
        y = y + b.data[:, None]
    out = _wrap(y)

    def back(g):
        _acc(w, g @ x.data.T)
        _acc(x, w.data.T @ g)
        if b is not None:
            _acc(b, g.sum(axis=1))

    _record(out, back)
    return out


def conv1d(x: Tensor, w: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
    """Valid (no padding) 1-D correlation.

    x: C_in x T, w: C_out x C_in x K -> C_out x T' with
    T' = (T - K_eff) // stride + 1 and K_eff = (K - 1) * dilation + 1.
    """
    if stride < 1 or dilation < 1:
        raise ValueError(f"conv1d: stride/dilation must be >= 1, got {stride}/{dilation}")
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ShapeError(f"conv1d expects x 2-D and w 3-D, got {x.data.shape}, {w.data.shape}")
    c_in, t = x.data.shape
    c_out, c_in_w, k = w.data.shape
    if c_in_w != c_in:
        raise ShapeError(f"conv1d: channel mismatch, x has {c_in}, w expects {c_in_w}")
    k_eff = (k - 1) * dilation + 1
    if t < k_eff:
        raise ShapeError(f"conv1d: input too short, T={t} < effective kernel {k_eff}")
    t_out = (t - k_eff) // stride + 1

    windows = np.lib.stride_tricks.sliding_window_view(x.data, k_eff, axis=1)
    windows = windows[:, ::stride, ::dilation]            # C_in x T' x K
    cols = windows.transpose(0, 2, 1).reshape(c_in * k, t_out)
    w2 = w.data.reshape(c_out, c_in * k)
    out = _wrap(w2 @ cols)

    def back(g):
        _acc(w, (g @ cols.T).reshape(c_out, c_in, k))
        gx = np.zeros_like(x.data)
        for j in range(k):
            off = j * dilation
            gx[:, off:off + stride * (t_out - 1) + 1:stride] += w.data[:, :, j].T @ g
        _acc(x, gx)

    _record(out, back)
    return out


def conv_transpose1d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Adjoint of conv1d with the same weight layout.

    x: C_out x T', w: C_out x C_in x K -> C_in x T with T = (T'-1)*stride + K.
    """
    if stride < 1:
        raise ValueError(f"conv_transpose1d: stride must be >= 1, got {stride}")
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ShapeError(
            f"conv_transpose1d expects x 2-D and w 3-D, got {x.data.shape}, {w.data.shape}")
    c_out, t_in = x.data.shape
    c_out_w, c_in, k = w.data.shape
    if c_out_w != c_out:
        raise ShapeError(f"conv_transpose1d: channel mismatch, x has {c_out}, w expects {c_out_w}")
    t = (t_in - 1) * stride + k
    y = np.zeros((c_in, t), dtype=x.data.dtype)
    for j in range(k):
        y[:, j:j + stride * (t_in - 1) + 1:stride] += w.data[:, :, j].T @ x.data
    out = _wrap(y)

    def back(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for j in range(k):
            gslice = g[:, j:j + stride * (t_in - 1) + 1:stride]
            gx += w.data[:, :, j] @ gslice
            gw[:, :, j] = x.data @ gslice.T
        _acc(x, gx)
        _acc(w, gw)

    _record(out, back)
    return out


# ---------------------------------------------------------------------------
# Attention / classification heads
# ---------------------------------------------------------------------------

def pair_softmax(s_first: Tensor, s_second: Tensor) -> Tensor:
    """First component of a two-way softmax, computed stably.

    Equals exp(s1) / (exp(s1) + exp(s2)) = sigmoid(s1 - s2); call twice with
    swapped arguments for the complementary weight.
    """
    _check_same_shape("pair_softmax", s_first, s_second)
    d = s_first.data - s_second.data
    z = np.empty_like(d)
    pos = d >= 0
    z[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ed = np.exp(d[~pos])
    z[~pos] = ed / (1.0 + ed)
    out = _wrap(z)

    def back(g):
        gd = g * z * (1.0 - z)
        _acc(s_first, gd)
        _acc(s_second, -gd)

    _record(out, back)
    return out


def ce_from_logits(logits: Tensor, label: int) -> Tensor:
    """Softmax cross-entropy of an N x 1 logit column against a class index."""
    if logits.data.ndim != 2 or logits.data.shape[1] != 1:
        raise ShapeError(f"ce_from_logits expects N x 1 logits, got {logits.data.shape}")
    n = logits.data.shape[0]
    if not 0 <= label < n:
        raise ValueError(f"label {label} out of range for {n} classes")
    z = logits.data[:, 0].astype(np.float64)
    m = z.max()
    lse = m + math.log(np.sum(np.exp(z - m)))
    out = _wrap(np.asarray(lse - z[label]))
    p = np.exp(z - lse)

    def back(g):
        gl = p.copy()
        gl[label] -= 1.0
        _acc(logits, (float(g) * gl.astype(logits.data.dtype))[:, None])

    _record(out, back)
    return out


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

class UnreliableCheckError(RuntimeError):
    """The loss function is not deterministic; finite differences are moot."""


def grad_check(f, params, eps: float = 1e-3) -> float:
    """Compare analytic gradients of f() against central finite differences.

    f must be a deterministic zero-argument callable returning a scalar
    Tensor computed from the given params. Returns the maximum relative
    error over every entry of every param, with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if not (1e-5 <= eps <= 1e-2):
        raise ContractError(f"grad_check eps must lie in [1e-5, 1e-2], got {eps}")
    params = list(params)
    zero_grads(params)
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    base = loss.item()
    if f().item() != base:
        raise UnreliableCheckError("loss function returned a different value on re-evaluation")

    max_rel = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(flat[i])            # realized perturbation after rounding
            fp = f().item()
            flat[i] = orig - eps
            lo = float(flat[i])
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (hi - lo)
            analytic = float(gflat[i])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            if rel > max_rel:
                max_rel = rel
    return max_rel
