"""Dense tensors with reverse-mode automatic differentiation.

Forward operations append records to a module-level tape in execution order,
which is already a topological order, so backward() is a single reverse walk.
Conventions:

* conv2d is cross-correlation (no kernel flip) with zero padding; its
  transpose is the exact adjoint, sharing the same kernel layout.
* Gradients accumulate into .grad across backward() calls; the caller resets
  with zero_grad(). backward() consumes the tape.
* float32 carries training, float64 carries verification; ops preserve the
  input dtype.

Tensors are not mutated by operations; the optimizer rewrites parameter
buffers between tape lifetimes, never during one.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from smokediff import kernels

_ids = itertools.count()
_grad_enabled = True


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in {what}")
        return self

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


class NonFiniteError(ArithmeticError):
    """Raised when a computation surfaces NaN/Inf where finiteness is required."""


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


# ---------------------------------------------------------------------------
# Tape

class _Record:
    __slots__ = ("out_id", "inputs", "backward_rule")

    def __init__(self, out_id, inputs, backward_rule):
        self.out_id = out_id
        self.inputs = inputs
        self.backward_rule = backward_rule


_tape: list[_Record] = []


class no_grad:
    """Context manager disabling tape recording (sampling, evaluation)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def reset_tape() -> None:
    _tape.clear()


def tape_length() -> int:
    return len(_tape)


def _register(out: Tensor, inputs: Sequence[Tensor], backward_rule: Callable) -> Tensor:
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.append(_Record(out._id, tuple(inputs), backward_rule))
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from loss.

    The tape is consumed. Repeated forward+backward rounds accumulate into
    .grad until the caller resets.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    produced = {rec.out_id for rec in _tape}
    pending: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}

    def _absorb(t: Tensor, g: np.ndarray) -> None:
        if t._id in produced:
            if t._id in pending:
                pending[t._id] = pending[t._id] + g
            else:
                pending[t._id] = g
        elif t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g

    for rec in reversed(_tape):
        g_out = pending.pop(rec.out_id, None)
        if g_out is None:
            continue
        grads = rec.backward_rule(g_out)
        for t, g in zip(rec.inputs, grads):
            if g is not None and t.requires_grad:
                _absorb(t, g.astype(t.data.dtype, copy=False))
    reset_tape()


def zero_grad(params) -> None:
    values = params.values() if hasattr(params, "values") else params
    for p in values:
        p.zero_grad()


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and shape primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _register(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _register(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _register(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * np.asarray(c, dtype=a.dtype))
    return _register(out, (a,), lambda g: (g * c,))


def mean(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.mean(), dtype=a.dtype))
    n = a.size
    return _register(out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def tsum(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))
    return _register(out, (a,), lambda g: (np.full(a.shape, g, dtype=a.dtype),))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _register(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose2d expects a matrix, got shape {tuple(a.shape)}")
    out = Tensor(np.ascontiguousarray(a.data.T))
    return _register(out, (a,), lambda g: (np.ascontiguousarray(g.T),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack along the leading channel axis; spatial shapes must agree."""
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ValueError(
            f"concat_channels spatial mismatch: {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    c1 = a.data.shape[0]
    out = Tensor(np.concatenate([a.data, b.data], axis=0))
    return _register(out, (a, b), lambda g: (g[:c1], g[c1:]))


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[start:stop])

    def _bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _register(out, (a,), _bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    pos = x >= 0
    out = np.empty_like(x)
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = Tensor(a.data * s)

    def _bwd(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)

    return _register(out, (a,), _bwd)


def softmax_over_rows(a: Tensor) -> Tensor:
    """Column-wise softmax of a matrix: normalizes along axis 0."""
    if a.data.ndim != 2:
        raise ValueError(f"softmax_over_rows expects a matrix, got shape {tuple(a.shape)}")
    shifted = a.data - a.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=0, keepdims=True)
    out = Tensor(s)

    def _bwd(g):
        return (s * (g - (g * s).sum(axis=0, keepdims=True)),)

    return _register(out, (a,), _bwd)


# ---------------------------------------------------------------------------
# Linear algebra primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    out = Tensor(a.data @ b.data)
    return _register(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """w @ x + b for a vector x."""
    if x.data.ndim != 1 or w.data.ndim != 2 or w.data.shape[1] != x.data.shape[0]:
        raise ValueError(f"linear shape mismatch: W {tuple(w.shape)} x {tuple(x.shape)}")
    if b.data.shape != (w.data.shape[0],):
        raise ValueError(f"linear bias shape {tuple(b.shape)} != ({w.data.shape[0]},)")
    out = Tensor(w.data @ x.data + b.data)
    return _register(
        out, (x, w, b),
        lambda g: (w.data.T @ g, np.outer(g, x.data), g),
    )


# ---------------------------------------------------------------------------
# Convolutions (backed by the selected kernel backend)

def _check_conv_args(x: Tensor, w: Tensor, stride: int, padding: int):
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    if x.dtype != w.dtype:
        raise ValueError(f"input dtype {x.dtype} != kernel dtype {w.dtype}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (C_in,H,W) with kernels (C_out,C_in,kh,kw)."""
    _check_conv_args(x, w, stride, padding)
    c_in, h, wd = x.data.shape
    c_out, c_in_w, kh, kw = w.data.shape
    if c_in != c_in_w:
        raise ValueError(f"conv2d channel mismatch: input has {c_in}, kernel expects {c_in_w}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")
    y = kernels.conv2d_fwd(x.data, w.data, stride, padding)
    if b is not None:
        if b.data.shape != (c_out,):
            raise ValueError(f"conv2d bias shape {tuple(b.shape)} != ({c_out},)")
        y = y + b.data[:, None, None]
    out = Tensor(y)

    def _bwd(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv2d_bwd_input(g, w.data, stride, padding, h, wd) if x.requires_grad else None
        gw = kernels.conv2d_bwd_kernel(g, x.data, stride, padding, kh, kw) if w.requires_grad else None
        if b is None:
            return (gx, gw)
        gb = g.sum(axis=(1, 2)) if b.requires_grad else None
        return (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _register(out, inputs, _bwd)


def conv_transpose_output_size(in_size: int, kernel: int, stride: int, padding: int) -> int:
    return (in_size - 1) * stride - 2 * padding + kernel


def conv2d_transpose(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_size: tuple[int, int] | None = None,
) -> Tensor:
    """Adjoint of conv2d. Kernel layout (C_in, C_out, kh, kw).

    output_size resolves the ambiguity of strided adjoints; it must be a
    spatial size that conv2d with the same hyperparameters maps back onto the
    input size. Defaults to the minimal consistent size.
    """
    _check_conv_args(x, w, stride, padding)
    c_in, h, wd = x.data.shape
    c_in_w, c_out, kh, kw = w.data.shape
    if c_in != c_in_w:
        raise ValueError(f"conv2d_transpose channel mismatch: input has {c_in}, kernel expects {c_in_w}")
    ho_min = conv_transpose_output_size(h, kh, stride, padding)
    wo_min = conv_transpose_output_size(wd, kw, stride, padding)
    ho, wo = output_size if output_size is not None else (ho_min, wo_min)
    if not (ho_min <= ho < ho_min + stride and wo_min <= wo < wo_min + stride):
        raise ValueError(
            f"output_size ({ho},{wo}) inconsistent with input ({h},{wd}), "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    # w viewed as a conv kernel mapping c_out -> c_in; scatter is its adjoint.
    w_conv = np.ascontiguousarray(w.data)
    y = kernels.conv2d_bwd_input(x.data, w_conv, stride, padding, ho, wo)
    if b is not None:
        if b.data.shape != (c_out,):
            raise ValueError(f"conv2d_transpose bias shape {tuple(b.shape)} != ({c_out},)")
        y = y + b.data[:, None, None]
    out = Tensor(y)

    def _bwd(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv2d_fwd(g, w_conv, stride, padding) if x.requires_grad else None
        gw = kernels.conv2d_bwd_kernel(x.data, g, stride, padding, kh, kw) if w.requires_grad else None
        if b is None:
            return (gx, gw)
        gb = g.sum(axis=(1, 2)) if b.requires_grad else None
        return (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _register(out, inputs, _bwd)


# ---------------------------------------------------------------------------
# Normalization and attention

def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.data.shape[0]
    if c % groups != 0:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(f"group_norm affine shapes must be ({c},)")
    grouped = x.data.reshape(groups, -1)
    mu = grouped.mean(axis=1, keepdims=True)
    var = grouped.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((grouped - mu) * inv).reshape(x.data.shape)
    out = Tensor(xhat * gamma.data[:, None, None] + beta.data[:, None, None])

    def _bwd(g):
        g_xhat = (g * gamma.data[:, None, None]).reshape(groups, -1)
        xh = xhat.reshape(groups, -1)
        gx = inv * (
            g_xhat
            - g_xhat.mean(axis=1, keepdims=True)
            - xh * (g_xhat * xh).mean(axis=1, keepdims=True)
        )
        g_gamma = (g * xhat).sum(axis=(1, 2)) if gamma.requires_grad else None
        g_beta = g.sum(axis=(1, 2)) if beta.requires_grad else None
        return (gx.reshape(x.data.shape), g_gamma, g_beta)

    return _register(out, (x, gamma, beta), _bwd)


def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Tensor:
    """Single-head scaled dot-product attention over columns of x (C, N), plus residual."""
    if x.data.ndim != 2:
        raise ValueError(f"self_attention expects (C, N), got shape {tuple(x.shape)}")
    d_k = wq.data.shape[0]
    q = matmul(wq, x)
    k = matmul(wk, x)
    v = matmul(wv, x)
    logits = scale(matmul(transpose2d(k), q), 1.0 / math.sqrt(d_k))
    attn = softmax_over_rows(logits)  # column j: weights over key positions
    pooled = matmul(v, attn)
    return add(matmul(wo, pooled), x)


# ---------------------------------------------------------------------------
# Composites used across the package

def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mse shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    d = sub(a, b)
    return mean(mul(d, d))
