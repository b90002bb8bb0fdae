"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every operation records its inputs and a backward closure on the output
tensor; ``backward`` replays the tape in reverse topological order. The op
set is exactly what the encoder, classifier and alignment losses need, and
every op is certified against central finite differences (see
``gradient_check`` and the test suite).

Non-finite values (NaN/Inf) are rejected at op boundaries instead of being
allowed to propagate.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf crossed an op boundary."""


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite values in result/operand")
    return arr


class Tensor:
    """Dense float64 array with optional gradient tracking.

    ``grad`` is populated by ``backward`` and always matches ``data`` in
    shape. Tensors are immutable after creation except for the grad buffer.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Mask:
    """Per-frame validity for one sequence: True marks a real frame."""

    __slots__ = ("valid",)

    def __init__(self, valid):
        arr = np.asarray(valid, dtype=bool)
        if arr.ndim != 1:
            raise ShapeError("mask must be one-dimensional")
        if not arr.any():
            raise ShapeError("mask must have at least one valid frame")
        self.valid = arr

    @classmethod
    def full(cls, length: int) -> "Mask":
        return cls(np.ones(length, dtype=bool))

    @property
    def length(self) -> int:
        return self.valid.shape[0]

    def __len__(self) -> int:
        return self.valid.shape[0]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents, backward_fn) -> Tensor:
    """Build an op result; records tape edges only if a parent needs grad."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    grad_parents = tuple(p for p in parents if p.requires_grad)
    if grad_parents:
        out.requires_grad = True
        out._parents = grad_parents
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g


def backward(out: Tensor) -> None:
    """Reverse-mode pass from a scalar output.

    Grad buffers of every node reachable from `out` are reset first, so
    running backward twice over the same graph yields identical gradients.
    """
    if out.data.size != 1:
        raise ShapeError("backward requires a scalar output")
    # Iterative postorder topo sort (graphs can be thousands of nodes deep).
    topo = []
    visited = set()
    stack = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    for node in topo:
        node.grad = np.zeros_like(node.data)
    out.grad = np.ones_like(out.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, "mul", (a, b), bwd)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    data = a.data * c

    def bwd(g):
        _accum(a, g * c)

    return _make(data, "scale", (a,), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product; supports stacked operands.

    Accepted shapes: (..., M, K) @ (K, N), or (..., M, K) @ (..., K, N)
    with identical leading dimensions.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    if b.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError("matmul stacked operands need identical leading dims")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a.grad += g @ b.data.swapaxes(-1, -2)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.data.shape[-1]
                n = g.shape[-1]
                b.grad += a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                b.grad += a.data.swapaxes(-1, -2) @ g

    return _make(data, "matmul", (a, b), bwd)


def affine(x, w, b) -> Tensor:
    """x @ w + b (bias broadcast over leading dims)."""
    return add(matmul(x, w), b)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(data, "reshape", (a,), bwd)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    data = a.data.transpose(axes)

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _make(data, "transpose", (a,), bwd)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    data = np.asarray(a.data.sum())

    def bwd(g):
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(data, "sum", (a,), bwd)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    data = np.asarray(a.data.mean())

    def bwd(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _make(data, "mean", (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, "sigmoid", (a,), bwd)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accum(a, g * (cdf + x * pdf))

    return _make(data, "gelu", (a,), bwd)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        _accum(a, data * (g - inner))

    return _make(data, "softmax", (a,), bwd)


def log_sum_exp(a) -> Tensor:
    """log(sum(exp(a))) over the last axis, computed stably."""
    a = _as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    data = (m + np.log(s)).squeeze(-1)

    def bwd(g):
        _accum(a, np.expand_dims(g, -1) * (e / s))

    return _make(data, "log_sum_exp", (a,), bwd)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm gain/bias must match the last axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gain.data + bias.data

    def bwd(g):
        if a.requires_grad:
            gg = g * gain.data
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            a.grad += inv_std * (gg - m1 - xhat * m2)
        lead = tuple(range(a.ndim - 1))
        if gain.requires_grad:
            gain.grad += (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            bias.grad += g.sum(axis=lead)

    return _make(data, "layer_norm", (a, gain, bias), bwd)


# ---------------------------------------------------------------------------
# pooling / similarity / losses


def _mask_array(h: Tensor, m) -> np.ndarray:
    if isinstance(m, Mask):
        valid = m.valid
    else:
        valid = np.asarray(m, dtype=bool)
    if valid.shape != h.data.shape[:-1]:
        raise ShapeError(
            f"mask shape {valid.shape} does not match frames {h.data.shape[:-1]}"
        )
    if not valid.any(axis=-1).all():
        raise ShapeError("every sequence needs at least one valid frame")
    return valid


def masked_mean_pool(h, m) -> Tensor:
    """Mean over valid frames only; padding contributes nothing.

    h: (T, D) with a Mask/bool(T), or (B, T, D) with bool (B, T).
    Returns (D,) or (B, D).
    """
    h = _as_tensor(h)
    if h.ndim not in (2, 3):
        raise ShapeError("masked_mean_pool expects (T, D) or (B, T, D)")
    valid = _mask_array(h, m)
    w = valid.astype(np.float64)
    count = w.sum(axis=-1)
    data = (h.data * w[..., None]).sum(axis=-2) / count[..., None]

    def bwd(g):
        _accum(h, np.expand_dims(g, -2) * w[..., None] / count[..., None, None])

    return _make(data, "masked_mean_pool", (h,), bwd)


def row_l2_normalize(a) -> Tensor:
    """Scale each row (last axis) to unit L2 norm."""
    a = _as_tensor(a)
    norms = np.linalg.norm(a.data, axis=-1, keepdims=True)
    if (norms == 0).any():
        raise ShapeError("row_l2_normalize: zero-norm row")
    u = a.data / norms

    def bwd(g):
        inner = (g * u).sum(axis=-1, keepdims=True)
        _accum(a, (g - inner * u) / norms)

    return _make(u, "row_l2_normalize", (a,), bwd)


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity of two vectors: a.b / (|a| |b|)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError("cosine_sim expects two equal-length vectors")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        raise ShapeError("cosine_sim: zero-norm input")
    sim = float(a.data @ b.data) / (na * nb)
    data = np.asarray(min(1.0, max(-1.0, sim)))

    def bwd(g):
        _accum(a, g * (b.data / (na * nb) - sim * a.data / (na * na)))
        _accum(b, g * (a.data / (na * nb) - sim * b.data / (nb * nb)))

    return _make(data, "cosine_sim", (a, b), bwd)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross entropy from raw logits.

    Uses the overflow-safe form max(z,0) - z*t + log1p(exp(-|z|)); targets
    are a constant 0/1 array of the same shape.
    """
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.data.shape:
        raise ShapeError("bce_with_logits: logits/targets shapes differ")
    if not np.isin(t, (0.0, 1.0)).all():
        raise ShapeError("bce_with_logits: targets must be binary")
    z = logits.data
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    data = np.asarray(per.mean())
    n = z.size

    def bwd(g):
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                     np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        _accum(logits, g * (s - t) / n)

    return _make(data, "bce_with_logits", (logits,), bwd)


# ---------------------------------------------------------------------------
# certification


def gradient_check(f, *points: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps the given tensors to a scalar Tensor. Error per coordinate is
    |analytic - numeric| / max(1, |analytic|); the max over all coordinates
    of all inputs is returned.
    """
    for p in points:
        if not p.requires_grad:
            raise ValueError("gradient_check points must require grad")
    out = f(*points)
    backward(out)
    analytic = [p.grad.copy() for p in points]
    worst = 0.0
    for p, ana in zip(points, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(*points).item()
            flat[i] = orig - eps
            lo = f(*points).item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = ana.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst
