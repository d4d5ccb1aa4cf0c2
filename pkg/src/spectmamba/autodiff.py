"""Reverse-mode differentiation over a closed set of array primitives.

Every primitive builds its output eagerly and, when any input requires a
gradient, records a closure mapping the output gradient to input gradients.
:func:`backward` walks the recorded graph in reverse topological order.

Only the operations the melody model needs are provided. Each one checks its
output for NaN/Inf and raises :class:`~spectmamba.errors.NumericError`
instead of propagating non-finite values.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from . import _scan_kernels
from .errors import ConfigError, NumericError, ValidationError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A float array node in the differentiation graph.

    ``data`` is never mutated by primitives; optimizers replace it wholesale.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, _checked: bool = False):
        self.data = _as_array(data, dtype)
        if not _checked and not np.all(np.isfinite(self.data)):
            raise NumericError("tensor holds non-finite values")
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data, _checked=True)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of a nonpositive value")
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return expit(v)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    """``x * sigmoid(x)``."""
    s = _sigmoid(x.data)
    out = x.data * s
    return _node(out, (x,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data).astype(x.dtype, copy=False)
    return _node(out, (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    keep = x.data >= floor
    out = np.where(keep, x.data, floor).astype(x.dtype, copy=False)
    return _node(out, (x,), lambda g: (g * keep,), "clamp_min")


# ------------------------------------------------------------------ structural


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)
    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def flip(x: Tensor, axis: int) -> Tensor:
    return _node(np.ascontiguousarray(np.flip(x.data, axis)), (x,),
                 lambda g: (np.flip(g, axis),), "flip")


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    basic = _is_basic(index)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _node(np.array(x.data[index]), (x,), backward, "getitem")


def take(x: Tensor, indices, axis: int = -1) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    out = np.take(x.data, indices, axis=axis)
    n = x.shape[axis]

    def backward(g):
        # one-hot scatter matrix keeps this a single matmul
        scatter = np.zeros((indices.size, n), dtype=g.dtype)
        scatter[np.arange(indices.size), indices] = 1.0
        gm = np.moveaxis(g, axis, -1) @ scatter
        return (np.moveaxis(gm, -1, axis),)

    return _node(out, (x,), backward, "take")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValidationError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValidationError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    x, weight = _wrap(x), _wrap(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValidationError(
            f"linear dimension mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValidationError(
            f"linear dimension mismatch: bias {bias.shape} vs weight {weight.shape}")
    d_in, d_out = weight.shape
    flat = x.data.reshape(-1, d_in)
    out = flat @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (d_out,))

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = flat.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "linear")


# ------------------------------------------------------------- normalizations


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data
    d = x.shape[-1]

    def backward(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _node(out, (x, gain, bias), backward, "layer_norm")


# ------------------------------------------------------------------ sequence ops


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Causal depthwise convolution.

    ``x`` is (..., channels, time), ``kernel`` is (channels, width). The input is
    left-padded with ``width - 1`` zeros so the output keeps the time length.
    """
    if kernel.ndim != 2 or kernel.shape[1] <= 0:
        raise ConfigError(f"conv1d kernel width must be positive, got shape {kernel.shape}")
    if x.shape[-2] != kernel.shape[0] or bias.shape != (kernel.shape[0],):
        raise ValidationError(
            f"conv1d channel mismatch: input {x.shape}, kernel {kernel.shape}, bias {bias.shape}")
    w = kernel.shape[1]
    n = x.shape[-1]
    pad = [(0, 0)] * (x.ndim - 1) + [(w - 1, 0)]
    xp = np.pad(x.data, pad)
    out = np.broadcast_to(bias.data[:, None], x.shape).copy()
    for j in range(w):
        out += kernel.data[:, j:j + 1] * xp[..., j:j + n]

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel.data)
        lead = tuple(range(g.ndim - 2))
        for j in range(w):
            gxp[..., j:j + n] += kernel.data[:, j:j + 1] * g
            gk[:, j] = (g * xp[..., j:j + n]).sum(axis=lead + (g.ndim - 1,))
        gb = g.sum(axis=lead + (g.ndim - 1,))
        return gxp[..., w - 1:], gk, gb

    return _node(out, (x, kernel, bias), backward, "conv1d")


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor,
                   D: Tensor) -> Tensor:
    """Diagonal selective state-space recurrence.

    Shapes: ``u``, ``delta`` (batch, channels, time); ``A`` (channels, state);
    ``B``, ``C`` (batch, time, state); ``D`` (channels,). Per channel::

        h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t
        y_t = C_t . h_t + D * u_t

    with ``h_0 = 0``.
    """
    if np.any(delta.data <= 0):
        raise NumericError("selective_scan requires strictly positive step sizes")
    arrays = [np.ascontiguousarray(t.data) for t in (u, delta, A, B, C, D)]
    dtype = np.result_type(*arrays)
    arrays = [a.astype(dtype, copy=False) for a in arrays]
    need_states = _GRAD_ENABLED and any(t.requires_grad for t in (u, delta, A, B, C, D))
    y, H = _scan_kernels.scan_forward(*arrays, need_states)

    def backward(g):
        return _scan_kernels.scan_backward(np.ascontiguousarray(g, dtype=dtype), *arrays, H)

    return _node(y, (u, delta, A, B, C, D), backward, "selective_scan")


# ---------------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, target, axis: int = -1) -> Tensor:
    """``-sum(target * log_softmax(logits))`` along ``axis``.

    ``target`` holds probabilities (one-hot included) and is treated as a
    constant. Returns one loss per instance; a 1-D input gives a scalar.
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ValidationError(f"cross_entropy target shape {t.shape} != logits {logits.shape}")
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=axis) - 1.0) > 1e-6):
        raise ValidationError("cross_entropy target must be nonnegative and sum to 1")
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    logp = shifted - lse
    out = -(t * logp).sum(axis=axis)

    def backward(g):
        g = np.expand_dims(g, axis)
        return (g * (np.exp(logp) * t.sum(axis=axis, keepdims=True) - t),)

    return _node(np.asarray(out), (logits,), backward, "cross_entropy")


# -------------------------------------------------------------------- backward


def _topological(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None):
    """Reverse-mode pass from a scalar ``loss``.

    Leaves requiring gradients get a fresh ``.grad`` (overwritten, never
    accumulated across calls). If ``params`` is a mapping, a dict of gradients by
    name is returned; if it is a sequence, a list in the same order. Parameters
    the loss does not depend on receive zeros.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    order = _topological(loss) if loss.requires_grad else [loss]
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is None:
        return None

    def lookup(p: Tensor) -> np.ndarray:
        g = grads.get(id(p))
        return np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype)

    if isinstance(params, Mapping):
        return {name: lookup(p) for name, p in params.items()}
    return [lookup(p) for p in params]


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    return diff if scale < 1e-12 else diff / scale


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5,
              max_entries: int | None = None, directions: int = 0, seed: int = 0,
              per_input: bool = False):
    """Compare analytic gradients of the scalar ``fn(*tensors)`` with central
    differences, at float64.

    The error for one input is the norm-wise relative error
    ``||a - n|| / max(||a||, ||n||)`` over its checked entries (absolute when
    both norms are below 1e-12). Inputs larger than ``max_entries`` are checked
    on a fixed random subset of entries; ``directions`` adds that many random
    directional derivatives over the whole input, compared the same way.

    Returns the worst error, or a list with one error per input if
    ``per_input`` is set.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = backward(fn(*tensors), tensors)
    rng = np.random.default_rng(seed)

    def evaluate() -> float:
        with no_grad():
            return fn(*[Tensor(a) for a in arrays]).item()

    errors = []
    for idx, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        grad = analytic[idx].reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, max_entries, replace=False))
        else:
            entries = np.arange(flat.size)
        numeric = np.empty(entries.size)
        for j, k in enumerate(entries):
            saved = flat[k]
            flat[k] = saved + eps
            up = evaluate()
            flat[k] = saved - eps
            down = evaluate()
            flat[k] = saved
            numeric[j] = (up - down) / (2 * eps)
        a_dir, n_dir = [], []
        for _ in range(directions):
            v = rng.standard_normal(flat.size)
            v /= np.linalg.norm(v)
            saved = flat.copy()
            flat += eps * v
            up = evaluate()
            flat[:] = saved - eps * v
            down = evaluate()
            flat[:] = saved
            a_dir.append(float(grad @ v))
            n_dir.append((up - down) / (2 * eps))
        err = _rel_error(grad[entries], numeric) if entries.size else 0.0
        if directions:
            err = max(err, _rel_error(np.array(a_dir), np.array(n_dir)))
        errors.append(err)
    if per_input:
        return errors
    return max(errors, default=0.0)
