"""Dense linear-algebra kernel shared by every stage of the pipeline.

All arithmetic is float64. Differentiation is reverse-mode over a recorded
computation graph: each operation returns a :class:`Tensor` holding the
forward value plus a closure that maps the output adjoint to the input
adjoints. Tapes are per-call (each forward builds a fresh graph), so
concurrent evaluation over immutable inputs is safe.

Correctness of every backward rule is pinned by :func:`grad_check` against
central finite differences rather than by comparison to any framework.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import AllMasked, NonFiniteLoss, ShapeMismatch

# Self-normalising activation constants (scaled exponential linear unit).
SELU_SCALE = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


class Tensor:
    """Node in a recorded computation graph over a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def backward(self) -> None:
        """Accumulate adjoints of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar root")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if not parent.requires_grad or g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # operator sugar; every op promotes plain arrays to constant Tensors
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` along axes that were broadcast."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul {a.data.shape} @ {b.data.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward)


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    return _node(
        np.swapaxes(x.data, -1, -2),
        (x,),
        lambda g: (np.swapaxes(g, -1, -2),),
    )


def exp(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.exp(x.data)
    return _node(out_data, (x,), lambda g: (g * out_data,))


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(x.data)
    return _node(out_data, (x,), lambda g: (g / x.data,))


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.data.shape),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    return _node(
        np.broadcast_to(x.data, shape).copy(),
        (x,),
        lambda g: (_unbroadcast(g, x.data.shape),),
    )


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along one axis."""
    x = as_tensor(x)
    slicer = [slice(None)] * x.data.ndim
    slicer[axis] = slice(start, start + length)
    slicer = tuple(slicer)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[slicer] = g
        return (gx,)

    return _node(x.data[slicer], (x,), backward)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def gather_rows(x, idx: np.ndarray) -> Tensor:
    """Select rows along axis -2: ``out[..., j, :] = x[..., idx[..., j], :]``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        gx = np.zeros_like(x.data)
        if x.data.ndim == 2:
            np.add.at(gx, idx, g)
            return (gx,)
        lead = int(np.prod(x.data.shape[:-2]))
        m, d = x.data.shape[-2:]
        k = idx.shape[-1]
        flat = gx.reshape(lead * m, d)
        flat_idx = (idx.reshape(lead, k) + np.arange(lead)[:, None] * m).ravel()
        np.add.at(flat, flat_idx, g.reshape(lead * k, d))
        return (flat.reshape(x.data.shape),)

    return _node(np.take_along_axis(x.data, idx[..., None], axis=-2), (x,), backward)


def selu(x) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0
    out_data = SELU_SCALE * np.where(positive, x.data, SELU_ALPHA * np.expm1(x.data))

    def backward(g):
        slope = SELU_SCALE * np.where(positive, 1.0, SELU_ALPHA * np.exp(x.data))
        return (g * slope,)

    return _node(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# masked softmax / masked log-sum-exp
# ---------------------------------------------------------------------------

def _check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("mask entries must be 0 or 1")
    if np.any(mask.sum(axis=-1) < 1):
        raise AllMasked("softmax row with every key masked")
    return mask


def _softmax_forward(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # max-subtraction over the unmasked keys only; masked entries end at exactly 0
    shifted = np.where(mask > 0.5, logits, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=-1, keepdims=True)


def masked_softmax(logits, key_mask):
    """Row-stochastic softmax over unmasked keys; masked columns are exactly 0.

    ``key_mask`` applies to the last axis and may broadcast over rows. Raises
    :class:`AllMasked` when any mask vector is all zeros. Accepts either a
    plain array (returns an array) or a :class:`Tensor` (returns a graph
    node whose backward treats the mask as constant).
    """
    mask = _check_mask(key_mask)
    if not isinstance(logits, Tensor):
        return _softmax_forward(np.asarray(logits, dtype=np.float64), mask)
    out_data = _softmax_forward(logits.data, mask)

    def backward(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - inner),)

    return _node(out_data, (logits,), backward)


def masked_logsumexp(x, mask) -> Tensor:
    """log Σ_j∈mask exp(x_j) along the last axis, computed stably."""
    mask = _check_mask(mask)
    x = as_tensor(x)
    shifted = np.where(mask > 0.5, x.data, -np.inf)
    row_max = shifted.max(axis=-1, keepdims=True)
    weights = np.exp(shifted - row_max)
    total = weights.sum(axis=-1, keepdims=True)
    out_data = (row_max + np.log(total)).squeeze(-1)

    def backward(g):
        return (g[..., None] * (weights / total),)

    return _node(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def affine(x, weight, bias):
    """Row-wise ``x @ weight + bias``; works on arrays or Tensors."""
    w_shape = weight.data.shape if isinstance(weight, Tensor) else np.shape(weight)
    x_shape = x.data.shape if isinstance(x, Tensor) else np.shape(x)
    b_shape = bias.data.shape if isinstance(bias, Tensor) else np.shape(bias)
    if len(w_shape) != 2 or x_shape[-1] != w_shape[0]:
        raise ShapeMismatch(f"affine input {x_shape} vs weight {w_shape}")
    if b_shape not in ((), (w_shape[1],)):
        raise ShapeMismatch(f"affine bias {b_shape} vs weight {w_shape}")
    if isinstance(x, Tensor) or isinstance(weight, Tensor) or isinstance(bias, Tensor):
        return add(matmul(x, weight), bias)
    return np.asarray(x, dtype=np.float64) @ np.asarray(weight, dtype=np.float64) + np.asarray(bias, dtype=np.float64)


def _layer_norm_tensor(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centred * inv_std
    out_data = normed * gain.data + bias.data

    def backward(g):
        g_norm = g * gain.data
        d = x.data.shape[-1]
        gx = inv_std * (
            g_norm
            - g_norm.mean(axis=-1, keepdims=True)
            - normed * (g_norm * normed).sum(axis=-1, keepdims=True) / d
        )
        g_gain = _unbroadcast(g * normed, gain.data.shape)
        g_bias = _unbroadcast(g, bias.data.shape)
        return gx, g_gain, g_bias

    return _node(out_data, (x, gain, bias), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Normalise the last axis to zero mean / unit variance, then affine.

    With gain 1 and bias 0 the output has (population) mean 0 and variance 1
    up to the eps regulariser.
    """
    if isinstance(x, Tensor) or isinstance(gain, Tensor) or isinstance(bias, Tensor):
        x = as_tensor(x)
        gain = as_tensor(np.broadcast_to(np.asarray(gain, dtype=float), x.data.shape[-1:])) if not isinstance(gain, Tensor) else gain
        bias = as_tensor(np.broadcast_to(np.asarray(bias, dtype=float), x.data.shape[-1:])) if not isinstance(bias, Tensor) else bias
        return _layer_norm_tensor(x, gain, bias, eps)
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    centred = x - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    return centred / np.sqrt(var + eps) * gain + bias


def snn_forward(x, layers):
    """Self-normalising feed-forward stack: selu(affine(·)) per layer.

    ``layers`` is a sequence of (weight, bias) pairs. A 1-D input is treated
    as a single row and returned as a vector.
    """
    was_vector = not isinstance(x, Tensor) and np.ndim(x) == 1
    out = np.asarray(x, dtype=np.float64)[None, :] if was_vector else x
    for weight, bias in layers:
        out = affine(out, weight, bias)
        out = selu(out) if isinstance(out, Tensor) else _selu_array(out)
    return out[0] if was_vector else out


def _selu_array(x: np.ndarray) -> np.ndarray:
    return SELU_SCALE * np.where(x > 0, x, SELU_ALPHA * np.expm1(x))


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradReport:
    max_relative_error: float
    worst_parameter_index: int


def grad_check(loss_fn, params, eps: float = 1e-5) -> GradReport:
    """Compare the taped gradient of ``loss_fn`` with central differences.

    ``loss_fn`` maps a flat parameter :class:`Tensor` to a scalar Tensor.
    The relative error per coordinate uses the denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    params = np.asarray(params, dtype=np.float64).ravel()

    def evaluate(values: np.ndarray) -> float:
        value = float(np.asarray(loss_fn(Tensor(values)).data).reshape(()))
        if not np.isfinite(value):
            raise NonFiniteLoss(f"loss is {value} at a probed point")
        return value

    leaf = Tensor(params.copy(), requires_grad=True)
    out = loss_fn(leaf)
    centre = float(np.asarray(out.data).reshape(()))
    if not np.isfinite(centre):
        raise NonFiniteLoss(f"loss is {centre} at the supplied parameters")
    out.backward()
    analytic = np.zeros_like(params) if leaf.grad is None else leaf.grad.ravel()

    numeric = np.empty_like(params)
    for i in range(params.size):
        bumped = params.copy()
        bumped[i] += eps
        hi = evaluate(bumped)
        bumped[i] -= 2 * eps
        lo = evaluate(bumped)
        numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = int(rel.argmax()) if rel.size else 0
    return GradReport(float(rel[worst]) if rel.size else 0.0, worst)
