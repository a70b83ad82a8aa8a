"""Reverse-mode automatic differentiation over float64 numpy arrays.

The tape records composite operations (matmul, softmax, layer_norm,
attention, ffn, mse, concat, slicing, ...) instead of an elementwise
scalar graph, so every backward rule is a short numpy expression that can
be checked by hand. Values are float64 throughout and immutable once
created; a non-finite result from finite inputs raises instead of
propagating silently.
"""

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericError, ShapeError, TapeError

_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class no_grad:
    """Context manager that suspends tape recording (evaluation mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A dense n-dimensional float64 value, optionally on the tape.

    `data` is the row-major numpy array; `requires_grad` marks tape
    participation. Non-leaf tensors keep references to their parents and
    a vector-Jacobian closure used by `backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._vjp = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar; constants are wrapped as untracked tensors
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Parameter(Tensor):
    """A named leaf tensor with a persistent gradient accumulator."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Wrap a forward result, attaching it to the tape when needed."""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to `shape` by summing broadcast axes."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate `.grad` of every tape leaf reachable from a scalar loss.

    Repeated calls accumulate into existing gradients; call `zero_grad`
    on the parameters between steps.
    """
    if not isinstance(loss, Tensor):
        raise TapeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("backward called on a value detached from the tape")

    # iterative topological order over the recorded graph
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = adjoint.get(id(parent))
                adjoint[id(parent)] = pg if acc is None else acc + pg
        else:
            # leaf: accumulate into the persistent gradient
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result(data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _result(data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _result(data, (a, b), vjp, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _result(x.data * c, (x,), vjp, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy-style broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul requires at least 2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _result(data, (a, b), vjp, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _result(data, (x,), vjp, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return _result(x.data.transpose(axes), (x,), vjp, "transpose")


def swapaxes(x: Tensor, ax1: int, ax2: int) -> Tensor:
    x = as_tensor(x)
    data = np.swapaxes(x.data, ax1, ax2)

    def vjp(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _result(data, (x,), vjp, "swapaxes")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _result(data, parts, vjp, "concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    x = as_tensor(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    data = x.data[index]

    def vjp(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _result(data, (x,), vjp, "slice_axis")


def broadcast_to(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    data = np.broadcast_to(x.data, shape).copy()

    def vjp(g):
        return (_unbroadcast(g, x.data.shape),)

    return _result(data, (x,), vjp, "broadcast_to")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Select rows of a 2-d table; backward scatter-adds into the table."""
    table = as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-d table, got shape {table.shape}")
    ids = np.asarray(ids, dtype=np.intp)
    data = table.data[ids]

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(data, (table,), vjp, "gather_rows")


# ---------------------------------------------------------------------------
# neural-network primitives
# ---------------------------------------------------------------------------

def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU activation."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * cdf

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(data, (x,), vjp, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max-subtraction)."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _result(y, (x,), vjp, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis (biased 1/n variance) then apply gain/bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({n},), got {gain.shape} and {bias.shape}"
        )
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = gain.data * xhat + bias.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gx = g * gain.data
        gx_mean = gx.mean(axis=-1, keepdims=True)
        gxx_mean = (gx * xhat).mean(axis=-1, keepdims=True)
        g_x = inv_std * (gx - gx_mean - xhat * gxx_mean)
        return g_x, g_gain, g_bias

    return _result(data, (x, gain, bias), vjp, "layer_norm")


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements; returns a scalar tensor."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    data = np.asarray((diff * diff).mean())
    n = diff.size

    def vjp(g):
        base = (2.0 / n) * diff * g
        return base, -base

    return _result(data, (pred, target), vjp, "mse")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map applied to the last axis: x @ weight + bias."""
    return add(matmul(x, weight), bias)


@dataclass
class AttentionWeights:
    """Projection parameters of one attention block (all D x D).

    The key projection carries no bias: softmax shifts every logit of a
    query row by the same q . b_k, so a key bias cannot change the
    attention output and would sit in the model with an identically zero
    gradient.
    """

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor


@dataclass
class FeedForwardWeights:
    """Two affine layers around the activation: (D, d_ff) and (d_ff, D)."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class LayerNormWeights:
    gain: Tensor
    bias: Tensor


def _split_heads(x: Tensor, n_heads: int, head_dim: int) -> Tensor:
    # (..., n, D) -> (..., H, n, head_dim)
    lead = x.shape[:-2]
    n = x.shape[-2]
    y = reshape(x, lead + (n, n_heads, head_dim))
    return swapaxes(y, -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    # (..., H, n, head_dim) -> (..., n, H * head_dim)
    y = swapaxes(x, -3, -2)
    return reshape(y, y.shape[:-2] + (y.shape[-2] * y.shape[-1],))


def multi_head_attention(
    q_tokens: Tensor,
    k_tokens: Tensor,
    v_tokens: Tensor,
    weights: AttentionWeights,
    n_heads: int,
) -> Tensor:
    """Scaled dot-product attention with per-head softmax.

    Query/key/value token sequences have shape (..., n, D); leading axes
    broadcast against each other, so a shared key set can serve a batch of
    query sequences. Output has the query token count and dimension D.
    """
    q_tokens, k_tokens, v_tokens = map(as_tensor, (q_tokens, k_tokens, v_tokens))
    d_model = q_tokens.shape[-1]
    if d_model % n_heads != 0:
        raise ConfigError(
            f"model dimension {d_model} not divisible by {n_heads} heads"
        )
    if k_tokens.shape[-2] != v_tokens.shape[-2]:
        raise ShapeError(
            f"key/value token counts disagree: {k_tokens.shape} vs {v_tokens.shape}"
        )
    head_dim = d_model // n_heads

    q = _split_heads(linear(q_tokens, weights.w_q, weights.b_q), n_heads, head_dim)
    k = _split_heads(matmul(k_tokens, weights.w_k), n_heads, head_dim)
    v = _split_heads(linear(v_tokens, weights.w_v, weights.b_v), n_heads, head_dim)

    scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(head_dim))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)  # (..., H, n_q, head_dim)
    return linear(_merge_heads(ctx), weights.w_o, weights.b_o)


def ffn(x: Tensor, weights: FeedForwardWeights) -> Tensor:
    """Token-wise feed-forward block: linear -> GELU -> linear."""
    return linear(gelu(linear(x, weights.w1, weights.b1)), weights.w2, weights.b2)
