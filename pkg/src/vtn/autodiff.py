"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every learnable computation in the package goes through :class:`Tensor`.
Nodes are numbered in creation order; :func:`backward` walks the nodes
reachable from the loss in reverse creation order, so each node is visited
exactly once and gradients accumulate additively.

Broadcasting is limited to leading-axis expansion: the smaller operand's
shape must be a suffix of the larger one.  Anything else needs an explicit
reshape.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

LAYERNORM_EPS = 1e-5

_counter = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _strict() -> bool:
    return getattr(_state, "strict", False)


@contextmanager
def no_grad():
    """Run ops without recording backward closures (inference)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def strict_mode(enabled: bool = True):
    """Reject NaN inputs to every op while active."""
    prev = _strict()
    _state.strict = enabled
    try:
        yield
    finally:
        _state.strict = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_inputs(kind: str, inputs: Sequence[Tensor]) -> None:
    if _strict():
        for t in inputs:
            if np.isnan(t.data).any():
                raise FloatingPointError(f"{kind}: NaN in input of shape {t.shape}")


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._seq = next(_counter)
    return out


def _suffix_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{kind}: shapes {sa} and {sb} do not conform (only leading-axis expansion allowed)")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.reshape((-1,) + shape).sum(axis=0) if shape else np.asarray(grad.sum())
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_inputs("add", (a, b))
    _suffix_broadcast("add", a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _node(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_inputs("mul", (a, b))
    _suffix_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _reduce_to(g * bd, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad * bd, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    _check_inputs("scale", (x,))
    return _node(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    _check_inputs("relu", (x,))
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    _check_inputs("sigmoid", (x,))
    y = _stable_sigmoid(x.data)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    _check_inputs("tanh", (x,))
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    _check_inputs("softplus", (x,))
    d = x.data
    y = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    return _node(y, (x,), lambda g: (g * _stable_sigmoid(d),))


def abs_(x: Tensor) -> Tensor:
    _check_inputs("abs", (x,))
    sign = np.sign(x.data)
    return _node(np.abs(x.data), (x,), lambda g: (g * sign,))


def _stable_sigmoid(d: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(d))
    return np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def dropout(x: Tensor, mask: np.ndarray | None) -> Tensor:
    """Multiply by a precomputed (already rescaled) keep mask."""
    if mask is None:
        return x
    _check_inputs("dropout", (x,))
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape:
        raise ShapeError(f"dropout: mask shape {mask.shape} != input shape {x.shape}")
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


# ------------------------------------------------------------------ reductions

def sum_(x: Tensor, axis=None) -> Tensor:
    _check_inputs("sum", (x,))
    shape = x.shape
    if axis is None:
        return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    axis = axis % x.ndim

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(x.data.sum(axis=axis), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


# -------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over the last two axes.

    ``b`` is either 2-D (shared across a's leading axes) or has exactly the
    leading axes of ``a``.
    """
    _check_inputs("matmul", (a, b))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading axes of {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _node(ad @ bd, (a, b), backward)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``x``; False entries get
    probability exactly zero.  Every row must keep at least one entry.
    """
    _check_inputs("softmax", (x,))
    d = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, d.shape)
        except ValueError:
            raise ShapeError(f"softmax: mask shape {mask.shape} does not broadcast to {d.shape}") from None
        d = np.where(mask, d, -np.inf)
    m = np.max(d, axis=-1, keepdims=True)
    e = np.exp(d - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), backward)


def layernorm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
              eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine terms."""
    parents = tuple(t for t in (x, gamma, beta) if t is not None)
    _check_inputs("layernorm", parents)
    d = x.shape[-1]
    for t in (gamma, beta):
        if t is not None and t.shape != (d,):
            raise ShapeError(f"layernorm: affine shape {t.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data

    def backward(g):
        grads = []
        gx = g * gamma.data if gamma is not None else g
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads.append(dx)
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return tuple(grads)

    return _node(y, parents, backward)


def conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Same-padded 1-D convolution along axis -2.

    x: [..., T, C_in], w: [K, C_in, C_out] with odd K.
    """
    _check_inputs("conv1d", (x, w))
    if w.ndim != 3 or x.ndim < 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} and kernel {w.shape} do not conform")
    k, cin, cout = w.shape
    if k % 2 == 0:
        raise ShapeError(f"conv1d: kernel width {k} must be odd for same padding")
    t = x.shape[-2]
    pad = k // 2
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, widths)
    cols = np.concatenate([xp[..., i:i + t, :] for i in range(k)], axis=-1)
    wm = w.data.reshape(k * cin, cout)

    def backward(g):
        gx = gw = None
        if w.requires_grad:
            gw = (cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)).reshape(k, cin, cout)
        if x.requires_grad:
            gcols = g @ wm.T
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[..., i:i + t, :] += gcols[..., i * cin:(i + 1) * cin]
            gx = gxp[..., pad:pad + t, :]
        return gx, gw

    return _node(cols @ wm, (x, w), backward)


def embed(ids, table: Tensor) -> Tensor:
    """Row lookup ``table[ids]``; ids is an integer array of any shape."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embed: ids must be integers")
    if table.ndim != 2:
        raise ShapeError(f"embed: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embed: id out of range for vocabulary of {table.shape[0]}")
    _check_inputs("embed", (table,))

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _node(table.data[ids], (table,), backward)


# --------------------------------------------------------------- shape moves

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    _check_inputs("concat", tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: shapes {[u.shape for u in tensors]} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def slice_(x: Tensor, index) -> Tensor:
    _check_inputs("slice", (x,))
    out = x.data[index]
    if isinstance(out, np.ndarray) and np.shares_memory(out, x.data):
        out = out.copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] += g
        return (gx,)

    return _node(np.asarray(out), (x,), backward)


def reshape(x: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    old = x.shape
    return _node(y, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None or len(axes) == 0:
        axes = tuple(reversed(range(x.ndim)))
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = np.argsort([a % x.ndim for a in axes])
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


# -------------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Accumulate dloss/dleaf into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._backward is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad and id(p) not in nodes)

    interior = sorted((t for t in nodes.values() if t._backward is not None),
                      key=lambda t: t._seq, reverse=True)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in interior:
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is not None:
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg
            else:
                pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg


# -------------------------------------------------------------------- gradcheck

def gradcheck(builder: Callable, seed: int, eps: float = 1e-5,
              max_checks_per_param: int | None = None, floor: float = 1e-4) -> float:
    """Compare analytic gradients with central finite differences.

    ``builder(seed)`` returns ``(params, loss_fn)`` where ``loss_fn()``
    rebuilds the graph from ``params`` and returns a scalar Tensor.  Only
    params with ``requires_grad`` are checked.  Returns the max over checked
    entries of ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.

    The floor keeps entries whose true gradient is zero (e.g. attention key
    biases, which softmax ignores) from dividing finite-difference roundoff,
    a few ulps of the loss over ``2 * eps``, by a vanishing denominator.
    """
    params, loss_fn = builder(seed)
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    backward(loss_fn())
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = np.zeros(p.shape) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_checks_per_param is not None and flat.size > max_checks_per_param:
                idx = rng.choice(flat.size, max_checks_per_param, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                a = analytic.reshape(-1)[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst


class MaskSource:
    """Counter-based dropout masks (Philox keyed by seed, stream and a counter).

    The same key always yields the same mask, independently of how many masks
    were drawn before, which keeps training resumable bit-for-bit.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._calls = 0

    def generator(self, *key: int) -> np.random.Generator:
        words = np.random.SeedSequence([self.seed, self.stream, *map(int, key)]).generate_state(2, np.uint64)
        return np.random.Generator(np.random.Philox(key=words))

    def keep_mask(self, shape, rate: float, *key: int) -> np.ndarray | None:
        """Bernoulli keep mask rescaled by 1/(1-rate); None when rate is 0."""
        if rate <= 0.0:
            return None
        u = self.generator(*key).random(shape)
        return (u >= rate) / (1.0 - rate)

    def next_mask(self, shape, rate: float) -> np.ndarray | None:
        if rate <= 0.0:
            return None
        self._calls += 1
        return self.keep_mask(shape, rate, 0x5EED, self._calls)
