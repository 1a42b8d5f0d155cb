"""Tape-based reverse-mode automatic differentiation over numpy arrays,
plus the Adam optimizer with decoupled weight decay and a cosine schedule.

Every operation that touches a tensor requiring gradients while a
:class:`Tape` is active appends a node to that tape. Because nodes are
appended in creation order, the tape is already a topological order and
the backward sweep is a single reversed pass.

Example
-------
>>> w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
>>> with Tape() as tape:
...     loss = (w * w).sum()
>>> tape.backward(loss, [w])[0]
array([ 2., -4.])
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtr

__all__ = [
    "Tensor",
    "Tape",
    "no_tape",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "tanh",
    "sigmoid",
    "gelu",
    "softmax",
    "sqrt",
    "square",
    "exp",
    "sin",
    "cos",
    "maximum",
    "concat",
    "getitem",
    "reshape",
    "swapaxes",
    "sum",
    "mean",
    "gru_sequence",
    "OptimState",
    "adam_step",
    "cosine_lr",
    "NonFiniteGradientError",
]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_active: list["Tape"] = []


class Tensor:
    """A float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    # -- conveniences -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of one forward pass.

    Use as a context manager; nested tapes record into the innermost one.
    A tape supports exactly one :meth:`backward` call.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._consumed = False

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def backward(self, loss: Tensor, params) -> list[np.ndarray]:
        """Gradients of the scalar ``loss`` with respect to each of ``params``.

        Parameters that the loss does not depend on get a zero gradient
        and a warning.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if node is not loss:
                # free cached intermediates early
                node._backward = None

        out = []
        for p in params:
            g = grads.get(id(p))
            if g is None:
                warnings.warn(f"parameter {p.name or p!r} is detached from the loss; gradient set to zero")
                g = np.zeros_like(p.data)
            out.append(g)
        return out


class no_tape:
    """Context manager suspending recording (evaluation-only workloads)."""

    def __enter__(self):
        self._saved = list(_active)
        _active.clear()
        return self

    def __exit__(self, *exc):
        _active.extend(self._saved)
        return False


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _active and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        _active[-1].nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting of leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), backward)


# -- nonlinearities ----------------------------------------------------------

def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def _logistic(x):
    return expit(x)  # overflow-safe


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _logistic(a.data)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x) with Phi the standard normal CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = ndtr(x)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _node(x * cdf, (a,), backward)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _node(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return _node(y, (a,), lambda g: (0.5 * g / y,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def maximum(a, c: float) -> Tensor:
    """Elementwise max(a, c) for a constant c; subgradient 0 at the kink."""
    a = as_tensor(a)
    mask = a.data > c
    return _node(np.where(mask, a.data, c), (a,), lambda g: (g * mask,))


# -- structural ops ----------------------------------------------------------

def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis)
                     for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1, ax2) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- fused recurrent layer ---------------------------------------------------

def gru_sequence(x, W, U, b, reverse=False) -> Tensor:
    """One GRU direction over a whole sequence, zero initial state.

    ``x`` is B x S x D_in; ``W`` is D_in x 3H, ``U`` is H x 3H and ``b`` is 3H,
    with gate blocks ordered (update z, reset r, candidate n)::

        z = sigma(x Wz + h Uz + bz)
        r = sigma(x Wr + h Ur + br)
        n = tanh(x Wn + (r * h) Un + bn)
        h' = (1 - z) * n + z * h

    With ``reverse`` the sequence is consumed last-to-first and the output
    re-reversed, so position t always holds the state aligned with input t.
    Backpropagation through time is hand-written; a composition of the
    primitive ops gives the same numbers (see tests).
    """
    x, W, U, b = (as_tensor(t) for t in (x, W, U, b))
    xd = x.data[:, ::-1] if reverse else x.data
    B, S, _ = xd.shape
    H = U.shape[0]
    Ud = U.data
    Uzr, Un = Ud[:, : 2 * H], Ud[:, 2 * H:]

    xw = xd @ W.data + b.data
    hs = np.zeros((S + 1, B, H))
    zs = np.empty((S, B, H))
    rs = np.empty((S, B, H))
    ns = np.empty((S, B, H))
    h = hs[0]
    for t in range(S):
        zr = _logistic(xw[:, t, : 2 * H] + h @ Uzr)
        z, r = zr[:, :H], zr[:, H:]
        n = np.tanh(xw[:, t, 2 * H:] + (r * h) @ Un)
        h = (1.0 - z) * n + z * h
        zs[t], rs[t], ns[t], hs[t + 1] = z, r, n, h

    out = np.swapaxes(hs[1:], 0, 1)
    if reverse:
        out = out[:, ::-1]
    out = np.ascontiguousarray(out)

    def backward(g):
        g = g[:, ::-1] if reverse else g
        dxw = np.empty((B, S, 3 * H))
        dU = np.zeros_like(Ud)
        dh = np.zeros((B, H))
        for t in range(S - 1, -1, -1):
            dh = dh + g[:, t]
            z, r, n, hp = zs[t], rs[t], ns[t], hs[t]
            dn = dh * (1.0 - z) * (1.0 - n * n)
            dz = dh * (hp - n) * z * (1.0 - z)
            drh = dn @ Un.T
            dr = drh * hp * r * (1.0 - r)
            dU[:, 2 * H:] += (r * hp).T @ dn
            dzr = np.concatenate([dz, dr], axis=1)
            dU[:, : 2 * H] += hp.T @ dzr
            dh = dh * z + drh * r + dzr @ Uzr.T
            dxw[:, t, : 2 * H] = dzr
            dxw[:, t, 2 * H:] = dn
        dW = np.tensordot(xd, dxw, axes=([0, 1], [0, 1]))
        db = dxw.sum(axis=(0, 1))
        dx = dxw @ W.data.T
        if reverse:
            dx = dx[:, ::-1]
        return dx, dW, dU, db

    return _node(out, (x, W, U, b), backward)


# -- optimizer ---------------------------------------------------------------

class NonFiniteGradientError(FloatingPointError):
    pass


def cosine_lr(step: int, total: int, base: float, floor_frac: float = 0.1) -> float:
    """Cosine annealing from ``base`` at step 0 down to ``floor_frac * base``."""
    floor = floor_frac * base
    if total <= 0 or step >= total:
        return floor
    step = max(step, 0)
    return floor + (base - floor) * 0.5 * (1.0 + math.cos(math.pi * step / total))


@dataclass
class OptimState:
    """Adam moments and schedule constants.

    ``step`` counts completed updates; the learning rate for the next update
    is ``cosine_lr(step, total_steps, base_lr)``.
    """

    m: list
    v: list
    step: int = 0
    base_lr: float = 5e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    total_steps: int = 1
    floor_frac: float = 0.1
    clip_norm: float | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, **kw):
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **kw)

    def current_lr(self) -> float:
        return cosine_lr(self.step, self.total_steps, self.base_lr, self.floor_frac)


def adam_step(state: OptimState, params, grads, lr: float | None = None) -> float:
    """Update ``params`` in place; return the learning rate used.

    Weight decay is decoupled: ``p -= lr * wd * p`` before the moment-based
    step. A non-finite gradient aborts the update before anything changes.
    """
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {p.name or 'parameter'} at step {state.step}")
    if state.clip_norm is not None:
        norm = math.sqrt(np.add.reduce([float(np.vdot(g, g)) for g in grads]))
        if norm > state.clip_norm:
            grads = [g * (state.clip_norm / norm) for g in grads]

    if lr is None:
        lr = state.current_lr()
    b1, b2 = state.betas
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step = t
    return lr
