"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:meth:`Tensor.backward` walks the recorded graph once in reverse topological
order, summing gradients where a tensor feeds several consumers.

Recurrent and convolutional building blocks (``lstm_cell``, ``conv1d``,
``batchnorm1d``) are fused single nodes with hand-written backward passes; the
decoder loop of the acoustic model would otherwise spend most of its time in
Python bookkeeping.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GradientCheckError",
    "BatchNormState",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "add",
    "mul",
    "matmul",
    "linear",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "concat",
    "stack",
    "cumsum",
    "softmax",
    "dropout",
    "conv1d",
    "lstm_cell",
    "batchnorm1d",
    "embedding",
    "gather_time",
    "logabsdet",
    "mse",
    "bce_with_logits",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class GradientCheckError(AssertionError):
    """Analytic and finite-difference gradients disagree."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs an explicit gradient for shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -as_tensor(other))

    def __rsub__(self, other):
        return add(as_tensor(other), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other ** -1.0)
        return mul(self, 1.0 / np.asarray(other, dtype=self.data.dtype))

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        x = self.data
        return _make(x**exponent, (self,), lambda g: (g * exponent * x ** (exponent - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        x = self.data
        shape, dtype = x.shape, x.dtype

        fancy = _has_fancy(index)

        def backward(g):
            out = np.zeros(shape, dtype=dtype)
            if fancy:
                np.add.at(out, index, g)
            else:
                out[index] = g
            return (out,)

        return _make(x[index], (self,), backward)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(orig),))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.data.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _has_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
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


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = a.data, b.data
    return _make(
        x * y,
        (a, b),
        lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
    )


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only; no overflow for large |z|
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(x.data * pos, (x,), lambda g: (g * pos,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return _make(np.log(d), (x,), lambda g: (g / d,))


# -- linear algebra --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {x.shape} by {y.shape}")
    out = x @ y

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
        if b.requires_grad:
            if y.ndim == 2:
                gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as [in, out]."""
    xd, w = x.data, weight.data
    if xd.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {xd.shape} does not match weight {w.shape}")
    out = xd @ w
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w.T if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, backward)


def logabsdet(w: Tensor) -> Tensor:
    """log|det W| of a square matrix; gradient W^{-T}."""
    sign, val = np.linalg.slogdet(w.data)
    if sign == 0:
        raise np.linalg.LinAlgError("logabsdet of a singular matrix")
    wd = w.data
    return _make(np.asarray(val, dtype=wd.dtype), (w,), lambda g: (g * np.linalg.inv(wd).T,))


# -- structural ------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(n))

    return _make(out, tuple(tensors), backward)


def cumsum(x: Tensor, axis: int = -1) -> Tensor:
    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(x.data, axis=axis), (x,), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding: id out of range [0, {n})")
    shape = weight.shape

    def backward(g):
        gw = np.zeros(shape, dtype=g.dtype)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), backward)


def gather_time(x: Tensor, index) -> Tensor:
    """Per-sequence time reordering: ``out[b, t] = x[b, index[b, t]]`` for x [B, T, D]."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])[:, None]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (rows, index), g)
        return (gx,)

    return _make(x.data[rows, index], (x,), backward)


# -- normalisation / stochastic -----------------------------------------------------


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Numerically stable softmax; positions where ``mask`` is False get weight 0."""
    d = x.data
    if np.isnan(d).any():
        raise ValueError("softmax: NaN input")
    if mask is not None:
        d = np.where(mask, d, -np.inf)
    z = d - d.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, keep.astype(x.data.dtype))


# -- fused layers --------------------------------------------------------------------


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    pad: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Cross-correlation over time with zero padding.

    x is [T, C_in] or [B, T, C_in]; weight is [C_out, C_in, K]. Output length is
    T + 2*pad - dilation*(K-1).
    """
    xd = x.data
    batched = xd.ndim == 3
    if not batched:
        xd = xd[None]
    B, T, cin = xd.shape
    cout, cin_w, K = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv1d: input channels {cin} but kernel expects {cin_w} (kernel {weight.shape})")
    t_out = T + 2 * pad - dilation * (K - 1)
    if t_out < 1:
        raise ShapeError(f"conv1d: sequence of length {T} too short for kernel {K} with pad {pad}")
    xp = np.pad(xd, ((0, 0), (pad, pad), (0, 0))) if pad else xd
    cols = np.concatenate([xp[:, k * dilation : k * dilation + t_out] for k in range(K)], axis=-1)
    wmat = weight.data.transpose(2, 1, 0).reshape(K * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gb3 = g if batched else g[None]
        gx = gw = None
        if x.requires_grad:
            gcols = (gb3 @ wmat.T).reshape(B, t_out, K, cin)
            gxp = np.zeros_like(xp)
            for k in range(K):
                s = k * dilation
                gxp[:, s : s + t_out] += gcols[:, :, k]
            gx = gxp[:, pad : pad + T]
            if not batched:
                gx = gx[0]
        if weight.requires_grad:
            gw = (cols.reshape(-1, K * cin).T @ gb3.reshape(-1, cout)).reshape(K, cin, cout).transpose(2, 1, 0)
        if bias is None:
            return gx, gw
        return gx, gw, gb3.reshape(-1, cout).sum(axis=0)

    return _make(out if batched else out[0], parents, backward)


def lstm_cell(
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
) -> tuple[Tensor, Tensor]:
    """One LSTM step. Gate order in the 4H axis is input, forget, candidate, output.

    Shapes: x [B, I], h/c [B, H], w_ih [I, 4H], w_hh [H, 4H], bias [4H].
    """
    xd, hd, cd = x.data, h_prev.data, c_prev.data
    H = hd.shape[-1]
    if w_ih.shape[0] != xd.shape[-1] or w_hh.shape != (H, 4 * H) or w_ih.shape[1] != 4 * H or bias.shape != (4 * H,):
        raise ShapeError(
            f"lstm_cell: x {xd.shape}, h {hd.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}, bias {bias.shape}"
        )
    if cd.shape != hd.shape:
        raise ShapeError(f"lstm_cell: h {hd.shape} and c {cd.shape} differ")
    z = xd @ w_ih.data + hd @ w_hh.data + bias.data
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H : 2 * H])
    gg = np.tanh(z[..., 2 * H : 3 * H])
    o = _sigmoid(z[..., 3 * H :])
    c = f * cd + i * gg
    tc = np.tanh(c)
    h = o * tc

    def backward(gout):
        gh, gc = gout[..., :H], gout[..., H:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [dc * gg * i * (1.0 - i), dc * cd * f * (1.0 - f), dc * i * (1.0 - gg * gg), gh * tc * o * (1.0 - o)],
            axis=-1,
        )
        return (
            dz @ w_ih.data.T if x.requires_grad else None,
            dz @ w_hh.data.T if h_prev.requires_grad else None,
            dc * f,
            xd.T @ dz if w_ih.requires_grad else None,
            hd.T @ dz if w_hh.requires_grad else None,
            dz.sum(axis=0) if bias.requires_grad else None,
        )

    hc = _make(np.concatenate([h, c], axis=-1), (x, h_prev, c_prev, w_ih, w_hh, bias), backward)
    return hc[..., :H], hc[..., H:]


class BatchNormState:
    """Running statistics of one batch-norm layer (arrays are updated in place)."""

    __slots__ = ("mean", "var", "count", "momentum", "eps")

    def __init__(self, mean: np.ndarray, var: np.ndarray, count: np.ndarray, momentum: float = 0.1, eps: float = 1e-5):
        self.mean, self.var, self.count = mean, var, count
        self.momentum, self.eps = momentum, eps

    @classmethod
    def fresh(cls, channels: int, **kw) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), np.zeros(1), **kw)


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    mask=None,
) -> Tensor:
    """Batch norm over every axis but the last (channels).

    In training mode statistics come from positions where ``mask`` is True and
    the running estimates are updated; in eval mode the running estimates are
    used and must already exist.
    """
    xd = x.data
    C = xd.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm1d: {C} channels but gamma {gamma.shape}, beta {beta.shape}")
    eps = state.eps
    if training:
        x2 = xd.reshape(-1, C)
        if mask is None:
            m = None
            valid = x2
        else:
            m = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape[:-1]).reshape(-1)
            valid = x2[m]
        n = valid.shape[0]
        if n == 0:
            raise ValueError("batchnorm1d: no valid positions in batch")
        mu = valid.mean(axis=0)
        var = valid.var(axis=0)
        mom = state.momentum
        state.mean *= 1.0 - mom
        state.mean += mom * mu
        state.var *= 1.0 - mom
        state.var += mom * (var * n / (n - 1) if n > 1 else var)
        state.count += 1
    else:
        if state.count[0] <= 0:
            raise RuntimeError("batchnorm1d: eval mode before any statistics were recorded")
        mu, var, m, n = state.mean, state.var, None, None
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        g2 = g.reshape(-1, C)
        xh2 = xhat.reshape(-1, C)
        ggamma = (g2 * xh2).sum(axis=0)
        gbeta = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            if training:
                s1 = gbeta / n
                s2 = ggamma / n
                if m is None:
                    gx2 = gamma.data * inv * (g2 - s1 - xh2 * s2)
                else:
                    mm = m[:, None]
                    gx2 = gamma.data * inv * (g2 - mm * (s1 + xh2 * s2))
                gx = gx2.reshape(xd.shape)
            else:
                gx = g * gamma.data * inv
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


# -- losses ------------------------------------------------------------------------


def mse(pred: Tensor, target, mask=None) -> Tensor:
    """Mean squared error over positions where ``mask`` (broadcastable) is True."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    if mask is None:
        w = None
        count = diff.size
    else:
        w = np.broadcast_to(np.asarray(mask, dtype=diff.dtype), diff.shape)
        count = w.sum()
        diff = diff * w
    if count == 0:
        raise ValueError("mse: nothing to average")
    val = np.asarray((diff * diff).sum() / count)

    def backward(g):
        gd = g * 2.0 * diff / count
        return gd, -gd

    return _make(val, (pred, target), backward)


def bce_with_logits(logits: Tensor, targets, mask=None, pos_weight: float = 1.0) -> Tensor:
    """Binary cross-entropy on logits, averaged over valid positions."""
    x = logits.data
    y = np.asarray(targets, dtype=x.dtype)
    if y.shape != x.shape:
        raise ShapeError(f"bce_with_logits: logits {x.shape} vs targets {y.shape}")
    w = np.ones_like(x) if mask is None else np.broadcast_to(np.asarray(mask, dtype=x.dtype), x.shape)
    count = w.sum()
    if count == 0:
        raise ValueError("bce_with_logits: nothing to average")
    # softplus(-x) = -log sigmoid(x); softplus(x) = -log(1 - sigmoid(x))
    per = pos_weight * y * np.logaddexp(0.0, -x) + (1.0 - y) * np.logaddexp(0.0, x)
    val = np.asarray((w * per).sum() / count)
    s = _sigmoid(x)

    def backward(g):
        return (g * w * (pos_weight * y * (s - 1.0) + (1.0 - y) * s) / count,)

    return _make(val, (logits,), backward)


# -- gradient checking -------------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-5,
    components: int | None = None,
    seed: int = 0,
    tol: float | None = None,
) -> float:
    """Largest relative disagreement between backprop and central differences.

    Per component: |analytic - central| / max(|analytic|, |central|, 1e-12).
    ``components`` limits the check to a random subset of entries of ``x``.
    If ``tol`` is given, a larger error raises :class:`GradientCheckError`.
    """
    base = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    y = f(xt)
    if y.data.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {y.shape}")
    y.backward()
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad.reshape(base.shape)

    flat = base.reshape(-1)
    idx: Iterable[int] = range(flat.size)
    if components is not None and components < flat.size:
        idx = np.random.default_rng(seed).choice(flat.size, size=components, replace=False)

    worst = 0.0
    with no_grad():
        for i in idx:
            xp = flat.copy()
            xm = flat.copy()
            xp[i] += eps
            xm[i] -= eps
            fp = f(Tensor(xp.reshape(base.shape))).item()
            fm = f(Tensor(xm.reshape(base.shape))).item()
            central = (fp - fm) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - central) / max(abs(a), abs(central), 1e-12)
            worst = max(worst, err)
    if tol is not None and worst > tol:
        raise GradientCheckError(f"gradient check failed: relative error {worst:.3e} > {tol:.1e}")
    return worst


def directional_grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    seed: int = 0,
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
    joint: bool = False,
) -> dict[str, float]:
    """Gradient check of a whole model, one random direction per parameter tensor.

    Each tensor p is temporarily replaced by ``p + t * d`` (d of unit norm) and :func:`grad_check`
    runs on the scalar t, so the cost is three loss evaluations per tensor
    regardless of its size. With ``joint=True`` every tensor moves along its
    own direction at once and a single error is reported under ``"*"``.
    """
    rng = np.random.default_rng(seed)
    chosen = list(params) if names is None else list(names)
    dirs = {}
    for n in chosen:
        d = rng.standard_normal(params[n].shape)
        dirs[n] = d / np.linalg.norm(d)  # unit length, so eps bounds the actual perturbation
    originals = {n: params[n] for n in chosen}

    def along(group):
        def f(t):
            for n in group:
                params[n] = Tensor(originals[n].data) + t * dirs[n]
            try:
                return loss_fn()
            finally:
                params.update(originals)

        return grad_check(f, np.zeros(1), eps=eps)

    if joint:
        return {"*": along(chosen)}
    return {n: along([n]) for n in chosen}
