"""A small reverse-mode autodiff kernel on numpy arrays.

Operations record themselves on a dynamic graph when any input requires a
gradient; ``Tensor.backward`` walks the graph in reverse topological order.
Only the handful of ops the controller network needs are provided.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True


class DiagnosticsError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a loss, gradient or update."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior nodes do not keep their gradients
                if node._parents:
                    node.grad = None

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accum(g * mask)

    return _result(x.data * mask, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        x._accum(g * y * (1.0 - y))

    return _result(y, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        x._accum(g * (1.0 - y * y))

    return _result(y, (x,), backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        x._accum(2.0 * g * x.data)

    return _result(x.data * x.data, (x,), backward)


# -- reductions and shape ops -------------------------------------------------

def reduce_sum(x: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is None:
            x._accum(np.broadcast_to(g, x.shape))
        else:
            x._accum(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x: Tensor) -> Tensor:
    return mul(reduce_sum(x), 1.0 / x.data.size)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        x._accum(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = np.argsort(axes)

    def backward(g):
        x._accum(g.transpose(inv))

    return _result(x.data.transpose(axes), (x,), backward)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                x._accum(g[tuple(idx)])

    return _result(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accum(full)

    return _result(x.data[idx], (x,), backward)


def take_along_last(x: Tensor, index: np.ndarray) -> Tensor:
    """``x[..., index[...]]`` picking one entry along the last axis."""
    index = np.asarray(index)
    idx = index[..., None]

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        x._accum(full)

    return _result(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), backward)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), backward)


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (any leading shape)."""
    x = as_tensor(x)
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    y = matmul(flat, w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (w.shape[-1],)) if x.ndim != 2 else y


def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Width-3, stride-1 cross-correlation along the last axis, zero padding 1.

    ``x`` is (C, L) or (N, C, L); ``w`` is (O, C, 3); output keeps length L.
    """
    x = as_tensor(x)
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    N, C, L = xd.shape
    O, Cw, K = w.shape
    if Cw != C:
        raise ValueError(f"conv1d channel mismatch: input has {C}, filters expect {Cw}")
    if K != 3:
        raise ValueError("conv1d supports filter width 3 only")
    xp = np.zeros((N, C, L + 2), dtype=xd.dtype)
    xp[:, :, 1:-1] = xd
    # cols[n, c*3 + k, l] = xp[n, c, l + k]
    cols = np.stack([xp[:, :, k:k + L] for k in range(3)], axis=2).reshape(N, C * 3, L)
    w2 = w.data.reshape(O, C * 3)
    out = w2 @ cols
    if b is not None:
        out = out + b.data[:, None]
    if unbatched:
        out = out[0]

    def backward(g):
        g3 = g[None] if unbatched else g
        if w.requires_grad:
            gw = np.einsum("nol,nkl->ok", g3, cols)
            w._accum(gw.reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accum(g3.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = (w2.T @ g3).reshape(N, C, 3, L)
            gxp = np.zeros_like(xp)
            for k in range(3):
                gxp[:, :, k:k + L] += gcols[:, :, k]
            gx = gxp[:, :, 1:-1]
            x._accum(gx[0] if unbatched else gx)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


# -- softmax family -----------------------------------------------------------

def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        p = np.exp(y)
        x._accum(g - p * g.sum(axis=-1, keepdims=True))

    return _result(y, (x,), backward)


def row_softmax(x: Tensor) -> Tensor:
    z = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def backward(g):
        x._accum(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (x,), backward)


def softmax_attention(queries, keys, values) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention.

    queries (..., q, d), keys (..., L, d), values (..., L, v).  Returns the
    (..., q, v) output and the (..., q, L) attention weights.
    """
    queries, keys, values = as_tensor(queries), as_tensor(keys), as_tensor(values)
    d = queries.shape[-1]
    if d == 0:
        raise ValueError("attention needs a non-empty query dimension")
    if keys.shape[-1] != d:
        raise ValueError(f"query width {d} does not match key width {keys.shape[-1]}")
    scores = mul(matmul(queries, swap_last(keys)), 1.0 / math.sqrt(d))
    weights = row_softmax(scores)
    return matmul(weights, values), weights


def categorical_logprob(logits: Tensor, index) -> Tensor:
    """log softmax(logits)[index] along the last axis."""
    index = np.asarray(index)
    k = logits.shape[-1]
    if np.any(index < 0) or np.any(index >= k):
        raise IndexError(f"category index out of range for {k} classes")
    return take_along_last(log_softmax(logits), index)


def categorical_entropy(logits: Tensor) -> Tensor:
    logp = log_softmax(logits)
    p = row_softmax(logits)
    return mul(reduce_sum(mul(p, logp), axis=-1), -1.0)


# -- recurrent encoder --------------------------------------------------------

def lstm_direction(xs: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """Run one LSTM direction over (N, L, D) inputs; return the final hidden state.

    Gate order in the packed weights: input, forget, cell, output.
    """
    N, L, _ = xs.shape
    H = w_h.shape[0]
    proj = add(dense(xs, w_x), b)  # (N, L, 4H)
    h = Tensor(np.zeros((N, H), dtype=xs.data.dtype))
    c = Tensor(np.zeros((N, H), dtype=xs.data.dtype))
    steps = range(L - 1, -1, -1) if reverse else range(L)
    for t in steps:
        gates = add(proj[:, t, :], matmul(h, w_h))
        i = sigmoid(gates[:, :H])
        f = sigmoid(gates[:, H:2 * H])
        g = tanh(gates[:, 2 * H:3 * H])
        o = sigmoid(gates[:, 3 * H:])
        c = add(mul(f, c), mul(i, g))
        h = mul(o, tanh(c))
    return h


def bilstm(x: Tensor, fwd: Sequence[Tensor], bwd: Sequence[Tensor]) -> Tensor:
    """Bidirectional LSTM over (N, C, L) or (C, L) features.

    Returns the concatenated final states, width 2*H, for any L >= 1.
    """
    x = as_tensor(x)
    unbatched = x.ndim == 2
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.shape[-1] < 1:
        raise ValueError("bilstm needs at least one time step")
    xs = swap_last(x)  # (N, L, C)
    h_f = lstm_direction(xs, *fwd)
    h_b = lstm_direction(xs, *bwd, reverse=True)
    out = concat([h_f, h_b], axis=-1)
    return reshape(out, (out.shape[-1],)) if unbatched else out


# -- parameters and optimizer -------------------------------------------------

class ParamStore(dict):
    """Named parameter tensors; gradients live on ``tensor.grad``."""

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def count(self) -> int:
        return int(np.sum([t.data.size for t in self.values()]))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.items()}

    def copy(self, requires_grad: bool = False) -> "ParamStore":
        return ParamStore({k: Tensor(t.data.copy(), requires_grad=requires_grad) for k, t in self.items()})


class Adam:
    def __init__(self, params: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, max_grad_norm: Optional[float] = None):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        return math.sqrt(total)

    def step(self) -> None:
        for k, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise DiagnosticsError(f"non-finite gradient in parameter {k!r}")
        scale = 1.0
        if self.max_grad_norm is not None:
            norm = self.grad_norm()
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / norm
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad * scale
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": a for k, a in self.m.items()}
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        return out


def adam_step(params: ParamStore, state: Adam) -> ParamStore:
    state.step()
    return params


# -- gradient checking ----------------------------------------------------------

def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Relative error in the max norm: max|a - n| / max(max|a|, max|n|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if not a.size:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), floor)
    return float(np.max(np.abs(a - n))) / scale


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def gradcheck(build: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[np.ndarray],
              dtype=np.float64, eps: float = 1e-6, seed: int = 0) -> float:
    """Compare reverse-mode gradients with central differences.

    ``build`` maps input tensors to an output tensor; the check contracts it
    with a fixed random cotangent so every output entry is exercised.  The
    analytic side runs at ``dtype``; the finite-difference side always runs
    at float64.  Returns the max relative error over all inputs.
    """
    rng = np.random.default_rng(seed)
    ref = [np.array(a, dtype=np.float64) for a in inputs]
    with no_grad():
        probe = build([Tensor(a) for a in ref]).data
    cot = rng.standard_normal(probe.shape)

    tensors = [Tensor(a.astype(dtype), requires_grad=True) for a in ref]
    out = build(tensors)
    out.backward(cot.astype(dtype))
    worst = 0.0
    for t, a in zip(tensors, ref):
        analytic = np.zeros_like(a) if t.grad is None else t.grad

        def f(a=a):
            with no_grad():
                return float(np.sum(build([Tensor(r) for r in ref]).data * cot))

        numeric = numeric_grad(f, a, eps=eps)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


def check_finite(name: str, values: Iterable[float]) -> None:
    for v in values:
        if not math.isfinite(v):
            raise DiagnosticsError(f"non-finite value in {name}")
