"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A Tensor is a node in a define-by-run graph: every operation records its
parents and a closure that propagates the output gradient back to them.
Graphs are rebuilt per minibatch and discarded after ``backward``. All
arithmetic is float64 and single-threaded per graph, so repeated runs with
identical inputs are bit-identical.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class GraphError(RuntimeError):
    pass


_node_counter = itertools.count()
_grad_enabled = True
# "risky": validate only ops that can produce non-finite values from
# ordinary-magnitude inputs (div, log, sqrt, exp); "all": every op;
# "off": nothing. Training loops additionally validate the loss and Adam
# validates gradients, so divergence is caught either way.
_finite_mode = "risky"


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(mode: str | bool) -> None:
    global _finite_mode
    if mode is True:
        mode = "all"
    elif mode is False:
        mode = "off"
    if mode not in ("risky", "all", "off"):
        raise ValueError(f"unknown finite-check mode {mode!r}")
    _finite_mode = mode


class Tensor:
    """Dense float64 array plus the bookkeeping for reverse-mode autodiff.

    ``data`` is a C-contiguous float64 ndarray; ``grad`` is filled lazily by
    ``backward``. Leaf tensors created with ``requires_grad=True`` are the
    trainable parameters; everything else is an operation node.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_counter)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, id={self.node_id})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self, output_grad=None) -> None:
        backward(self, output_grad)

    # Operator sugar; the full op set lives at module level.
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...],
          vjp: Callable[[np.ndarray], None], risky: bool = False) -> Tensor:
    out = Tensor(data)
    if (_finite_mode == "all" or (risky and _finite_mode == "risky")) \
            and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values in node #{out.node_id} ({op})")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = parents
        out._vjp = vjp
    return out


def _accum(t: Tensor, g) -> None:
    """Accumulate a gradient contribution.

    The first contribution is adopted without copying; vjp implementations
    must therefore never hand the same array object to two different parents
    (pass a copy to the second). Mutating an adopted buffer in place is safe
    because a node's grad is complete before its vjp runs.
    """
    if t.grad is None:
        t.grad = g if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(output: Tensor, output_grad=None) -> None:
    """Accumulate gradients of ``output`` into every reachable leaf's ``.grad``.

    Traversal is a fixed topological order, so accumulation order (and hence
    the bit pattern of every gradient) is deterministic.
    """
    if not output.requires_grad:
        raise GraphError(
            "backward called on a tensor with no recorded graph; "
            "run a forward pass over trainable tensors first")
    if output_grad is None:
        if output.data.size != 1:
            raise ShapeMismatchError("implicit gradient seed requires a scalar output")
        seed = np.ones_like(output.data)
    else:
        seed = np.asarray(output_grad, dtype=np.float64)
        if seed.shape != output.data.shape:
            raise ShapeMismatchError(
                f"output_grad shape {seed.shape} != output shape {output.data.shape}")

    # Iterative post-order DFS; unrolled marches make recursion risky.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in visited:
                stack.append((p, False))

    output.grad = seed.copy()
    for node in reversed(topo):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def vjp(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            gb = _unbroadcast(g, b.data.shape)
            _accum(b, gb.copy() if gb is g and a.requires_grad else gb)

    return _make(out_data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def vjp(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))  # fresh array via negation

    return _make(out_data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out_data = ad * bd

    def vjp(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * bd, ad.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * ad, bd.shape))

    return _make(out_data, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out_data = ad / bd

    def vjp(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / bd, ad.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _make(out_data, "div", (a, b), vjp, risky=True)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data
    out_data = ad @ bd

    def vjp(g):
        if a.requires_grad:
            _accum(a, g @ bd.T)
        if b.requires_grad:
            _accum(b, ad.T @ g)

    return _make(out_data, "matmul", (a, b), vjp)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def vjp(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - y * y))

    return _make(y, "tanh", (a,), vjp)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp overflow at very negative x saturates to inf and the quotient to
    # exactly 0, which is the right limit, so overflow is benign here.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid_np(a.data)

    def vjp(g):
        if a.requires_grad:
            _accum(a, g * (y * (1.0 - y)))

    return _make(y, "sigmoid", (a,), vjp)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed stably; derivative is sigmoid(x)."""
    a = as_tensor(a)
    x = a.data
    y = np.logaddexp(0.0, x)

    def vjp(g):
        if a.requires_grad:
            _accum(a, g * _sigmoid_np(x))

    return _make(y, "softplus", (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.maximum(x, 0.0)

    def vjp(g):
        if a.requires_grad:
            _accum(a, g * (x > 0.0))

    return _make(y, "relu", (a,), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)

    def vjp(g):
        if a.requires_grad:
            _accum(a, g * y)

    return _make(y, "exp", (a,), vjp, risky=True)


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.log(x)

    def vjp(g):
        if a.requires_grad:
            _accum(a, g / x)

    return _make(y, "log", (a,), vjp, risky=True)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)

    def vjp(g):
        if a.requires_grad:
            _accum(a, g * 0.5 / y)

    return _make(y, "sqrt", (a,), vjp, risky=True)


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data

    def vjp(g):
        if a.requires_grad:
            _accum(a, g * 2.0 * x)

    return _make(x * x, "square", (a,), vjp)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    in_shape = a.data.shape
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accum(a, np.broadcast_to(g, in_shape).astype(np.float64))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, in_shape).astype(np.float64))

    return _make(np.asarray(y, dtype=np.float64), "sum", (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    in_shape = a.data.shape
    if axis is None:
        count = a.data.size
    elif isinstance(axis, int):
        count = in_shape[axis]
    else:
        count = int(np.prod([in_shape[i] for i in axis]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    datas = [t.data for t in ts]
    y = np.concatenate(datas, axis=axis)
    widths = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _make(y, "concat", tuple(ts), vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = as_tensor(a)
    if not (0 <= start and start + length <= a.data.shape[axis]):
        raise ShapeMismatchError(
            f"narrow [{start}:{start + length}) out of range for axis {axis} of {a.data.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    y = a.data[idx].copy()
    in_shape = a.data.shape

    def vjp(g):
        if a.requires_grad:
            full = np.zeros(in_shape, dtype=np.float64)
            full[idx] = g
            _accum(a, full)

    return _make(y, "narrow", (a,), vjp)


def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    in_shape = a.data.shape
    y = a.data.reshape(shape)

    def vjp(g):
        if a.requires_grad:
            _accum(a, g.reshape(in_shape))

    return _make(y, "reshape", (a,), vjp)


def affine(x, w, b) -> Tensor:
    """Fused x @ w + b with x (B, in), w (in, out), b (out,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0] \
            or b.data.shape != (wd.shape[1],):
        raise ShapeMismatchError(
            f"affine shapes incompatible: {xd.shape} @ {wd.shape} + {b.data.shape}")
    out_data = xd @ wd
    out_data += b.data

    def vjp(g):
        if x.requires_grad:
            _accum(x, g @ wd.T)
        if w.requires_grad:
            _accum(w, xd.T @ g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _make(out_data, "affine", (x, w, b), vjp)


def cross_entropy_logits(logits, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy (natural log) of (R, C) logits vs int labels.

    Fused forward/backward: grad is (softmax - onehot) / R.
    """
    lg = as_tensor(logits)
    x = lg.data
    if x.ndim != 2:
        raise ShapeMismatchError(f"cross_entropy_logits expects (R, C) logits, got {x.shape}")
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.shape[0] != x.shape[0]:
        raise ShapeMismatchError("label count does not match logit rows")
    m = x.max(axis=1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(x.shape[0])
    loss = -logp[rows, labels].mean()

    def vjp(g):
        if lg.requires_grad:
            soft = np.exp(logp)
            soft[rows, labels] -= 1.0
            _accum(lg, (float(g) / x.shape[0]) * soft)

    return _make(np.float64(loss), "cross_entropy", (lg,), vjp)


def mse(pred, target) -> Tensor:
    """Mean of squared differences over all elements."""
    return tmean(square(sub(pred, target)))


# ---------------------------------------------------------------------------
# recurrent cell


@dataclass
class LSTMParams:
    """Gate weights of one LSTM cell; gate order along columns is i, f, g, o."""

    w: Tensor  # (input_dim + hidden_dim, 4 * hidden_dim)
    b: Tensor  # (4 * hidden_dim,)

    @property
    def hidden_dim(self) -> int:
        return self.b.data.shape[0] // 4

    @property
    def input_dim(self) -> int:
        return self.w.data.shape[0] - self.hidden_dim


def lstm_init(input_dim: int, hidden_dim: int, rng: np.random.Generator,
              forget_bias: float = 1.0) -> LSTMParams:
    w = rng.standard_normal((input_dim + hidden_dim, 4 * hidden_dim)) / np.sqrt(input_dim + hidden_dim)
    b = np.zeros(4 * hidden_dim)
    b[hidden_dim:2 * hidden_dim] = forget_bias
    return LSTMParams(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))


def lstm_zero_state(batch: int, hidden_dim: int) -> tuple[Tensor, Tensor]:
    z = np.zeros((batch, hidden_dim))
    return Tensor(z), Tensor(z.copy())


def lstm_step(params: LSTMParams, state: tuple[Tensor, Tensor], x) -> tuple[tuple[Tensor, Tensor], Tensor]:
    """One gated recurrent update; returns ((h', c'), output) with output = h'."""
    h, c = state
    x = as_tensor(x)
    hd = params.hidden_dim
    if x.data.ndim != 2 or h.data.ndim != 2:
        raise ShapeMismatchError("lstm_step expects (B, I) input and (B, H) state")
    if x.data.shape[1] != params.input_dim or h.data.shape[1] != hd:
        raise ShapeMismatchError(
            f"lstm_step width mismatch: input {x.data.shape}, state {h.data.shape}, "
            f"cell expects input_dim={params.input_dim}, hidden_dim={hd}")
    z = affine(concat([x, h], axis=1), params.w, params.b)
    i = sigmoid(narrow(z, 1, 0, hd))
    f = sigmoid(narrow(z, 1, hd, hd))
    g = tanh(narrow(z, 1, 2 * hd, hd))
    o = sigmoid(narrow(z, 1, 3 * hd, hd))
    c2 = add(mul(f, c), mul(i, g))
    h2 = mul(o, tanh(c2))
    return (h2, c2), h2


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Per-parameter Adam state with bias correction."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(state: AdamState, params: Tensor, grads: np.ndarray) -> Tensor:
    """Apply one bias-corrected Adam update in place; rejects non-finite grads."""
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.data.shape:
        raise ShapeMismatchError(f"grad shape {g.shape} != param shape {params.data.shape}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient; update rejected")
    if state.m is None:
        state.m = np.zeros_like(params.data)
        state.v = np.zeros_like(params.data)
    state.step_count += 1
    t = state.step_count
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** t)
    v_hat = state.v / (1.0 - state.beta2 ** t)
    params.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


class Adam:
    """Adam over a fixed, ordered set of named parameters.

    Parameters whose ``.grad`` is None after backward are skipped entirely
    (their moments do not decay), matching sparse auto-decoder updates.
    """

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(named_params)
        self.states = {name: AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
                       for name, _ in self.params}

    def set_lr(self, lr: float) -> None:
        for st in self.states.values():
            st.lr = lr

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is not None:
                adam_step(self.states[name], p, p.grad)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None
