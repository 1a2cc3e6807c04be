"""Dense float64 tensors with tape-based reverse-mode autodiff, plus Adam.

Operations executed while a :class:`Tape` is active are recorded in creation
order, which is already a topological order, so ``Tape.backward`` is a single
reverse sweep.  Outside a tape the same operations run as plain numpy code
(no graph is kept), which is what evaluation uses.

Every op checks its forward value for NaN/Inf and raises
:class:`NonFiniteError` instead of letting it propagate silently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PROB_EPS = 1e-7
ZERO_NORM = 0.0

_ACTIVE: list["Tape"] = []


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def __add__(self, other):
        return op_add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return op_sub(self, other)

    def __rsub__(self, other):
        return op_sub(other, self)

    def __mul__(self, other):
        return op_mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return op_div(self, other)

    def __neg__(self):
        return op_mul(self, -1.0)

    def __matmul__(self, other):
        return op_matmul(self, other)

    def __getitem__(self, idx):
        return op_index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of the ops executed inside a ``with Tape():`` block."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def backward(self, root: Tensor) -> None:
        backward(root, self)


def backward(root: Tensor, tape: Tape) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every recorded leaf."""
    if root.data.size != 1:
        raise ValueError(f"backward() needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    root.grad = grads[id(root)]
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = pg if parent.grad is None else parent.grad + pg
            else:
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg


def _check(out: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{name} produced a non-finite value")
    return out


def _make(out: np.ndarray, name: str, parents: tuple[Tensor, ...], bwd) -> Tensor:
    t = Tensor(_check(out, name), op=name)
    if _ACTIVE and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.parents = parents
        t._backward = bwd
        _ACTIVE[-1].nodes.append(t)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from err


# -- elementwise ---------------------------------------------------------------

def op_add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def op_sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def op_mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def op_scale(v, s) -> Tensor:
    """Multiply ``v`` by the scalar (or broadcastable) ``s``."""
    return op_mul(v, s)


def op_div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data  # non-finite results are rejected by _make

    def bwd(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, "div", (a, b), bwd)


def op_relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def op_sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def op_clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), "clamp", (x,), lambda g: (g * inside,))


def op_where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` is set, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    return _make(out, "where", (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                            _unbroadcast(np.where(mask, 0.0, g), b.shape)))


# -- linear algebra and reductions ---------------------------------------------

def op_matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def op_linear(x, W, b) -> Tensor:
    """y = x @ W + b for x of shape (n, d_in)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError(f"linear: x{x.shape} W{W.shape} b{b.shape}")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(f"linear: x{x.shape} W{W.shape} b{b.shape}")
    return _make(x.data @ W.data + b.data, "linear", (x, W, b),
                 lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0)))


def op_branch_linear(h, W, b) -> Tensor:
    """Apply C independent linear maps: out[n, c] = h[n] @ W[c] + b[c].

    ``h`` is (n, K), ``W`` is (C, K, K') and ``b`` is (C, K'); the result is
    (n, C, K').
    """
    h, W, b = as_tensor(h), as_tensor(W), as_tensor(b)
    if h.data.ndim != 2 or W.data.ndim != 3 or b.data.ndim != 2:
        raise DimensionError(f"branch_linear: h{h.shape} W{W.shape} b{b.shape}")
    if h.shape[1] != W.shape[1] or W.shape[0] != b.shape[0] or W.shape[2] != b.shape[1]:
        raise DimensionError(f"branch_linear: h{h.shape} W{W.shape} b{b.shape}")
    n, K = h.shape
    C, _, Kout = W.shape
    # one GEMM against the (K, C*K') stacking of the branch matrices
    W2 = W.data.transpose(1, 0, 2).reshape(K, C * Kout)
    out = (h.data @ W2).reshape(n, C, Kout) + b.data

    def bwd(g):
        g2 = g.reshape(n, C * Kout)
        gW = (h.data.T @ g2).reshape(K, C, Kout).transpose(1, 0, 2)
        return (g2 @ W2.T, gW, g.sum(axis=0))

    return _make(out, "branch_linear", (h, W, b), bwd)


def op_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, "sum", (x,), bwd)


def op_sum_parts(parts) -> Tensor:
    """Sum (n, C, K) over the C axis by sequential left-to-right addition."""
    parts = as_tensor(parts)
    if parts.data.ndim != 3:
        raise DimensionError(f"sum_parts expects (n, C, K), got {parts.shape}")
    out = parts.data[:, 0, :].copy()
    for s in range(1, parts.shape[1]):
        out += parts.data[:, s, :]
    C = parts.shape[1]
    return _make(out, "sum_parts", (parts,),
                 lambda g: (np.repeat(g[:, None, :], C, axis=1),))


def op_mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _make(np.asarray(x.data.mean()), "mean", (x,),
                 lambda g: (np.full(x.shape, float(g) / n),))


def op_l2_norm(v, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is zero."""
    v = as_tensor(v)
    if v.data.ndim == 0:
        raise DimensionError("l2_norm needs at least a vector")
    out = np.sqrt(np.sum(v.data * v.data, axis=axis, keepdims=True))

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > ZERO_NORM, out, 1.0)
        return (np.where(out > ZERO_NORM, g * v.data / safe, 0.0),)

    res = out if keepdims else np.squeeze(out, axis=axis)
    return _make(res, "l2_norm", (v,), bwd)


def op_reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def op_index(x, idx) -> Tensor:
    """Numpy basic/fancy indexing; repeated indices accumulate in backward."""
    x = as_tensor(x)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.asarray(x.data[idx]), "index", (x,), bwd)


# -- losses -------------------------------------------------------------------

def op_bce(p, t) -> Tensor:
    """Mean over rows of the per-row summed binary cross-entropy.

    Probabilities are clamped to ``[PROB_EPS, 1 - PROB_EPS]`` before the log;
    targets may be soft but must lie in [0, 1].
    """
    p, t = as_tensor(p), as_tensor(t)
    if p.shape != t.shape:
        raise DimensionError(f"bce: p{p.shape} vs t{t.shape}")
    if np.any(t.data < 0.0) or np.any(t.data > 1.0):
        raise ValueError("bce targets must lie in [0, 1]")
    n = p.shape[0] if p.data.ndim else 1
    pc = np.clip(p.data, PROB_EPS, 1.0 - PROB_EPS)
    inside = (p.data >= PROB_EPS) & (p.data <= 1.0 - PROB_EPS)
    loss = -(t.data * np.log(pc) + (1.0 - t.data) * np.log1p(-pc))
    out = np.asarray(loss.sum() / n)

    def bwd(g):
        dp = (-t.data / pc + (1.0 - t.data) / (1.0 - pc)) * inside
        dt = -(np.log(pc) - np.log1p(-pc))
        return (g * dp / n, g * dt / n)

    return _make(out, "bce", (p, t), bwd)


def op_softmax_xent(logits, classes: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean softmax cross-entropy: sum_i w[y_i] * CE_i / n."""
    logits = as_tensor(logits)
    classes = np.asarray(classes, dtype=np.int64)
    n, k = logits.shape
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    wi = w[classes]
    out = np.asarray(-(wi * logp[rows, classes]).sum() / n)

    def bwd(g):
        d = np.exp(logp)
        d[rows, classes] -= 1.0
        return (g * d * wi[:, None] / n,)

    return _make(out, "softmax_xent", (logits,), bwd)


# -- optimisation ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float | None = None
              ) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update (no Nesterov momentum).

    Returns fresh parameter arrays and a fresh state; inputs are not mutated.
    ``lr`` overrides ``state.lr`` for this step (used by the schedule).
    """
    if state.step < 0:
        raise ValueError("Adam step counter must be non-negative")
    lr = state.lr if lr is None else lr
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"adam: grad {g.shape} vs param {p.shape} for {name!r}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)


def multistep_lr(base_lr: float, milestones: Sequence[int], epoch: int, factor: float = 10.0) -> float:
    """Learning rate after dividing by ``factor`` at every passed milestone."""
    passed = sum(1 for m in milestones if epoch >= m)
    return base_lr / factor ** passed
