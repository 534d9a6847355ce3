"""Minimal dense-tensor neural core: reverse-mode autodiff over float64
numpy arrays, the layers used by the policy and probe heads, losses, Adam,
and a finite-difference gradient checker.

Design constraints:
- training math is double precision so gradient checks are tight;
- every operation validates finiteness of its result (NaN/Inf raises
  NumericError immediately rather than poisoning a run);
- the graph is a plain tape built by closures; backward() does an
  iterative topological sort, so deep BPTT unrolls do not hit the
  recursion limit.

Gradients accumulate into ``Tensor.grad`` for every node with
``requires_grad`` (parameters are the usual leaves). ``no_grad()``
disables taping for rollouts and numeric probing.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError, ShapeError, UsageError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (forward-only math)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")
    return arr


class Tensor:
    """A float64 array plus the tape hooks needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={self.grad is not None})"

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    # -- graph construction -------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar w.r.t. every graph node."""
        if self.data.size != 1:
            raise UsageError(f"backward() requires a scalar, got shape {self.shape}")
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), _const(-1.0)))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, _const(-1.0)))

    def __neg__(self):
        return mul(self, _const(-1.0))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)

    def reshape(self, *shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _const(x: float) -> Tensor:
    return Tensor(np.float64(x))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, what: str) -> Tensor:
    """Wrap an op result; tape it only when grad mode is on and needed."""
    _check_finite(data, what)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitives ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} @ {b.data.shape}")

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - y * y))

    return _make(y, (a,), backward, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
                 np.exp(a.data) / (1.0 + np.exp(a.data)))

    def backward(g):
        _accum(a, g * y * (1.0 - y))

    return _make(y, (a,), backward, "sigmoid")


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0))

    return _make(y, (a,), backward, "relu")


def texp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)

    def backward(g):
        _accum(a, g * y)

    return _make(y, (a,), backward, "exp")


def tlog(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive input")
    y = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(y, (a,), backward, "log")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(np.asarray(y), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), _const(1.0 / n))


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def _slice(a: Tensor, key) -> Tensor:
    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            _accum(a, full)

    return _make(np.ascontiguousarray(a.data[key]), (a,), backward, "slice")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {a.data.shape}")

    def backward(g):
        _accum(a, g.T)

    return _make(np.ascontiguousarray(a.data.T), (a,), backward, "transpose")


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    datas = [p.data for p in parts]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _make(np.concatenate(datas, axis=axis), tuple(parts), backward, "concat")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    y = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        _accum(a, g * inside)

    return _make(y, (a,), backward, "clip")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data <= b.data

    def backward(g):
        _accum(a, _unbroadcast(g * take_a, a.data.shape))
        _accum(b, _unbroadcast(g * (~take_a), b.data.shape))

    return _make(np.minimum(a.data, b.data), (a, b), backward, "minimum")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        _accum(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _make(y, (a,), backward, "log_softmax")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return texp(log_softmax(a, axis=axis))


def gather(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one column per row of a 2D tensor: out[i] = a[i, idx[i]]."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.data.shape[0],):
        raise ShapeError(f"gather expects (B, A) and (B,), got {a.data.shape} and {idx.shape}")
    rows = np.arange(a.data.shape[0])

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[rows, idx] = g
            _accum(a, full)

    return _make(a.data[rows, idx], (a,), backward, "gather")


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row-select from an embedding table; ids may be any integer shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding ids out of range for table {table.data.shape}: "
            f"[{ids.min()}, {ids.max()}]"
        )

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            _accum(table, full)

    return _make(table.data[ids], (table,), backward, "embedding_lookup")


# -- layers -------------------------------------------------------------------


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine layer: x @ weights + bias."""
    if x.data.shape[-1] != weights.data.shape[0]:
        raise ShapeError(f"dense shapes incompatible: {x.data.shape} @ {weights.data.shape}")
    return add(matmul(x, weights), bias)


@dataclass
class LstmState:
    """Recurrent state pair; ``h`` is the probed hidden output."""

    h: Tensor
    c: Tensor

    @property
    def width(self) -> int:
        return self.h.data.shape[-1]

    def detach(self) -> "LstmState":
        return LstmState(self.h.detach(), self.c.detach())


@dataclass
class LstmCellParams:
    w_ih: Tensor  # (input, 4*hidden), gate order i, f, g, o
    w_hh: Tensor  # (hidden, 4*hidden)
    b: Tensor  # (4*hidden,)


def lstm_cell(x: Tensor, state: LstmState, params: LstmCellParams) -> tuple[Tensor, LstmState]:
    """One LSTM step. Returns (output, new state); output is the new h."""
    hidden = state.width
    gates = add(add(matmul(x, params.w_ih), matmul(state.h, params.w_hh)), params.b)
    i = sigmoid(gates[:, 0 * hidden:1 * hidden])
    f = sigmoid(gates[:, 1 * hidden:2 * hidden])
    g = tanh(gates[:, 2 * hidden:3 * hidden])
    o = sigmoid(gates[:, 3 * hidden:4 * hidden])
    c_new = add(mul(f, state.c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, LstmState(h_new, c_new)


def zero_state(batch: int, hidden: int) -> LstmState:
    return LstmState(Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden))))


# -- losses -------------------------------------------------------------------

_BCE_EPS = 1e-7


def soft_binary_cross_entropy(pred: Tensor, target, reduction: str = "mean") -> Tensor:
    """Cross entropy against soft targets in [0, 1].

    pred is clamped to [1e-7, 1 - 1e-7]; the loss is minimized (not zero)
    at pred == target, where it equals the target entropy.
    """
    t = np.asarray(target, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError("cross entropy target outside [0, 1]")
    p = clip(pred, _BCE_EPS, 1.0 - _BCE_EPS)
    tt = Tensor(t)
    one = _const(1.0)
    loss = -(tt * tlog(p) + (one - tt) * tlog(one - p))
    if reduction == "mean":
        return tmean(loss)
    if reduction == "none":
        return loss
    raise UsageError(f"unknown reduction {reduction!r}")


def mean_squared_error(pred: Tensor, target, reduction: str = "mean") -> Tensor:
    t = Tensor(np.asarray(target, dtype=np.float64))
    d = pred - t
    sq = mul(d, d)
    if reduction == "mean":
        return tmean(sq)
    if reduction == "none":
        return sq
    raise UsageError(f"unknown reduction {reduction!r}")


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter moment estimates plus shared step counter."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = None
    v: dict = None

    def __post_init__(self):
        if self.m is None:
            self.m = {}
        if self.v is None:
            self.v = {}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Standard Adam update, in place on params. Deterministic."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
        if g.shape != params[name].data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter {name} "
                f"shape {params[name].data.shape}"
            )
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class Adam:
    """Convenience wrapper owning the params dict and its AdamState."""

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# -- gradient checking --------------------------------------------------------


@dataclass
class GradCheckReport:
    name: str
    max_relative_error: float
    passed: bool
    checked: int
    worst_param: str = ""

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"{status}  {self.name}: max_rel_err={self.max_relative_error:.3e} "
                f"over {self.checked} parameters ({self.worst_param})")


def grad_check(fn, params: dict[str, Tensor], eps: float = 1e-5,
               tolerance: float = 1e-6, name: str = "fragment") -> GradCheckReport:
    """Compare reverse-mode gradients of the scalar fn() against central
    finite differences, parameter-wise.

    fn must rebuild its graph from the live params dict on every call.
    An empty params dict passes vacuously.
    """
    n_params = sum(p.data.size for p in params.values())
    if n_params > 10_000:
        raise UsageError(f"grad_check limited to 1e4 parameters, got {n_params}")
    if n_params == 0:
        return GradCheckReport(name, 0.0, True, 0)

    for p in params.values():
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    worst = 0.0
    worst_param = ""
    for key, p in params.items():
        flat = p.data.reshape(-1)
        ana = analytic[key].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                f_plus = float(fn().data)
            flat[i] = orig - eps
            with no_grad():
                f_minus = float(fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(numeric), abs(ana[i]), 1e-3)
            rel = abs(numeric - ana[i]) / denom
            if rel > worst:
                worst = rel
                worst_param = f"{key}[{i}]"
    return GradCheckReport(name, worst, worst <= tolerance, n_params, worst_param)
