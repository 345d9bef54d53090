"""Small reverse-mode autodiff over numpy arrays.

Every op builds a node holding its forward value and a closure that pushes the
upstream gradient into its parents. Shapes are explicit: apart from the bias
add in :func:`linear`, nothing broadcasts.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import NumericsError, ShapeError, StateError

DTYPE = np.float64


def _check_finite(arr: np.ndarray, where: str) -> None:
    # NaN/Inf anywhere poison the sum; cheaper than an elementwise isfinite
    if not np.isfinite(np.add.reduce(arr, axis=None)) and not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite value produced by {where}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        _check_finite(g, f"backward into {self.op or 'leaf'}")
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # operator sugar; operands must share a shape (python scalars allowed)
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ShapeError("only division by a python scalar is supported")
        return scale(self, 1.0 / other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _as_tensor(a)
        return _node(a.data + b, (a,), lambda g: a._accum(g), "add_const")
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")

    def backward(g):
        a._accum(g)
        b._accum(g)

    return _node(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _node(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: a._accum(g * c), "scale")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: x._accum(g * (1.0 - y * y)), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: x._accum(g * mask), "relu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _node(y, (x,), lambda g: x._accum(g * y), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericsError("log of a non-positive value")
    return _node(np.log(x.data), (x,), lambda g: x._accum(g / x.data), "log")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise NumericsError("sqrt of a negative value")
    y = np.sqrt(x.data)

    def backward(g):
        with np.errstate(divide="ignore"):
            x._accum(g * 0.5 / y)

    return _node(y, (x,), backward, "sqrt")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    y = np.clip(x.data, lo, hi)
    keep = y == x.data
    return _node(y, (x,), lambda g: x._accum(g * keep), "clamp")


# ------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with x of shape (N, in), w (in, out), b (out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not fit weight {w.shape}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            w._accum(x.data.T @ g)
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=0))

    return _node(y, parents, backward, "linear")


# -------------------------------------------------------------- reductions

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _node(np.asarray(x.data.sum()), (x,), lambda g: x._accum(np.broadcast_to(g, x.shape)), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(
        np.asarray(x.data.mean()), (x,), lambda g: x._accum(np.broadcast_to(g / n, x.shape)), "mean"
    )


def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        d = (2.0 * g / n) * diff
        a._accum(d)
        b._accum(-d)

    return _node(np.asarray(np.mean(diff * diff)), (a, b), backward, "mse")


def segment_mean(x: Tensor, lengths: Iterable[int]) -> Tensor:
    """Average consecutive row blocks of ``x``; block i has ``lengths[i]`` rows."""
    lengths = np.asarray(list(lengths), dtype=np.int64)
    if x.data.ndim != 2 or lengths.sum() != x.shape[0] or np.any(lengths < 1):
        raise ShapeError(f"segment_mean: lengths {lengths.tolist()} do not tile {x.shape}")
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    y = np.add.reduceat(x.data, starts, axis=0) / lengths[:, None]

    def backward(g):
        x._accum(np.repeat(g / lengths[:, None], lengths, axis=0))

    return _node(y, (x,), backward, "segment_mean")


# ------------------------------------------------------------ distributions

def _lse(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    y = np.exp(x.data - _lse(x.data))

    def backward(g):
        x._accum(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _node(y, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    y = x.data - _lse(x.data)
    p = np.exp(y)

    def backward(g):
        x._accum(g - p * g.sum(axis=-1, keepdims=True))

    return _node(y, (x,), backward, "log_softmax")


def cross_entropy_from_probs(p, log_q: Tensor) -> Tensor:
    """``-sum(p * log_q)`` over the last axis, averaged over rows for 2-D input."""
    p, log_q = _as_tensor(p), _as_tensor(log_q)
    _same_shape(p, log_q, "cross_entropy_from_probs")
    rows = 1 if p.data.ndim == 1 else p.shape[0]
    val = -(p.data * log_q.data).sum() / rows

    def backward(g):
        p._accum(-g * log_q.data / rows)
        log_q._accum(-g * p.data / rows)

    return _node(np.asarray(val), (p, log_q), backward, "cross_entropy")


def diag_gaussian_kl(mu1: Tensor, log_sigma1: Tensor, mu2: Tensor, log_sigma2: Tensor) -> Tensor:
    """KL(N(mu1, s1^2) || N(mu2, s2^2)) summed over the last axis.

    Scales are passed as log standard deviations. Returns one value per row
    for 2-D input, a scalar for 1-D input.
    """
    for t in (log_sigma1, mu2, log_sigma2):
        _same_shape(mu1, t, "diag_gaussian_kl")
    var1 = np.exp(2.0 * log_sigma1.data)
    inv_var2 = np.exp(-2.0 * log_sigma2.data)
    dmu = mu1.data - mu2.data
    kl = log_sigma2.data - log_sigma1.data + 0.5 * (var1 + dmu * dmu) * inv_var2 - 0.5
    out = kl.sum(axis=-1)

    def backward(g):
        g = np.expand_dims(g, -1)
        mu1._accum(g * dmu * inv_var2)
        mu2._accum(-g * dmu * inv_var2)
        log_sigma1._accum(g * (var1 * inv_var2 - 1.0))
        log_sigma2._accum(g * (1.0 - (var1 + dmu * dmu) * inv_var2))

    return _node(np.asarray(out), (mu1, log_sigma1, mu2, log_sigma2), backward, "gaussian_kl")


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise NumericsError("l2_normalize of a zero vector")
    y = x.data / norm

    def backward(g):
        x._accum((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm)

    return _node(y, (x,), backward, "l2_normalize")


# ------------------------------------------------------------------ layout

def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis % tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != tensors[0].data.ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.data.ndim) if i != ax
        ):
            raise ShapeError(f"concat: {t.shape} does not line up with {tensors[0].shape}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, cuts, axis=ax)):
            t._accum(piece)

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward, "concat")


def slice(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:  # noqa: A001
    ax = axis % x.data.ndim
    if not 0 <= start < stop <= x.shape[ax]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis of size {x.shape[ax]}")
    idx = tuple(np.s_[start:stop] if i == ax else np.s_[:] for i in range(x.data.ndim))

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        x._accum(full)

    return _node(x.data[idx].copy(), (x,), backward, "slice")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _node(x.data.T.copy(), (x,), lambda g: x._accum(g.T), "transpose")


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]``; repeated indices accumulate their gradients."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= x.shape[0])):
        raise ShapeError(f"take_rows: bad index for {x.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accum(full)

    return _node(x.data[index], (x,), backward, "take_rows")


# ------------------------------------------------------------- parameters

class ParamSet:
    """Named parameter tensors with a per-parameter trainable flag.

    Frozen parameters are kept out of the graph (``requires_grad=False``), so
    they never accumulate a gradient and no optimizer can move them.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise StateError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE, copy=True), requires_grad=trainable)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = flag
        self._params[name].requires_grad = flag
        if not flag:
            self._params[name].grad = None

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def subset(self, prefixes: Iterable[str]) -> "ParamSet":
        """A view sharing tensors whose names start with any of ``prefixes``."""
        prefixes = tuple(prefixes)
        out = ParamSet()
        for name, t in self._params.items():
            if name.startswith(prefixes):
                out._params[name] = t
                out._trainable[name] = self._trainable[name]
        return out

    def copy(self, trainable: bool | None = None) -> "ParamSet":
        out = ParamSet()
        for name, t in self._params.items():
            flag = self._trainable[name] if trainable is None else trainable
            out.add(name, t.data, trainable=flag)
        return out

    def merged(self, other: "ParamSet") -> "ParamSet":
        out = self.subset(("",))
        for name, t in other.items():
            if name in out:
                raise StateError(f"duplicate parameter name {name!r}")
            out._params[name] = t
            out._trainable[name] = other._trainable[name]
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}


def _check_schema(target: ParamSet, source: ParamSet) -> None:
    if target.names() != source.names():
        raise StateError("parameter sets have different names")
    for name in target:
        if target[name].shape != source[name].shape:
            raise StateError(f"shape mismatch for {name!r}: {target[name].shape} vs {source[name].shape}")


def ema_update(target: ParamSet, source: ParamSet, m: float) -> ParamSet:
    """In place: ``target <- m * target + (1 - m) * source`` for every parameter."""
    if not 0.0 <= m <= 1.0:
        raise StateError(f"EMA momentum must lie in [0, 1], got {m}")
    _check_schema(target, source)
    for name, t in target.items():
        t.data = m * t.data + (1.0 - m) * source[name].data
    return target


# --------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # per-parameter step counts so that parameters unfrozen late start with
    # a proper bias correction
    t: dict[str, int] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet) -> "AdamState":
        st = cls()
        for name, p in params.items():
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
            st.t[name] = 0
        return st


def adam_step(
    params: ParamSet,
    grads: Mapping[str, np.ndarray] | None,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update. ``grads`` defaults to each parameter's ``.grad``.

    Frozen parameters and parameters without a gradient are left untouched.
    """
    if set(state.m) != set(params.names()):
        raise StateError("optimizer state does not match the parameter set")
    for name, p in params.items():
        if not params.is_trainable(name):
            continue
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise StateError(f"gradient/state shape mismatch for {name!r}")
        state.t[name] += 1
        t = state.t[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / (1.0 - beta1**t)
        v_hat = state.v[name] / (1.0 - beta2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


# ------------------------------------------------------------- grad check

def grad_check(scalar_fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``scalar_fn`` must rebuild the graph from the current parameter values on
    each call. Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params.values() if isinstance(params, Mapping) else params)
    for p in params:
        p.grad = None
    scalar_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(scalar_fn().data)
            flat[i] = orig - h
            down = float(scalar_fn().data)
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            ai = a.reshape(-1)[i]
            err = abs(ai - num) / max(abs(ai), abs(num), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
