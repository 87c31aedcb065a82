"""Define-by-run reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every primitive applied to a tensor it watches.
Calling :meth:`Tape.backward` on a scalar result sweeps the record in
reverse and returns one gradient array per watched parameter.

Tensors that are not attached to a tape are plain constants; primitives
applied only to constants are evaluated without being recorded, which is
how inference runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to a primitive."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class Tensor:
    """An immutable float64 array, optionally attached to a :class:`Tape`."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100.0

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"


class _Scatter:
    # Marker vjp for indexing: gradient is added in place into the parent buffer.
    __slots__ = ("index", "basic")

    def __init__(self, index):
        self.index = index
        self.basic = _is_basic_index(index)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(
        isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
        for i in items
    )


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as primitives execute, so the record is always in
    topological order. A tape belongs to one thread while it is being
    built and swept.
    """

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[tuple] = []
        self._shapes: list[tuple[int, ...]] = []
        self._ops: list[str] = []
        self._leaves: dict[int, str] = {}

    def __len__(self) -> int:
        return len(self._parents)

    @property
    def ops(self) -> list[str]:
        return list(self._ops)

    def watch(self, name: str, value) -> Tensor:
        """Register ``value`` as a differentiable leaf called ``name``."""
        if name in self._leaves.values():
            raise ValueError(f"parameter {name!r} is already watched on this tape")
        data = np.asarray(value, dtype=np.float64)
        if not np.isfinite(data).all():
            raise NonFiniteError(f"parameter {name!r} contains non-finite values")
        node = self._append("leaf", data.shape, (), ())
        self._leaves[node] = name
        return Tensor(data, self, node)

    def parameters(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {name: self.watch(name, value) for name, value in params.items()}

    def _append(self, op, shape, parents, vjps) -> int:
        self._parents.append(parents)
        self._vjps.append(vjps)
        self._shapes.append(shape)
        self._ops.append(op)
        return len(self._parents) - 1

    def backward(self, output: Tensor) -> dict[str, np.ndarray]:
        """Gradient of the scalar ``output`` with respect to every watched leaf."""
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if output.ndim != 0:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        top = output.node
        grads: list = [None] * (top + 1)
        owned = [False] * (top + 1)
        grads[top] = np.ones((), dtype=np.float64)
        for i in range(top, -1, -1):
            g = grads[i]
            if g is None or not self._parents[i]:
                continue
            for p, vjp in zip(self._parents[i], self._vjps[i]):
                if type(vjp) is _Scatter:
                    buf = grads[p]
                    if buf is None:
                        buf = np.zeros(self._shapes[p])
                    elif not owned[p]:
                        buf = np.array(buf, dtype=np.float64)
                    if vjp.basic:
                        buf[vjp.index] += g
                    else:
                        np.add.at(buf, vjp.index, g)
                    grads[p] = buf
                    owned[p] = True
                    continue
                gp = vjp(g)
                if grads[p] is None:
                    grads[p] = gp
                elif owned[p]:
                    grads[p] += gp
                else:
                    grads[p] = grads[p] + gp
                    owned[p] = True
            grads[i] = None
        out = {}
        for node, name in self._leaves.items():
            g = grads[node] if node <= top else None
            if g is None:
                out[name] = np.zeros(self._shapes[node])
            else:
                out[name] = np.array(np.broadcast_to(g, self._shapes[node]), dtype=np.float64)
        return out


def backward(output: Tensor) -> dict[str, np.ndarray]:
    if output.tape is None:
        raise ValueError("output is a constant; nothing was recorded")
    return output.tape.backward(output)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, value: np.ndarray, parents: Sequence[Tensor], vjps: Sequence) -> Tensor:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = None
    nodes, fns = [], []
    for p, fn in zip(parents, vjps):
        if p.tape is None:
            continue
        if tape is None:
            tape = p.tape
        elif p.tape is not tape:
            raise ValueError(f"{op}: operands belong to different tapes")
        nodes.append(p.node)
        fns.append(fn)
    if tape is None:
        return Tensor(value)
    node = tape._append(op, value.shape, tuple(nodes), tuple(fns))
    return Tensor(value, tape, node)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 (lambda g: _unbroadcast(g, sa), lambda g: -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    da, db = a.data, b.data
    return _make("mul", da * db, (a, b),
                 (lambda g: _unbroadcast(g * db, da.shape),
                  lambda g: _unbroadcast(g * da, db.shape)))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make("neg", -x.data, (x,), (lambda g: -g,))


# --- linear algebra and structure -------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy's batching and 1-D promotion rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.shape[-1] != inner_b:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        value = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None
    a1 = a.data if a.ndim > 1 else a.data[None, :]
    b1 = b.data if b.ndim > 1 else b.data[:, None]
    a_vec, b_vec = a.ndim == 1, b.ndim == 1

    def lift(g):
        if a_vec:
            g = np.expand_dims(g, -2)
        if b_vec:
            g = np.expand_dims(g, -1)
        return g

    def grad_a(g):
        ga = lift(g) @ np.swapaxes(b1, -1, -2)
        return _unbroadcast(ga, a1.shape).reshape(a.shape)

    def grad_b(g):
        gb = np.swapaxes(a1, -1, -2) @ lift(g)
        return _unbroadcast(gb, b1.shape).reshape(b.shape)

    return _make("matmul", value, (a, b), (grad_a, grad_b))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        value = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    src = x.shape
    return _make("reshape", value, (x,), (lambda g: g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), (lambda g: g.transpose(inv),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    if isinstance(index, Tensor):
        raise TypeError("index with an integer array, not a Tensor")
    return _make("getitem", x.data[index], (x,), (_Scatter(index),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no operands")
    ref = ts[0]
    ax = axis % ref.ndim
    for t in ts[1:]:
        if t.ndim != ref.ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    value = np.concatenate([t.data for t in ts], axis=ax)

    def piece(k):
        return lambda g: np.split(g, bounds, axis=ax)[k]

    return _make("concat", value, ts, [piece(k) for k in range(len(ts))])


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, _insert(t.shape, axis)) for t in ts]
    return concat(expanded, axis=axis)


def _insert(shape, axis):
    s = list(shape)
    s.insert(axis % (len(s) + 1), 1)
    return tuple(s)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    value = x.data.sum(axis=axis, keepdims=keepdims)
    src = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, src)

    return _make("sum", value, (x,), (vjp,))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


# --- elementwise unary ------------------------------------------------------

def square(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _make("square", d * d, (x,), (lambda g: 2.0 * d * g,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _make("sigmoid", y, (x,), (lambda g: g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), (lambda g: g * (1.0 - y * y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), (lambda g: g * mask,))


def leaky_relu(x, alpha: float) -> Tensor:
    """``x`` where positive, ``alpha * x`` elsewhere; slope at 0 is ``alpha``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"leaky_relu slope must lie in [0, 1], got {alpha}")
    x = as_tensor(x)
    pos = x.data > 0
    slope = np.where(pos, 1.0, alpha)
    return _make("leaky_relu", np.where(pos, x.data, alpha * x.data), (x,),
                 (lambda g: g * slope,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    y = ez / ez.sum(axis=axis, keepdims=True)
    return _make("softmax", y, (x,),
                 (lambda g: y * (g - (g * y).sum(axis=axis, keepdims=True)),))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "matmul": matmul,
    "reshape": reshape,
    "transpose": transpose,
    "getitem": getitem,
    "concat": concat,
    "stack": stack,
    "sum": sum_,
    "mean": mean,
    "square": square,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "softmax": softmax,
}


def primitive_forward(op: str, *inputs, **attrs) -> Tensor:
    """Apply the primitive named ``op``; the result is recorded if any input is."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **attrs)


# --- finite-difference oracle -----------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    h: float
    worst: tuple[str, tuple[int, ...]] | None
    per_parameter: dict[str, float] = field(default_factory=dict)
    nonfinite: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)
    n_checked: int = 0

    def summary(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        return (f"{state} max_rel_err={self.max_rel_error:.3e} tol={self.tol:g} "
                f"entries={self.n_checked} worst={self.worst}")


def finite_difference_check(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients against central differences, entry by entry.

    The relative error of an entry is ``|g - d| / max(|g|, |d|, floor)``;
    ``floor`` keeps entries whose true gradient is ~0 from dividing noise
    by noise.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    out = loss_fn(tape.parameters(params))
    analytic = tape.backward(out)

    def evaluate(values):
        return float(loss_fn({k: Tensor(v) for k, v in values.items()}).data)

    worst_err, worst = 0.0, None
    per_param, nonfinite = {}, []
    n = 0
    for name, base in params.items():
        pmax = 0.0
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            try:
                base[idx] = orig + h
                fp = evaluate(params)
                base[idx] = orig - h
                fm = evaluate(params)
            except NonFiniteError:
                fp = fm = np.nan
            finally:
                base[idx] = orig
            n += 1
            if not (np.isfinite(fp) and np.isfinite(fm)):
                nonfinite.append((name, idx))
                continue
            numeric = (fp - fm) / (2.0 * h)
            g = analytic[name][idx]
            err = abs(g - numeric) / max(abs(g), abs(numeric), floor)
            pmax = max(pmax, err)
            if err > worst_err:
                worst_err, worst = err, (name, idx)
        per_param[name] = pmax
    passed = worst_err < tol and not nonfinite
    return GradCheckReport(worst_err, passed, tol, h, worst, per_param, nonfinite, n)
