"""Minimal tape-based reverse-mode differentiation over dense float64 arrays.

The op set is deliberately small: exactly what a per-pixel softmax model,
a partial cross-entropy, and differentiable size/centroid constraints need.
Forward values are computed eagerly as the tape is built; ``backward`` then
runs one reverse accumulation pass over the recorded DAG.

A tape is single-threaded; distinct tapes are independent. Values are
immutable after construction (callers must not mutate arrays handed to
``leaf``/``constant`` while the tape is alive).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to the requested op."""


class DomainError(ValueError):
    """An op left the domain where its value/derivative is defined (checked mode)."""


OP_KINDS = frozenset(
    {
        "leaf",
        "constant",
        "add",
        "sub",
        "mul",
        "div",
        "exp",
        "log",
        "relu",
        "sum",
        "matmul",
        "index_select",
        "scalar_mul",
        "softmax_rows",
    }
)


@dataclass(frozen=True)
class Var:
    """Opaque handle to one node of a tape. Valid only for that tape."""

    tape: "Tape"
    index: int

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.index]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tape._values[self.index].shape

    def item(self) -> float:
        return float(self.value)

    # Arithmetic sugar. Var op Var records the elementwise op; Var op float
    # lifts the float to scalar_mul / a constant of matching shape.
    def __add__(self, other: "Var | float") -> "Var":
        return self.tape.apply("add", self, self.tape._lift(other, self.shape))

    def __radd__(self, other: float) -> "Var":
        return self.tape.apply("add", self.tape._lift(other, self.shape), self)

    def __sub__(self, other: "Var | float") -> "Var":
        return self.tape.apply("sub", self, self.tape._lift(other, self.shape))

    def __rsub__(self, other: float) -> "Var":
        return self.tape.apply("sub", self.tape._lift(other, self.shape), self)

    def __mul__(self, other: "Var | float") -> "Var":
        if isinstance(other, Var):
            return self.tape.apply("mul", self, other)
        return self.tape.apply("scalar_mul", self, scalar=float(other))

    def __rmul__(self, other: float) -> "Var":
        return self.__mul__(other)

    def __truediv__(self, other: "Var | float") -> "Var":
        if isinstance(other, Var):
            return self.tape.apply("div", self, other)
        return self.tape.apply("scalar_mul", self, scalar=1.0 / float(other))

    def __neg__(self) -> "Var":
        return self.tape.apply("scalar_mul", self, scalar=-1.0)

    def exp(self) -> "Var":
        return self.tape.apply("exp", self)

    def log(self) -> "Var":
        return self.tape.apply("log", self)

    def relu(self) -> "Var":
        return self.tape.apply("relu", self)

    def sum(self) -> "Var":
        return self.tape.apply("sum", self)


class _Node:
    __slots__ = ("kind", "parents", "attrs", "needs_grad")

    def __init__(self, kind: str, parents: tuple[int, ...], attrs: dict, needs_grad: bool):
        self.kind = kind
        self.parents = parents
        self.attrs = attrs
        self.needs_grad = needs_grad


def as_tensor(data, checked: bool = True) -> np.ndarray:
    """Coerce to a C-contiguous float64 array; reject NaN/Inf in checked mode."""
    arr = np.asarray(data, dtype=np.float64, order="C")
    if checked and not np.all(np.isfinite(arr)):
        raise DomainError("tensor contains NaN or Inf")
    return arr


class Tape:
    """Recorder for one forward evaluation plus its reverse pass.

    checked=True (the default, and what the tests use) validates finiteness
    and op domains as the tape is built; benchmark loops pass checked=False
    and guard the final loss/gradients themselves.
    """

    def __init__(self, checked: bool = True):
        self.checked = checked
        self._nodes: list[_Node] = []
        self._values: list[np.ndarray] = []
        self._leaves: list[int] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, value) -> Var:
        """Record a differentiable input; backward reports its gradient."""
        v = self._append(_Node("leaf", (), {}, True), as_tensor(value, self.checked))
        self._leaves.append(v.index)
        return v

    def constant(self, value) -> Var:
        """Record a non-differentiable input (data, labels, coordinates)."""
        return self._append(_Node("constant", (), {}, False), as_tensor(value, self.checked))

    def scalar(self, value: float) -> Var:
        return self.constant(np.float64(value))

    def _lift(self, other, shape: tuple[int, ...]) -> Var:
        if isinstance(other, Var):
            return other
        return self.constant(np.full(shape, float(other)))

    def _append(self, node: _Node, value: np.ndarray) -> Var:
        self._nodes.append(node)
        self._values.append(value)
        return Var(self, len(self._nodes) - 1)

    def apply(self, kind: str, *inputs: Var, **attrs) -> Var:
        """Append one op node, computing its forward value eagerly."""
        if kind not in OP_KINDS or kind in ("leaf", "constant"):
            raise ValueError(f"unknown op kind {kind!r}")
        for x in inputs:
            if x.tape is not self:
                raise ValueError("input Var belongs to a different tape")
        values = [x.value for x in inputs]
        # unchecked (benchmark) mode lets NaN/Inf propagate; the training
        # loops wrap epochs in np.errstate and guard the final loss/grads
        out = _FORWARD[kind](self, values, attrs)
        if self.checked and not np.all(np.isfinite(out)):
            raise DomainError(f"op {kind!r} produced NaN/Inf")
        needs = any(self._nodes[x.index].needs_grad for x in inputs)
        return self._append(_Node(kind, tuple(x.index for x in inputs), attrs, needs), out)

    def backward(self, output: Var) -> dict[Var, np.ndarray]:
        """Reverse-accumulate d(output)/d(leaf) for every leaf of this tape.

        ``output`` must be scalar. Gradients of leaves the output does not
        depend on are zero arrays of the leaf's shape.
        """
        if output.tape is not self:
            raise ValueError("output Var belongs to a different tape")
        if output.value.shape != ():
            raise ShapeError(f"backward needs a scalar output, got shape {output.value.shape}")
        adjoint: dict[int, np.ndarray] = {output.index: np.ones(())}
        for i in range(output.index, -1, -1):
            g = adjoint.pop(i, None)
            if g is None:
                continue
            node = self._nodes[i]
            if not node.parents:
                if node.kind == "leaf":
                    adjoint[i] = g  # keep for the result map
                continue
            parent_grads = _BACKWARD[node.kind](
                self, [self._values[p] for p in node.parents], self._values[i], g, node.attrs
            )
            for p, pg in zip(node.parents, parent_grads):
                if not self._nodes[p].needs_grad:
                    continue
                if p in adjoint:
                    adjoint[p] = adjoint[p] + pg
                else:
                    adjoint[p] = pg
        out: dict[Var, np.ndarray] = {}
        for idx in self._leaves:
            g = adjoint.get(idx)
            if g is None:
                g = np.zeros_like(self._values[idx])
            out[Var(self, idx)] = np.asarray(g, dtype=np.float64)
        return out


def backward(output: Var) -> dict[Var, np.ndarray]:
    return output.tape.backward(output)


# ---------------------------------------------------------------------------
# forward rules


def _want_same_shape(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"op {kind!r}: operand shapes {a.shape} and {b.shape} differ")


def _fwd_addsub(kind, sign):
    def run(tape, values, attrs):
        a, b = values
        # one broadcast form is allowed: (n, k) +- (k,) row bias
        if a.shape != b.shape and not (a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]):
            raise ShapeError(f"op {kind!r}: operand shapes {a.shape} and {b.shape} differ")
        return a + sign * b

    return run


def _fwd_mul(tape, values, attrs):
    _want_same_shape("mul", *values)
    return values[0] * values[1]


def _fwd_div(tape, values, attrs):
    _want_same_shape("div", *values)
    a, b = values
    if tape.checked and np.any(b == 0.0):
        raise DomainError("div by zero")
    return a / b


def _fwd_exp(tape, values, attrs):
    return np.exp(values[0])


def _fwd_log(tape, values, attrs):
    x = values[0]
    if tape.checked and np.any(x <= 0.0):
        raise DomainError("log of non-positive value")
    return np.log(x)


def _fwd_relu(tape, values, attrs):
    return np.maximum(values[0], 0.0)


def _fwd_sum(tape, values, attrs):
    return np.asarray(values[0].sum())


def _fwd_matmul(tape, values, attrs):
    a, b = values
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"op 'matmul': shapes {a.shape} and {b.shape} do not chain")
    return a @ b


def _fwd_index_select(tape, values, attrs):
    x = values[0]
    axis = attrs["axis"]
    indices = np.asarray(attrs["indices"], dtype=np.intp)
    if axis not in (0, 1) or axis >= x.ndim:
        raise ShapeError(f"op 'index_select': axis {axis} invalid for shape {x.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[axis]):
        raise IndexError(f"index_select indices out of range for shape {x.shape} axis {axis}")
    return np.take(x, indices, axis=axis)


def _fwd_scalar_mul(tape, values, attrs):
    return values[0] * attrs["scalar"]


def _fwd_softmax_rows(tape, values, attrs):
    x = values[0]
    if x.ndim != 2:
        raise ShapeError(f"op 'softmax_rows': rank-2 input required, got shape {x.shape}")
    z = attrs.get("temperature", 1.0) * x
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


_FORWARD: dict[str, Callable] = {
    "add": _fwd_addsub("add", 1.0),
    "sub": _fwd_addsub("sub", -1.0),
    "mul": _fwd_mul,
    "div": _fwd_div,
    "exp": _fwd_exp,
    "log": _fwd_log,
    "relu": _fwd_relu,
    "sum": _fwd_sum,
    "matmul": _fwd_matmul,
    "index_select": _fwd_index_select,
    "scalar_mul": _fwd_scalar_mul,
    "softmax_rows": _fwd_softmax_rows,
}


# ---------------------------------------------------------------------------
# backward rules: (tape, parent_values, out_value, out_grad, attrs) -> grads


def _bwd_addsub(sign):
    def run(tape, parents, out, g, attrs):
        a, b = parents
        gb = sign * g
        if b.shape != a.shape:
            gb = gb.sum(axis=0)
        return g, gb

    return run


def _bwd_mul(tape, parents, out, g, attrs):
    a, b = parents
    return g * b, g * a


def _bwd_div(tape, parents, out, g, attrs):
    a, b = parents
    return g / b, -g * a / (b * b)


def _bwd_exp(tape, parents, out, g, attrs):
    return (g * out,)


def _bwd_log(tape, parents, out, g, attrs):
    return (g / parents[0],)


def _bwd_relu(tape, parents, out, g, attrs):
    return (g * (parents[0] > 0.0),)


def _bwd_sum(tape, parents, out, g, attrs):
    return (np.broadcast_to(g, parents[0].shape),)


def _bwd_matmul(tape, parents, out, g, attrs):
    a, b = parents
    return g @ b.T, a.T @ g


def _bwd_index_select(tape, parents, out, g, attrs):
    x = parents[0]
    axis = attrs["axis"]
    indices = np.asarray(attrs["indices"], dtype=np.intp)
    gx = np.zeros_like(x)
    if axis == 0:
        np.add.at(gx, indices, g)
    else:
        np.add.at(gx.T, indices, np.ascontiguousarray(g.T))
    return (gx,)


def _bwd_scalar_mul(tape, parents, out, g, attrs):
    return (g * attrs["scalar"],)


def _bwd_softmax_rows(tape, parents, out, g, attrs):
    temperature = attrs.get("temperature", 1.0)
    inner = (g * out).sum(axis=1, keepdims=True)
    return (temperature * out * (g - inner),)


_BACKWARD: dict[str, Callable] = {
    "add": _bwd_addsub(1.0),
    "sub": _bwd_addsub(-1.0),
    "mul": _bwd_mul,
    "div": _bwd_div,
    "exp": _bwd_exp,
    "log": _bwd_log,
    "relu": _bwd_relu,
    "sum": _bwd_sum,
    "matmul": _bwd_matmul,
    "index_select": _bwd_index_select,
    "scalar_mul": _bwd_scalar_mul,
    "softmax_rows": _bwd_softmax_rows,
}


# ---------------------------------------------------------------------------
# convenience op constructors


def matmul(a: Var, b: Var) -> Var:
    return a.tape.apply("matmul", a, b)


def index_select(x: Var, axis: int, indices: Sequence[int]) -> Var:
    return x.tape.apply("index_select", x, axis=axis, indices=tuple(int(i) for i in indices))


def softmax_rows(x: Var, temperature: float = 1.0) -> Var:
    return x.tape.apply("softmax_rows", x, temperature=float(temperature))


def grad_check(f: Callable[[Var], Var], point, step: float = 1e-6) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` receives a leaf Var on a fresh tape and must return a scalar Var
    built on the same tape. Returns the max over coordinates of
    |analytic - numeric| / max(1, |analytic|).
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    point = as_tensor(point)

    def value_at(p: np.ndarray) -> float:
        tape = Tape()
        return float(f(tape.leaf(p)).value)

    tape = Tape()
    x = tape.leaf(point)
    out = f(x)
    if out.value.shape != ():
        raise ShapeError("grad_check requires a scalar-valued program")
    analytic = tape.backward(out)[x]

    numeric = np.zeros_like(point)
    flat = numeric.reshape(-1)
    base = point.reshape(-1)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + step
        hi = value_at(bumped.reshape(point.shape))
        bumped[i] = base[i] - step
        lo = value_at(bumped.reshape(point.shape))
        flat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
