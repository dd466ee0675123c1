"""Dense tensors with a dynamically recorded reverse-mode differentiation graph.

A ``Tensor`` wraps a contiguous row-major numpy buffer (float32 or float64).
Differentiable operations record an ``Op`` node on their output; the graph is
therefore materialized implicitly through ``Tensor.op`` back-references and is
linearized by a topological sort when ``backward`` runs.  Gradients accumulate
additively into ``Tensor.grad`` and must be zeroed explicitly between steps.

Once a tensor is consumed by a recorded operation its value buffer is frozen
(numpy ``writeable`` flag cleared), so no later step -- including backward --
can alias-modify a forward value.

Broadcasting is deliberately limited to scalar-vs-tensor; all tensor-vs-tensor
elementwise operations require identical shapes (a 0-d tensor counts as a
scalar).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DomainError, ParameterError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}
_NP_TO_TAG = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class Rng:
    """Deterministic random source: numpy PCG64 seeded with a 64-bit integer.

    The generator algorithm is pinned to PCG64 so a given seed yields the same
    draw sequence on every platform.  Child streams derived via ``spawn`` are
    keyed on (seed, key) through numpy's SeedSequence.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, key: int) -> "Rng":
        child = np.random.SeedSequence((self.seed, int(key)))
        return Rng(int(child.generate_state(1, np.uint64)[0]))

    def uniform(self, shape, lo=0.0, hi=1.0, dtype: str = "f32") -> np.ndarray:
        return self._gen.uniform(lo, hi, size=shape).astype(DTYPES[dtype])

    def normal(self, shape, std=1.0, dtype: str = "f32") -> np.ndarray:
        return (self._gen.standard_normal(size=shape) * std).astype(DTYPES[dtype])

    def integers(self, lo: int, hi: int, shape=None):
        out = self._gen.integers(lo, hi, size=shape)
        return out if shape is not None else int(out)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


class Op:
    """One recorded differentiable operation (a graph node).

    ``inputs`` holds the operand tensors in call order; ``backward`` maps the
    upstream gradient to one gradient array per input (``None`` where the
    operand needs none).
    """

    def __init__(self, inputs):
        self.inputs = tuple(inputs)

    def backward(self, grad: np.ndarray):
        raise NotImplementedError


class Tensor:
    """N-dimensional numeric array participating in the differentiation graph."""

    def __init__(self, values: np.ndarray, requires_grad: bool = False, op: Op | None = None):
        values = np.asarray(values, order="C")  # ascontiguousarray would promote 0-d to 1-d
        if values.dtype not in _NP_TO_TAG:
            raise ContractError(f"tensor dtype must be float32 or float64, got {values.dtype}")
        self.values = values
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def dtype(self) -> str:
        return _NP_TO_TAG[self.values.dtype]

    @property
    def size(self) -> int:
        return self.values.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if g.shape != self.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.shape}")
        if self.grad is None:
            self.grad = g.astype(self.values.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Populate ``grad`` on every requires_grad ancestor of this scalar."""
        if self.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        self.accumulate_grad(np.ones_like(self.values))
        for t in order:
            if t.grad is None:
                continue
            for inp, g in zip(t.op.inputs, t.op.backward(t.grad)):
                if g is not None and inp.requires_grad:
                    inp.accumulate_grad(g)

    # operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return mul(power(self, -1.0), other)

    def __pow__(self, other):
        return power(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axes=None):
        return reduce_sum(self, axes)

    def mean(self, axes=None):
        return reduce_mean(self, axes)

    def max(self, axes=None):
        return reduce_max(self, axes)


def tensor(data, dtype: str = "f32", requires_grad: bool = False) -> Tensor:
    """Build a tensor from array-like data, casting to the requested dtype."""
    if dtype not in DTYPES:
        raise ParameterError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
    return Tensor(np.asarray(data, dtype=DTYPES[dtype]), requires_grad=requires_grad)


def _toposort(root: Tensor) -> list[Tensor]:
    """Op-producing tensors reachable from root, in reverse topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t.op is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t.op.inputs:
            stack.append((inp, False))
    order.reverse()
    return order


def _freeze(t: Tensor):
    if t.values.flags.writeable:
        t.values.flags.writeable = False


def record(values: np.ndarray, inputs, op_cls, *ctx) -> Tensor:
    """Wrap ``values`` in a tensor, recording ``op_cls`` if any input needs grad."""
    if any(t.requires_grad for t in inputs):
        for t in inputs:
            _freeze(t)
        return Tensor(values, requires_grad=True, op=op_cls(inputs, *ctx))
    return Tensor(values)


def _split_operand(a: Tensor, b):
    """Enforce the scalar-or-identical-shape contract; returns (tensor_b, scalar_b)."""
    if isinstance(b, Tensor):
        if b.values.dtype != a.values.dtype:
            raise ContractError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
        if b.shape != a.shape and b.shape != ():
            raise ShapeError(f"elementwise operands must match: {a.shape} vs {b.shape}")
        return b, None
    if isinstance(b, (int, float, np.floating, np.integer)):
        return None, float(b)
    raise ContractError(f"unsupported operand type {type(b).__name__}")


# -- elementwise ops -------------------------------------------------------


class _BinaryOp(Op):
    def _fit(self, g: np.ndarray, operand: Tensor):
        # A 0-d operand absorbs the full sum of the upstream gradient.
        if operand.shape == () and g.shape != ():
            return np.asarray(g.sum(), dtype=operand.values.dtype)
        return g


class AddOp(_BinaryOp):
    def backward(self, grad):
        return self._fit(grad, self.inputs[0]), self._fit(grad, self.inputs[1])


class SubOp(_BinaryOp):
    def backward(self, grad):
        return self._fit(grad, self.inputs[0]), self._fit(-grad, self.inputs[1])


class MulOp(_BinaryOp):
    def backward(self, grad):
        a, b = self.inputs
        return self._fit(grad * b.values, a), self._fit(grad * a.values, b)


class DivOp(_BinaryOp):
    def backward(self, grad):
        a, b = self.inputs
        ga = grad / b.values
        gb = -grad * a.values / (b.values * b.values)
        return self._fit(ga, a), self._fit(gb, b)


class PowOp(_BinaryOp):
    def __init__(self, inputs, out):
        super().__init__(inputs)
        self.out = out

    def backward(self, grad):
        a, b = self.inputs
        ga = grad * b.values * np.power(a.values, b.values - 1.0)
        gb = None
        if b.requires_grad:
            if np.any(a.values <= 0):
                raise DomainError("pow exponent gradient needs a strictly positive base")
            gb = self._fit(grad * self.out * np.log(a.values), b)
        return self._fit(ga, a), gb


class _ShiftScalarOp(Op):  # x + c and x - c
    def backward(self, grad):
        return (grad,)


class MulScalarOp(Op):
    def __init__(self, inputs, s):
        super().__init__(inputs)
        self.s = s

    def backward(self, grad):
        return (grad * self.s,)


class DivScalarOp(MulScalarOp):
    def backward(self, grad):
        return (grad / self.s,)


class PowScalarOp(MulScalarOp):
    def backward(self, grad):
        v = self.inputs[0].values
        return (grad * self.s * np.power(v, self.s - 1.0),)


class NegOp(Op):
    def backward(self, grad):
        return (-grad,)


class LogOp(Op):
    def backward(self, grad):
        return (grad / self.inputs[0].values,)


class ExpOp(Op):
    def __init__(self, inputs, out):
        super().__init__(inputs)
        self.out = out

    def backward(self, grad):
        return (grad * self.out,)


class ClipOp(Op):
    """Clamp to [lo, hi]; gradient passes through inside the closed interval."""

    def __init__(self, inputs, lo, hi):
        super().__init__(inputs)
        self.lo, self.hi = lo, hi

    def backward(self, grad):
        v = self.inputs[0].values
        return (grad * ((v >= self.lo) & (v <= self.hi)),)


def add(a: Tensor, b) -> Tensor:
    bt, s = _split_operand(a, b)
    if bt is not None:
        return record(a.values + bt.values, (a, bt), AddOp)
    return record(a.values + np.asarray(s, a.values.dtype), (a,), _ShiftScalarOp)


def sub(a: Tensor, b) -> Tensor:
    bt, s = _split_operand(a, b)
    if bt is not None:
        return record(a.values - bt.values, (a, bt), SubOp)
    return record(a.values - np.asarray(s, a.values.dtype), (a,), _ShiftScalarOp)


def mul(a: Tensor, b) -> Tensor:
    bt, s = _split_operand(a, b)
    if bt is not None:
        return record(a.values * bt.values, (a, bt), MulOp)
    return record(a.values * np.asarray(s, a.values.dtype), (a,), MulScalarOp, s)


def div(a: Tensor, b) -> Tensor:
    bt, s = _split_operand(a, b)
    if bt is not None:
        return record(a.values / bt.values, (a, bt), DivOp)
    return record(a.values / np.asarray(s, a.values.dtype), (a,), DivScalarOp, s)


def power(a: Tensor, b) -> Tensor:
    bt, s = _split_operand(a, b)
    if bt is not None:
        out = np.power(a.values, bt.values)
        return record(out, (a, bt), PowOp, out)
    return record(np.power(a.values, np.asarray(s, a.values.dtype)), (a,), PowScalarOp, s)


def neg(a: Tensor) -> Tensor:
    return record(-a.values, (a,), NegOp)


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0):
        raise DomainError("log requires strictly positive values; clamp first")
    return record(np.log(a.values), (a,), LogOp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return record(out, (a,), ExpOp, out)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise ParameterError(f"clip needs lo < hi, got [{lo}, {hi}]")
    return record(np.clip(a.values, lo, hi), (a,), ClipOp, lo, hi)


# -- reductions ------------------------------------------------------------


def _norm_axes(axes, rank: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(rank))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -rank <= ax < rank:
            raise ShapeError(f"axis {ax} invalid for rank {rank}")
        out.append(ax % rank)
    if len(set(out)) != len(out):
        raise ShapeError(f"duplicate reduction axes {axes}")
    return tuple(sorted(out))


class SumOp(Op):
    def __init__(self, inputs, axes):
        super().__init__(inputs)
        self.axes = axes

    def backward(self, grad):
        g = np.expand_dims(grad, self.axes) if self.axes else grad
        return (np.broadcast_to(g, self.inputs[0].shape).copy(),)


class MeanOp(SumOp):
    def __init__(self, inputs, axes, count):
        super().__init__(inputs, axes)
        self.count = count

    def backward(self, grad):
        (g,) = super().backward(grad)
        return (g / self.count,)


class MaxOp(Op):
    """Reduction max; backward routes to the first arg-max in row-major order."""

    def __init__(self, inputs, argmax_flat, block_shape, perm):
        super().__init__(inputs)
        self.argmax_flat = argmax_flat
        self.block_shape = block_shape
        self.perm = perm

    def backward(self, grad):
        moved = np.zeros(self.block_shape, dtype=self.inputs[0].values.dtype)
        flat = moved.reshape(grad.size, -1)
        flat[np.arange(grad.size), self.argmax_flat.reshape(-1)] = grad.reshape(-1)
        return (moved.transpose(np.argsort(self.perm)).copy(),)


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, a.values.ndim)
    return record(a.values.sum(axis=axes), (a,), SumOp, axes)


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, a.values.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return record(a.values.mean(axis=axes), (a,), MeanOp, axes, count)


def reduce_max(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, a.values.ndim)
    rank = a.values.ndim
    kept = tuple(i for i in range(rank) if i not in axes)
    perm = kept + axes  # reduced axes last, relative order preserved
    moved = a.values.transpose(perm)
    kept_shape = tuple(a.shape[i] for i in kept)
    kept_size = int(np.prod(kept_shape)) if kept_shape else 1
    flat = moved.reshape(kept_size, -1)
    arg = flat.argmax(axis=1)  # first occurrence on ties
    out = flat[np.arange(kept_size), arg].reshape(kept_shape)
    return record(out, (a,), MaxOp, arg.reshape(kept_shape), moved.shape, perm)
