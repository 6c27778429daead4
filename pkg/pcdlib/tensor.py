#!/usr/bin/env python3
"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy buffer (float32 by default).
Every differentiable primitive records a :class:`Node` on its output when
gradient recording is enabled and at least one input requires grad; the
nodes reachable from a loss form a :class:`Tape` in topological order.
:func:`backward` walks that tape in reverse and accumulates ``.grad`` on every
reachable tensor that requires grad.

Reductions and matrix products accumulate in float64 and round once to the
storage dtype. There is no general broadcasting: binary operations accept
either equal shapes or a scalar.
"""

import logging
import threading
from contextlib import nullcontext
from numbers import Number
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import DomainError, GradientError, ShapeError, ValidationError, format_shape
from .rng import SplitMix64

logger = logging.getLogger("pcdlib")

_state = threading.local()

Axes = Union[None, int, Sequence[int]]
Operand = Union["Tensor", float, int]


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def default_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


class no_grad:
    """Context manager that disables graph recording in the current thread."""

    def __enter__(self) -> "no_grad":
        self._prev = is_grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc) -> None:
        _state.grad_enabled = self._prev


class double_precision:
    """Context manager that stores newly created tensors as float64."""

    def __enter__(self) -> "double_precision":
        self._prev = default_dtype()
        _state.dtype = np.float64
        return self

    def __exit__(self, *exc) -> None:
        _state.dtype = self._prev


def _as_storage(array) -> np.ndarray:
    return np.asarray(array, dtype=default_dtype(), order="C")


class Node:
    """One executed primitive: its inputs, output and forward/backward rules.

    ``forward_fn(*input_arrays) -> array`` recomputes the output;
    ``backward_fn(grad, out, *input_arrays) -> tuple`` returns one gradient
    (or None) per input.
    """

    __slots__ = ("op", "inputs", "output", "forward_fn", "backward_fn")

    def __init__(
        self,
        op: str,
        inputs: Tuple["Tensor", ...],
        output: "Tensor",
        forward_fn: Callable[..., np.ndarray],
        backward_fn: Callable[..., Tuple[Optional[np.ndarray], ...]],
    ) -> None:
        self.op = op
        self.inputs = inputs
        self.output = output
        self.forward_fn = forward_fn
        self.backward_fn = backward_fn


class Tensor:
    """Dense N-dimensional array with optional gradient tracking."""

    def __init__(self, data, requires_grad: bool = False, name: str = "") -> None:
        self.data = np.array(data, dtype=default_dtype(), copy=True, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = _as_storage(array)
        t.requires_grad = False
        t.grad = None
        t.name = ""
        t._node = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return add(scale(self, -1.0), other)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def sum(self, axes: Axes = None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes: Axes = None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axes, keepdims)

    def max(self, axes: Axes = None, keepdims: bool = False) -> "Tensor":
        return reduce("max", self, axes, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={format_shape(self.shape)}{flag})"


def apply(
    op: str,
    inputs: Sequence[Tensor],
    forward_fn: Callable[..., np.ndarray],
    backward_fn: Callable[..., Tuple[Optional[np.ndarray], ...]],
) -> Tensor:
    """Run a primitive and record it when any input requires grad.

    Layers build their own primitives through this function, so every
    differentiable operation in the package is replayable from the tape.
    """
    inputs = tuple(inputs)
    out = Tensor._wrap(forward_fn(*(t.data for t in inputs)))
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, out, forward_fn, backward_fn)
    return out


class Tape:
    """Topologically ordered record of the nodes reachable from an output."""

    def __init__(self, nodes: List[Node]) -> None:
        self.nodes = nodes

    @classmethod
    def of(cls, output: Tensor) -> "Tape":
        order: List[Node] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            node = tensor._node
            if node is None:
                continue
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((tensor, True))
            for parent in reversed(node.inputs):
                if parent._node is not None and id(parent._node) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Node]:
        return iter(self.nodes)

    def tensors(self) -> List[Tensor]:
        """Every tensor touched by the tape, inputs before outputs."""
        out: List[Tensor] = []
        seen = set()
        for node in self.nodes:
            for t in node.inputs + (node.output,):
                if id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def replay(self) -> List[str]:
        """Recompute every node from the recorded leaves.

        Returns the names of the ops whose recomputed output differs from the
        recorded one (bit-exact comparison); an empty list means the tape
        reproduces its forward pass.
        """
        values: Dict[int, np.ndarray] = {}
        mismatched = []
        for node in self.nodes:
            args = [values.get(id(t), t.data) for t in node.inputs]
            recomputed = np.asarray(node.forward_fn(*args), dtype=node.output.data.dtype)
            values[id(node.output)] = recomputed
            if recomputed.shape != node.output.shape or not np.array_equal(
                recomputed, node.output.data
            ):
                mismatched.append(node.op)
        return mismatched


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Repeated calls without resetting grads accumulate additively.
    """
    if loss.size != 1:
        raise GradientError(
            f"backward() needs a scalar loss, got shape {format_shape(loss.shape)}"
        )
    if loss._node is None:
        if loss.requires_grad:
            one = np.ones(loss.shape, dtype=loss.data.dtype)
            loss.grad = one if loss.grad is None else loss.grad + one
            return
        raise GradientError("loss does not depend on any tensor that requires grad")

    tape = Tape.of(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    for node in reversed(tape.nodes):
        upstream = grads.get(id(node.output))
        if upstream is None:
            continue
        input_grads = node.backward_fn(
            upstream, node.output.data, *(t.data for t in node.inputs)
        )
        for t, g in zip(node.inputs, input_grads):
            if g is None or not t.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64)
            if g.shape != t.shape:
                raise GradientError(
                    f"{node.op}: gradient shape {format_shape(g.shape)} "
                    f"does not match input {format_shape(t.shape)}"
                )
            key = id(t)
            grads[key] = grads[key] + g if key in grads else g

    for t in tape.tensors():
        if not t.requires_grad:
            continue
        g = grads.get(id(t))
        g = np.zeros(t.shape, dtype=t.data.dtype) if g is None else g.astype(t.data.dtype)
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------- creation


def create(
    shape: Sequence[int],
    init: str = "zeros",
    seed: int = 0,
    std: float = 1.0,
    requires_grad: bool = False,
) -> Tensor:
    """Create a tensor of ``shape`` filled by ``init``.

    ``init`` is one of ``zeros``, ``ones``, ``uniform`` (U[0, 1)) or
    ``gaussian`` (N(0, std^2)); random fills come from a SplitMix64 stream
    seeded with ``seed``.
    """
    shape = tuple(int(d) for d in shape)
    if not shape:
        raise ShapeError("create", "a non-empty shape", "[]")
    if any(d < 1 for d in shape):
        raise ShapeError("create", "all dims >= 1", format_shape(shape))
    n = int(np.prod(shape))
    if init == "zeros":
        data = np.zeros(shape)
    elif init == "ones":
        data = np.ones(shape)
    elif init == "uniform":
        data = SplitMix64(seed).uniform(n).reshape(shape)
    elif init == "gaussian":
        data = (std * SplitMix64(seed).gaussian(n)).reshape(shape)
    else:
        raise ValidationError(f"unknown init '{init}'", field="init", value=init)
    t = Tensor._wrap(data)
    t.requires_grad = requires_grad
    return t


def constant(array) -> Tensor:
    """Wrap an array as a tensor that never receives gradients."""
    return Tensor._wrap(array)


# ------------------------------------------------------------- elementwise


def _binary_operands(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(op, format_shape(a.shape), format_shape(b.shape))


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum())


def add(a: Tensor, b: Operand) -> Tensor:
    if isinstance(b, Number):
        c = float(b)
        return apply("add", (a,), lambda x: x + c, lambda g, out, x: (g,))
    _binary_operands("add", a, b)
    return apply(
        "add",
        (a, b),
        lambda x, y: x + y,
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
    )


def sub(a: Tensor, b: Operand) -> Tensor:
    if isinstance(b, Number):
        c = float(b)
        return apply("sub", (a,), lambda x: x - c, lambda g, out, x: (g,))
    _binary_operands("sub", a, b)
    return apply(
        "sub",
        (a, b),
        lambda x, y: x - y,
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
    )


def mul(a: Tensor, b: Operand) -> Tensor:
    if isinstance(b, Number):
        return scale(a, float(b))
    _binary_operands("mul", a, b)
    return apply(
        "mul",
        (a, b),
        lambda x, y: x * y,
        lambda g, out, x, y: (
            _unbroadcast(g * y, x.shape),
            _unbroadcast(g * x, y.shape),
        ),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    c = float(factor)
    return apply("scale", (a,), lambda x: x * c, lambda g, out, x: (g * c,))


def exp(a: Tensor) -> Tensor:
    return apply("exp", (a,), np.exp, lambda g, out, x: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: input contains non-positive values")
    return apply("log", (a,), np.log, lambda g, out, x: (g / x,))


def relu(a: Tensor) -> Tensor:
    return apply(
        "relu",
        (a,),
        lambda x: np.maximum(x, 0),
        lambda g, out, x: (g * (x > 0),),
    )


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b: Operand = None) -> Tensor:
    """Dispatch ``add|sub|mul|exp|log|scale`` by name."""
    if op in _ELEMENTWISE:
        return _ELEMENTWISE[op](a, b)
    if op == "scale":
        return scale(a, b)
    if op == "exp":
        return exp(a)
    if op == "log":
        return log(a)
    raise ValidationError(f"unknown elementwise op '{op}'", field="op", value=op)


# ------------------------------------------------------------------ linear


def _matmul64(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.matmul(x.astype(np.float64), y.astype(np.float64))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            "matmul",
            message=f"matmul: cannot multiply {format_shape(a.shape)} by {format_shape(b.shape)}",
        )
    return apply(
        "matmul",
        (a, b),
        _matmul64,
        lambda g, out, x, y: (_matmul64(g, y.T), _matmul64(x.T, g)),
    )


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over equal leading dims: ``[..., m, k] @ [..., k, n]``."""
    if a.ndim < 3 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            "bmm",
            message=f"bmm: cannot multiply {format_shape(a.shape)} by {format_shape(b.shape)}",
        )
    return apply(
        "bmm",
        (a, b),
        _matmul64,
        lambda g, out, x, y: (
            _matmul64(g, np.swapaxes(y, -1, -2)),
            _matmul64(np.swapaxes(x, -1, -2), g),
        ),
    )


# -------------------------------------------------------------- reductions


def _normalize_axes(axes: Axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError("reduce", message=f"reduce: axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _expand_to(g: np.ndarray, shape: Tuple[int, ...], axes: Tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce(op: str, x: Tensor, axes: Axes = None, keepdims: bool = False) -> Tensor:
    """Reduce ``x`` over ``axes`` with ``sum``, ``mean`` or ``max``.

    An empty axis set returns a differentiable copy. ``max`` routes its
    gradient to the first maximal element in row-major order.
    """
    axes = _normalize_axes(axes, x.ndim)
    if not axes:
        return apply("copy", (x,), lambda v: v.copy(), lambda g, out, v: (g,))
    count = int(np.prod([x.shape[a] for a in axes]))

    if op == "sum":
        return apply(
            "sum",
            (x,),
            lambda v: v.sum(axis=axes, dtype=np.float64, keepdims=keepdims),
            lambda g, out, v: (_expand_to(g, v.shape, axes, keepdims),),
        )
    if op == "mean":
        return apply(
            "mean",
            (x,),
            lambda v: v.sum(axis=axes, dtype=np.float64, keepdims=keepdims) / count,
            lambda g, out, v: (_expand_to(g, v.shape, axes, keepdims) / count,),
        )
    if op == "max":
        kept = tuple(a for a in range(x.ndim) if a not in axes)
        perm = kept + axes

        def flat(v: np.ndarray) -> np.ndarray:
            moved = np.transpose(v, perm)
            return moved.reshape(moved.shape[: len(kept)] + (count,))

        def forward(v: np.ndarray) -> np.ndarray:
            f = flat(v)
            idx = np.asarray(np.argmax(f, axis=-1))
            out = np.take_along_axis(f, idx[..., None], axis=-1)[..., 0]
            if keepdims:
                for ax in axes:
                    out = np.expand_dims(out, ax)
            return out

        def backward_max(g, out, v):
            f = flat(v)
            idx = np.asarray(np.argmax(f, axis=-1))
            if keepdims:
                g = g.reshape(idx.shape)
            dflat = np.zeros(f.shape, dtype=np.float64)
            np.put_along_axis(dflat, idx[..., None], np.asarray(g)[..., None], axis=-1)
            moved_shape = tuple(v.shape[a] for a in perm)
            return (np.transpose(dflat.reshape(moved_shape), np.argsort(perm)),)

        return apply("max", (x,), forward, backward_max)
    raise ValidationError(f"unknown reduction '{op}'", field="op", value=op)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Numerically stable ``log(sum(exp(x)))`` along ``axis`` (max-subtraction)."""

    def forward(v: np.ndarray) -> np.ndarray:
        v = v.astype(np.float64)
        m = np.max(v, axis=axis, keepdims=True)
        out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
        return out if keepdims else np.squeeze(out, axis=axis)

    def backward_lse(g, out, v):
        v = v.astype(np.float64)
        m = np.max(v, axis=axis, keepdims=True)
        e = np.exp(v - m)
        soft = e / np.sum(e, axis=axis, keepdims=True)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return apply("logsumexp", (x,), forward, backward_lse)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    def forward(v: np.ndarray) -> np.ndarray:
        v = v.astype(np.float64)
        e = np.exp(v - np.max(v, axis=axis, keepdims=True))
        return e / np.sum(e, axis=axis, keepdims=True)

    def backward_softmax(g, out, v):
        p = forward(v)
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return apply("softmax", (x,), forward, backward_softmax)


# ----------------------------------------------------------- shape plumbing


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    try:
        np.empty(x.shape, dtype=np.int8).reshape(shape)
    except ValueError:
        raise ShapeError("reshape", format_shape(x.shape), format_shape(shape)) from None
    return apply(
        "reshape",
        (x,),
        lambda v: v.reshape(shape),
        lambda g, out, v: (g.reshape(v.shape),),
    )


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", f"a permutation of {x.ndim} axes", axes)
    inverse = tuple(np.argsort(axes))
    return apply(
        "transpose",
        (x,),
        lambda v: np.transpose(v, axes),
        lambda g, out, v: (np.transpose(g, inverse),),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", message="concat: nothing to concatenate")
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(ref, other)) if i != axis % len(ref)
        ):
            raise ShapeError("concat", format_shape(ref), format_shape(other))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    return apply(
        "concat",
        tensors,
        lambda *vs: np.concatenate(vs, axis=axis),
        lambda g, out, *vs: tuple(np.split(g, bounds, axis=axis)),
    )


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice / integer) indexing; advanced indexing is not supported."""
    items = index if isinstance(index, tuple) else (index,)
    for item in items:
        if not isinstance(item, (int, slice, type(Ellipsis), np.integer)) and item is not None:
            raise ValidationError("only basic indexing is supported", field="index", value=index)

    def backward_getitem(g, out, v):
        full = np.zeros(v.shape, dtype=np.float64)
        full[index] = g
        return (full,)

    return apply("getitem", (x,), lambda v: np.array(v[index]), backward_getitem)


# ------------------------------------------------------------ grad checking


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-3,
    double: bool = True,
) -> float:
    """Maximum relative error between analytic and central-difference grads.

    The relative error of each element is ``|a - n| / max(|a|, |n|, 1e-6)``.
    With ``double`` (default) both sides are evaluated in float64 so the
    comparison measures the gradient rules rather than float32 rounding.
    """
    if eps <= 0:
        raise ValidationError("eps must be positive", field="eps", value=eps)

    ctx = double_precision() if double else nullcontext()
    with ctx:
        base = np.array(x.data, dtype=default_dtype())
        probe = Tensor(base, requires_grad=True)
        out = f(probe)
        if not isinstance(out, Tensor) or out.size != 1:
            raise GradientError("finite_diff_check: f must return a scalar tensor")
        if out._node is None:
            analytic = np.zeros(base.shape, dtype=np.float64)
        else:
            backward(out)
            analytic = probe.grad.astype(np.float64)

        numeric = np.zeros(base.shape, dtype=np.float64)
        flat = base.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                shifted = flat.copy()
                shifted[i] = flat[i] + eps
                f_plus = float(f(Tensor(shifted.reshape(base.shape))).data.reshape(-1)[0])
                shifted[i] = flat[i] - eps
                f_minus = float(f(Tensor(shifted.reshape(base.shape))).data.reshape(-1)[0])
                numeric.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * eps)

    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    err = float(np.max(np.abs(analytic - numeric) / denom))
    logger.debug(f"finite_diff_check: {analytic.size} elements, max rel err {err:.3e}")
    return err
