"""
Reverse-mode differentiation over an explicit, per-forward-pass tape.

A `Tape` records one `Record` per differentiable operation in execution order,
so the record list is already a topological order of the graph. Operations
called on inputs that carry no tape are evaluated eagerly and return
constants; this is the inference path.
"""

import logging
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .debug import debug_log
from .exceptions import BoundsError, ContractError, DimensionError, LifecycleError
from .state import GradCheckReport
from .tensor import as_tensor, default_dtype, precision

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12

BackwardRule = Callable[[np.ndarray, Dict[str, Any]], Sequence[Optional[np.ndarray]]]


class Record:
    __slots__ = ("op", "inputs", "output", "saved", "backward")

    def __init__(self, op: str, inputs: Tuple[int, ...], output: int, saved: Dict[str, Any], backward: BackwardRule):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.saved = saved
        self.backward = backward

    def __repr__(self):
        return f"Record(op={self.op!r}, inputs={self.inputs}, output={self.output})"


class Variable:
    """
    A value bound to a node of a tape. `grad` has the value's shape and reads
    as zeros until a backward pass reaches the variable.
    """

    __slots__ = ("value", "requires_grad", "tape", "node", "generation", "name", "aux", "_grad")

    def __init__(self, value: np.ndarray, requires_grad: bool = False, tape: Optional["Tape"] = None,
                 node: Optional[int] = None, name: Optional[str] = None):
        self.value = value
        self.requires_grad = requires_grad
        self.tape = tape
        self.node = node
        self.generation = tape.generation if tape is not None else None
        self.name = name
        # op-specific side outputs, e.g. argmax indices of a max reduction
        self.aux: Dict[str, Any] = {}
        self._grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Variable{label}(shape={list(self.shape)}, requires_grad={self.requires_grad})"

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


class Tape:
    def __init__(self):
        self.records: List[Record] = []
        self.generation = 0
        self._nodes: List[Variable] = []

    def __len__(self):
        return len(self.records)

    def _check(self, var: Variable) -> None:
        if var.tape is not self:
            raise LifecycleError(f"{var!r} belongs to a different tape")
        if var.generation != self.generation:
            raise LifecycleError(f"{var!r} refers to a cleared tape (generation {var.generation} != {self.generation})")

    def _new_node(self, value: np.ndarray, requires_grad: bool, name: Optional[str] = None) -> Variable:
        var = Variable(value, requires_grad=requires_grad, tape=self, node=len(self._nodes), name=name)
        self._nodes.append(var)
        return var

    def variable(self, value, requires_grad: bool = True, name: Optional[str] = None) -> Variable:
        """
        Create a leaf variable on this tape.
        """
        if not isinstance(value, np.ndarray) or value.dtype.kind != "f":
            value = as_tensor(value)
        return self._new_node(value, requires_grad, name)

    def register(self, op: str, inputs: Sequence[Variable], value: np.ndarray, backward: BackwardRule,
                 saved: Optional[Dict[str, Any]] = None) -> Variable:
        """
        Append a record for `op` and return the variable holding its output.
        `backward(grad_out, saved)` must return one gradient (or None) per input.
        """
        for var in inputs:
            if var.tape is not None:
                self._check(var)
        requires_grad = any(var.requires_grad for var in inputs)
        out = self._new_node(value, requires_grad)
        if requires_grad:
            ids = tuple(var.node if var.tape is not None else -1 for var in inputs)
            self.records.append(Record(op, ids, out.node, saved or {}, backward))
        return out

    def clear(self) -> None:
        """
        Drop every record; variables created so far become unusable.
        """
        self.records = []
        self._nodes = []
        self.generation += 1

    def backward(self, root: Variable) -> None:
        if root.tape is None:
            raise LifecycleError("root is not recorded on any tape")
        self._check(root)
        if root.value.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {list(root.shape)}")

        grads: Dict[int, np.ndarray] = {root.node: np.ones_like(root.value)}
        executed = 0
        for record in reversed(self.records):
            grad_out = grads.get(record.output)
            if grad_out is None:
                continue
            input_grads = record.backward(grad_out, record.saved)
            executed += 1
            if len(input_grads) != len(record.inputs):
                raise ContractError(f"backward rule of {record.op!r} returned {len(input_grads)} gradients for {len(record.inputs)} inputs")
            for node_id, g in zip(record.inputs, input_grads):
                if g is None or node_id < 0:
                    continue
                target = self._nodes[node_id]
                if not target.requires_grad:
                    continue
                if g.shape != target.value.shape:
                    raise DimensionError(f"backward rule of {record.op!r} produced gradient {list(g.shape)} for input {list(target.value.shape)}")
                if node_id in grads:
                    grads[node_id] = grads[node_id] + g
                else:
                    grads[node_id] = g

        for node_id, g in grads.items():
            var = self._nodes[node_id]
            if var.requires_grad:
                var._grad = g.astype(var.value.dtype, copy=False)
        debug_log("backward done", {"records": len(self.records), "executed": executed})


def backward(root: Variable) -> None:
    """
    Assign d(root)/d(var) to `.grad` of every reachable variable that requires grad.
    """
    if root.tape is None:
        raise LifecycleError("root is not recorded on any tape")
    root.tape.backward(root)


def constant(value, like: Optional[Variable] = None) -> Variable:
    dtype = like.value.dtype if like is not None else default_dtype()
    return Variable(np.asarray(value, dtype=dtype))


def _lift(x, like: Optional[Variable] = None) -> Variable:
    if isinstance(x, Variable):
        return x
    return constant(x, like)


def _tape_of(*vars_: Variable) -> Optional[Tape]:
    tape = None
    for var in vars_:
        if var.tape is not None:
            if tape is None:
                tape = var.tape
            elif var.tape is not tape:
                raise LifecycleError("operands are recorded on different tapes")
    return tape


def apply(op: str, inputs: Sequence[Variable], value: np.ndarray, backward_rule: BackwardRule,
          saved: Optional[Dict[str, Any]] = None) -> Variable:
    """
    Record `op` on the inputs' tape, or return a constant when none of them is taped.
    """
    tape = _tape_of(*inputs)
    if tape is None:
        return Variable(value)
    return tape.register(op, inputs, value, backward_rule, saved)


# ─── elementwise ────────────────────────────────────────────────────────────

def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    """
    The smaller operand may only broadcast into the larger one by size-1 or
    missing leading dimensions (bias-style broadcasting).
    """
    try:
        shape = tuple(np.broadcast_shapes(tuple(a), tuple(b)))
    except ValueError:
        shape = None
    if shape is not None and (shape == tuple(a) or shape == tuple(b)):
        return shape
    raise DimensionError(f"shapes {list(a)} and {list(b)} are not broadcast-compatible")


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """
    Sum out broadcast dimensions so `grad` matches `shape` again.
    """
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(kind: str, a, b) -> Variable:
    like = a if isinstance(a, Variable) else b if isinstance(b, Variable) else None
    a = _lift(a, like)
    b = _lift(b, like)
    out_shape = _broadcast_shape(a.shape, b.shape)
    av, bv = a.value, b.value

    if kind == "add":
        value = av + bv

        def rule(g, s):
            return unbroadcast(g, av.shape), unbroadcast(g, bv.shape)
    elif kind == "sub":
        value = av - bv

        def rule(g, s):
            return unbroadcast(g, av.shape), unbroadcast(-g, bv.shape)
    elif kind == "mul":
        value = av * bv

        def rule(g, s):
            return unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)
    elif kind == "div":
        value = av / bv

        def rule(g, s):
            return unbroadcast(g / bv, av.shape), unbroadcast(-g * av / (bv * bv), bv.shape)
    else:
        raise ContractError(f"unknown binary elementwise kind {kind!r}")

    assert value.shape == out_shape
    return apply(kind, (a, b), value, rule)


def _unary(kind: str, a) -> Variable:
    a = _lift(a)
    av = a.value

    if kind == "relu":
        value = np.maximum(av, 0).astype(av.dtype, copy=False)

        def rule(g, s):
            return (g * (av > 0),)
    elif kind == "exp":
        value = np.exp(av)

        def rule(g, s):
            return (g * value,)
    elif kind == "log":
        # Inputs below LOG_CLAMP are clamped, so their gradient is zero.
        clamped = np.maximum(av, LOG_CLAMP)
        value = np.log(clamped)

        def rule(g, s):
            return (g * (av > LOG_CLAMP) / clamped,)
    elif kind == "sigmoid":
        value = expit(av).astype(av.dtype, copy=False)

        def rule(g, s):
            return (g * value * (1 - value),)
    else:
        raise ContractError(f"unknown unary elementwise kind {kind!r}")

    return apply(kind, (a,), value, rule)


BINARY_KINDS = ("add", "sub", "mul", "div")
UNARY_KINDS = ("relu", "exp", "log", "sigmoid")


def elementwise(op_kind: str, a, b=None) -> Variable:
    if op_kind in BINARY_KINDS:
        if b is None:
            raise ContractError(f"{op_kind} needs two operands")
        return _binary(op_kind, a, b)
    if op_kind in UNARY_KINDS:
        return _unary(op_kind, a)
    raise ContractError(f"unknown elementwise kind {op_kind!r}")


def add(a, b) -> Variable:
    return _binary("add", a, b)


def sub(a, b) -> Variable:
    return _binary("sub", a, b)


def mul(a, b) -> Variable:
    return _binary("mul", a, b)


def div(a, b) -> Variable:
    return _binary("div", a, b)


def relu(a) -> Variable:
    return _unary("relu", a)


def exp(a) -> Variable:
    return _unary("exp", a)


def log(a) -> Variable:
    return _unary("log", a)


def sigmoid(a) -> Variable:
    return _unary("sigmoid", a)


def square(a) -> Variable:
    return mul(a, a)


# ─── reductions ─────────────────────────────────────────────────────────────

def _normalize_axes(axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = [axes]
    out = []
    for ax in axes:
        if not -ndim <= ax < max(ndim, 1):
            raise DimensionError(f"axis {ax} is out of range for a rank-{ndim} tensor")
        out.append(ax % max(ndim, 1))
    if len(set(out)) != len(out):
        raise DimensionError(f"repeated axis in {list(axes)}")
    return tuple(sorted(out))


def reduce(op_kind: str, a, axes=None, keep_dims: bool = False) -> Variable:
    """
    Sum, mean or max over `axes` (None means all). Max routes the gradient to
    the first maximal element of each reduced slice.
    """
    a = _lift(a)
    av = a.value
    if av.size == 0:
        raise DimensionError("cannot reduce an empty tensor")
    axes_t = _normalize_axes(axes, av.ndim)
    kept_shape = tuple(1 if i in axes_t else d for i, d in enumerate(av.shape))

    if op_kind == "sum":
        value = av.sum(axis=axes_t, keepdims=keep_dims)

        def rule(g, s):
            return (np.broadcast_to(g.reshape(kept_shape), av.shape).copy(),)
    elif op_kind == "mean":
        count = int(np.prod([av.shape[i] for i in axes_t])) if axes_t else 1
        value = av.mean(axis=axes_t, keepdims=keep_dims).astype(av.dtype, copy=False)

        def rule(g, s):
            return (np.broadcast_to(g.reshape(kept_shape) / count, av.shape).astype(av.dtype),)
    elif op_kind == "max":
        rest = tuple(i for i in range(av.ndim) if i not in axes_t)
        moved = np.transpose(av, rest + axes_t)
        flat = moved.reshape(moved.shape[:len(rest)] + (-1,))
        argmax = flat.argmax(axis=-1)
        value = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
        value = value.reshape(kept_shape) if keep_dims else value

        def rule(g, s):
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, argmax[..., None], g.reshape(argmax.shape)[..., None], axis=-1)
            dmoved = dflat.reshape(moved.shape)
            return (np.transpose(dmoved, np.argsort(rest + axes_t)),)
    else:
        raise ContractError(f"unknown reduce kind {op_kind!r}")

    value = np.asarray(value, dtype=av.dtype)
    out = apply(op_kind, (a,), value, rule, saved={"axes": axes_t})
    if op_kind == "max":
        out.aux = {"argmax": argmax}
    return out


def sum_all(a) -> Variable:
    return reduce("sum", a)


def mean_all(a) -> Variable:
    return reduce("mean", a)


# ─── matmul ─────────────────────────────────────────────────────────────────

def matmul(a, b) -> Variable:
    a = _lift(a)
    b = _lift(b, a)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DimensionError(f"matmul needs two matrices, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {list(a.shape)} x {list(b.shape)}")
    av, bv = a.value, b.value
    value = av @ bv

    def rule(g, s):
        return g @ bv.T, av.T @ g

    return apply("matmul", (a, b), value, rule)


# ─── shape operations ───────────────────────────────────────────────────────

def reshape(a, shape: Sequence[int]) -> Variable:
    a = _lift(a)
    src_shape = a.shape
    try:
        value = a.value.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"cannot reshape {list(src_shape)} into {list(shape)}") from e

    def rule(g, s):
        return (g.reshape(src_shape),)

    return apply("reshape", (a,), value, rule)


def transpose2d(a) -> Variable:
    """
    Swap the last two axes.
    """
    a = _lift(a)
    if a.value.ndim < 2:
        raise DimensionError(f"transpose2d needs rank >= 2, got {list(a.shape)}")
    value = np.ascontiguousarray(np.swapaxes(a.value, -1, -2))

    def rule(g, s):
        return (np.ascontiguousarray(np.swapaxes(g, -1, -2)),)

    return apply("transpose2d", (a,), value, rule)


def slice_(a, starts: Sequence[int], stops: Sequence[int]) -> Variable:
    """
    Take a[starts[0]:stops[0], starts[1]:stops[1], ...]; trailing axes are kept whole.
    """
    a = _lift(a)
    shape = a.shape
    if len(starts) != len(stops) or len(starts) > len(shape):
        raise DimensionError(f"slice bounds {list(starts)}:{list(stops)} do not fit shape {list(shape)}")
    index = []
    for axis, (lo, hi) in enumerate(zip(starts, stops)):
        if not 0 <= lo < hi <= shape[axis]:
            raise BoundsError(f"slice [{lo}:{hi}] is out of range for axis {axis} of size {shape[axis]}")
        index.append(slice(lo, hi))
    index = tuple(index)
    value = a.value[index].copy()

    def rule(g, s):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return apply("slice", (a,), value, rule)


def pad_zero(a, pad) -> Variable:
    """
    Zero-pad the last two axes. `pad` is an int, (ph, pw), or
    ((top, bottom), (left, right)).
    """
    a = _lift(a)
    if a.value.ndim < 2:
        raise DimensionError(f"pad_zero needs rank >= 2, got {list(a.shape)}")
    if isinstance(pad, int):
        widths = ((pad, pad), (pad, pad))
    elif isinstance(pad[0], int):
        widths = ((pad[0], pad[0]), (pad[1], pad[1]))
    else:
        widths = (tuple(pad[0]), tuple(pad[1]))
    if min(min(w) for w in widths) < 0:
        raise BoundsError(f"negative padding {widths}")
    (t, b), (l, r) = widths
    full = ((0, 0),) * (a.value.ndim - 2) + widths
    value = np.pad(a.value, full)
    h, w = a.shape[-2:]

    def rule(g, s):
        return (g[..., t:t + h, l:l + w].copy(),)

    return apply("pad_zero", (a,), value, rule)


def concat_channels(parts: Sequence) -> Variable:
    """
    Concatenate [N, C_i, H, W] tensors along the channel axis.
    """
    if not parts:
        raise DimensionError("concat_channels needs at least one input")
    like = next((p for p in parts if isinstance(p, Variable)), None)
    parts = [_lift(p, like) for p in parts]
    ref = parts[0].shape
    for p in parts[1:]:
        if p.value.ndim != len(ref) or p.shape[:1] + p.shape[2:] != ref[:1] + ref[2:]:
            raise DimensionError(f"concat_channels inputs disagree outside the channel axis: {list(ref)} vs {list(p.shape)}")
    sizes = [p.shape[1] for p in parts]
    value = np.concatenate([p.value for p in parts], axis=1)
    bounds = np.cumsum([0] + sizes)

    def rule(g, s):
        return tuple(g[:, bounds[i]:bounds[i + 1]].copy() for i in range(len(parts)))

    return apply("concat_channels", parts, value, rule)


SHAPE_KINDS = ("reshape", "transpose2d", "slice", "pad_zero", "concat_channels")


def shape_ops(op_kind: str, a, params: Optional[Dict[str, Any]] = None) -> Variable:
    params = params or {}
    if op_kind == "reshape":
        return reshape(a, params["shape"])
    if op_kind == "transpose2d":
        return transpose2d(a)
    if op_kind == "slice":
        return slice_(a, params["starts"], params["stops"])
    if op_kind == "pad_zero":
        return pad_zero(a, params["pad"])
    if op_kind == "concat_channels":
        return concat_channels([a] + list(params.get("others", [])))
    raise ContractError(f"unknown shape op {op_kind!r}")


# ─── gradient check ─────────────────────────────────────────────────────────

def grad_check(function: Callable[[Variable], Variable], point, epsilon: float = 1e-5,
               tolerance: float = 1e-4) -> GradCheckReport:
    """
    Compare the analytic gradient of `function` at `point` with central
    finite differences, coordinate by coordinate, in 64-bit precision.

    Args:
        function: maps a Variable to a scalar Variable; must be deterministic.
        point: where to evaluate.
        epsilon: perturbation size.
        tolerance: bound on |a - n| / max(|a|, |n|, 1e-8).

    Returns:
        GradCheckReport with the worst relative error, its coordinate and the
        coordinates holding non-finite values, if any.
    """
    with precision(np.float64):
        x0 = np.array(point, dtype=np.float64)

        tape = Tape()
        x = tape.variable(x0.copy())
        out = function(x)
        if out.value.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {list(out.shape)}")
        tape.backward(out)
        analytic = np.array(x.grad, dtype=np.float64)

        def evaluate(at: np.ndarray) -> float:
            leaf = Tape().variable(at.copy(), requires_grad=False)
            return float(function(leaf).value.reshape(-1)[0])

        numeric = np.empty_like(x0)
        flat = x0.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = evaluate(x0)
            flat[i] = orig - epsilon
            f_minus = evaluate(x0)
            flat[i] = orig
            numeric.reshape(-1)[i] = (f_plus - f_minus) / (2 * epsilon)

    nonfinite = ~(np.isfinite(analytic) & np.isfinite(numeric))
    if nonfinite.any():
        coords = [tuple(int(c) for c in idx) for idx in np.argwhere(nonfinite)]
        logger.warning(f"⚠️ Non-finite gradient at {coords[:5]}")
        return GradCheckReport(max_rel_error=float("inf"), passed=False, worst_index=coords[0],
                               nonfinite=coords)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel_error=max_rel, passed=bool(max_rel <= tolerance),
                           worst_index=tuple(int(i) for i in worst), nonfinite=[])
