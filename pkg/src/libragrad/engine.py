"""Tape-based reverse-mode differentiation over numpy float64 arrays.

Every operation is recorded eagerly on a :class:`Tape` as a :class:`Node`.
Backward walks the tape once in reverse order, calling a per-kind
vector-Jacobian rule that reads only the node's saved values and the
incoming cotangent.

Two operators change the backward pass without touching forward values:

``detach``
    value passes through unchanged, no cotangent flows back.
``swap_backward``
    value of one subgraph, cotangent routed as if the node were another.

Biases are leaves registered through :meth:`Tape.bias`; after backward their
gradients come back as :class:`BiasRecord` objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "EngineError",
    "ShapeError",
    "NonFiniteError",
    "BackwardError",
    "SelectorError",
    "DuplicateBiasError",
    "Node",
    "Tensor",
    "BiasRecord",
    "Gradients",
    "Tape",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "scale",
    "matmul",
    "exp",
    "sqrt",
    "relu",
    "sigmoid",
    "erf",
    "softmax",
    "reduce_sum",
    "reduce_mean",
    "reduce_var",
    "broadcast_to",
    "reshape",
    "transpose",
    "gather",
    "concat",
    "detach",
    "constant_op",
    "swap_backward",
]


class EngineError(Exception):
    """Base class for errors raised by the differentiation engine."""


class ShapeError(EngineError, ValueError):
    pass


class NonFiniteError(EngineError, FloatingPointError):
    def __init__(self, node_id: int, kind: str):
        super().__init__(f"non-finite value produced by node {node_id} ({kind})")
        self.node_id = node_id
        self.kind = kind


class BackwardError(EngineError, RuntimeError):
    pass


class SelectorError(EngineError, IndexError):
    pass


class DuplicateBiasError(EngineError, ValueError):
    pass


LEAF_KINDS = ("input", "bias", "constant")


@dataclass
class Node:
    id: int
    kind: str
    parents: tuple[int, ...]
    shape: tuple[int, ...]
    saved: dict = field(default_factory=dict)
    policy_tag: str = "standard"
    requires_grad: bool = False
    name: str | None = None


@dataclass
class BiasRecord:
    """Gradient of one registered bias after a backward pass.

    ``token_grad`` is the cotangent at the broadcast of the bias into the
    activation it is added to, when that activation has a token axis; it
    lets FullGrad attribute bias contributions to individual tokens.
    """

    owner_layer: int
    name: str
    value: np.ndarray
    grad: np.ndarray
    token_axis: int | None = None
    expanded_value: np.ndarray | None = None
    token_grad: np.ndarray | None = None

    @property
    def contribution(self) -> float:
        """``<b, df/db>``, this bias's share of the FullGrad sum."""
        return float(np.sum(self.value * self.grad))

    def token_contributions(self) -> np.ndarray | None:
        """Channel-summed ``b * df/db`` along the token axis, or None."""
        if self.token_axis is None or self.token_grad is None:
            return None
        prod = self.expanded_value * self.token_grad
        axes = tuple(i for i in range(prod.ndim) if i != self.token_axis)
        return prod.sum(axis=axes)


@dataclass
class _BiasSlot:
    node_id: int
    owner_layer: int
    name: str
    expanded_id: int | None = None
    token_axis: int | None = None


class Tensor:
    """Handle to one node's forward value on a tape."""

    __slots__ = ("tape", "id", "value")
    __array_priority__ = 1000

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def node(self) -> Node:
        return self.tape.nodes[self.id]

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, kind={self.node.kind}, shape={self.shape})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Gradients:
    """Result of one backward pass.

    Index with a :class:`Tensor` to get its cotangent; tensors the backward
    pass never reached get zeros of the right shape.
    """

    def __init__(self, tape: "Tape", grads: dict[int, np.ndarray], visited: int,
                 biases: list[BiasRecord]):
        self.tape = tape
        self._grads = grads
        self.visited = visited
        self.biases = biases

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(t.id)
        if g is None:
            return np.zeros(t.shape)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return t.id in self._grads

    @property
    def inputs(self) -> list[np.ndarray]:
        return [self[Tensor(self.tape, n.id, self.tape.values[n.id])]
                for n in self.tape.nodes if n.kind == "input"]

    @property
    def bias_total(self) -> float:
        return float(sum(r.contribution for r in self.biases))


class Tape:
    """Single-owner record of one forward run."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self.check_finite = check_finite
        self._bias_slots: dict[str, _BiasSlot] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, kind: str, parents: Sequence[Tensor], value: np.ndarray,
                saved: dict | None = None, policy_tag: str = "standard",
                requires_grad: bool | None = None, name: str | None = None) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        node_id = len(self.nodes)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(node_id, kind)
        for p in parents:
            if p.tape is not self:
                raise EngineError("operands belong to different tapes")
        if requires_grad is None:
            requires_grad = any(p.node.requires_grad for p in parents)
        value.flags.writeable = False
        node = Node(node_id, kind, tuple(p.id for p in parents), value.shape,
                    saved or {}, policy_tag, requires_grad, name)
        self.nodes.append(node)
        self.values.append(value)
        return Tensor(self, node_id, value)

    # leaves

    def input(self, value, name: str | None = None) -> Tensor:
        return self._record("input", (), np.array(value, dtype=np.float64),
                            requires_grad=True, name=name)

    def constant(self, value, name: str | None = None) -> Tensor:
        return self._record("constant", (), np.array(value, dtype=np.float64),
                            requires_grad=False, name=name)

    def bias(self, value, layer: int, name: str, token_axis: int | None = None) -> Tensor:
        """Register an additive bias leaf. Each name may be registered once."""
        if name in self._bias_slots:
            raise DuplicateBiasError(f"bias {name!r} already registered")
        t = self._record("bias", (), np.array(value, dtype=np.float64),
                         requires_grad=True, name=name)
        self._bias_slots[name] = _BiasSlot(t.id, layer, name, t.id if token_axis is not None else None,
                                           token_axis)
        return t

    def expand_bias(self, b: Tensor, shape: Sequence[int], token_axis: int | None) -> Tensor:
        """Broadcast a registered bias and remember the broadcast for token attribution."""
        slot = self._bias_slot_for(b)
        out = broadcast_to(b, tuple(shape))
        slot.expanded_id = out.id if token_axis is not None else None
        slot.token_axis = token_axis
        return out

    def mark_bias_tokens(self, b: Tensor, token_view: Tensor, token_axis: int) -> None:
        """Use ``token_view`` (a gather/reshape of bias ``b``) for per-token accounting."""
        slot = self._bias_slot_for(b)
        slot.expanded_id = token_view.id
        slot.token_axis = token_axis

    def _bias_slot_for(self, b: Tensor) -> _BiasSlot:
        for slot in self._bias_slots.values():
            if slot.node_id == b.id:
                return slot
        raise EngineError(f"tensor {b.id} is not a registered bias")

    @property
    def bias_names(self) -> list[str]:
        return list(self._bias_slots)

    def tensor(self, node_id: int) -> Tensor:
        return Tensor(self, node_id, self.values[node_id])

    # backward

    def backward(self, output: Tensor, selector=None, seed=None) -> Gradients:
        """Propagate cotangents from one scalar component of ``output``.

        ``selector`` is an int (flat index) or index tuple into ``output``;
        it may be omitted when ``output`` is a scalar. ``seed`` replaces the
        one-hot cotangent with an arbitrary array of ``output``'s shape.
        """
        if not self.nodes or output.tape is not self or output.id >= len(self.nodes):
            raise BackwardError("backward called before a forward pass on this tape")
        if seed is not None:
            seed_arr = np.array(seed, dtype=np.float64)
            if seed_arr.shape != output.shape:
                raise ShapeError(f"seed shape {seed_arr.shape} != output shape {output.shape}")
        else:
            seed_arr = np.zeros(output.shape)
            if selector is None:
                if output.value.size != 1:
                    raise SelectorError("selector required for non-scalar output")
                seed_arr[...] = 1.0
            else:
                try:
                    if isinstance(selector, (int, np.integer)):
                        if not 0 <= selector < output.value.size:
                            raise IndexError
                        seed_arr.flat[selector] = 1.0
                    else:
                        idx = tuple(selector)
                        if len(idx) != output.ndim or any(
                                not 0 <= i < n for i, n in zip(idx, output.shape)):
                            raise IndexError
                        seed_arr[idx] = 1.0
                except (IndexError, TypeError):
                    raise SelectorError(f"selector {selector!r} out of range for shape {output.shape}")

        grads: dict[int, np.ndarray] = {output.id: seed_arr}
        visited = 0
        for nid in range(output.id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if not node.requires_grad or node.kind in LEAF_KINDS or node.kind == "detach":
                continue
            visited += 1
            needs = tuple(self.nodes[p].requires_grad for p in node.parents)
            parent_grads = _VJP[node.kind](node, g, needs)
            for pid, need, pg in zip(node.parents, needs, parent_grads):
                if not need or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg

        records = []
        for slot in self._bias_slots.values():
            value = self.values[slot.node_id]
            grad = grads.get(slot.node_id, np.zeros(value.shape))
            rec = BiasRecord(slot.owner_layer, slot.name, value, grad, slot.token_axis)
            if slot.expanded_id is not None:
                rec.expanded_value = self.values[slot.expanded_id]
                rec.token_grad = grads.get(slot.expanded_id, np.zeros(rec.expanded_value.shape))
            records.append(rec)
        return Gradients(self, grads, visited, records)

    def dump(self) -> str:
        """Line-oriented listing: ``node_id kind parent_ids shape``."""
        lines = []
        for n in self.nodes:
            parents = ",".join(str(p) for p in n.parents) or "-"
            shape = "x".join(str(s) for s in n.shape) or "scalar"
            lines.append(f"{n.id} {n.kind} {parents} {shape}")
        return "\n".join(lines) + "\n"


# helpers


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise EngineError("at least one operand must be a Tensor")


def _lift(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_shape(a: Tensor, b: Tensor, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast")


_VJP: dict[str, Callable] = {}


def _vjp(kind: str):
    def register(fn):
        _VJP[kind] = fn
        return fn
    return register


# arithmetic


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _binary_shape(a, b, "add")
    return tape._record("add", (a, b), a.value + b.value,
                        {"shapes": (a.shape, b.shape)})


@_vjp("add")
def _add_vjp(node, g, needs):
    sa, sb = node.saved["shapes"]
    return (_unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(g, sb) if needs[1] else None)


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _binary_shape(a, b, "sub")
    return tape._record("sub", (a, b), a.value - b.value,
                        {"shapes": (a.shape, b.shape)})


@_vjp("sub")
def _sub_vjp(node, g, needs):
    sa, sb = node.saved["shapes"]
    return (_unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(-g, sb) if needs[1] else None)


def neg(a: Tensor) -> Tensor:
    return a.tape._record("neg", (a,), -a.value)


@_vjp("neg")
def _neg_vjp(node, g, needs):
    return (-g,)


def mul(a, b, coeffs: tuple[float, float] | None = None) -> Tensor:
    """Element-wise product.

    With ``coeffs=(ca, cb)`` the backward is the scaled product rule: the
    cotangent reaching ``a`` is multiplied by ``ca`` and the one reaching
    ``b`` by ``cb``. The forward value is ``a * b`` either way.
    """
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _binary_shape(a, b, "mul")
    saved = {"a": a.value, "b": b.value}
    tag = "standard"
    if coeffs is not None:
        ca, cb = float(coeffs[0]), float(coeffs[1])
        saved["coeffs"] = (ca, cb)
        tag = f"scaled({ca!r},{cb!r})"
    return tape._record("mul", (a, b), a.value * b.value, saved, policy_tag=tag)


@_vjp("mul")
def _mul_vjp(node, g, needs):
    a, b = node.saved["a"], node.saved["b"]
    ca, cb = node.saved.get("coeffs", (1.0, 1.0))
    ga = gb = None
    if needs[0]:
        ga = _unbroadcast(g * b, a.shape)
        if ca != 1.0:
            ga = ca * ga
    if needs[1]:
        gb = _unbroadcast(g * a, b.shape)
        if cb != 1.0:
            gb = cb * gb
    return ga, gb


def div(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _binary_shape(a, b, "div")
    out = a.value / b.value
    return tape._record("div", (a, b), out, {"b": b.value, "out": out,
                                             "shapes": (a.shape, b.shape)})


@_vjp("div")
def _div_vjp(node, g, needs):
    b, out = node.saved["b"], node.saved["out"]
    sa, sb = node.saved["shapes"]
    ga = _unbroadcast(g / b, sa) if needs[0] else None
    gb = _unbroadcast(-g * out / b, sb) if needs[1] else None
    return ga, gb


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape._record("scale", (a,), a.value * c, {"c": c})


@_vjp("scale")
def _scale_vjp(node, g, needs):
    return (g * node.saved["c"],)


def matmul(a, b) -> Tensor:
    """``np.matmul`` semantics, including 1-D operands and batch broadcasting."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul operands must be at least 1-D")
    ka = a.shape[-1]
    kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if ka != kb:
        raise ShapeError(f"matmul: inner dimensions {a.shape} @ {b.shape} disagree")
    try:
        out = np.matmul(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(f"matmul: {exc}")
    return tape._record("matmul", (a, b), out, {"a": a.value, "b": b.value})


@_vjp("matmul")
def _matmul_vjp(node, g, needs):
    a, b = node.saved["a"], node.saved["b"]
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    ga = gb = None
    if needs[0]:
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        if a.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
            ga = _unbroadcast(ga, a.shape)
        else:
            ga = _unbroadcast(ga, a.shape)
    if needs[1]:
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        if b.ndim == 1:
            gb = gb.reshape(gb.shape[:-1])
        gb = _unbroadcast(gb, b.shape)
    return ga, gb


# pointwise nonlinearities


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return a.tape._record("exp", (a,), out, {"out": out})


@_vjp("exp")
def _exp_vjp(node, g, needs):
    return (g * node.saved["out"],)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)
    return a.tape._record("sqrt", (a,), out, {"out": out})


@_vjp("sqrt")
def _sqrt_vjp(node, g, needs):
    return (g * 0.5 / node.saved["out"],)


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.value > 0
    return a.tape._record("relu", (a,), np.where(mask, a.value, 0.0), {"mask": mask})


@_vjp("relu")
def _relu_vjp(node, g, needs):
    return (np.where(node.saved["mask"], g, 0.0),)


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    # split by sign to avoid overflow in exp
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return a.tape._record("sigmoid", (a,), out, {"out": out})


@_vjp("sigmoid")
def _sigmoid_vjp(node, g, needs):
    s = node.saved["out"]
    return (g * s * (1.0 - s),)


def erf(a: Tensor) -> Tensor:
    return a.tape._record("erf", (a,), _erf(a.value), {"x": a.value})


@_vjp("erf")
def _erf_vjp(node, g, needs):
    x = node.saved["x"]
    return (g * (2.0 / np.sqrt(np.pi)) * np.exp(-x * x),)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return a.tape._record("softmax", (a,), out, {"out": out, "axis": axis})


@_vjp("softmax")
def _softmax_vjp(node, g, needs):
    y, axis = node.saved["out"], node.saved["axis"]
    return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)


# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    return a.tape._record("reduce-sum", (a,), a.value.sum(axis=axes, keepdims=keepdims),
                          {"axes": axes, "keepdims": keepdims, "shape": a.shape})


def _expand_reduced(g, axes, keepdims, shape):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


@_vjp("reduce-sum")
def _sum_vjp(node, g, needs):
    s = node.saved
    return (np.array(_expand_reduced(g, s["axes"], s["keepdims"], s["shape"])),)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ShapeError("reduce-mean over an empty axis")
    return a.tape._record("reduce-mean", (a,), a.value.mean(axis=axes, keepdims=keepdims),
                          {"axes": axes, "keepdims": keepdims, "shape": a.shape,
                           "count": count})


@_vjp("reduce-mean")
def _mean_vjp(node, g, needs):
    s = node.saved
    return (_expand_reduced(g, s["axes"], s["keepdims"], s["shape"]) / s["count"],)


def reduce_var(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by N)."""
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ShapeError("reduce-var over an empty axis")
    centered = a.value - a.value.mean(axis=axes, keepdims=True)
    out = (centered * centered).mean(axis=axes, keepdims=keepdims)
    return a.tape._record("reduce-var", (a,), out,
                          {"axes": axes, "keepdims": keepdims, "shape": a.shape,
                           "count": count, "centered": centered})


@_vjp("reduce-var")
def _var_vjp(node, g, needs):
    s = node.saved
    ge = _expand_reduced(g, s["axes"], s["keepdims"], s["shape"])
    return (ge * (2.0 / s["count"]) * s["centered"],)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}")
    return a.tape._record("broadcast", (a,), out, {"shape": a.shape})


@_vjp("broadcast")
def _broadcast_vjp(node, g, needs):
    return (_unbroadcast(g, node.saved["shape"]),)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.value.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}")
    return a.tape._record("reshape", (a,), out.copy(), {"shape": a.shape})


@_vjp("reshape")
def _reshape_vjp(node, g, needs):
    return (g.reshape(node.saved["shape"]),)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid transpose axes {axes} for shape {a.shape}")
    return a.tape._record("transpose", (a,), np.ascontiguousarray(a.value.transpose(axes)),
                          {"axes": axes})


@_vjp("transpose")
def _transpose_vjp(node, g, needs):
    return (g.transpose(np.argsort(node.saved["axes"])),)


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries along ``axis`` (``np.take``); repeated indices accumulate."""
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    n = a.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather index out of range for axis of length {n}")
    return a.tape._record("gather", (a,), np.take(a.value, idx, axis=axis),
                          {"indices": idx, "axis": axis, "shape": a.shape})


@_vjp("gather")
def _gather_vjp(node, g, needs):
    s = node.saved
    out = np.zeros(s["shape"])
    moved = np.moveaxis(out, s["axis"], 0)
    np.add.at(moved, s["indices"], np.moveaxis(g, s["axis"], 0))
    return (out,)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    tape = _tape_of(*tensors)
    tensors = [_lift(tape, t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}")
    sizes = [t.shape[axis] for t in tensors]
    return tape._record("concat", tensors, out, {"sizes": sizes, "axis": axis})


@_vjp("concat")
def _concat_vjp(node, g, needs):
    sizes, axis = node.saved["sizes"], node.saved["axis"]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


# gradient manipulation


def detach(y: Tensor) -> Tensor:
    """Constant operator: identity on values, zero Jacobian."""
    return y.tape._record("detach", (y,), y.value.copy(), policy_tag="detach",
                          requires_grad=False)


constant_op = detach


def swap_backward(f: Tensor, g: Tensor) -> Tensor:
    """Forward value of ``f``, backward as if the node were ``g``.

    ``g`` may also be the literal ``0``, which makes this the constant operator.
    """
    if not isinstance(g, Tensor):
        if np.any(np.asarray(g) != 0):
            raise ShapeError("swap_backward surrogate must be a Tensor or 0")
        return f.tape._record("swap", (f,), f.value.copy(), policy_tag="swap",
                              requires_grad=False)
    if f.shape != g.shape:
        raise ShapeError(f"swap_backward: shapes {f.shape} and {g.shape} differ")
    if f.tape is not g.tape:
        raise EngineError("operands belong to different tapes")
    return f.tape._record("swap", (f, g), f.value.copy(), policy_tag="swap",
                          requires_grad=g.node.requires_grad)


@_vjp("swap")
def _swap_vjp(node, g, needs):
    return (None, g)
