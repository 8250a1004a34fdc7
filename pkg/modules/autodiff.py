"""
Reverse-mode automatic differentiation over float64 numpy arrays.

Every op builds its output eagerly and, when any input requires a gradient
and recording is enabled, attaches a closure that maps the output gradient
back onto the inputs. `backward` walks that tape in reverse topological
order. Parameters live in gate-tagged `ParamGroup`s so the optimizer can
freeze whole groups per example kind.
"""

import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import GateError, GradientError, ShapeError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    """Whether ops on this thread currently record onto the tape."""
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording on the current thread (decoding, evaluation)."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


# ========================================
# TENSOR
# ========================================

class Tensor:
    """Dense float64 array with an optional place on the differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the payload."""
        return self.data.reshape(-1)

    @property
    def tape_id(self) -> Optional[int]:
        return id(self) if self._backward is not None else None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", [self.shape], "tensor is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> "GradStore":
        return backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Operator sugar; every path goes through the recorded ops below.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def record(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result, placing it on the tape when a parent needs gradients.

    `backward_fn` receives the output gradient and returns one gradient (or
    None) per parent, each shaped like that parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape], "operands must broadcast") from None


# ========================================
# ELEMENTWISE OPS
# ========================================

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; numpy broadcasting rules apply to both operands."""
    _broadcast_shape("add", a, b)
    return record(a.data + b.data, (a, b), "add",
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference; broadcasting as in `add`."""
    _broadcast_shape("sub", a, b)
    return record(a.data - b.data, (a, b), "sub",
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; broadcasting as in `add`."""
    _broadcast_shape("mul", a, b)
    a_data, b_data = a.data, b.data
    return record(a_data * b_data, (a, b), "mul",
                  lambda g: (_unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return record(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), "exp", lambda g: (g * out,))


# ========================================
# LINEAR ALGEBRA & SHAPE OPS
# ========================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product `a @ b`.

    `b` must be 2-D (K×N). `a` may have any rank ≥ 1 with trailing size K;
    leading axes of `a` are treated as a batch, so [T,U,K] @ [K,N] → [T,U,N].
    """
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape], "need a[..., K] @ b[K, N]")
    a_data, b_data = a.data, b.data

    def _backward(g):
        grad_a = g @ b_data.T
        grad_b = a_data.reshape(-1, a_data.shape[-1]).T @ g.reshape(-1, b_data.shape[1])
        return grad_a, grad_b

    return record(a_data @ b_data, (a, b), "matmul", _backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the two axes of a 2-D tensor."""
    if a.data.ndim != 2:
        raise ShapeError("transpose", [a.shape], "operand must be 2-D")
    return record(a.data.T.copy(), (a,), "transpose", lambda g: (g.T,))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Row-major reshape; the element count must be preserved."""
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", [a.shape, tuple(shape)], "element count differs") from None
    original = a.shape
    return record(out.copy(), (a,), "reshape", lambda g: (g.reshape(original),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along `axis`; all other axes must agree."""
    if not tensors:
        raise ShapeError("concat", [], "no operands")
    shapes = [t.shape for t in tensors]
    ndim = len(shapes[0])
    axis = axis % ndim if ndim else 0
    for shape in shapes[1:]:
        if len(shape) != ndim or any(s != r for i, (s, r) in enumerate(zip(shape, shapes[0])) if i != axis):
            raise ShapeError("concat", shapes, f"non-concat axes must match (axis={axis})")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [s[axis] for s in shapes])

    def _backward(g):
        index = [slice(None)] * g.ndim
        grads = []
        for start, stop in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(int(start), int(stop))
            grads.append(g[tuple(index)])
        return grads

    return record(out, tuple(tensors), "concat", _backward)


def slice_(a: Tensor, key) -> Tensor:
    """Numpy indexing (basic slices or integer arrays); the result is a copy."""
    try:
        out = np.array(a.data[key], dtype=np.float64)
    except IndexError as exc:
        raise ShapeError("slice", [a.shape], str(exc)) from None
    shape = a.shape

    def _backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, key, g)
        return (grad,)

    return record(out, (a,), "slice", _backward)


def embed_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of a V×E table; returns len(ids)×E."""
    index = np.asarray(ids, dtype=np.int64).reshape(-1)
    if table.data.ndim != 2:
        raise ShapeError("embed_lookup", [table.shape], "table must be 2-D")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError("embed_lookup", [table.shape, index.shape], "id outside table")
    shape = table.shape

    def _backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, index, g)
        return (grad,)

    return record(table.data[index], (table,), "embed_lookup", _backward)


# ========================================
# REDUCTIONS & NORMALIZERS
# ========================================

def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    return record(np.array(a.data.sum()), (a,), "sum", lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, size = a.shape, max(a.data.size, 1)
    return record(np.array(a.data.mean() if a.data.size else 0.0), (a,), "mean",
                  lambda g: (np.broadcast_to(g / size, shape).copy(),))


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """log Σ exp over `axis` (kept out of the result shape)."""
    if a.data.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError("logsumexp", [a.shape], "reduction axis is empty")
    peak = a.data.max(axis=axis, keepdims=True)
    out = peak + np.log(np.exp(a.data - peak).sum(axis=axis, keepdims=True))
    weights = np.exp(a.data - out)
    return record(np.squeeze(out, axis=axis), (a,), "logsumexp",
                  lambda g: (np.expand_dims(g, axis) * weights,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Normalized exponentials over `axis`."""
    if a.data.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError("softmax", [a.shape], "normalization axis is empty")
    shifted = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)
    return record(out, (a,), "softmax",
                  lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Log of `softmax`, computed as a - logsumexp(a)."""
    if a.data.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError("log_softmax", [a.shape], "normalization axis is empty")
    peak = a.data.max(axis=axis, keepdims=True)
    out = a.data - peak - np.log(np.exp(a.data - peak).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return record(out, (a,), "log_softmax",
                  lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


OPS: Dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "concat": lambda *inputs, axis=0: concat(inputs, axis=axis),
    "slice": slice_,
    "embed_lookup": embed_lookup,
    "logsumexp": logsumexp,
    "transpose": transpose,
    "reshape": reshape,
    "sum": sum_,
    "mean": mean,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a named op; see the individual functions for the shape rules."""
    if kind not in OPS:
        raise ShapeError(kind, [getattr(t, "shape", ()) for t in inputs], "unknown op")
    return OPS[kind](*inputs, **kwargs)


# ========================================
# BACKWARD
# ========================================

class GradStore:
    """Gradients produced by one backward pass, keyed by tensor identity."""

    def __init__(self):
        self._grads: Dict[int, np.ndarray] = {}
        self._tensors: Dict[int, Tensor] = {}

    def _accumulate(self, tensor: Tensor, grad: np.ndarray):
        key = id(tensor)
        if key in self._grads:
            self._grads[key] = self._grads[key] + grad
        else:
            self._grads[key] = np.array(grad, dtype=np.float64)
            self._tensors[key] = tensor

    def get(self, tensor: Tensor) -> np.ndarray:
        """Gradient for `tensor`; zeros when it was not reachable from the loss."""
        grad = self._grads.get(id(tensor))
        return np.zeros_like(tensor.data) if grad is None else grad

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def __len__(self):
        return len(self._grads)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> GradStore:
    """Propagate d(loss)/d(·) to every tensor on the tape that requires grad.

    Leaf tensors also receive the result in `.grad` (overwritten per call).
    """
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    store = GradStore()
    if not loss.requires_grad:
        return store
    upstream: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = upstream.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is None:
            store._accumulate(node, grad)
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            upstream[key] = upstream[key] + parent_grad if key in upstream else parent_grad
    for key, tensor in store._tensors.items():
        tensor.grad = store._grads[key]
    return store


# ========================================
# PARAMETERS & GATING
# ========================================

class Gate(Enum):
    """Gradient-gating class of a parameter group; the value is the on-disk code."""
    FIRST_PASS = 0
    ENCODER_STACK = 1
    ENCODER_ATTENTION = 2
    HYPOTHESIS_ENCODER = 3
    HYPOTHESIS_ATTENTION = 4
    FIXED_CONTEXT_E = 5
    FIXED_CONTEXT_B = 6
    SECOND_PASS_DECODER = 7

    @classmethod
    def from_code(cls, code: int) -> "Gate":
        try:
            return cls(code)
        except ValueError:
            raise GateError(f"unknown gate code {code}") from None


class ExampleKind(Enum):
    """Paired = real audio with transcript; Unpaired = text with synthesized audio."""
    PAIRED = 0
    UNPAIRED = 1


REQUIRED_FROZEN: Dict[ExampleKind, FrozenSet[Gate]] = {
    ExampleKind.PAIRED: frozenset({Gate.FIXED_CONTEXT_E, Gate.FIXED_CONTEXT_B}),
    ExampleKind.UNPAIRED: frozenset({Gate.ENCODER_STACK, Gate.ENCODER_ATTENTION}),
}


@dataclass
class ParamGroup:
    name: str
    gate: Gate
    params: List[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if not isinstance(self.gate, Gate):
            raise GateError(f"group {self.name!r} has unknown gate {self.gate!r}")

    def snapshot(self) -> List[np.ndarray]:
        return [p.data.copy() for p in self.params]


@dataclass(frozen=True)
class GradMask:
    """Gates whose parameters must not move for one example kind."""
    example_kind: ExampleKind
    frozen_gates: FrozenSet[Gate]

    def __post_init__(self):
        unknown = [g for g in self.frozen_gates if not isinstance(g, Gate)]
        if unknown:
            raise GateError(f"mask references unknown gates: {unknown}")
        missing = REQUIRED_FROZEN[self.example_kind] - self.frozen_gates
        if missing:
            names = sorted(g.name for g in missing)
            raise GateError(f"{self.example_kind.name} mask must freeze {names}")

    @classmethod
    def for_kind(cls, kind: ExampleKind, extra_frozen: Iterable[Gate] = ()) -> "GradMask":
        return cls(kind, frozenset(REQUIRED_FROZEN[kind]) | frozenset(extra_frozen))

    def allows(self, gate: Gate) -> bool:
        return gate not in self.frozen_gates


def init_uniform(rng: np.random.Generator, shape: Tuple[int, ...], scale: float = 0.1) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


def init_zeros(shape: Tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def param_key(group: ParamGroup, index: int) -> str:
    return f"{group.name}/{index}"


# ========================================
# OPTIMIZERS
# ========================================

@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class SgdOptimizer:
    """Plain gradient descent."""

    def __init__(self, learning_rate: float = 1e-3, clip_norm: Optional[float] = 5.0):
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm

    def update(self, key: str, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return value - self.learning_rate * grad


class AdamOptimizer:
    """Adaptive-moment rule with per-parameter step counters."""

    def __init__(self, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: Optional[float] = 5.0):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.slots: Dict[str, AdamSlot] = {}

    def update(self, key: str, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        slot = self.slots.get(key)
        if slot is None:
            slot = self.slots[key] = AdamSlot(np.zeros_like(value), np.zeros_like(value))
        slot.step += 1
        slot.m = self.beta1 * slot.m + (1.0 - self.beta1) * grad
        slot.v = self.beta2 * slot.v + (1.0 - self.beta2) * grad * grad
        m_hat = slot.m / (1.0 - self.beta1 ** slot.step)
        v_hat = slot.v / (1.0 - self.beta2 ** slot.step)
        return value - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def apply_update(groups: Sequence[ParamGroup], grads: GradStore, mask: GradMask, optimizer) -> Dict[str, float]:
    """Move every parameter whose gate is not frozen by `mask`.

    Frozen groups are skipped entirely, so their values and optimizer slots
    stay bitwise unchanged. The remaining gradients are clipped jointly by
    global norm before the optimizer rule runs.
    """
    for group in groups:
        if not isinstance(group.gate, Gate):
            raise GateError(f"group {group.name!r} has unknown gate {group.gate!r}")
    live = [(group, i, p, grads.get(p)) for group in groups if mask.allows(group.gate)
            for i, p in enumerate(group.params)]
    norm = math.sqrt(sum(float(np.sum(g * g)) for _, _, _, g in live))
    scale = 1.0
    if optimizer.clip_norm is not None and norm > optimizer.clip_norm:
        scale = optimizer.clip_norm / norm
        logger.debug(f"Clipping gradient norm {norm:.4f} to {optimizer.clip_norm}")
    for group, i, param, grad in live:
        if scale != 1.0:
            grad = grad * scale
        param.data = optimizer.update(param_key(group, i), param.data, grad)
    return {"grad_norm": norm, "clip_scale": scale, "updated_tensors": float(len(live))}
