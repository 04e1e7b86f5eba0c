"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive evaluates eagerly with numpy. When a tape is active and any
operand requires a gradient, the primitive appends a node holding its
operands, its output, a pure forward closure (for replay) and an adjoint
closure. ``Tape.backward`` sweeps the nodes in reverse recording order, which
is a valid reverse topological order because operands always precede their
results on the tape.
"""
from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractViolation,
    DegenerateVarianceError,
    OracleFailure,
    ParameterError,
    TapeStateError,
)

DEBUG = os.environ.get("STARS_DEBUG", "") not in ("", "0")

_TAPES: list["Tape"] = []
# primitive kind -> multiplier applied to its adjoint; only used to test the gradient checker
_ADJOINT_FAULTS: dict[str, float] = {}


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward: Callable[..., np.ndarray]
    adjoint: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def owns(self, t: Tensor) -> bool:
        return any(n.output is t for n in self.nodes)

    def replay(self) -> list[np.ndarray]:
        """Re-evaluate every recorded node from its recorded operands."""
        return [n.forward(*[x.data for x in n.inputs]) for n in self.nodes]

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        if self.consumed:
            raise TapeStateError("tape already consumed by a previous backward call")
        if loss.data.size != 1:
            raise ContractViolation(f"backward: loss must be scalar, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(n.output) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            for x in node.inputs:
                if x.requires_grad and id(x) not in produced:
                    leaves.setdefault(id(x), x)
            if g is None:
                continue
            scale = _ADJOINT_FAULTS.get(node.kind)
            if scale is not None:
                g = g * scale
            for x, gx in zip(node.inputs, node.adjoint(g)):
                if gx is None or not x.requires_grad:
                    continue
                k = id(x)
                grads[k] = grads[k] + gx if k in grads else gx
        self.nodes = []
        targets = list(params) if params is not None else list(leaves.values())
        return {p: grads.get(id(p), np.zeros_like(p.data)) for p in targets}


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    tape = active_tape()
    if tape is None:
        raise TapeStateError("backward called without an active tape")
    return tape.backward(loss, params)


@contextlib.contextmanager
def corrupted_adjoint(kind: str, factor: float = 1.5):
    """Scale the adjoint of one primitive; exists to test gradient checking."""
    _ADJOINT_FAULTS[kind] = factor
    try:
        yield
    finally:
        _ADJOINT_FAULTS.pop(kind, None)


def _record(kind, inputs, out_data, forward, adjoint) -> Tensor:
    if DEBUG and not np.all(np.isfinite(out_data)):
        if all(np.all(np.isfinite(x.data)) for x in inputs):
            raise FloatingPointError(f"{kind}: non-finite output from finite inputs")
    needs = any(x.requires_grad for x in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.nodes.append(Node(kind, tuple(inputs), out, forward, adjoint))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(kind, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, np.add,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, np.subtract,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Element-wise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("elementwise_mul", a, b)
    return _record("elementwise_mul", (a, b), a.data * b.data, np.multiply,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def adjoint(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", (a, b), a.data @ b.data, np.matmul, adjoint)


def concat_last_axis(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ContractViolation(f"concat_last_axis: incompatible shapes {a.shape} and {b.shape}")
    n = a.shape[-1]
    fwd = lambda x, y: np.concatenate([x, y], axis=-1)
    return _record("concat_last_axis", (a, b), fwd(a.data, b.data), fwd,
                   lambda g: (g[..., :n], g[..., n:]))


def relu(x) -> Tensor:
    x = as_tensor(x)
    fwd = lambda v: np.maximum(v, 0.0)
    return _record("relu", (x,), fwd(x.data), fwd, lambda g: (g * (x.data > 0),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record("exp", (x,), out, np.exp, lambda g: (g * out,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _record("reshape", (x,), out, lambda v: v.reshape(shape), lambda g: (g.reshape(x.shape),))


def _norm_axes(ndim, axis):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(x.ndim, axis)
    fwd = lambda v: v.sum(axis=axes, keepdims=keepdims)
    return _record("sum", (x,), fwd(x.data), fwd,
                   lambda g: (_expand(g, x.shape, axes, keepdims).copy(),))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(x.ndim, axis)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def l1_norm(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(x.ndim, axis)
    fwd = lambda v: np.abs(v).sum(axis=axes, keepdims=keepdims)
    return _record("l1_norm", (x,), fwd(x.data), fwd,
                   lambda g: (_expand(g, x.shape, axes, keepdims) * np.sign(x.data),))


def l2_norm(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(x.ndim, axis)
    fwd = lambda v: np.sqrt((v * v).sum(axis=axes, keepdims=keepdims))
    out = fwd(x.data)

    def adjoint(g):
        n = _expand(out, x.shape, axes, keepdims)
        safe = np.where(n > 0, n, 1.0)
        return (_expand(g, x.shape, axes, keepdims) * np.where(n > 0, x.data / safe, 0.0),)

    return _record("l2_norm", (x,), out, fwd, adjoint)


def min_over_set(x, axis: int = 0) -> Tensor:
    """Minimum along ``axis``; the adjoint routes to the first minimiser only."""
    x = as_tensor(x)
    axis = axis % x.ndim
    out = x.data.min(axis=axis)

    def adjoint(g):
        idx = np.expand_dims(x.data.argmin(axis=axis), axis)
        onehot = np.zeros_like(x.data)
        np.put_along_axis(onehot, idx, 1.0, axis=axis)
        return (onehot * np.expand_dims(g, axis),)

    return _record("min_over_set", (x,), out, lambda v: v.min(axis=axis), adjoint)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise ContractViolation(f"take: index out of range for axis of size {x.shape[axis]}")

    def adjoint(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    fwd = lambda v: np.take(v, idx, axis=axis)
    return _record("take", (x,), fwd(x.data), fwd, adjoint)


# ---------------------------------------------------------------- batch norm

@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, feature_shape, momentum=0.1, eps=1e-5):
        return cls(np.zeros(feature_shape), np.ones(feature_shape), momentum, eps)


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool, update_stats: bool = True) -> Tensor:
    """Normalise over axis 0; ``gamma``/``beta`` cover the remaining axes."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    feat = x.shape[1:]
    if gamma.shape != feat or beta.shape != feat:
        raise ContractViolation(
            f"batch_norm: features {feat} vs scale {gamma.shape} / shift {beta.shape}")
    eps = state.eps
    if not training:
        mu, var = state.running_mean, state.running_var

        def fwd(v, gm, bt):
            return gm * (v - mu) / np.sqrt(var + eps) + bt

        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv

        def adjoint(g):
            return g * gamma.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

        return _record("batch_norm", (x, gamma, beta), fwd(x.data, gamma.data, beta.data), fwd, adjoint)

    n = x.shape[0]
    if n < 2:
        raise DegenerateVarianceError("batch_norm: training mode needs a batch of at least 2")

    def fwd(v, gm, bt):
        m = v.mean(axis=0)
        s2 = v.var(axis=0)
        return gm * (v - m) / np.sqrt(s2 + eps) + bt

    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data
    if update_stats:
        mom = state.momentum
        state.running_mean = (1 - mom) * state.running_mean + mom * mu
        state.running_var = (1 - mom) * state.running_var + mom * var * n / (n - 1)

    def adjoint(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record("batch_norm", (x, gamma, beta), out, fwd, adjoint)


# ---------------------------------------------------------------- dispatch by name

PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise_mul": mul,
    "concat_last_axis": concat_last_axis,
    "relu": relu,
    "batch_norm": batch_norm,
    "reshape": reshape,
    "sum": sum,
    "l1_norm": l1_norm,
    "l2_norm": l2_norm,
    "exp": exp,
    "min_over_set": min_over_set,
    "take": take,
}


def eval_primitive(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ParameterError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- finite differences

def finite_difference_gradient(f: Callable[[], float], params: Sequence[Tensor], h: float = 1e-6,
                               coords: dict[Tensor, np.ndarray] | None = None) -> dict[Tensor, np.ndarray]:
    """Central differences of ``f`` w.r.t. each parameter entry.

    ``f`` reads the parameters' current values. ``coords`` optionally restricts
    the perturbed flat indices per parameter; other entries are reported as 0.
    """
    if not h > 0:
        raise ParameterError(f"finite difference step must be positive, got {h}")
    out = {}
    for p in params:
        base = p.data.copy()
        flat = base.reshape(-1)
        g = np.zeros_like(flat)
        idxs = range(flat.size) if coords is None or p not in coords else coords[p]
        for i in idxs:
            work = flat.copy()
            work[i] = flat[i] + h
            p.data = work.reshape(base.shape)
            fp = float(f())
            work[i] = flat[i] - h
            p.data = work.reshape(base.shape)
            fm = float(f())
            p.data = base
            if not (np.isfinite(fp) and np.isfinite(fm)):
                label = p.name or "param"
                raise OracleFailure(f"non-finite objective when perturbing coordinate {i} of {label}")
            g[i] = (fp - fm) / (2 * h)
        p.data = base
        out[p] = g.reshape(base.shape)
    return out


# ---------------------------------------------------------------- ADAM

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **hyper)


def adam_step(params: Sequence[Tensor], grads, state: AdamState, lr: float):
    """One bias-corrected ADAM update. ``grads`` is a mapping or a sequence aligned with ``params``."""
    if len(state.m) != len(params):
        raise ContractViolation(f"adam_step: state tracks {len(state.m)} params, got {len(params)}")
    gl = [grads[p] for p in params] if isinstance(grads, dict) else list(grads)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for k, (p, g) in enumerate(zip(params, gl)):
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ContractViolation(f"adam_step: gradient shape {g.shape} vs parameter shape {p.shape}")
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = state.m[k] / (1 - b1 ** t)
        vhat = state.v[k] / (1 - b2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state
