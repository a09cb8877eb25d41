"""A small reverse-mode tape covering exactly the primitives the SWIN model uses.

Operations take and return :class:`Var`.  When a :class:`Tape` is active and an
input requires a gradient, the op appends a node with its backward rule;
``Tape.backward`` walks the nodes in reverse order and finally adds leaf
gradients into the owning :class:`Parameter`.  Outside a tape the ops are plain
numpy computations, which is how inference runs.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.special import erf

from . import tensor as T
from .errors import ParameterError, ShapeError, UnsupportedPrimitiveError


class Parameter:
    """A trainable tensor. ``trainable=False`` freezes it: grad stays zero, value never moves."""

    def __init__(self, value, trainable: bool = True):
        self.value = T.as_tensor(value)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def copy(self, dtype=None) -> "Parameter":
        value = self.value.astype(dtype) if dtype is not None else self.value.copy()
        return Parameter(value, trainable=self.trainable)

    def __repr__(self):
        return f"Parameter(shape={self.value.shape}, trainable={self.trainable})"


class Var:
    __slots__ = ("value", "requires_grad", "grad", "param")

    def __init__(self, value, requires_grad: bool = False, param: Optional[Parameter] = None):
        self.value = value
        self.requires_grad = requires_grad
        self.grad = None
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    op: str
    out: Var
    inputs: tuple
    backward: Optional[Callable]


_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_state, "tape", None)


class Tape:
    """Records primitive ops in forward order; use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Var] = {}
        self._prev = None

    def __enter__(self):
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def leaf(self, param: Parameter) -> Var:
        var = self._leaves.get(id(param))
        if var is None:
            var = Var(param.value, requires_grad=param.trainable, param=param)
            self._leaves[id(param)] = var
        return var

    def record(self, op, out, inputs, backward):
        self.nodes.append(_Node(op, out, inputs, backward))

    def backward(self, loss: Var):
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.value.shape)}")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            if node.backward is None:
                raise UnsupportedPrimitiveError(f"no gradient rule for primitive '{node.op}'")
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not isinstance(inp, Var) or not inp.requires_grad:
                    continue
                inp.grad = ig if inp.grad is None else inp.grad + ig
            node.out.grad = None
        for var in self._leaves.values():
            if var.param.trainable and var.grad is not None:
                var.param.grad = var.param.grad + var.grad.astype(var.param.grad.dtype, copy=False)


def param_var(param: Parameter) -> Var:
    tape = _active_tape()
    if tape is None:
        return Var(param.value)
    return tape.leaf(param)


def constant(value) -> Var:
    return Var(np.asarray(value))


def _wrap(x) -> Var:
    if isinstance(x, Var):
        return x
    if isinstance(x, Parameter):
        return param_var(x)
    return Var(np.asarray(x))


def _emit(op: str, value, inputs: tuple, backward: Optional[Callable]) -> Var:
    tape = _active_tape()
    needs = tape is not None and any(i.requires_grad for i in inputs)
    out = Var(value, requires_grad=needs)
    if needs:
        tape.record(op, out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------


def matmul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.value.shape[-1] != b.value.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    av, bv = a.value, b.value

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        if ga is not None:
            ga = _unbroadcast(ga, av.shape)
        return ga, gb

    return _emit("matmul", np.matmul(av, bv), (a, b), backward)


def add(a, b) -> Var:
    """Broadcasting add; covers bias-add, residual add and attention bias/mask."""
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.value.shape, b.value.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit("add", a.value + b.value, (a, b), backward)


def scale(x, c: float) -> Var:
    x = _wrap(x)
    c = x.value.dtype.type(c)
    return _emit("scale", x.value * c, (x,), lambda g: (g * c,))


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Var:
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    xv = x.value
    c = xv.shape[-1]
    if gamma.value.shape != (c,) or beta.value.shape != (c,):
        raise ShapeError(f"layernorm: channel dim {c} does not match gamma {list(gamma.shape)}")
    mean = xv.mean(axis=-1, keepdims=True)
    centered = xv - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xv.dtype.type(eps))
    xhat = centered * inv
    out = xhat * gamma.value + beta.value

    def backward(g):
        gxhat = g * gamma.value
        gx = inv * (
            gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        ggamma = (g * xhat).reshape(-1, c).sum(axis=0)
        gbeta = g.reshape(-1, c).sum(axis=0)
        return gx, ggamma, gbeta

    return _emit("layernorm", out.astype(xv.dtype, copy=False), (x, gamma, beta), backward)


def softmax(x) -> Var:
    x = _wrap(x)
    p = T.softmax_lastdim(x.value)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", p, (x,), backward)


def gelu(x) -> Var:
    x = _wrap(x)
    xv = x.value

    def backward(g):
        cdf = 0.5 * (1.0 + erf(xv / math.sqrt(2.0)))
        pdf = np.exp(-0.5 * xv * xv) / math.sqrt(2.0 * math.pi)
        return ((g * (cdf + xv * pdf)).astype(xv.dtype, copy=False),)

    return _emit("gelu", T.gelu(xv), (x,), backward)


def relu(x) -> Var:
    x = _wrap(x)
    xv = x.value
    # subgradient 0 at x == 0
    return _emit("relu", T.relu(xv), (x,), lambda g: (g * (xv > 0),))


def mean_pool(x, axis: int = 1) -> Var:
    x = _wrap(x)
    shape = x.value.shape
    n = shape[axis]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _emit("mean_pool", x.value.mean(axis=axis), (x,), backward)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def kd_loss(student_logits, teacher_logits, temperature: float = 1.0) -> Var:
    """Batch-mean ``KL(softmax(teacher/T) || softmax(student/T))``."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    s = _wrap(student_logits)
    t = np.asarray(teacher_logits.value if isinstance(teacher_logits, Var) else teacher_logits)
    if s.value.shape != t.shape or s.value.ndim != 2:
        raise ShapeError(f"kd_loss: student {list(s.shape)} vs teacher {list(t.shape)}")
    dt = s.value.dtype
    log_ps = _log_softmax(s.value / dt.type(temperature))
    log_pt = _log_softmax(t.astype(dt) / dt.type(temperature))
    pt = np.exp(log_pt)
    batch = s.value.shape[0]
    loss = np.asarray((pt * (log_pt - log_ps)).sum() / batch, dtype=dt)

    def backward(g):
        return (g * (np.exp(log_ps) - pt) / (temperature * batch),)

    return _emit("kd_loss", loss, (s,), backward)


def cross_entropy(logits, labels) -> Var:
    """Batch-mean hard-label cross entropy (teacher training)."""
    z = _wrap(logits)
    labels = np.asarray(labels)
    batch = z.value.shape[0]
    log_p = _log_softmax(z.value)
    rows = np.arange(batch)
    loss = np.asarray(-log_p[rows, labels].sum() / batch, dtype=z.value.dtype)

    def backward(g):
        grad = np.exp(log_p)
        grad[rows, labels] -= 1.0
        return (g * grad / batch,)

    return _emit("cross_entropy", loss, (z,), backward)


def total(x) -> Var:
    x = _wrap(x)
    shape = x.value.shape
    return _emit("sum", np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def squared_error(pred, target) -> Var:
    pred = _wrap(pred)
    diff = pred.value - np.asarray(target, dtype=pred.value.dtype)
    return _emit("squared_error", np.asarray((diff * diff).sum()), (pred,), lambda g: (2.0 * g * diff,))


# Structural ops: pure data movement, backward is the adjoint permutation.


def reshape(x, shape) -> Var:
    x = _wrap(x)
    old = x.value.shape
    return _emit("reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Var:
    x = _wrap(x)
    inv = np.argsort(axes)
    return _emit("transpose", np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def take(x, index: np.ndarray, axis: int) -> Var:
    """Gather along ``axis``; indices may repeat (gradients accumulate)."""
    x = _wrap(x)
    shape = x.value.shape
    dtype = x.value.dtype

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (full.astype(dtype, copy=False),)

    return _emit("take", np.take(x.value, index, axis=axis), (x,), backward)


def permute_tokens(x, perm: np.ndarray, inverse: np.ndarray, axis: int = 1) -> Var:
    """Gather with a bijective index; backward gathers with the inverse permutation."""
    x = _wrap(x)
    return _emit(
        "permute", np.take(x.value, perm, axis=axis), (x,), lambda g: (np.take(g, inverse, axis=axis),)
    )


def select(x, i: int) -> Var:
    """``x[i]`` along the leading axis."""
    x = _wrap(x)
    shape = x.value.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[i] = g
        return (full,)

    return _emit("select", x.value[i], (x,), backward)


def round_nograd(x) -> Var:
    """Fake-quantization rounding. Recorded without a gradient rule on purpose."""
    x = _wrap(x)
    return _emit("round", T.round_half_away(x.value), (x,), None)


# --------------------------------------------------------------------------
# Optimizer and gradient checking
# --------------------------------------------------------------------------


class SGD:
    """SGD with momentum: ``v <- momentum*v + grad``, ``p <- p - lr*v``."""

    def __init__(self, learning_rate: float = 1e-2, momentum: float = 0.9):
        if not learning_rate > 0:
            raise ParameterError(f"learning_rate must be > 0, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ParameterError(f"momentum must be in [0, 1), got {momentum}")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: dict[int, np.ndarray] = {}

    def step(self, params: Iterable[Parameter]):
        for p in params:
            if not p.trainable:
                continue
            v = self.velocity.get(id(p))
            v = p.grad.copy() if v is None else self.momentum * v + p.grad
            v = v.astype(p.value.dtype, copy=False)
            self.velocity[id(p)] = v
            p.value = p.value - p.value.dtype.type(self.learning_rate) * v


def forward_backward(params: Iterable[Parameter], loss_fn: Callable[[], Var]) -> float:
    """Zero grads, run ``loss_fn`` under a fresh tape, backpropagate, return the loss."""
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    return float(loss.value)


@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    tolerance: float = 1e-3

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def grad_check(
    named_params: dict,
    loss_fn: Callable[[dict], Var],
    tolerance: float = 1e-3,
    h: float = 1e-3,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients with central finite differences replayed in float64.

    ``loss_fn`` receives a name -> Parameter mapping and must build the loss from
    those parameters only.  The relative error of an entry is
    ``|g - fd| / max(|g|, |fd|, 1e-2 * max|g over the parameter|, 1e-8)`` so
    entries that are tiny compared with the rest of their tensor are judged on
    the tensor's scale rather than on their own.
    """
    params64 = {name: p.copy(np.float64) for name, p in named_params.items()}
    forward_backward(params64.values(), lambda: loss_fn(params64))
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, p in params64.items():
        analytic = p.grad.copy()
        if not p.trainable:
            report.max_rel_error[name] = float(np.max(np.abs(analytic), initial=0.0))
            continue
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn(params64).value)
            flat[i] = orig - h
            down = float(loss_fn(params64).value)
            flat[i] = orig
            numeric[n] = (up - down) / (2 * h)
        g = analytic.reshape(-1)[idx]
        floor = max(1e-2 * float(np.max(np.abs(analytic), initial=0.0)), 1e-8)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(numeric)), floor)
        report.max_rel_error[name] = float(np.max(np.abs(g - numeric) / denom, initial=0.0))
    return report
