"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Every primitive is defined by a forward function on arrays and a
vector-Jacobian product written in terms of other primitives.  Because the
backward pass is itself made of primitives, running it with
``create_graph=True`` records a differentiable graph, and differentiating
the gradient a second time yields Hessian-vector products.

A :class:`Tape` records the primitives executed while it is active, in
execution (hence topological) order.  Gradients are computed by walking the
graph backwards from an output; a tape additionally supports replaying the
recorded forward computation.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from curvlab import activations as act
from curvlab.errors import NonScalarOutput, ShapeMismatch

_ids = itertools.count()
_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def grad_mode(enabled: bool):
    prev = _grad_enabled()
    _local.grad_enabled = enabled
    try:
        yield
    finally:
        _local.grad_enabled = prev


def no_grad():
    return grad_mode(False)


class Tensor:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("data", "requires_grad", "id", "op", "parents", "fwd", "vjp", "meta")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.op = "leaf" if requires_grad else "const"
        self.parents: tuple = ()
        self.fwd = None
        self.vjp = None
        self.meta = None

    # -- array-like conveniences ------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f", op={self.op}" if self.op not in ("const",) else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- operators ---------------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        if p == 2:
            return mul(self, self)
        if p == 1:
            return self
        raise NotImplementedError("only integer powers 1 and 2 are supported")

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def variable(x) -> Tensor:
    """A leaf that gradients can be taken with respect to."""
    t = Tensor(np.array(x, dtype=np.float64, copy=True), requires_grad=True)
    for tape in _tape_stack()[-1:]:
        tape._record(t)
    return t


def _apply(op: str, fwd: Callable, vjp: Callable, inputs: Sequence, meta=None) -> Tensor:
    inputs = tuple(as_tensor(t) for t in inputs)
    out = Tensor(fwd(*[t.data for t in inputs]))
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = op
        out.parents = inputs
        out.fwd = fwd
        out.vjp = vjp
        out.meta = meta
        for tape in _tape_stack()[-1:]:
            tape._record(out)
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


def _sum_to_array(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and g.shape[i + lead] != 1
    )
    out = g.sum(axis=axes, keepdims=True) if axes else g
    return out.reshape(shape)


def sum_to(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    in_shape = x.shape
    return _apply(
        "sum_to",
        lambda a: _sum_to_array(a, shape),
        lambda g, out, a: (broadcast_to(g, in_shape),),
        (x,),
    )


def broadcast_to(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    in_shape = x.shape
    return _apply(
        "broadcast_to",
        lambda a: np.broadcast_to(a, shape).copy(),
        lambda g, out, a: (sum_to(g, in_shape),),
        (x,),
    )


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    return _apply(
        "add",
        np.add,
        lambda g, out, a, b: (sum_to(g, a.shape), sum_to(g, b.shape)),
        (a, b),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    return _apply(
        "sub",
        np.subtract,
        lambda g, out, a, b: (sum_to(g, a.shape), neg(sum_to(g, b.shape))),
        (a, b),
    )


def neg(a) -> Tensor:
    return _apply("neg", np.negative, lambda g, out, a: (neg(g),), (a,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    return _apply(
        "mul",
        np.multiply,
        lambda g, out, a, b: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)),
        (a, b),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")

    def vjp(g, out, a, b):
        ga = div(g, b)
        return sum_to(ga, a.shape), sum_to(neg(mul(ga, out)), b.shape)

    return _apply("div", np.divide, vjp, (a, b))


def exp(a) -> Tensor:
    return _apply("exp", np.exp, lambda g, out, a: (mul(g, out),), (a,))


def log(a) -> Tensor:
    return _apply("log", np.log, lambda g, out, a: (div(g, a),), (a,))


def square(a) -> Tensor:
    return mul(a, a)


def _outer(a: Tensor, b: Tensor) -> Tensor:
    return matmul(reshape(a, (-1, 1)), reshape(b, (1, -1)))


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D and 2-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeMismatch(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def vjp(g, out, a, b):
        if a.ndim == 2 and b.ndim == 2:
            return matmul(g, transpose(b)), matmul(transpose(a), g)
        if a.ndim == 1 and b.ndim == 2:
            return matmul(b, g), _outer(a, g)
        if a.ndim == 2 and b.ndim == 1:
            return _outer(g, b), matmul(g, a)
        return mul(g, b), mul(g, a)

    return _apply("matmul", np.matmul, vjp, (a, b))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got shape {a.shape}")
    return _apply("transpose", lambda x: x.T.copy(), lambda g, out, a: (transpose(g),), (a,))


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _apply(
        "permute",
        lambda x: np.ascontiguousarray(np.transpose(x, axes)),
        lambda g, out, a: (permute(g, inv),),
        (a,),
    )


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    try:
        np.empty(in_shape).reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {in_shape} into {tuple(shape)}") from None
    return _apply(
        "reshape",
        lambda x: x.reshape(shape),
        lambda g, out, a: (reshape(g, in_shape),),
        (a,),
    )


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    in_shape = a.shape
    if axis is None:
        kept = (1,) * len(in_shape)
    else:
        ax = axis % len(in_shape)
        kept = tuple(1 if i == ax else n for i, n in enumerate(in_shape))

    def vjp(g, out, a):
        return (broadcast_to(reshape(g, kept), in_shape),)

    return _apply("sum", lambda x: np.sum(x, axis=axis, keepdims=keepdims), vjp, (a,))


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return sum(a, axis=axis) * (1.0 / n)


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim == 1:
        return matmul(a, b)
    return sum(mul(a, b))


# ---------------------------------------------------------------------------
# indexing primitives (linear, mutually adjoint)
# ---------------------------------------------------------------------------


def gather(a, index: np.ndarray) -> Tensor:
    """``a.ravel()[index]``; the result has ``index.shape``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    in_shape = a.shape
    return _apply(
        "gather",
        lambda x: x.reshape(-1)[index],
        lambda g, out, a: (scatter_add(g, index, in_shape),),
        (a,),
    )


def scatter_add(g, index: np.ndarray, shape: tuple) -> Tensor:
    """Adjoint of :func:`gather`: accumulate ``g`` into a zero array of ``shape``."""
    g = as_tensor(g)
    index = np.asarray(index, dtype=np.intp)
    shape = tuple(shape)
    size = int(np.prod(shape))

    def fwd(x):
        flat = np.bincount(index.reshape(-1), weights=x.reshape(-1), minlength=size)
        return flat.reshape(shape)

    return _apply("scatter_add", fwd, lambda gg, out, g: (gather(gg, index),), (g,))


def pick(logits, labels) -> Tensor:
    """Row-wise selection ``logits[i, labels[i]]`` for a 2-D ``logits``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels shape {labels.shape} does not match {n} rows")
    return gather(logits, np.arange(n) * c + labels)


# ---------------------------------------------------------------------------
# nonlinear primitives
# ---------------------------------------------------------------------------


def activation(z, spec: act.ActivationSpec, order: int = 0) -> Tensor:
    """Elementwise activation (order 0) or its derivative of the given order."""
    fns = (act.value, act.d1, act.d2)
    if order >= len(fns):
        raise NotImplementedError("derivatives above second order are not available")
    fn = fns[order]

    def vjp(g, out, z):
        return (mul(g, activation(z, spec, order + 1)),)

    return _apply(f"act[{spec}]^{order}", lambda x: fn(spec, x), vjp, (z,), meta=spec)


def _softmax_array(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z) -> Tensor:
    """Softmax over the last axis."""

    def vjp(g, out, z):
        inner = sum(mul(g, out), axis=-1, keepdims=True)
        return (mul(out, sub(g, inner)),)

    return _apply("softmax", _softmax_array, vjp, (z,))


def logsumexp(z) -> Tensor:
    """log-sum-exp over the last axis (axis removed)."""
    z = as_tensor(z)
    kept = z.shape[:-1] + (1,)

    def fwd(x):
        m = x.max(axis=-1, keepdims=True)
        return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))).reshape(x.shape[:-1])

    def vjp(g, out, z):
        return (mul(reshape(g, kept), softmax(z)),)

    return _apply("logsumexp", fwd, vjp, (z,))


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy for 2-D logits and integer labels."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeMismatch(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    losses = sub(logsumexp(logits), pick(logits, labels))
    if reduction == "none":
        return losses
    if reduction == "sum":
        return sum(losses)
    if reduction == "mean":
        return mean(losses)
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# small 2-D convolution (valid padding) via im2col gathers
# ---------------------------------------------------------------------------


def _im2col_index(c: int, h: int, w: int, k: int, stride: int):
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    ci, ki, kj = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
    oi, oj = np.meshgrid(np.arange(ho) * stride, np.arange(wo) * stride, indexing="ij")
    rows = oi.reshape(-1, 1) + ki.reshape(1, -1)
    cols = oj.reshape(-1, 1) + kj.reshape(1, -1)
    chan = np.broadcast_to(ci.reshape(1, -1), rows.shape)
    return (chan * h + rows) * w + cols, ho, wo


def conv2d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """x: (N, C, H, W); weight: (O, C, k, k); returns (N, O, Ho, Wo)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"conv2d: incompatible input {x.shape} and kernel {weight.shape}")
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    idx, ho, wo = _im2col_index(c, h, w, k, stride)
    per_sample = c * h * w
    full = (np.arange(n) * per_sample).reshape(n, 1, 1) + idx[None]
    cols = gather(x, full)  # (N, Ho*Wo, C*k*k)
    cols = reshape(cols, (n * ho * wo, c * k * k))
    out = matmul(cols, transpose(reshape(weight, (o, c * k * k))))
    if bias is not None:
        out = add(out, bias)
    return permute(reshape(out, (n, ho, wo, o)), (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------


def _topo(output: Tensor) -> list:
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen or not node.requires_grad:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrt, create_graph: bool = False, seed=None):
    """Gradient of ``output`` with respect to each tensor in ``wrt``.

    ``output`` must be scalar unless an explicit cotangent ``seed`` is given.
    Inputs that do not influence the output receive zeros.
    """
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    if seed is None:
        if output.size != 1:
            raise NonScalarOutput(f"gradient needs a scalar output, got shape {output.shape}")
        seed = Tensor(np.ones(output.shape))
    grads = {output.id: as_tensor(seed)}
    target_ids = {t.id for t in targets}
    result = {}
    with grad_mode(create_graph):
        for node in reversed(_topo(output)):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.id in target_ids:
                result[node.id] = g
            if node.vjp is None:
                continue
            contribs = node.vjp(g, node, *node.parents)
            for parent, c in zip(node.parents, contribs):
                if c is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.id)
                grads[parent.id] = c if prev is None else add(prev, c)
    out = [result.get(t.id, Tensor(np.zeros(t.shape))) for t in targets]
    return out[0] if single else out


class Tape:
    """Records primitives executed while active.

    Use as a context manager; :meth:`watch` turns an array into a recorded
    leaf.  The recorded list is in execution order, so every node appears
    after its inputs.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.inputs: list[Tensor] = []
        self.output: Tensor | None = None

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def _record(self, node: Tensor):
        self.nodes.append(node)

    def watch(self, x) -> Tensor:
        if isinstance(x, Tensor) and x.requires_grad:
            if x not in self.inputs:
                self.inputs.append(x)
            return x
        t = variable(x.data if isinstance(x, Tensor) else x)
        if t not in self.nodes:
            self.nodes.append(t)
        self.inputs.append(t)
        return t

    def node(self, node_id: int) -> Tensor:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(f"node {node_id} is not on this tape")

    def gradient(self, output=None, wrt=None, create_graph: bool = False):
        output = self.output if output is None else output
        if output is None:
            raise NonScalarOutput("tape has no recorded output")
        if wrt is None:
            wrt = self.inputs[0]
        elif isinstance(wrt, int):
            wrt = self.node(wrt)
        elif isinstance(wrt, (list, tuple)):
            wrt = [self.node(w) if isinstance(w, int) else w for w in wrt]
        return grad(output, wrt, create_graph=create_graph)

    def replay(self, *new_inputs) -> np.ndarray:
        """Recompute the recorded forward pass, optionally on new input values."""
        if self.output is None:
            raise NonScalarOutput("tape has no recorded output")
        values = {}
        for t, v in zip(self.inputs, new_inputs):
            values[t.id] = np.asarray(v, dtype=np.float64)
        for node in self.nodes:
            if node.id in values:
                continue
            if node.fwd is None:
                values[node.id] = node.data
                continue
            args = [values.get(p.id, p.data) for p in node.parents]
            values[node.id] = node.fwd(*args)
            if node is self.output:
                break
        return values[self.output.id]


def forward_eval(fn: Callable, x) -> tuple:
    """Evaluate ``fn`` at ``x`` on a fresh tape; returns ``(value, tape)``."""
    with Tape() as tape:
        xv = tape.watch(x)
        value = as_tensor(fn(xv))
        tape.output = value
    return value, tape


def gradient(tape: Tape, wrt=None) -> np.ndarray:
    """d(tape output)/d(wrt) as an array shaped like ``wrt``."""
    return tape.gradient(wrt=wrt).data


def value_and_grad(fn: Callable, x) -> tuple:
    value, tape = forward_eval(fn, x)
    return float(value.data), gradient(tape)


def hessian_vector_product(fn: Callable, x, v) -> np.ndarray:
    """Hessian of scalar ``fn`` at ``x`` applied to ``v`` (reverse over reverse)."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != x.shape:
        raise ShapeMismatch(f"v has shape {v.shape}, x has shape {x.shape}")
    with Tape() as tape:
        xv = tape.watch(x)
        y = as_tensor(fn(xv))
        if y.size != 1:
            raise NonScalarOutput(f"fn must be scalar-valued, got shape {y.shape}")
        tape.output = y
        g = grad(y, xv, create_graph=True)
        hv = grad(dot(g, v), xv)
    return hv.data


def _scalar(fn: Callable, x: np.ndarray) -> float:
    with no_grad():
        out = fn(x)
    out = out.data if isinstance(out, Tensor) else np.asarray(out)
    if out.size != 1:
        raise NonScalarOutput(f"fn must be scalar-valued, got shape {out.shape}")
    return float(out.reshape(()))


def finite_diff_gradient(fn: Callable, x, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    g = np.empty(x.size)
    flat = x.reshape(-1)
    for i in range(x.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (_scalar(fn, xp.reshape(x.shape)) - _scalar(fn, xm.reshape(x.shape))) / (2 * h)
    return g.reshape(x.shape)


def finite_diff_hessian(fn: Callable, x, h: float = 1e-3) -> np.ndarray:
    """Second-order central-difference Hessian of a scalar function, symmetrised."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    d = flat.size

    def f_at(di, dj):
        z = flat.copy()
        z += di
        z += dj
        return _scalar(fn, z.reshape(x.shape))

    eye = np.eye(d) * h
    hess = np.empty((d, d))
    for i in range(d):
        for j in range(i, d):
            val = (
                f_at(eye[i], eye[j]) - f_at(eye[i], -eye[j]) - f_at(-eye[i], eye[j]) + f_at(-eye[i], -eye[j])
            ) / (4 * h * h)
            hess[i, j] = hess[j, i] = val
    return 0.5 * (hess + hess.T)
