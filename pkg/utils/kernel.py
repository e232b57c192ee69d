"""
Numeric substrate: float64 tensors recorded on a dynamic tape, reverse-mode
differentiation, sparse propagation, Adam with a retraction hook and the QR
retraction onto row-orthonormal matrices.

Values are plain numpy arrays wrapped in ``Tensor``. Operations only record
themselves while a ``Tape`` is active and at least one input requires a
gradient; outside a tape every operation is a constant computation, which is
what inference paths use.
"""
import logging
from contextvars import ContextVar
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.special

from utils.errors import AdaptationDivergedError, ContractError, DegenerateBasisError, ShapeError

logger = logging.getLogger(__name__)

_ACTIVE_TAPE = ContextVar("active_tape", default=None)


def make_rng(seed, *stream):
    """
    Counter-based generator for ``seed`` and an optional stream key.

    Streams with different keys are independent, so callers derive one
    generator per purpose (``make_rng(seed, "mask", epoch)``) instead of
    sharing one mutable generator across stages.
    """
    keys = [int(seed)] + [_stream_key(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(keys)))


def _stream_key(part):
    if isinstance(part, str):
        return int.from_bytes(part.encode("utf-8")[:8].ljust(8, b"\0"), "little")
    return int(part)


class Tensor:
    # Keeps ndarray.__matmul__ from swallowing Tensor operands
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._inputs = ()
        self._vjp = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return self.requires_grad and self._vjp is None

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

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

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return reduce_sum(self) * (1.0 / max(self.data.size, 1))


class Parameter(Tensor):
    """
    Trainable leaf.

    ``frozen`` leaves keep their gradient bookkeeping but are never moved by
    ``adam_step``. ``retraction`` is applied to the data after every update.
    """

    def __init__(self, data, name, frozen=False, retraction=None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.frozen = frozen
        self.retraction = retraction


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


class Tape:
    """
    Ordered record of the differentiable operations of one computation.

    Nodes are appended when created, so insertion order is a valid
    topological order and the backward sweep is a single reverse pass.
    A new tape is opened for every adaptation epoch.
    """

    def __init__(self):
        self.nodes = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, output):
        """
        Reverse sweep from a scalar output.

        Returns a dict mapping every trainable leaf reached from ``output`` to
        its gradient array. Leaves that were not reached are absent.
        """
        if not isinstance(output, Tensor) or output.data.size != 1 or output.data.ndim > 1:
            raise ContractError(f"backward needs a scalar output, got shape {getattr(output, 'shape', None)}")
        if output.is_leaf:
            return {output: np.ones_like(output.data)}
        if not output.requires_grad:
            return {}

        grads = {id(output): np.ones_like(output.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for inp, gi in zip(node._inputs, node._vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    leaves[id(inp)] = inp
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
        return {leaf: grads.get(key, np.zeros_like(leaf.data)) for key, leaf in leaves.items()}

    def _append(self, node):
        self.nodes.append(node)


def _record(data, inputs, vjp):
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = inputs
        out._vjp = vjp
        tape._append(out)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _record(out, (a, b), vjp)


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)

    def vjp(g):
        if exponent == 1.0:
            return (g,)
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _record(a.data ** exponent, (a,), vjp)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _record(out, (a,), vjp)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    a = as_tensor(a)
    active = a.data > 0
    return _record(np.where(active, a.data, 0.0), (a,), lambda g: (g * active,))


def transpose(a):
    a = as_tensor(a)
    return _record(a.data.T, (a,), lambda g: (g.T,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _record(a.data @ b.data, (a, b), vjp)


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), vjp)


def softmax(a, axis=1):
    a = as_tensor(a)
    out = scipy.special.softmax(a.data, axis=axis)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), vjp)


def log_softmax(a, axis=1):
    a = as_tensor(a)
    out = scipy.special.log_softmax(a.data, axis=axis)

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), vjp)


def spmm(adj, m):
    """Sparse (constant) times dense; differentiable w.r.t. the dense operand"""
    m = as_tensor(m)
    if m.data.ndim != 2 or adj.shape[1] != m.shape[0]:
        raise ShapeError(f"spmm dimension mismatch: adjacency {adj.shape} @ {m.shape}")
    out = np.asarray(adj @ m.data)
    return _record(out, (m,), lambda g: (np.asarray(adj.T @ g),))


def take_rows(a, index):
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), vjp)


def put_rows(base, index, values):
    """Copy of ``base`` with rows ``index`` replaced by ``values``; other rows untouched"""
    base, values = as_tensor(base), as_tensor(values)
    index = np.asarray(index, dtype=np.int64)
    if values.data.ndim != 2 or values.shape != (len(index), base.shape[1]):
        raise ShapeError(f"put_rows expects values of shape {(len(index), base.shape[1])}, got {values.shape}")
    out = base.data.copy()
    out[index] = values.data

    def vjp(g):
        g_base = g.copy()
        g_base[index] = 0.0
        return g_base, g[index]

    return _record(out, (base, values), vjp)


def tile_rows(vector, count):
    """Stack ``count`` copies of a 1-D tensor into a (count, d) matrix"""
    vector = as_tensor(vector)
    return mul(np.ones((count, 1)), reshape_row(vector))


def reshape_row(vector):
    vector = as_tensor(vector)
    return _record(vector.data.reshape(1, -1), (vector,), lambda g: (g.reshape(vector.shape),))


def dense_layer(h, weight, bias):
    return add(matmul(h, weight), bias)


def orthogonality_residual(R):
    """Frobenius norm of R Rᵀ − I"""
    R = np.asarray(R, dtype=np.float64)
    return float(np.linalg.norm(R @ R.T - np.eye(R.shape[0])))


def qr_reorthogonalize(R, tol=1e-10):
    """
    Retract an r×d matrix onto the row-orthonormal matrices spanning the same row space.

    Uses the thin QR of Rᵀ with the sign convention diag(upper) > 0, so an
    already row-orthonormal R is a fixed point and the map is idempotent.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] > R.shape[1]:
        raise ShapeError(f"expected an r×d matrix with r ≤ d, got shape {R.shape}")
    q, upper = scipy.linalg.qr(R.T, mode="economic")
    diag = np.diag(upper)
    scale = max(np.abs(diag).max(initial=0.0), 1.0)
    if R.shape[0] and np.abs(diag).min() <= tol * scale:
        raise DegenerateBasisError(f"rank-deficient basis (smallest pivot {np.abs(diag).min():.3e})")
    signs = np.where(diag < 0, -1.0, 1.0)
    return np.ascontiguousarray((q * signs).T)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(state, params, grads, lr):
    """
    One bias-corrected Adam update, in place.

    Parameters:
    - state: AdamState, moment buffers keyed by parameter name
    - params: iterable of Parameter
    - grads: mapping Parameter -> gradient array; parameters without an entry are skipped
    - lr: learning rate

    Frozen parameters are never written. A non-finite gradient raises
    AdaptationDivergedError before anything is modified.
    """
    params = [p for p in params if p in grads and not p.frozen]
    for p in params:
        g = grads[p]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {p.name} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise AdaptationDivergedError(f"non-finite gradient for parameter {p.name}")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for p in params:
        g = grads[p]
        m = state.first_moment.get(p.name, np.zeros_like(p.data))
        v = state.second_moment.get(p.name, np.zeros_like(p.data))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[p.name] = m
        state.second_moment[p.name] = v

        p.data = p.data - lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        if p.retraction is not None:
            p.data = p.retraction(p.data)


def check_gradients(loss_fn, params, eps=1e-5):
    """
    Largest relative error between tape gradients and central differences.

    ``loss_fn`` is called with no arguments and must build its scalar from
    the current ``params`` data. The error for each parameter is
    ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-7).
    """
    with Tape() as tape:
        loss = loss_fn()
        analytic = tape.backward(loss)

    worst = 0.0
    for p in params:
        numeric = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            original = p.data[idx]
            p.data[idx] = original + eps
            upper = float(loss_fn().data)
            p.data[idx] = original - eps
            lower = float(loss_fn().data)
            p.data[idx] = original
            numeric[idx] = (upper - lower) / (2.0 * eps)
        grad = analytic.get(p, np.zeros_like(p.data))
        denom = max(np.linalg.norm(grad), np.linalg.norm(numeric), 1e-7)
        worst = max(worst, float(np.linalg.norm(grad - numeric) / denom))
    return worst
