"""Reverse-mode automatic differentiation over float64 numpy arrays.

Graphs are recorded define-by-run onto a :class:`Tape`.  Operations executed
while no tape is active compute values only, which doubles as a no-grad mode
for evaluation.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(x * x)
    ...     backpropagate(loss, tape)
    >>> x.grad
    array([2., 4., 6.])
"""

from __future__ import annotations

import contextlib
import contextvars
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEBUG = bool(os.environ.get("PROMPTLAB_DEBUG"))

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "promptlab_active_tape", default=None
)
_DROPOUT_OFF: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "promptlab_dropout_off", default=False
)


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient slot.

    ``data`` is always a float64 array; results of layout ops may be strided
    views, so ``data.ravel()`` gives the row-major flat values.  ``node_id``
    refers to the tape the tensor was last recorded on; that link is dropped
    when a tensor is pickled.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def __getstate__(self):
        return {"data": self.data, "requires_grad": self.requires_grad, "grad": self.grad,
                "name": self.name}

    def __setstate__(self, state):
        for key, value in state.items():
            setattr(self, key, value)
        self.node_id = None
        self._tape = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Optional[int], ...]
    backward: Optional[Callable] = None
    leaf: Optional[Tensor] = None


@dataclass
class Tape:
    """Append-only record of the operations of one forward pass.

    The tape also carries the random generator used by stochastic ops, so a
    forward pass replayed under the same seed is bit-identical.
    """

    seed: int = 0
    nodes: list[Node] = field(default_factory=list)
    rng: np.random.Generator = field(init=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def _register_leaf(self, t: Tensor) -> int:
        if t._tape is self and t.node_id is not None:
            return t.node_id
        self.nodes.append(Node("leaf", (), leaf=t))
        t._tape = self
        t.node_id = len(self.nodes) - 1
        return t.node_id

    def _append(self, op: str, inputs: tuple, backward: Callable) -> int:
        self.nodes.append(Node(op, inputs, backward))
        return len(self.nodes) - 1


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


@contextlib.contextmanager
def dropout_disabled():
    """Force every dropout call inside the block to be the identity."""
    token = _DROPOUT_OFF.set(True)
    try:
        yield
    finally:
        _DROPOUT_OFF.reset(token)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if DEBUG and not np.all(np.isfinite(out)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    result = Tensor(out)
    tape = _ACTIVE_TAPE.get()
    if tape is None or not any(t.requires_grad for t in inputs):
        return result
    ids = []
    for t in inputs:
        if not t.requires_grad:
            ids.append(None)
        elif t._tape is tape and t.node_id is not None:
            ids.append(t.node_id)
        else:
            ids.append(tape._register_leaf(t))
    result.requires_grad = True
    result.node_id = tape._append(op, tuple(ids), backward)
    result._tape = tape
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _record("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return _record("sub", a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def backward(g, needs):
        return (_unbroadcast(g * bd, ad.shape) if needs[0] else None,
                _unbroadcast(g * ad, bd.shape) if needs[1] else None)

    return _record("mul", ad * bd, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.data * c, (a,), lambda g, needs: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy semantics (batched, matrix-vector).

    Backward accumulates ``dA = dC @ B^T`` and ``dB = A^T @ dC``.
    """
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise DimensionError(f"matmul needs at least 1-D operands, got {ad.shape} and {bd.shape}")
    inner_a = ad.shape[-1]
    inner_b = bd.shape[0] if bd.ndim == 1 else bd.shape[-2]
    if inner_a != inner_b:
        raise DimensionError(f"matmul inner dimensions differ: {ad.shape} x {bd.shape}")
    if ad.ndim > 2 and bd.ndim == 2:
        # batch of rows times one weight matrix: a single 2-D product
        a2 = ad.reshape(-1, inner_a)
        out = (a2 @ bd).reshape(*ad.shape[:-1], bd.shape[1])

        def backward_rows(g, needs):
            g2 = g.reshape(-1, bd.shape[1])
            ga = (g2 @ bd.T).reshape(ad.shape) if needs[0] else None
            gb = a2.T @ g2 if needs[1] else None
            return ga, gb

        return _record("matmul", out, (a, b), backward_rows)
    out = ad @ bd

    def backward(g, needs):
        ga = gb = None
        if bd.ndim == 1:
            if needs[0]:
                ga = _unbroadcast(g[..., None] * bd, ad.shape)
            if needs[1]:
                gb = np.tensordot(g, ad, axes=(tuple(range(g.ndim)), tuple(range(ad.ndim - 1))))
            return ga, gb
        if ad.ndim == 1:
            if needs[0]:
                ga = _unbroadcast((bd @ g[..., None])[..., 0], ad.shape)
            if needs[1]:
                gb = _unbroadcast(ad[:, None] * g[..., None, :], bd.shape)
            return ga, gb
        if needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if needs[1]:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record("matmul", out, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g, needs: (g.transpose(inverse),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(old),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = np.ascontiguousarray(np.broadcast_to(a.data, tuple(shape)))
    return _record("broadcast_to", out, (a,), lambda g, needs: (_unbroadcast(g, old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = " vs ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat along axis {axis} failed: {shapes}") from exc
    cuts = np.cumsum(sizes)[:-1]

    def backward(g, needs):
        return tuple(np.split(g, cuts, axis=axis))

    return _record("concat", out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g, needs):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record("stack", out, tensors, backward)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``table[index]`` along axis 0; backward scatter-adds."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def backward(g, needs):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record("take_rows", table.data[index], (table,), backward)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", np.array(a.data.sum()), (a,),
                   lambda g, needs: (np.broadcast_to(g, shape).copy(),))


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum_axis", a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", np.maximum(a.data, 0.0), (a,), lambda g, needs: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU; smooth everywhere, which keeps finite differences honest."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g, needs):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _record("gelu", out, (a,), backward)


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_np(a.data, axis)

    def backward(g, needs):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (a,), backward)


def softmax_columns(m: Tensor) -> Tensor:
    """Column-wise softmax of a 2-D tensor (each column sums to one)."""
    if m.ndim != 2:
        raise DimensionError(f"softmax_columns expects a matrix, got shape {m.shape}")
    return softmax(m, axis=0)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xd = x.data
    d = xd.shape[-1]
    xhat = xd - xd.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None] / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    gd, bd = gain.data, bias.data
    out = xhat * gd
    out += bd

    def backward(g, needs):
        gx = ggain = gbias = None
        if needs[0]:
            gh = g * gd
            proj = np.einsum("...i,...i->...", gh, xhat)[..., None] / d
            gx = gh - gh.mean(axis=-1, keepdims=True)
            gx -= xhat * proj
            gx *= inv
        if needs[1]:
            ggain = np.einsum("ni,ni->i", g.reshape(-1, d), xhat.reshape(-1, d))
        if needs[2]:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _record("layer_norm", out, (x, gain, bias), backward)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` at train time."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0 or _DROPOUT_OFF.get():
        return x
    if rng is None:
        tape = _ACTIVE_TAPE.get()
        if tape is None:
            raise ContractError("dropout in training mode needs an rng or an active tape")
        rng = tape.rng
    # 16-bit uniforms from raw bytes: p is resolved to the nearest 1/65536 and
    # survivors are scaled by the matching keep rate so the mean is preserved
    cut = int(round(p * 65536))
    bits = np.frombuffer(rng.bytes(2 * x.size), dtype="<u2").reshape(x.shape)
    keep = bits >= cut
    scale = 65536.0 / (65536 - cut)
    out = x.data * keep
    out *= scale

    def backward(g, needs):
        gx = g * keep
        gx *= scale
        return (gx,)

    return _record("dropout", out, (x,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse
    y = np.exp(out)

    def backward(g, needs):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (a,), backward)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Negative log-likelihood of ``target`` under ``softmax(logits)``.

    ``logits`` of shape ``[V]`` with an integer target give a scalar; shape
    ``[B, V]`` with ``B`` targets give the batch mean.
    """
    x = logits.data
    targets = np.atleast_1d(np.asarray(target, dtype=np.int64))
    rows = x.reshape(-1, x.shape[-1])
    V = rows.shape[1]
    if targets.shape[0] != rows.shape[0]:
        raise DimensionError(f"{rows.shape[0]} logit rows but {targets.shape[0]} targets")
    if targets.min() < 0 or targets.max() >= V:
        raise IndexError(f"target out of range for vocabulary of size {V}")
    m = rows.max(axis=1, keepdims=True)
    e = np.exp(rows - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    picked = rows[np.arange(len(targets)), targets]
    B = len(targets)
    loss = np.array((lse - picked).sum() / B)
    probs = e / s

    def backward(g, needs):
        grad = probs.copy()
        grad[np.arange(B), targets] -= 1.0
        return ((grad * (g / B)).reshape(x.shape),)

    return _record("cross_entropy", loss, (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle
# ---------------------------------------------------------------------------

def backpropagate(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Gradients add onto whatever is already stored; clear them with
    :func:`promptlab.optim.zero_grads` between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backpropagate needs a scalar loss, got shape {loss.shape}")
    tape = tape or loss._tape
    if tape is None or loss._tape is not tape or loss.node_id is None:
        raise ContractError("loss was not recorded on the given tape")
    pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    nodes = tape.nodes
    for nid in range(loss.node_id, -1, -1):
        g = pending.pop(nid, None)
        if g is None:
            continue
        node = nodes[nid]
        if node.leaf is not None:
            leaf = node.leaf
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            leaf.grad += g
            continue
        needs = tuple(i is not None for i in node.inputs)
        grads = node.backward(g, needs)
        for i, gi in zip(node.inputs, grads):
            if i is None or gi is None:
                continue
            if i in pending:
                pending[i] = pending[i] + gi
            else:
                pending[i] = gi


def finite_difference_gradient(f: Callable[[Tensor], Tensor | float], x: Tensor,
                               epsilon: float = 1e-5, seed: int = 0) -> Tensor:
    """Central differences of scalar ``f`` at ``x``, one coordinate at a time.

    Dropout is forced off and every evaluation runs under a fresh tape with
    the same ``seed``, so the only thing that changes between calls is ``x``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")

    def evaluate() -> float:
        with dropout_disabled(), Tape(seed=seed):
            out = f(x)
        return float(out.data.reshape(-1)[0]) if isinstance(out, Tensor) else float(out)

    if not x.data.flags.c_contiguous or not x.data.flags.writeable:
        x.data = np.array(x.data, dtype=np.float64, order="C")
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = evaluate()
        flat[i] = orig - epsilon
        lo = evaluate()
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * epsilon)
    return Tensor(grad.reshape(x.shape))
