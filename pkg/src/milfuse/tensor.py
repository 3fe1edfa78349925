"""Dense tensors with reverse-mode differentiation on an explicit tape.

Storage is float32 by default; matmul and reductions accumulate in float64
and round when the result is committed. Executed operations are recorded in
order on a module-level tape, and ``backward`` replays the tape in reverse
from a scalar root, accumulating gradients additively into ``Tensor.grad``.

The tape is confined to a single thread. ``reset_tape()`` discards recorded
nodes; tensors produced before a reset can no longer be used as backward
roots. ``using_dtype(np.float64)`` switches the whole engine to
double-precision storage, which the finite-difference harness uses.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf as _erf

from .errors import (
    DetachedRootError,
    EmptyTargetError,
    LabelOutOfRangeError,
    NonFiniteError,
    NotScalarError,
    ShapeMismatchError,
    TokenOutOfVocabError,
)

_DTYPE_STACK = [np.dtype(np.float32)]
_GRAD_MODE = [True]


def current_dtype():
    """Dtype newly committed tensors are stored in."""
    return _DTYPE_STACK[-1]


@contextmanager
def using_dtype(dtype):
    """Run the engine with a different storage dtype (e.g. float64)."""
    _DTYPE_STACK.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DTYPE_STACK.pop()


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    _GRAD_MODE.append(False)
    try:
        yield
    finally:
        _GRAD_MODE.pop()


def grad_enabled() -> bool:
    return _GRAD_MODE[-1]


class _Node:
    """One executed operation: inputs, produced output, gradient rule."""

    __slots__ = ("op", "inputs", "output", "bwd", "generation", "index")

    def __init__(self, op, inputs, output, bwd, generation, index):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.bwd = bwd
        self.generation = generation
        self.index = index


class _Tape:
    __slots__ = ("nodes", "generation")

    def __init__(self):
        self.nodes = []
        self.generation = 0

    def reset(self):
        self.nodes.clear()
        self.generation += 1


_TAPE = _Tape()


def reset_tape():
    """Drop all recorded operations; previously built roots become detached."""
    _TAPE.reset()


def tape_length() -> int:
    return len(_TAPE.nodes)


def _finite_or_raise(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by '{op}'")


def _contig(arr):
    # np.ascontiguousarray would promote 0-d arrays to 1-d; avoid that.
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        return np.ascontiguousarray(arr)
    return arr


def _commit(arr, op):
    """Round to the storage dtype, force C order, and reject NaN/Inf."""
    out = _contig(np.asarray(arr, dtype=current_dtype()))
    _finite_or_raise(out, op)
    return out


class Tensor:
    """Contiguous row-major numeric array, optionally on the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = _commit(data, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @classmethod
    def _from_committed(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalarError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        """Copy of the underlying array."""
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"

    # Light operator sugar over the functional ops below.
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """Learnable tensor with a unique name used for checkpointing."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={tuple(self.shape)})"


def normal_param(name, shape, rng, std=0.02) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape), name)


def zeros_param(name, shape) -> Parameter:
    return Parameter(np.zeros(shape), name)


def ones_param(name, shape) -> Parameter:
    return Parameter(np.ones(shape), name)


def _apply(op, inputs, out_arr, bwd):
    """Commit an op result and record it if any input is on the tape."""
    out = Tensor._from_committed(_commit(out_arr, op))
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(op, tuple(inputs), out, bwd, _TAPE.generation, len(_TAPE.nodes))
        _TAPE.nodes.append(node)
        out._node = node
    return out


def _f64(t: Tensor):
    return t.data.astype(np.float64, copy=False)


def backward(root: Tensor):
    """Fill ``grad`` for every tensor the scalar ``root`` depends on.

    Gradients accumulate additively into existing ``grad`` arrays; call
    ``zero_grad`` (or an optimizer's) between independent passes. Raises
    ``NotScalarError`` for non-scalar roots and ``DetachedRootError`` when
    the root was not produced on the active tape.
    """
    if root.shape != ():
        raise NotScalarError(f"backward root must be scalar, got shape {root.shape}")
    node = root._node
    if node is None or node.generation != _TAPE.generation:
        raise DetachedRootError("root is not on the active tape")

    grads = {id(root): np.ones((), dtype=np.float64)}
    holders = {id(root): root}

    def _write(t, g64):
        arr = _contig(g64.astype(current_dtype(), copy=False))
        t.grad = arr if t.grad is None else t.grad + arr

    for nd in reversed(_TAPE.nodes[: node.index + 1]):
        g = grads.pop(id(nd.output), None)
        if g is None:
            continue
        holders.pop(id(nd.output), None)
        _write(nd.output, g)
        for t, ig in zip(nd.inputs, nd.bwd(g)):
            if ig is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = ig if prev is None else prev + ig
            holders[key] = t
    for key, g in grads.items():
        _write(holders[key], g)


# ---------------------------------------------------------------------------
# Elementwise and structural operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    """a + b for equal shapes, a row-broadcast 1-D bias, or a python scalar."""
    if not isinstance(b, Tensor):
        s = float(b)
        return _apply("add", (a,), _f64(a) + s, lambda g: (g,))
    if a.shape == b.shape:
        return _apply("add", (a, b), _f64(a) + _f64(b), lambda g: (g, g))
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return _apply(
            "add_bias", (a, b), _f64(a) + _f64(b), lambda g: (g, g.sum(axis=0))
        )
    raise ShapeMismatchError(f"add: {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"sub: {a.shape} vs {b.shape}")
    return _apply("sub", (a, b), _f64(a) - _f64(b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _apply("neg", (a,), -_f64(a), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with an equal-shape tensor or a python scalar."""
    if not isinstance(b, Tensor):
        s = float(b)
        return _apply("scale", (a,), _f64(a) * s, lambda g: (g * s,))
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul: {a.shape} vs {b.shape}")
    a64, b64 = _f64(a), _f64(b)
    return _apply("mul", (a, b), a64 * b64, lambda g: (g * b64, g * a64))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors; accumulates in float64."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul needs rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    a64, b64 = _f64(a), _f64(b)

    def bwd(g):
        return g @ b64.T, a64.T @ g

    return _apply("matmul", (a, b), a64 @ b64, bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeMismatchError(f"transpose needs rank 2, got {a.shape}")
    return _apply("transpose", (a,), _f64(a).T, lambda g: (np.ascontiguousarray(g.T),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ShapeMismatchError(f"reshape {a.shape} -> {shape}")
    old = a.shape
    return _apply("reshape", (a,), _f64(a).reshape(shape), lambda g: (g.reshape(old),))


def _concat(parts, axis, op):
    parts = list(parts)
    if not parts:
        raise ShapeMismatchError(f"{op} of zero tensors")
    if any(p.ndim != 2 for p in parts):
        raise ShapeMismatchError(f"{op} needs rank-2 tensors")
    other = 1 - axis
    if len({p.shape[other] for p in parts}) != 1:
        raise ShapeMismatchError(f"{op}: mismatched shapes {[p.shape for p in parts]}")
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(s) for s in np.split(g, splits, axis=axis))

    return _apply(op, tuple(parts), np.concatenate([_f64(p) for p in parts], axis=axis), bwd)


def concat_rows(parts) -> Tensor:
    return _concat(parts, 0, "concat_rows")


def concat_cols(parts) -> Tensor:
    return _concat(parts, 1, "concat_cols")


def _slice(a, start, stop, axis, op):
    if a.ndim != 2:
        raise ShapeMismatchError(f"{op} needs rank 2, got {a.shape}")
    n = a.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeMismatchError(f"{op}: [{start}:{stop}] of {a.shape}")
    sl = (slice(start, stop), slice(None)) if axis == 0 else (slice(None), slice(start, stop))
    shape = a.shape

    def bwd(g):
        z = np.zeros(shape, dtype=np.float64)
        z[sl] = g
        return (z,)

    return _apply(op, (a,), _f64(a)[sl], bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    return _slice(a, start, stop, 0, "slice_rows")


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    return _slice(a, start, stop, 1, "slice_cols")


# ---------------------------------------------------------------------------
# Normalization, activations, reductions
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; rows sum to 1."""
    if x.ndim != 2:
        raise ShapeMismatchError(f"softmax_rows needs rank 2, got {x.shape}")
    x64 = _f64(x)
    e = np.exp(x64 - x64.max(axis=1, keepdims=True))
    y64 = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * y64).sum(axis=1, keepdims=True)
        return ((g - dot) * y64,)

    return _apply("softmax_rows", (x,), y64, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise standardization (population variance) with affine rescale."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    if x.ndim != 2:
        raise ShapeMismatchError(f"layer_norm needs rank 2, got {x.shape}")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatchError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs width {d}"
        )
    x64, g64, b64 = _f64(x), _f64(gamma), _f64(beta)
    mu = x64.mean(axis=1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv
    y = xhat * g64 + b64

    def bwd(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * g64
        dx = (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        ) * inv
        return dx, dgamma, dbeta

    return _apply("layer_norm", (x, gamma, beta), y, bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-function GELU."""
    x64 = _f64(x)
    cdf = 0.5 * (1.0 + _erf(x64 * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * x64 * x64) * _INV_SQRT_2PI
        return (g * (cdf + x64 * pdf),)

    return _apply("gelu", (x,), x64 * cdf, bwd)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _apply(
        "sum_all", (x,), np.asarray(_f64(x).sum()),
        lambda g: (np.broadcast_to(g, shape).copy(),),
    )


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return _apply(
        "mean_all", (x,), np.asarray(_f64(x).mean()),
        lambda g: (np.broadcast_to(g / n, shape).copy(),),
    )


def mean_rows(x: Tensor) -> Tensor:
    """Column means of a rank-2 tensor: (m, n) -> (n,)."""
    if x.ndim != 2:
        raise ShapeMismatchError(f"mean_rows needs rank 2, got {x.shape}")
    m, n = x.shape
    return _apply(
        "mean_rows", (x,), _f64(x).mean(axis=0),
        lambda g: (np.broadcast_to(g / m, (m, n)).copy(),),
    )


# ---------------------------------------------------------------------------
# Lookup and losses
# ---------------------------------------------------------------------------

def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer id; scatter-add on backward."""
    if table.ndim != 2:
        raise ShapeMismatchError(f"embedding table must be rank 2, got {table.shape}")
    idx = np.asarray(list(ids), dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeMismatchError("embedding_lookup needs a non-empty 1-D id sequence")
    v = table.shape[0]
    if idx.min() < 0 or idx.max() >= v:
        raise TokenOutOfVocabError(f"ids must lie in [0, {v})")
    rows = table.shape

    def bwd(g):
        dt = np.zeros(rows, dtype=np.float64)
        np.add.at(dt, idx, g)
        return (dt,)

    return _apply("embedding_lookup", (table,), _f64(table)[idx], bwd)


def cross_entropy_from_logits(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] via log-sum-exp; returns a scalar."""
    if logits.ndim != 1:
        raise ShapeMismatchError(f"logits must be rank 1, got {logits.shape}")
    c = logits.shape[0]
    label = int(label)
    if not 0 <= label < c:
        raise LabelOutOfRangeError(f"label {label} outside [0, {c})")
    x64 = _f64(logits)
    m = x64.max()
    lse = m + math.log(np.exp(x64 - m).sum())
    loss = np.asarray(lse - x64[label])

    def bwd(g):
        p = np.exp(x64 - lse)
        p[label] -= 1.0
        return (g * p,)

    return _apply("cross_entropy", (logits,), loss, bwd)


def cross_entropy_rows(logits: Tensor, targets, ignore_id=None) -> Tensor:
    """Mean token cross-entropy over rows, skipping ``ignore_id`` positions."""
    if logits.ndim != 2:
        raise ShapeMismatchError(f"logits must be rank 2, got {logits.shape}")
    tgt = np.asarray(list(targets), dtype=np.int64)
    if tgt.shape != (logits.shape[0],):
        raise ShapeMismatchError(
            f"targets length {tgt.shape} vs {logits.shape[0]} logit rows"
        )
    v = logits.shape[1]
    keep = np.ones(tgt.shape, dtype=bool) if ignore_id is None else tgt != ignore_id
    n = int(keep.sum())
    if n == 0:
        raise EmptyTargetError("all target positions are ignored")
    active = tgt[keep]
    if active.min() < 0 or active.max() >= v:
        raise LabelOutOfRangeError(f"targets must lie in [0, {v})")
    x64 = _f64(logits)
    m = x64.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x64 - m).sum(axis=1))
    rows = np.nonzero(keep)[0]
    loss = np.asarray((lse[rows] - x64[rows, active]).sum() / n)

    def bwd(g):
        dx = np.zeros_like(x64)
        p = np.exp(x64[rows] - lse[rows, None])
        p[np.arange(rows.size), active] -= 1.0
        dx[rows] = p * (g / n)
        return (dx,)

    return _apply("cross_entropy_rows", (logits,), loss, bwd)
