"""Reverse-mode automatic differentiation over dense numpy arrays.

A `Tape` records every operation whose inputs carry gradients; nodes are
appended in creation order, which is already a topological order, so
`backward` is a single reverse sweep that touches each node exactly once.
Tensors are immutable after creation except for gradient accumulation.

Ops cover exactly what the particle filter, the networks, and the A2C
loss need: elementwise arithmetic with numpy-style broadcasting, 2-D
matmul, shape ops, the usual activations, log-sum-exp, reparameterized
Gaussian sampling, batch normalization, and detach.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError, DomainError, NumericsError, ShapeError
from .rng import RngStream

__all__ = [
    "Tensor",
    "Tape",
    "BatchNormState",
    "constant",
    "parameter",
    "backward",
    "forward_op",
    "OP_TABLE",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose2d",
    "concat",
    "slice_",
    "gather_rows",
    "reshape",
    "broadcast_to",
    "sum_",
    "mean_",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "softplus",
    "relu",
    "clamp",
    "logsumexp",
    "square",
    "sqrt",
    "gaussian_sample",
    "detach",
    "batchnorm",
    "assert_finite",
]


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    _active: Optional["Tape"] = None

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise ContractError("nested tapes are not supported")
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = None
        return False

    @staticmethod
    def active() -> Optional["Tape"]:
        return Tape._active

    class _Paused:
        def __enter__(self):
            self.saved = Tape._active
            Tape._active = None
            return self

        def __exit__(self, *exc):
            Tape._active = self.saved
            return False

    @staticmethod
    def paused() -> "Tape._Paused":
        """Context manager that suspends recording (ops become constants)."""
        return Tape._Paused()

    def backward(self, root: "Tensor") -> None:
        """Accumulate gradients of `root` into every reachable tensor."""
        if root.node is None or root.node.tape is not self:
            raise ContractError("backward root is not on this tape")
        if root.data.size != 1:
            raise ContractError(
                f"backward root must be scalar, got shape {root.data.shape}"
            )
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                pg = vjp(g)
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg


class Node:
    """One recorded operation: output tensor plus per-parent pullbacks."""

    __slots__ = ("op", "out", "parents", "vjps", "tape")

    def __init__(self, op, out, parents, vjps, tape):
        self.op = op
        self.out = out
        self.parents = parents
        self.vjps = vjps
        self.tape = tape


class Tensor:
    """Dense numeric array, optionally attached to the active tape."""

    __slots__ = ("data", "grad", "node", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = "param" if (self.requires_grad and self.node is None) else (
            "node" if self.node is not None else "const"
        )
        return f"Tensor({tag}, shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic sugar; python numbers are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
    return Tensor(arr)


def parameter(data, dtype=None) -> Tensor:
    arr = np.array(data, dtype=dtype) if dtype is not None else np.array(data)
    return Tensor(arr, requires_grad=True)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _record(op: str, out_data: np.ndarray, pairs: Sequence[tuple]) -> Tensor:
    """Build the output tensor, recording a node if anything needs grads.

    `pairs` holds (parent, vjp) for every differentiable input; parents
    that do not require grad are dropped so backward never visits them.
    """
    tape = Tape.active()
    out = Tensor(out_data)
    if tape is None:
        return out
    live = [(p, v) for p, v in pairs if p.requires_grad]
    if not live:
        return out
    out.requires_grad = True
    node = Node(
        op,
        out,
        tuple(p for p, _ in live),
        tuple(v for _, v in live),
        tape,
    )
    out.node = node
    tape.nodes.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` over the axes numpy broadcasting introduced or stretched."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    out = a.data + b.data
    return _record(
        "add",
        out,
        [
            (a, lambda g, s=a.shape: _unbroadcast(g, s)),
            (b, lambda g, s=b.shape: _unbroadcast(g, s)),
        ],
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    out = a.data - b.data
    return _record(
        "sub",
        out,
        [
            (a, lambda g, s=a.shape: _unbroadcast(g, s)),
            (b, lambda g, s=b.shape: _unbroadcast(-g, s)),
        ],
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    return _record(
        "mul",
        out,
        [
            (a, lambda g, bd=b.data, s=a.shape: _unbroadcast(g * bd, s)),
            (b, lambda g, ad=a.data, s=b.shape: _unbroadcast(g * ad, s)),
        ],
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", a.data * c, [(a, lambda g: g * c)])


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} x {b.shape} do not conform")
    out = a.data @ b.data
    return _record(
        "matmul",
        out,
        [
            (a, lambda g, bd=b.data: g @ bd.T),
            (b, lambda g, ad=a.data: ad.T @ g),
        ],
    )


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose2d: expected 2-D, got shape {a.shape}")
    return _record("transpose2d", a.data.T.copy(), [(a, lambda g: g.T)])


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in tensors]} do not align on axis {axis}"
        )
    pairs = []
    offset = 0
    for t in tensors:
        n = t.shape[axis]
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offset, offset + n)
        pairs.append((t, lambda g, sl=tuple(sl): np.ascontiguousarray(g[sl])))
        offset += n
    return _record("concat", out, pairs)


def slice_(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def vjp(g, key=key, shape=a.shape, dtype=a.dtype):
        z = np.zeros(shape, dtype=dtype)
        z[key] = g
        return z

    return _record("slice", np.ascontiguousarray(out), [(a, vjp)])


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select along axis 1 with a per-row integer index.

    `a` has shape (B, K, ...) and `index` shape (B, J); the output is
    (B, J, ...) with out[b, j] = a[b, index[b, j]]. Repeated indices
    accumulate gradient into their shared source.
    """
    index = np.asarray(index)
    if a.ndim < 2 or index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise ShapeError(
            f"gather_rows: input shape {a.shape} with index shape {index.shape}"
        )
    rows = np.arange(a.shape[0])[:, None]
    out = a.data[rows, index]

    def vjp(g, rows=rows, index=index, shape=a.shape, dtype=a.dtype):
        # scatter-add through a one-hot selection matrix; much faster
        # than np.add.at and handles repeated indices the same way
        B, K = shape[0], shape[1]
        onehot = np.zeros((B, index.shape[1], K), dtype=dtype)
        onehot[rows, np.arange(index.shape[1])[None, :], index] = 1.0
        if g.ndim == 2:
            return np.matmul(onehot.transpose(0, 2, 1), g[:, :, None])[:, :, 0]
        flat = g.reshape(B, index.shape[1], -1)
        return np.matmul(onehot.transpose(0, 2, 1), flat).reshape(shape)

    return _record("gather_rows", out, [(a, vjp)])


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
    return _record("reshape", out, [(a, lambda g, s=a.shape: g.reshape(s))])


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}")
    return _record("broadcast_to", out, [(a, lambda g, s=a.shape: _unbroadcast(g, s))])


# ---------------------------------------------------------------------------
# reductions


def _restore_axes(g, axis, keepdims, in_shape):
    if axis is None:
        return np.broadcast_to(g, in_shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, in_shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _record(
        "sum",
        out,
        [(a, lambda g, s=a.shape: _restore_axes(g, axis, keepdims, s).copy())],
    )


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size // out.size if out.size > 0 else 1

    def vjp(g, s=a.shape, n=n):
        return _restore_axes(g, axis, keepdims, s) / n

    return _record("mean", out, [(a, vjp)])


def logsumexp(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_k = np.log(s) + m
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    softmax = e / s

    def vjp(g, softmax=softmax):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return g * softmax

    return _record("logsumexp", out, [(a, vjp)])


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, [(a, lambda g, o=out: g * o)])


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log: input has non-positive entries")
    out = np.log(a.data)
    return _record("log", out, [(a, lambda g, d=a.data: g / d)])


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record("tanh", out, [(a, lambda g, o=out: g * (1.0 - o * o))])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp may overflow for very negative x; 1/(1+inf) = 0 is the right limit
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _record("sigmoid", out, [(a, lambda g, o=out: g * o * (1.0 - o))])


def softplus(a: Tensor) -> Tensor:
    # max(x, 0) + log1p(exp(-|x|)): stable and much faster than logaddexp
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return _record("softplus", out, [(a, lambda g, d=a.data: g * _sigmoid(d))])


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _record("relu", out, [(a, lambda g, d=a.data: g * (d > 0.0))])


def clamp(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi
    return _record("clamp", out, [(a, lambda g, m=mask: g * m)])


def square(a: Tensor) -> Tensor:
    out = a.data * a.data
    return _record("square", out, [(a, lambda g, d=a.data: g * (2.0 * d))])


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: input has negative entries")
    out = np.sqrt(a.data)
    return _record("sqrt", out, [(a, lambda g, o=out: g * (0.5 / o))])


# ---------------------------------------------------------------------------
# stochastic / structural ops


def gaussian_sample(mean: Tensor, log_var: Tensor, rng: RngStream) -> Tensor:
    """Reparameterized draw: mean + exp(0.5 * log_var) * eps, eps ~ N(0, I).

    Gradients flow through mean and log_var only; the noise is a constant
    of the draw, so the same stream state reproduces the sample bit-exactly.
    """
    if mean.shape != log_var.shape:
        raise ShapeError(
            f"gaussian_sample: mean shape {mean.shape} != log_var shape {log_var.shape}"
        )
    eps = rng.normal(mean.shape, dtype=mean.dtype)
    scaled = np.exp(0.5 * log_var.data) * eps
    out = mean.data + scaled
    return _record(
        "gaussian_sample",
        out,
        [
            (mean, lambda g: g),
            (log_var, lambda g, sc=scaled: g * (0.5 * sc)),
        ],
    )


def detach(a: Tensor) -> Tensor:
    """Constant view of `a`; gradients stop here."""
    return Tensor(a.data)


class BatchNormState:
    """Running statistics for one batchnorm layer (mutated in train mode)."""

    def __init__(self, features: int, dtype=np.float64, momentum: float = 0.1,
                 eps: float = 1e-5):
        self.running_mean = np.zeros(features, dtype=dtype)
        self.running_var = np.ones(features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              training: bool) -> Tensor:
    """Normalize features over the batch axis (axis 0) of a 2-D input.

    Train mode uses batch statistics and updates the running averages;
    eval mode is a fixed affine map from the running statistics.
    """
    if x.ndim != 2 or x.shape[1] != gamma.shape[0] or x.shape[1] != beta.shape[0]:
        raise ShapeError(
            f"batchnorm: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}"
        )
    eps = state.eps
    if training:
        n = x.shape[0]
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv_std
        mom = state.momentum
        unbiased = var * (n / (n - 1)) if n > 1 else var
        state.running_mean = (1.0 - mom) * state.running_mean + mom * mu
        state.running_var = (1.0 - mom) * state.running_var + mom * unbiased
        out = gamma.data * xhat + beta.data

        def vjp_x(g, xhat=xhat, inv_std=inv_std, gd=gamma.data, n=n):
            dxhat = g * gd
            return (inv_std / n) * (
                n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )

        return _record(
            "batchnorm",
            out,
            [
                (x, vjp_x),
                (gamma, lambda g, xhat=xhat: (g * xhat).sum(axis=0)),
                (beta, lambda g: g.sum(axis=0)),
            ],
        )
    inv_std = 1.0 / np.sqrt(state.running_var + eps)
    xhat = (x.data - state.running_mean) * inv_std
    out = gamma.data * xhat + beta.data
    return _record(
        "batchnorm",
        out,
        [
            (x, lambda g, k=gamma.data * inv_std: g * k),
            (gamma, lambda g, xhat=xhat: (g * xhat).sum(axis=0)),
            (beta, lambda g: g.sum(axis=0)),
        ],
    )


def assert_finite(a: Tensor, context: str = "") -> Tensor:
    """Identity that raises if `a` contains NaN or infinity."""
    if not np.all(np.isfinite(a.data)):
        bad = int(np.count_nonzero(~np.isfinite(a.data)))
        raise NumericsError(
            f"non-finite values ({bad} entries){': ' + context if context else ''}"
        )
    return a


def backward(root: Tensor) -> None:
    """Backpropagate from a scalar root through its recording tape."""
    if root.node is None:
        raise ContractError("backward root is not on any tape")
    root.node.tape.backward(root)


# Dispatch table: op-kind name -> callable. Mostly useful for sweeping
# gradient checks over every supported op.
OP_TABLE: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "concat": concat,
    "slice": slice_,
    "gather_rows": gather_rows,
    "reshape": reshape,
    "broadcast_to": broadcast_to,
    "transpose2d": transpose2d,
    "sum": sum_,
    "mean": mean_,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "relu": relu,
    "clamp": clamp,
    "logsumexp": logsumexp,
    "square": square,
    "sqrt": sqrt,
    "scale": scale,
    "gaussian_sample": gaussian_sample,
    "detach": detach,
    "batchnorm": batchnorm,
}


def forward_op(kind: str, *args, **kwargs) -> Tensor:
    """Run a named op from the dispatch table."""
    try:
        fn = OP_TABLE[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}")
    return fn(*args, **kwargs)
