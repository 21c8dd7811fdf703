"""Reverse-mode automatic differentiation over dense float64 arrays.

Ops build a define-by-run graph: every result tensor remembers its parents
and a vjp closure. There is no global or thread-local recording state, so
tensors built on one thread can be differentiated on another. `Tape.trace`
linearizes the graph reachable from a root; `backward` walks it once in
reverse.

Broadcasting is deliberately narrow: shapes must be equal, or one operand is
a scalar, or one operand's shape equals the trailing suffix of the other's
(the bias-add case). Anything else is a ShapeError.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ContractError, NumericError, OracleError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "constant",
    "parameter",
    "matmul",
    "add",
    "sub",
    "mul",
    "relu",
    "softplus_shifted",
    "concat_last_axis",
    "concat_rows",
    "segment_sum",
    "gather_rows",
    "sum_all",
    "mean_all",
    "mean_axis0",
    "pow_scalar",
    "softmax_cross_entropy",
    "backward",
    "gradient_check",
    "unchecked",
]


class Tensor:
    """Dense float64 array plus the bookkeeping needed for reverse mode.

    Leaf tensors are constants (requires_grad=False) or parameters
    (requires_grad=True). Non-leaf tensors carry the op name, parent
    references, and a vjp closure mapping the output gradient to parent
    gradients.
    """

    __slots__ = ("data", "requires_grad", "op", "parents", "vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:  # 0-d arrays are always contiguous
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = None
        self.parents: tuple[Tensor, ...] = ()
        self.vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        op = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{grad}{op})"

    # arithmetic sugar; scalars are wrapped as constants
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


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


_CHECK_FINITE = True


@contextmanager
def unchecked():
    """Disable finite-value checks; for post-mortem diagnostics only."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = False
    try:
        yield
    finally:
        _CHECK_FINITE = prev


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by op '{op}'")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = parents
        out.vjp = vjp
    return out


def _suffix_broadcastable(sa: tuple[int, ...], sb: tuple[int, ...]) -> bool:
    if sa == sb or sa == () or sb == ():
        return True
    if len(sa) >= len(sb):
        longer, shorter = sa, sb
    else:
        longer, shorter = sb, sa
    return longer[len(longer) - len(shorter):] == shorter


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only leading axes can have been broadcast under the suffix rule
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad.reshape(shape)


def _binary(op: str, a, b, fwd, vjp_a, vjp_b) -> Tensor:
    a, b = constant(a), constant(b)
    if not _suffix_broadcastable(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible "
                         "(equal, scalar, or trailing-suffix broadcast only)")
    out = fwd(a.data, b.data)

    def vjp(g):
        return (_unbroadcast(vjp_a(g, a.data, b.data), a.shape),
                _unbroadcast(vjp_b(g, a.data, b.data), b.shape))

    return _result(out, op, (a, b), vjp)


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _result(out, "matmul", (a, b), vjp)


def relu(x) -> Tensor:
    x = constant(x)
    out = np.maximum(x.data, 0.0)

    def vjp(g):
        return ((x.data > 0.0) * g,)

    return _result(out, "relu", (x,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_shifted(x) -> Tensor:
    """ln(1 + e^x) - ln 2, so f(0) = 0; stable for large |x| via logaddexp."""
    x = constant(x)
    out = np.logaddexp(0.0, x.data) - np.log(2.0)

    def vjp(g):
        return (_sigmoid(x.data) * g,)

    return _result(out, "softplus_shifted", (x,), vjp)


def concat_last_axis(tensors) -> Tensor:
    ts = [constant(t) for t in tensors]
    lead = {t.shape[:-1] for t in ts}
    if len(lead) != 1:
        raise ShapeError(f"concat_last_axis: leading dims differ: {sorted(lead)}")
    out = np.concatenate([t.data for t in ts], axis=-1)
    widths = [t.shape[-1] for t in ts]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=-1))

    return _result(out, "concat_last_axis", tuple(ts), vjp)


def concat_rows(tensors) -> Tensor:
    ts = [constant(t) for t in tensors]
    trail = {t.shape[1:] for t in ts}
    if len(trail) != 1:
        raise ShapeError(f"concat_rows: trailing dims differ: {sorted(trail)}")
    out = np.concatenate([t.data for t in ts], axis=0)
    counts = [t.shape[0] for t in ts]
    splits = np.cumsum(counts)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=0))

    return _result(out, "concat_rows", tuple(ts), vjp)


def segment_sum(values, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of `values` into `num_segments` buckets; empty buckets are zero."""
    values = constant(values)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] != values.shape[0]:
        raise ShapeError(f"segment_sum: ids shape {ids.shape} does not index "
                         f"{values.shape[0]} rows")
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise IndexError(f"segment_sum: segment id out of range [0, {num_segments})")
    out = np.zeros((num_segments,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, ids, values.data)

    def vjp(g):
        return (g[ids],)

    return _result(out, "segment_sum", (values,), vjp)


def gather_rows(x, indices) -> Tensor:
    """Select rows by index; backward scatter-adds into the source."""
    x = constant(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range [0, {x.shape[0]})")
    out = x.data[idx]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(out, "gather_rows", (x,), vjp)


def sum_all(x) -> Tensor:
    x = constant(x)
    out = np.asarray(x.data.sum())

    def vjp(g):
        return (np.full(x.shape, float(g)),)

    return _result(out, "sum_all", (x,), vjp)


def mean_all(x) -> Tensor:
    x = constant(x)
    out = np.asarray(x.data.mean())
    n = x.size

    def vjp(g):
        return (np.full(x.shape, float(g) / n),)

    return _result(out, "mean_all", (x,), vjp)


def mean_axis0(x) -> Tensor:
    x = constant(x)
    if x.ndim < 1:
        raise ShapeError("mean_axis0: needs at least one axis")
    out = x.data.mean(axis=0)
    n = x.shape[0]

    def vjp(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _result(out, "mean_axis0", (x,), vjp)


def pow_scalar(x, p: float) -> Tensor:
    """Elementwise x**p for a constant exponent; non-integer p requires x > 0."""
    x = constant(x)
    if p != int(p) and np.any(x.data <= 0.0):
        raise ContractError(f"pow_scalar: non-integer exponent {p} needs positive base")
    out = x.data ** p

    def vjp(g):
        return (p * x.data ** (p - 1.0) * g,)

    return _result(out, "pow_scalar", (x,), vjp)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross entropy of integer labels under row-wise softmax of logits."""
    logits = constant(logits)
    lab = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or lab.ndim != 1 or lab.shape[0] != logits.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs "
                         f"labels {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= logits.shape[1]):
        raise IndexError("softmax_cross_entropy: label out of range")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    n = z.shape[0]
    out = np.asarray(-logp[np.arange(n), lab].mean())

    def vjp(g):
        soft = np.exp(logp)
        soft[np.arange(n), lab] -= 1.0
        return (soft * (float(g) / n),)

    return _result(out, "softmax_cross_entropy", (logits,), vjp)


class Tape:
    """Topologically ordered record of the ops reachable from a root tensor.

    Entry i's parents all appear before it, so one reverse sweep visits every
    op exactly once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, params=None, tape: Tape | None = None):
    """Gradients of a scalar loss.

    With `params` given, returns {param: grad} for exactly those tensors,
    zero-filled for parameters the loss never touched. Otherwise returns
    gradients for every requires_grad leaf reached from the loss.
    """
    if loss.shape != ():
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if tape is None:
        tape = Tape.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:
            if node.requires_grad:
                leaves[id(node)] = node
                grads[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    if params is None:
        return {t: grads[i] for i, t in leaves.items()}
    return {p: grads.get(id(p), np.zeros_like(p.data)) for p in params}


def gradient_check(f, params, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    `f(params) -> scalar Tensor` must be deterministic; it is evaluated twice
    up front and an OracleError is raised if the two values differ.
    """
    if eps <= 0:
        raise ContractError("gradient_check: eps must be positive")
    params = list(params)
    first = f(params).item()
    second = f(params).item()
    if first != second:
        raise OracleError(f"gradient_check: f is not deterministic ({first} vs {second})")
    ad = backward(f(params), params=params)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        g_ad = ad[p].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            hi = f(params).item()
            flat[i] = saved - eps
            lo = f(params).item()
            flat[i] = saved
            g_fd = (hi - lo) / (2.0 * eps)
            denom = max(1e-8, abs(g_ad[i]) + abs(g_fd))
            worst = max(worst, abs(g_ad[i] - g_fd) / denom)
    return worst
