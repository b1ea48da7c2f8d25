"""Dense 2-D float64 math with reverse-mode gradients.

A small define-by-run graph: every operation returns a `Node` holding its
value (an immutable 2-D float64 array) plus a closure that routes the
incoming gradient to the node's parents. The operation set is exactly what
the encoder / gate / head stack needs; there is no broadcasting beyond
row-wise vector ops and no dtype other than float64.

Matrix products accumulate over the inner index in increasing order, so the
result is bitwise identical to a naive triple loop. `np.einsum` happens to
honour that order for outputs with two or more columns (verified exhaustively
in the test suite); single-column outputs fall back to an explicit loop.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible or non-2-D shapes."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class GraphError(RuntimeError):
    """The backward graph is malformed (e.g. contains a cycle)."""


class DegenerateInputError(ValueError):
    """Input is structurally valid but outside the operation's domain."""


def as_matrix(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def row(values) -> np.ndarray:
    """A 1xN matrix view of a vector-like input."""
    return as_matrix(values).reshape(1, -1)


def matmul_values(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with per-element accumulation in increasing inner index."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul operands must be 2-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    if b.shape[1] == 1:
        # einsum reorders the reduction when the output has a single column
        out = np.zeros((a.shape[0], 1))
        scratch = np.empty_like(out)
        for k in range(a.shape[1]):
            np.multiply(a[:, k : k + 1], b[k, 0], out=scratch)
            np.add(out, scratch, out=out)
        return out
    return np.einsum("ik,kj->ij", a, b)


def softmax_values(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def layer_norm_values(x, gain, bias, eps=1e-5):
    """Row-wise layer norm; returns (out, xhat, inv_std) for reuse in backward."""
    if eps <= 0:
        raise DegenerateInputError("layer_norm eps must be positive")
    if x.shape[1] < 2:
        raise DegenerateInputError("layer_norm needs at least 2 features per row")
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gain + bias, xhat, inv_std


def cross_entropy_values(logits: np.ndarray, label: int) -> float:
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    return float(lse - logits[0, label])


class Node:
    """One vertex of the define-by-run graph. Values are immutable once set."""

    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "needs_grad", "_push")

    def __init__(self, value, parents=(), op="leaf", requires_grad=False, push=None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            raise ShapeError(f"nodes hold 2-D matrices, got shape {value.shape}")
        if not np.isfinite(value).all():
            raise NonFiniteError(f"non-finite values produced by op '{op}'")
        self.value = value
        self.grad = np.zeros_like(value)
        self.parents = tuple(parents)
        self.op = op
        self.requires_grad = requires_grad
        self.needs_grad = requires_grad or any(p.needs_grad for p in self.parents)
        self._push = push

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, requires_grad={self.requires_grad})"


def leaf(value, requires_grad=False) -> Node:
    return Node(as_matrix(value), requires_grad=requires_grad)


def constant(value) -> Node:
    return Node(as_matrix(value))


def _acc(node: Node, g: np.ndarray) -> None:
    if node.needs_grad:
        node.grad += g


def matmul(a: Node, b: Node) -> Node:
    value = matmul_values(a.value, b.value)

    def push(g):
        _acc(a, matmul_values(g, b.value.T))
        _acc(b, matmul_values(a.value.T, g))

    return Node(value, (a, b), "matmul", push=push)


def add(a: Node, b: Node) -> Node:
    """Elementwise add; b may be a 1xN row vector broadcast over a's rows."""
    broadcast = b.value.shape[0] == 1 and a.value.shape[0] != 1
    if not broadcast and a.value.shape != b.value.shape:
        raise ShapeError(f"add shapes disagree: {a.value.shape} vs {b.value.shape}")
    if broadcast and a.value.shape[1] != b.value.shape[1]:
        raise ShapeError(f"row-broadcast add needs matching columns: {a.value.shape} vs {b.value.shape}")
    value = a.value + b.value

    def push(g):
        _acc(a, g)
        _acc(b, g.sum(axis=0, keepdims=True) if broadcast else g)

    return Node(value, (a, b), "add", push=push)


def mul(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul shapes disagree: {a.value.shape} vs {b.value.shape}")
    value = a.value * b.value

    def push(g):
        _acc(a, g * b.value)
        _acc(b, g * a.value)

    return Node(value, (a, b), "mul", push=push)


def scale(a: Node, c: float) -> Node:
    c = float(c)
    value = a.value * c

    def push(g):
        _acc(a, g * c)

    return Node(value, (a,), "scale", push=push)


def smul(a: Node, s: Node) -> Node:
    """Multiply a matrix node by a 1x1 scalar node."""
    if s.value.shape != (1, 1):
        raise ShapeError(f"smul scalar must be 1x1, got {s.value.shape}")
    sv = s.value[0, 0]
    value = a.value * sv

    def push(g):
        _acc(a, g * sv)
        _acc(s, np.array([[float((g * a.value).sum())]]))

    return Node(value, (a, s), "smul", push=push)


def srecip(s: Node) -> Node:
    """Reciprocal of a 1x1 scalar node."""
    if s.value.shape != (1, 1):
        raise ShapeError(f"srecip expects a 1x1 scalar, got {s.value.shape}")
    value = 1.0 / s.value

    def push(g):
        _acc(s, -g * value * value)

    return Node(value, (s,), "srecip", push=push)


def tanh(a: Node) -> Node:
    value = np.tanh(a.value)

    def push(g):
        _acc(a, (1.0 - value * value) * g)

    return Node(value, (a,), "tanh", push=push)


def transpose(a: Node) -> Node:
    value = a.value.T.copy()

    def push(g):
        _acc(a, g.T)

    return Node(value, (a,), "transpose", push=push)


def mean_rows(a: Node) -> Node:
    """(T x D) -> (1 x D) mean over rows."""
    t = a.value.shape[0]
    value = a.value.mean(axis=0, keepdims=True)

    def push(g):
        _acc(a, np.repeat(g / t, t, axis=0))

    return Node(value, (a,), "mean_rows", push=push)


def std_rows_values(x: np.ndarray, eps: float = 1e-12):
    """Per-column standard deviation over rows; returns (std, centered)."""
    centered = x - x.mean(axis=0, keepdims=True)
    var = np.mean(centered * centered, axis=0, keepdims=True)
    return np.sqrt(var + eps), centered


def std_rows(a: Node, eps: float = 1e-12) -> Node:
    """(T x D) -> (1 x D) standard deviation over rows (temporal contrast)."""
    t = a.value.shape[0]
    value, centered = std_rows_values(a.value, eps)

    def push(g):
        _acc(a, centered * (g / (t * value)))

    return Node(value, (a,), "std_rows", push=push)


def pair_magnitude(a: Node, eps: float = 1e-12) -> Node:
    """(T x 2K) -> (T x K): magnitude of adjacent column pairs (quadrature)."""
    if a.value.shape[1] % 2:
        raise ShapeError(f"pair_magnitude needs an even column count, got {a.value.shape}")
    even = a.value[:, 0::2]
    odd = a.value[:, 1::2]
    value = np.sqrt(even * even + odd * odd + eps)

    def push(g):
        if a.needs_grad:
            full = np.empty_like(a.value)
            full[:, 0::2] = g * even / value
            full[:, 1::2] = g * odd / value
            a.grad += full

    return Node(value, (a,), "pair_magnitude", push=push)


def diff_rows(a: Node) -> Node:
    """(T x D) -> (T-1 x D) first difference along rows."""
    if a.value.shape[0] < 2:
        raise ShapeError("diff_rows needs at least 2 rows")
    value = a.value[1:] - a.value[:-1]

    def push(g):
        if a.needs_grad:
            full = np.zeros_like(a.value)
            full[1:] += g
            full[:-1] -= g
            a.grad += full

    return Node(value, (a,), "diff_rows", push=push)


def absval(a: Node) -> Node:
    """Elementwise absolute value (subgradient 0 at the kink)."""
    value = np.abs(a.value)

    def push(g):
        _acc(a, g * np.sign(a.value))

    return Node(value, (a,), "absval", push=push)


def hconcat(a: Node, b: Node) -> Node:
    """Concatenate two nodes along columns."""
    if a.value.shape[0] != b.value.shape[0]:
        raise ShapeError(f"hconcat row counts disagree: {a.value.shape} vs {b.value.shape}")
    value = np.concatenate([a.value, b.value], axis=1)
    split = a.value.shape[1]

    def push(g):
        _acc(a, g[:, :split])
        _acc(b, g[:, split:])

    return Node(value, (a, b), "hconcat", push=push)


def log_shift(a: Node, eps: float) -> Node:
    """Elementwise log(a + eps); inputs must satisfy a + eps > 0."""
    if eps <= 0:
        raise DegenerateInputError("log_shift eps must be positive")
    shifted = a.value + eps
    if np.any(shifted <= 0):
        raise DegenerateInputError("log_shift input must exceed -eps")
    value = np.log(shifted)

    def push(g):
        _acc(a, g / shifted)

    return Node(value, (a,), "log_shift", push=push)


def sum_all(a: Node) -> Node:
    value = np.array([[float(a.value.sum())]])

    def push(g):
        _acc(a, np.full_like(a.value, g[0, 0]))

    return Node(value, (a,), "sum_all", push=push)


def pick(a: Node, j: int) -> Node:
    """Extract element (0, j) of a 1xN node as a 1x1 node."""
    if a.value.shape[0] != 1:
        raise ShapeError(f"pick expects a row vector, got {a.value.shape}")
    if not 0 <= j < a.value.shape[1]:
        raise ShapeError(f"pick index {j} out of range for {a.value.shape}")
    value = a.value[:, j : j + 1].copy()

    def push(g):
        if a.needs_grad:
            full = np.zeros_like(a.value)
            full[0, j] = g[0, 0]
            a.grad += full

    return Node(value, (a,), "pick", push=push)


def softmax_rows(a: Node) -> Node:
    value = softmax_values(a.value)

    def push(g):
        dot = (g * value).sum(axis=1, keepdims=True)
        _acc(a, value * (g - dot))

    return Node(value, (a,), "softmax", push=push)


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    if gain.value.shape != (1, x.value.shape[1]) or bias.value.shape != (1, x.value.shape[1]):
        raise ShapeError("layer_norm gain/bias must be 1xD rows matching x")
    value, xhat, inv_std = layer_norm_values(x.value, gain.value, bias.value, eps)

    def push(g):
        _acc(gain, (g * xhat).sum(axis=0, keepdims=True))
        _acc(bias, g.sum(axis=0, keepdims=True))
        if x.needs_grad:
            dxhat = g * gain.value
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            x.grad += inv_std * (dxhat - m1 - xhat * m2)

    return Node(value, (x, gain, bias), "layer_norm", push=push)


def cross_entropy(logits: Node, label: int) -> Node:
    """Negative log softmax probability of `label` for a 1xK logit row."""
    if logits.value.shape[0] != 1:
        raise ShapeError(f"cross_entropy expects a 1xK logit row, got {logits.value.shape}")
    if not isinstance(label, (int, np.integer)) or not 0 <= int(label) < logits.value.shape[1]:
        raise ValueError(f"label {label!r} invalid for {logits.value.shape[1]} classes")
    label = int(label)
    probs = softmax_values(logits.value)
    value = np.array([[cross_entropy_values(logits.value, label)]])

    def push(g):
        if logits.needs_grad:
            delta = probs.copy()
            delta[0, label] -= 1.0
            logits.grad += delta * g[0, 0]

    return Node(value, (logits,), "cross_entropy", push=push)


def topo_order(root: Node) -> list[Node]:
    """Parents-first order; raises GraphError on a cycle."""
    order: list[Node] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Node, int]] = [(root, 0)]
    while stack:
        node, idx = stack.pop()
        if idx == 0:
            mark = state.get(id(node))
            if mark == 2:
                continue
            if mark == 1:
                raise GraphError("cycle detected in computation graph")
            state[id(node)] = 1
        if idx < len(node.parents):
            stack.append((node, idx + 1))
            parent = node.parents[idx]
            mark = state.get(id(parent))
            if mark == 1:
                raise GraphError("cycle detected in computation graph")
            if mark != 2:
                stack.append((parent, 0))
        else:
            state[id(node)] = 2
            order.append(node)
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into every tracked leaf's .grad."""
    if root.value.shape != (1, 1):
        raise ShapeError(f"backward root must be a 1x1 scalar, got {root.value.shape}")
    order = topo_order(root)
    root.grad = root.grad + 1.0
    for node in reversed(order):
        if node._push is not None and node.needs_grad:
            node._push(node.grad)
