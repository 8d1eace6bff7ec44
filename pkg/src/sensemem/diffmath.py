"""Dense float64 tensors with reverse-mode differentiation.

Small eager tape: every operation computes its value immediately and
records a closure that maps the output gradient to parent gradients.
``backward`` walks the tape once in reverse topological order and
accumulates (never overwrites) gradients, so fan-out works.

Only the primitives the training objectives need are provided; all
arithmetic is float64 so central finite differences are a usable oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Node",
    "GaussianDiag",
    "DimensionError",
    "EvaluationError",
    "GradCheckReport",
    "constant",
    "param",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "square",
    "exp",
    "log",
    "sqrt",
    "matmul",
    "sum_",
    "mean_",
    "concat",
    "pack",
    "reshape",
    "transpose",
    "getitem",
    "clamp",
    "detach",
    "activation",
    "tanh",
    "relu",
    "elu",
    "sigmoid",
    "leaky_relu",
    "softmax",
    "logsumexp",
    "kl_diag_gauss",
    "gaussian_log_density",
    "sample_gaussian",
    "backward",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class EvaluationError(RuntimeError):
    """An objective produced a non-finite value."""


class Node:
    """One tensor in the differentiation graph.

    ``value`` is a float64 ndarray; ``grad`` has the same shape once a
    backward pass has touched the node. Leaf nodes created with ``param``
    participate in gradient checks and optimizer updates.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Node", ...] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        requires_grad: bool = True,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return self.value.item()

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape}, leaf={self._backward is None})"

    # Operator sugar; everything routes through the module functions.
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def constant(x) -> Node:
    """Wrap an array as a graph constant (no gradient)."""
    return Node(np.asarray(x, dtype=np.float64), requires_grad=False)


def param(x) -> Node:
    """Leaf node that accumulates gradients."""
    v = np.array(x, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("parameter contains non-finite entries")
    return Node(v)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(value, parents, backward_fn) -> Node:
    requires = any(p.requires_grad for p in parents)
    return Node(value, tuple(parents), backward_fn if requires else None, requires)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value + b.value
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value - b.value
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value * b.value
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value / b.value
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.shape),
        ),
    )


def square(a) -> Node:
    a = as_node(a)
    return _make(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,))


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = as_node(a)
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a) -> Node:
    a = as_node(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (g / (2.0 * out),))


def matmul(a, b) -> Node:
    """Product of 1-D/2-D operands with exact gradients for both."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise DimensionError(f"matmul supports 1-D/2-D operands, got {av.shape} @ {bv.shape}")
    inner_a = av.shape[-1]
    inner_b = bv.shape[0]
    if inner_a != inner_b:
        raise DimensionError(f"inner dimensions disagree: {av.shape} @ {bv.shape}")
    out = av @ bv

    def backward_fn(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        return g * bv, g * av  # 1-D dot

    return _make(out, (a, b), backward_fn)


gemm = matmul


def sum_(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward_fn)


def mean_(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise DimensionError("concat of zero tensors")
    out = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(nodes), backward_fn)


def pack(scalars: Sequence[Node]) -> Node:
    """Stack scalar nodes into a 1-D vector."""
    scalars = [as_node(s) for s in scalars]
    if not scalars:
        raise DimensionError("pack of zero scalars")
    out = np.array([s.value.item() for s in scalars])

    def backward_fn(g):
        return tuple(np.asarray(gi) for gi in g)

    return _make(out, tuple(scalars), backward_fn)


def reshape(a, shape) -> Node:
    a = as_node(a)
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Node:
    a = as_node(a)
    if a.value.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.value.T.copy(), (a,), lambda g: (g.T,))


def getitem(a, idx) -> Node:
    a = as_node(a)
    out = a.value[idx]

    def backward_fn(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward_fn)


def clamp(a, lo: float, hi: float) -> Node:
    """Clip values; gradient passes only through unclipped entries."""
    a = as_node(a)
    out = np.clip(a.value, lo, hi)
    inside = (a.value > lo) & (a.value < hi)
    return _make(out, (a,), lambda g: (g * inside,))


def detach(a) -> Node:
    return constant(as_node(a).value)


# ---------------------------------------------------------------------------
# activations

_ACTIVATIONS = ("tanh", "relu", "elu", "sigmoid", "leaky_relu", "identity")


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0.0
    return _make(a.value * mask, (a,), lambda g: (g * mask,))


def elu(a, alpha: float = 1.0) -> Node:
    a = as_node(a)
    neg_part = alpha * (np.exp(np.minimum(a.value, 0.0)) - 1.0)
    out = np.where(a.value >= 0.0, a.value, neg_part)
    deriv = np.where(a.value >= 0.0, 1.0, neg_part + alpha)
    return _make(out, (a,), lambda g: (g * deriv,))


def sigmoid(a) -> Node:
    a = as_node(a)
    out = 1.0 / (1.0 + np.exp(-a.value))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, slope: float = 0.2) -> Node:
    a = as_node(a)
    deriv = np.where(a.value > 0.0, 1.0, slope)
    return _make(a.value * deriv, (a,), lambda g: (g * deriv,))


def activation(kind: str, x) -> Node:
    """Apply a named elementwise nonlinearity."""
    if kind == "tanh":
        return tanh(x)
    if kind == "relu":
        return relu(x)
    if kind == "elu":
        return elu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "leaky_relu":
        return leaky_relu(x)
    if kind == "identity":
        return as_node(x)
    raise ValueError(f"unsupported activation {kind!r}; expected one of {_ACTIVATIONS}")


# ---------------------------------------------------------------------------
# stable reductions


def logsumexp(a, axis=None, keepdims: bool = False) -> Node:
    """log sum exp with max subtraction; safe for large magnitudes."""
    a = as_node(a)
    if a.value.size == 0:
        raise DimensionError("logsumexp of an empty tensor")
    m = np.max(a.value, axis=axis, keepdims=True)
    shifted = sub(a, constant(m))
    s = log(sum_(exp(shifted), axis=axis, keepdims=keepdims))
    m_out = m if keepdims else np.squeeze(m, axis=axis) if axis is not None else m.reshape(())
    return add(s, constant(m_out))


def softmax(v, axis: int = -1) -> Node:
    """Shift-invariant softmax along ``axis``; rows sum to one."""
    v = as_node(v)
    if v.value.size == 0:
        raise DimensionError("softmax of an empty tensor")
    lse = logsumexp(v, axis=axis, keepdims=True)
    return exp(sub(v, lse))


# ---------------------------------------------------------------------------
# Gaussians


@dataclass
class GaussianDiag:
    """Diagonal Gaussian held as mean and log-variance nodes.

    Both fields may carry a leading batch axis; the trailing axis is the
    event dimension.
    """

    mean: Node
    log_var: Node

    def __post_init__(self):
        self.mean = as_node(self.mean)
        self.log_var = as_node(self.log_var)
        if self.mean.shape != self.log_var.shape:
            raise DimensionError(
                f"mean shape {self.mean.shape} != log_var shape {self.log_var.shape}"
            )

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def map_batch(self, idx) -> "GaussianDiag":
        return GaussianDiag(getitem(self.mean, idx), getitem(self.log_var, idx))


def kl_diag_gauss(q: GaussianDiag, p: GaussianDiag) -> Node:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over the
    event axis. Differentiable in all four parameter tensors."""
    if q.dim != p.dim:
        raise DimensionError(f"event dims disagree: {q.dim} vs {p.dim}")
    diff_lv = sub(p.log_var, q.log_var)
    var_ratio = exp(neg(diff_lv))
    mean_term = div(square(sub(q.mean, p.mean)), exp(p.log_var))
    inner = add(add(var_ratio, mean_term), sub(diff_lv, constant(1.0)))
    return mul(sum_(inner, axis=-1), 0.5)


def gaussian_log_density(x, dist: GaussianDiag) -> Node:
    """Log density of ``x`` under ``dist``, summed over the event axis.

    ``x`` and the distribution parameters broadcast against each other,
    so a (L, d) sample block can be scored against (A, 1, d) components.
    """
    x = as_node(x)
    d = dist.dim
    diff = sub(x, dist.mean)
    quad = div(square(diff), exp(dist.log_var))
    inner = add(add(quad, dist.log_var), constant(np.log(2.0 * np.pi)))
    return mul(sum_(inner, axis=-1), -0.5)


def sample_gaussian(dist: GaussianDiag, eps) -> Node:
    """Reparameterized draw mean + sigma * eps.

    ``eps`` is treated as a constant: gradients flow to the mean and
    log-variance only. ``eps`` may carry extra leading axes to draw many
    samples at once.
    """
    eps = as_node(eps).value
    if eps.shape[-1] != dist.dim:
        raise DimensionError(f"noise dim {eps.shape[-1]} != event dim {dist.dim}")
    sigma = exp(mul(dist.log_var, 0.5))
    return add(dist.mean, mul(sigma, constant(eps)))


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

    ``root`` must be scalar. Each node is visited exactly once, in
    reverse topological order; gradients add into ``grad`` so repeated
    backward calls accumulate, mirroring fan-out semantics.
    """
    if root.value.size != 1:
        raise DimensionError(f"backward requires a scalar root, got shape {root.shape}")
    if not np.isfinite(root.value):
        raise EvaluationError("objective is non-finite")
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            if id(parent) in grads:
                grads[id(parent)] += pg
            else:
                grads[id(parent)] = pg


def zero_grads(params: Iterable[Node]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients to central differences."""

    passed: bool
    checked: int
    max_rel_error: float
    worst_coordinate: str
    failures: list[tuple[str, float, float, float]] = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        msg = f"gradcheck {status}: {self.checked} coords, max rel err {self.max_rel_error:.3e}"
        if self.worst_coordinate:
            msg += f" at {self.worst_coordinate}"
        return msg


def grad_check(
    objective: Callable[[], Node],
    params: dict[str, Node],
    delta: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of ``objective`` against central
    finite differences for every coordinate of every parameter.

    ``objective`` must rebuild its graph on each call and be
    deterministic (freeze any noise before checking). The relative error
    uses |analytic - numeric| / max(1, |analytic|).
    """
    zero_grads(params.values())
    root = objective()
    if not np.isfinite(root.value):
        raise EvaluationError("objective is non-finite at the expansion point")
    backward(root)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value))
        for name, p in params.items()
    }

    failures: list[tuple[str, float, float, float]] = []
    max_rel = 0.0
    worst = ""
    checked = 0
    for name, p in params.items():
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + delta
            f_plus = float(objective().value)
            flat[i] = saved - delta
            f_minus = float(objective().value)
            flat[i] = saved
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise EvaluationError(f"objective non-finite while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * delta)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(1.0, abs(a))
            multi = tuple(int(j) for j in np.unravel_index(i, p.shape)) if p.shape else ()
            coord = f"{name}[{multi}]"
            checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = coord
            if rel > tol:
                failures.append((coord, a, numeric, rel))
    return GradCheckReport(
        passed=not failures,
        checked=checked,
        max_rel_error=max_rel,
        worst_coordinate=worst,
        failures=failures,
    )
