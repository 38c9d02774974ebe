"""Dense float64 tensors with reverse-mode automatic differentiation.

The computation graph is implicit: every operation returns a new Tensor
holding references to its parents and a closure that routes the incoming
gradient to them. Calling ``backward()`` on a scalar output walks the DAG
in reverse topological order and accumulates ``.grad`` on every leaf
created with ``requires_grad=True`` (the parameters). Gradients accumulate
across calls until an optimizer step (or ``zero_grad``) clears them.

Scope is deliberately small: elementwise arithmetic, matmul, reductions,
a numerically stable row softmax, scaled cross-attention, and the
activations the fusion losses need. Everything is float64; non-finite
values are rejected at construction and at every op output.

Tensors are immutable values once built and safe to share across threads.
Parameters are the one exception: optimizers update their ``data`` buffer
in place under single-writer discipline.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "tsum",
    "tmean",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "relu",
    "sigmoid",
    "log_sigmoid",
    "row_softmax",
    "l2norm_rows",
    "add_bias",
    "concat_rows",
    "concat_cols",
    "scaled_cross_attention",
    "zero_grad",
    "SGD",
    "Adam",
    "finite_diff_check",
    "GradCheckReport",
]


def _check_finite(arr, origin):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {origin}")


class Tensor:
    """A dense float64 array node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ShapeError(f"tensors are limited to 3 dims, got {arr.ndim}")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- graph construction ------------------------------------------------

    @classmethod
    def from_operation(cls, data, parents, backward, op_name):
        """Build a non-leaf node. ``backward(grad)`` must return one gradient
        array per parent (or None for parents outside the graph)."""
        out = cls.__new__(cls)
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, op_name)
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op_name
        return out

    @property
    def in_graph(self):
        return self.requires_grad or self._backward is not None

    # -- basic introspection -----------------------------------------------

    @property
    def dims(self):
        return tuple(self.data.shape)

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------------

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

    @property
    def T(self):
        return transpose(self)

    # -- backward pass ---------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar output.

        Accumulates into ``.grad`` of every reachable ``requires_grad`` leaf.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar output, got shape {self.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.in_graph and id(p) not in visited:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.in_graph:
                    continue
                # out-of-place: pg may be a view into another node's gradient
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


def tensor(data, requires_grad=False):
    """Create a leaf tensor."""
    return Tensor(data, requires_grad=requires_grad)


def constant(data):
    return Tensor(data, requires_grad=False)


def parameter(data):
    return Tensor(data, requires_grad=True)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary_shapes(a, b, op_name):
    """Elementwise ops accept equal shapes or a scalar on either side."""
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op_name}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad, shape):
    """Sum a broadcast gradient back to the original operand shape.

    Mismatches only arise for size-1 operands (the broadcast rule above),
    so collapsing to the total is always correct here.
    """
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    return np.full(shape, np.sum(grad), dtype=np.float64)


# -- elementwise arithmetic -------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a.data, b.data, "add")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor.from_operation(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a.data, b.data, "sub")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return Tensor.from_operation(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a.data, b.data, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return Tensor.from_operation(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a.data, b.data, "div")

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

    return Tensor.from_operation(a.data / b.data, (a, b), backward, "div")


def neg(a):
    a = _as_tensor(a)

    def backward(g):
        return (-g,)

    return Tensor.from_operation(-a.data, (a,), backward, "neg")


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor.from_operation(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a):
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")

    def backward(g):
        return (g.T,)

    return Tensor.from_operation(a.data.T, (a,), backward, "transpose")


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor.from_operation(a.data.reshape(shape), (a,), backward, "reshape")


# -- reductions ---------------------------------------------------------------


def tsum(a, axis=None):
    """Sum over all elements (axis=None, scalar result) or one axis
    (keepdims, so the result stays 2-D for 2-D inputs)."""
    a = _as_tensor(a)
    if axis is None:
        out = np.sum(a.data)

        def backward(g):
            return (np.broadcast_to(g, a.shape).astype(np.float64),)

        return Tensor.from_operation(out, (a,), backward, "sum")

    out = np.sum(a.data, axis=axis, keepdims=True)

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_operation(out, (a,), backward, "sum")


def tmean(a, axis=None):
    a = _as_tensor(a)
    if axis is None:
        n = a.size
        out = np.mean(a.data)

        def backward(g):
            return (np.broadcast_to(g / n, a.shape).astype(np.float64),)

        return Tensor.from_operation(out, (a,), backward, "mean")

    n = a.shape[axis]
    out = np.mean(a.data, axis=axis, keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return Tensor.from_operation(out, (a,), backward, "mean")


# -- pointwise functions --------------------------------------------------------


def exp(a):
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return Tensor.from_operation(out, (a,), backward, "exp")


def log(a):
    a = _as_tensor(a)

    def backward(g):
        return (g / a.data,)

    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return Tensor.from_operation(out, (a,), backward, "log")


def sqrt(a):
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        # subgradient 0 at the origin keeps norms of zero vectors usable
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, g / (2.0 * safe), 0.0),)

    return Tensor.from_operation(out, (a,), backward, "sqrt")


def absolute(a):
    a = _as_tensor(a)

    def backward(g):
        return (g * np.sign(a.data),)

    return Tensor.from_operation(np.abs(a.data), (a,), backward, "abs")


def relu(a):
    a = _as_tensor(a)

    def backward(g):
        return (g * (a.data > 0.0),)

    return Tensor.from_operation(np.maximum(a.data, 0.0), (a,), backward, "relu")


def sigmoid(a):
    a = _as_tensor(a)
    out = expit(a.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor.from_operation(out, (a,), backward, "sigmoid")


def log_sigmoid(a):
    """log(sigmoid(x)), computed as -log1p(exp(-x)) without overflow."""
    a = _as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)

    def backward(g):
        return (g * expit(-a.data),)

    return Tensor.from_operation(out, (a,), backward, "log_sigmoid")


# -- structured ops -----------------------------------------------------------


def row_softmax(x):
    """Softmax along each row of a 2-D tensor, max-subtracted for stability."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"row_softmax needs a 2-D tensor, got {x.shape}")
    shifted = x.data - np.max(x.data, axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=1, keepdims=True)

    def backward(g):
        dot = np.sum(g * s, axis=1, keepdims=True)
        return (s * (g - dot),)

    return Tensor.from_operation(s, (x,), backward, "row_softmax")


def l2norm_rows(x):
    """Per-row Euclidean norm of an (N, d) tensor, returned as (N, 1).

    The gradient is x / norm with a zero subgradient on all-zero rows.
    """
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"l2norm_rows needs a 2-D tensor, got {x.shape}")
    n = np.linalg.norm(x.data, axis=1, keepdims=True)

    def backward(g):
        safe = np.where(n > 0.0, n, 1.0)
        return (np.where(n > 0.0, g * x.data / safe, 0.0),)

    return Tensor.from_operation(n, (x,), backward, "l2norm_rows")


def add_bias(a, b):
    """Add a length-d bias vector to every row of an (N, d) tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2:
        raise ShapeError(f"add_bias needs a 2-D left operand, got {a.shape}")
    bias = b.data.reshape(-1)
    if bias.shape[0] != a.shape[1]:
        raise ShapeError(f"bias width {bias.shape[0]} != row width {a.shape[1]}")

    def backward(g):
        return g, np.sum(g, axis=0).reshape(b.shape)

    return Tensor.from_operation(a.data + bias[None, :], (a, b), backward, "add_bias")


def concat_rows(parts):
    """Stack 2-D tensors with equal widths along axis 0."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat_rows needs at least one part")
    width = parts[0].shape[1] if parts[0].ndim == 2 else None
    for p in parts:
        if p.ndim != 2 or p.shape[1] != width:
            raise ShapeError("concat_rows: all parts must be 2-D with equal width")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    data = np.concatenate([p.data for p in parts], axis=0)
    return Tensor.from_operation(data, parts, backward, "concat_rows")


def concat_cols(a, b):
    """Concatenate two 2-D tensors with equal row counts along axis 1."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: incompatible shapes {a.shape} and {b.shape}")
    wa = a.shape[1]

    def backward(g):
        return g[:, :wa], g[:, wa:]

    data = np.concatenate([a.data, b.data], axis=1)
    return Tensor.from_operation(data, (a, b), backward, "concat_cols")


def scaled_cross_attention(q, kv):
    """softmax(q · kvᵀ / √d) · kv for token matrices q (T_q×d), kv (T_k×d).

    Each output row is a convex combination of kv's rows. Differentiable
    through both operands.
    """
    q, kv = _as_tensor(q), _as_tensor(kv)
    if q.ndim != 2 or kv.ndim != 2:
        raise ShapeError(f"attention needs 2-D operands, got {q.shape} and {kv.shape}")
    if q.shape[1] != kv.shape[1]:
        raise ShapeError(
            f"attention: query width {q.shape[1]} != key width {kv.shape[1]}"
        )
    scale = 1.0 / np.sqrt(q.shape[1])
    logits = mul(matmul(q, transpose(kv)), scale)
    weights = row_softmax(logits)
    return matmul(weights, kv)


# -- optimizers ----------------------------------------------------------------


def zero_grad(params):
    for p in params:
        p.grad = None


def _check_param(p):
    if not isinstance(p, Tensor) or not p.requires_grad:
        raise ContractError("optimizers only accept requires_grad tensors")


class SGD:
    """Plain gradient descent: p <- p - lr * g."""

    def __init__(self, params, lr):
        self.params = list(params)
        for p in self.params:
            _check_param(p)
        self.lr = float(lr)
        self.step_count = 0

    def step(self, zero=True):
        for p in self.params:
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ShapeError("gradient shape does not match parameter")
            p.data -= self.lr * p.grad
        self.step_count += 1
        if zero:
            zero_grad(self.params)

    def zero_grad(self):
        zero_grad(self.params)


class Adam:
    """Adam with standard bias correction (b1=0.9, b2=0.999, eps=1e-8)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        for p in self.params:
            _check_param(p)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, zero=True):
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ShapeError("gradient shape does not match parameter")
            g = p.grad
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / (1.0 - self.beta1**t)
            v_hat = self._v[i] / (1.0 - self.beta2**t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        if zero:
            zero_grad(self.params)

    def zero_grad(self):
        zero_grad(self.params)


# -- gradient verification -------------------------------------------------------


class GradCheckReport:
    """Outcome of one finite-difference comparison."""

    def __init__(self, max_rel_error, tol, analytic, numeric):
        self.max_rel_error = float(max_rel_error)
        self.tol = float(tol)
        self.analytic = analytic
        self.numeric = numeric

    @property
    def passed(self):
        return self.max_rel_error < self.tol

    def __repr__(self):
        verdict = "pass" if self.passed else "FAIL"
        return f"GradCheckReport({verdict}, max_rel_error={self.max_rel_error:.3e}, tol={self.tol:g})"


def finite_diff_check(f, x, tol=1e-4, h=1e-6):
    """Compare the analytic gradient of ``f`` at ``x`` against central differences.

    ``f`` maps one Tensor to a scalar Tensor. The error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|), the report carries
    the max. Non-finite evaluations raise NumericError.
    """
    x0 = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("finite_diff_check requires a scalar-valued function")
    out.backward()
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += h
        fp = f(tensor(bumped.reshape(x0.shape))).item()
        bumped[i] -= 2.0 * h
        fm = f(tensor(bumped.reshape(x0.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("non-finite evaluation during finite differences")
        num_flat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    return GradCheckReport(max_rel, tol, analytic, numeric)
