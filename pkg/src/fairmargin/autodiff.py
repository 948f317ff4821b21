"""Minimal tape-based reverse-mode autodiff over dense float64 tensors.

Supplies exactly the operations the MLP and the margin losses need:
elementwise arithmetic, matmul, relu/sigmoid, masked log-sum-exp extrema,
hinge, binary cross-entropy on logits, and masked means.  Every forward
value is a C-order ``numpy`` float64 array; every tensor doubles as its
graph node (op tag, parents, saved values inside the backward closure,
gradient accumulator).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatchError",
    "EmptyPoolError",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "relu",
    "sigmoid",
    "lse_max",
    "lse_min",
    "hinge",
    "bce_with_logits",
    "mean",
    "sigmoid_values",
]


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, shape_a: tuple, shape_b: tuple):
        self.shapes = (shape_a, shape_b)
        super().__init__(f"{op}: incompatible shapes {shape_a} and {shape_b}")


class EmptyPoolError(ValueError):
    """Raised when a masked reduction selects no elements.

    Callers that implement the empty-pool rule catch this and substitute a
    zero loss term; it is a signal, not a crash.
    """


class Tensor:
    """Dense float64 array plus its record in the computation graph."""

    __slots__ = ("data", "grad", "op", "parents", "_backward", "tape")

    def __init__(
        self,
        data: np.ndarray,
        tape: "Tape",
        op: str = "leaf",
        parents: tuple = (),
        backward: Callable[[], None] | None = None,
    ):
        self.data = data
        self.grad = np.zeros_like(data)
        self.op = op
        self.parents = parents
        self._backward = backward
        self.tape = tape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    # Operator sugar; everything routes through the module-level ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class Tape:
    """Ordered record of tensors; creation order is a valid evaluation order.

    One tape per forward/backward pass.  Trainable parameters are registered
    so ``backward`` can be asked for "gradients of all parameters"; leaves
    created in earlier passes are re-attached with :meth:`adopt`.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.params: list[Tensor] = []

    def _record(self, t: Tensor) -> Tensor:
        self.nodes.append(t)
        return t

    def constant(self, values) -> Tensor:
        """Leaf tensor with no gradient consumers of its own."""
        # np.array keeps 0-d scalars 0-d (ascontiguousarray would promote them)
        data = np.array(values, dtype=np.float64, order="C")
        return self._record(Tensor(data, self, op="const"))

    def parameter(self, values) -> Tensor:
        """Leaf tensor registered as trainable."""
        t = self.constant(values)
        t.op = "param"
        self.params.append(t)
        return t

    def adopt(self, t: Tensor, trainable: bool = True) -> Tensor:
        """Re-attach a leaf from a previous tape (e.g. persistent weights)."""
        if t.parents:
            raise ValueError("only leaf tensors can be adopted onto a new tape")
        t.tape = self
        t.grad = np.zeros_like(t.data)
        self._record(t)
        if trainable:
            self.params.append(t)
        return t

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(node) into every node's ``grad``.

        Zeroes all accumulators first, so repeated calls give identical
        results.  ``root`` must be a scalar recorded on this tape.
        """
        if root.data.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        if root.tape is not self:
            raise ValueError("backward root was not recorded on this tape")
        for node in self.nodes:
            node.grad = np.zeros_like(node.data)
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is not None:
                node._backward()


def _result_tape(op: str, *tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError(f"{op}: operands recorded on different tapes")
    return tape


def _as_mask(mask, n: int, op: str) -> np.ndarray:
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if m.size != n:
        raise ShapeMismatchError(op, (n,), m.shape)
    return m


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a row vector broadcast over a's rows."""
    tape = _result_tape("add", a, b)
    broadcast = False
    if a.shape != b.shape:
        # Only the bias pattern is allowed: (m, n) + (n,) or (m, n) + (1, n).
        if a.data.ndim == 2 and b.data.reshape(-1).shape == (a.shape[1],):
            broadcast = True
        else:
            raise ShapeMismatchError("add", a.shape, b.shape)
    out_data = a.data + b.data.reshape(1, -1) if broadcast else a.data + b.data
    out = Tensor(out_data, tape, op="add", parents=(a, b))

    def _bw():
        a.grad += out.grad
        if broadcast:
            b.grad += out.grad.sum(axis=0).reshape(b.shape)
        else:
            b.grad += out.grad

    out._backward = _bw
    return tape._record(out)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference of equal-shaped tensors."""
    tape = _result_tape("sub", a, b)
    if a.shape != b.shape:
        raise ShapeMismatchError("sub", a.shape, b.shape)
    out = Tensor(a.data - b.data, tape, op="sub", parents=(a, b))

    def _bw():
        a.grad += out.grad
        b.grad -= out.grad

    out._backward = _bw
    return tape._record(out)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shaped tensors."""
    tape = _result_tape("mul", a, b)
    if a.shape != b.shape:
        raise ShapeMismatchError("mul", a.shape, b.shape)
    out = Tensor(a.data * b.data, tape, op="mul", parents=(a, b))

    def _bw():
        a.grad += b.data * out.grad
        b.grad += a.data * out.grad

    out._backward = _bw
    return tape._record(out)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = float(c)
    out = Tensor(a.data * c, a.tape, op="scale", parents=(a,))

    def _bw():
        a.grad += c * out.grad

    out._backward = _bw
    return a.tape._record(out)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; dA = dC @ B^T, dB = A^T @ dC."""
    tape = _result_tape("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    out = Tensor(a.data @ b.data, tape, op="matmul", parents=(a, b))

    def _bw():
        a.grad += out.grad @ b.data.T
        b.grad += a.data.T @ out.grad

    out._backward = _bw
    return tape._record(out)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient 0 at exactly 0."""
    out = Tensor(np.maximum(x.data, 0.0), x.tape, op="relu", parents=(x,))

    def _bw():
        x.grad += (x.data > 0.0) * out.grad

    out._backward = _bw
    return x.tape._record(out)


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on a plain array.

    Uses 1/(1+e^-x) for x >= 0 and e^x/(1+e^x) for x < 0, so neither branch
    exponentiates a large positive argument.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic; backward is sigma * (1 - sigma)."""
    s = sigmoid_values(x.data)
    out = Tensor(s, x.tape, op="sigmoid", parents=(x,))

    def _bw():
        x.grad += s * (1.0 - s) * out.grad

    out._backward = _bw
    return x.tape._record(out)


# ---------------------------------------------------------------------------
# masked reductions and loss kernels
# ---------------------------------------------------------------------------


def lse_max(x: Tensor, mask) -> Tensor:
    """Smooth maximum log(sum_i exp(x_i)) over the masked index set.

    Computed with the max-shift trick so arbitrarily large logits do not
    overflow.  Backward distributes the incoming gradient as a softmax over
    the selected entries (zero elsewhere).
    """
    m = _as_mask(mask, x.data.size, "lse_max")
    flat = x.data.reshape(-1)
    sel = flat[m]
    if sel.size == 0:
        raise EmptyPoolError("lse_max over an empty index set")
    shift = sel.max()
    ex = np.exp(sel - shift)
    total = ex.sum()
    out = Tensor(np.asarray(shift + np.log(total)), x.tape, op="lse_max", parents=(x,))

    def _bw():
        g = np.zeros_like(flat)
        g[m] = (ex / total) * out.grad.reshape(())
        x.grad += g.reshape(x.shape)

    out._backward = _bw
    return x.tape._record(out)


def lse_min(x: Tensor, mask) -> Tensor:
    """Smooth minimum -log(sum_i exp(-x_i)) over the masked index set.

    Implemented as the exact negation dual of :func:`lse_max`, so
    lse_min(x) == -lse_max(-x) bitwise.
    """
    return scale(lse_max(scale(x, -1.0), mask), -1.0)


def hinge(x: Tensor) -> Tensor:
    """max(0, x) on a scalar; subgradient 0 at exactly 0."""
    if x.data.size != 1:
        raise ValueError(f"hinge expects a scalar tensor, got shape {x.shape}")
    out = Tensor(np.maximum(x.data, 0.0), x.tape, op="hinge", parents=(x,))

    def _bw():
        if x.data.reshape(()) > 0.0:
            x.grad += out.grad

    out._backward = _bw
    return x.tape._record(out)


def bce_with_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean binary cross-entropy from logits over the (optionally masked) entries.

    Per element: max(l, 0) - y*l + log(1 + exp(-|l|)), the overflow-free form
    of log(1 + e^l) - y*l.  Backward: (sigma(l) - y) / n on selected entries.
    """
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeMismatchError("bce_with_logits", logits.shape, y.shape)
    if not np.all((y == 0.0) | (y == 1.0)):
        bad = y[(y != 0.0) & (y != 1.0)].reshape(-1)[0]
        raise ValueError(f"bce_with_logits targets must be 0 or 1, got {bad}")
    if mask is None:
        m = np.ones(logits.data.size, dtype=bool)
    else:
        m = _as_mask(mask, logits.data.size, "bce_with_logits")
    if not m.any():
        raise EmptyPoolError("bce_with_logits over an empty index set")
    flat_l = logits.data.reshape(-1)[m]
    flat_y = y.reshape(-1)[m]
    per_elem = np.maximum(flat_l, 0.0) - flat_y * flat_l + np.log1p(np.exp(-np.abs(flat_l)))
    n = flat_l.size
    out = Tensor(np.asarray(per_elem.sum() / n), logits.tape, op="bce", parents=(logits,))

    def _bw():
        g = np.zeros(logits.data.size)
        g[m] = (sigmoid_values(flat_l) - flat_y) / n * out.grad.reshape(())
        logits.grad += g.reshape(logits.shape)

    out._backward = _bw
    return logits.tape._record(out)


def mean(x: Tensor, mask=None) -> Tensor:
    """Mean over the (optionally masked) entries, as a scalar tensor."""
    if mask is None:
        m = np.ones(x.data.size, dtype=bool)
    else:
        m = _as_mask(mask, x.data.size, "mean")
    n = int(m.sum())
    if n == 0:
        raise EmptyPoolError("mean over an empty index set")
    out = Tensor(np.asarray(x.data.reshape(-1)[m].sum() / n), x.tape, op="mean", parents=(x,))

    def _bw():
        g = np.zeros(x.data.size)
        g[m] = out.grad.reshape(()) / n
        x.grad += g.reshape(x.shape)

    out._backward = _bw
    return x.tape._record(out)


def stack_mean(terms: Sequence[Tensor]) -> Tensor:
    """Average a list of scalar tensors, summing in list order."""
    if not terms:
        raise ValueError("stack_mean of no terms")
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return scale(acc, 1.0 / len(terms))
