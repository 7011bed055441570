"""Dense-matrix autodiff core.

A small reverse-mode tape over 2-D numpy arrays, parameter blocks with Adam
state, and a central-difference gradient checker. Training code runs the tape
in float32; gradient checks run the same ops in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateEmbeddingError,
    DimensionError,
    GradientCheckError,
    TrainingDivergenceError,
)

# Row norms below this are treated as a collapsed embedding.
NORM_FLOOR = 1e-12


class Tensor:
    """A 2-D array plus reverse-mode gradient bookkeeping.

    Tensors form a DAG through the ops in this module. Calling
    :meth:`backward` with an output gradient propagates it to every ancestor;
    repeated calls accumulate, so two losses sharing only leaf tensors may be
    backpropagated one after the other.
    """

    __slots__ = ("value", "grad", "_parents", "_backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value)
        self.grad = None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def backward(self, grad):
        grad = np.asarray(grad, dtype=self.value.dtype)
        if grad.shape != self.value.shape:
            raise DimensionError(
                f"output gradient shape {grad.shape} != value shape {self.value.shape}"
            )
        order = _topo_order(self)
        _accumulate(self, grad)
        for t in reversed(order):
            if t._backward_fn is not None and t.grad is not None:
                t._backward_fn(t.grad)


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            stack.append((p, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += g


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _check_2d(*tensors: Tensor) -> None:
    for t in tensors:
        if t.value.ndim != 2:
            raise DimensionError(f"expected 2-D array, got shape {t.value.shape}")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_2d(a, b)
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul shapes do not conform: {a.value.shape} x {b.value.shape}")
    out = Tensor(a.value @ b.value, (a, b))

    def backward_fn(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    out._backward_fn = backward_fn
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.shape != b.value.shape:
        raise DimensionError(f"add shapes differ: {a.value.shape} vs {b.value.shape}")
    out = Tensor(a.value + b.value, (a, b))

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    out._backward_fn = backward_fn
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.shape != b.value.shape:
        raise DimensionError(f"sub shapes differ: {a.value.shape} vs {b.value.shape}")
    out = Tensor(a.value - b.value, (a, b))

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    out._backward_fn = backward_fn
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.shape != b.value.shape:
        raise DimensionError(f"mul shapes differ: {a.value.shape} vs {b.value.shape}")
    out = Tensor(a.value * b.value, (a, b))

    def backward_fn(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)

    out._backward_fn = backward_fn
    return out


def add_bias(x, bias) -> Tensor:
    """Add a (1, d) bias row to every row of x."""
    x, bias = as_tensor(x), as_tensor(bias)
    _check_2d(x, bias)
    if bias.value.shape != (1, x.value.shape[1]):
        raise DimensionError(
            f"bias shape {bias.value.shape} does not broadcast over rows of {x.value.shape}"
        )
    out = Tensor(x.value + bias.value, (x, bias))

    def backward_fn(g):
        _accumulate(x, g)
        _accumulate(bias, g.sum(axis=0, keepdims=True))

    out._backward_fn = backward_fn
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    # Split by sign to avoid exp overflow.
    s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    s = s.astype(v.dtype, copy=False)
    out = Tensor(s, (x,))

    def backward_fn(g):
        _accumulate(x, g * s * (1.0 - s))

    out._backward_fn = backward_fn
    return out


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.value)
    out = Tensor(t, (x,))

    def backward_fn(g):
        _accumulate(x, g * (1.0 - t * t))

    out._backward_fn = backward_fn
    return out


def gather_rows(table, indices) -> Tensor:
    """Select rows of a (n, d) table by integer index (embedding lookup)."""
    table = as_tensor(table)
    _check_2d(table)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError(f"gather indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.value.shape[0]):
        raise DimensionError(
            f"gather index out of range for table with {table.value.shape[0]} rows"
        )
    out = Tensor(table.value[idx], (table,))

    def backward_fn(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.value)
        np.add.at(table.grad, idx, g)

    out._backward_fn = backward_fn
    return out


def where_rows(mask, a, b) -> Tensor:
    """Row-wise select: rows where mask is True come from a, else from b."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.shape != b.value.shape:
        raise DimensionError(f"where_rows shapes differ: {a.value.shape} vs {b.value.shape}")
    m = np.asarray(mask, dtype=bool).reshape(-1, 1)
    if m.shape[0] != a.value.shape[0]:
        raise DimensionError(f"mask length {m.shape[0]} != row count {a.value.shape[0]}")
    out = Tensor(np.where(m, a.value, b.value), (a, b))

    def backward_fn(g):
        _accumulate(a, g * m)
        _accumulate(b, g * ~m)

    out._backward_fn = backward_fn
    return out


def l2_normalize_rows(m) -> Tensor:
    """Scale every row to unit Euclidean norm.

    Raises DegenerateEmbeddingError when a row norm is below ``NORM_FLOOR``,
    which signals an untrained or collapsed encoder rather than a shape bug.
    """
    m = as_tensor(m)
    _check_2d(m)
    norms = np.linalg.norm(m.value, axis=1, keepdims=True)
    if (norms < NORM_FLOOR).any():
        bad = int(np.argmin(norms))
        raise DegenerateEmbeddingError(f"row {bad} has norm {float(norms[bad, 0]):.3e}")
    y = m.value / norms
    out = Tensor(y, (m,))

    def backward_fn(g):
        proj = (g * y).sum(axis=1, keepdims=True)
        _accumulate(m, (g - y * proj) / norms)

    out._backward_fn = backward_fn
    return out


def cosine_similarity_matrix(a, b) -> Tensor:
    """Pairwise dot products S[i, j] = a_i . b_j for row-normalized inputs."""
    a, b = as_tensor(a), as_tensor(b)
    _check_2d(a, b)
    if a.value.shape[1] != b.value.shape[1]:
        raise DimensionError(
            f"column counts differ: {a.value.shape} vs {b.value.shape}"
        )
    out = Tensor(a.value @ b.value.T, (a, b))

    def backward_fn(g):
        _accumulate(a, g @ b.value)
        _accumulate(b, g.T @ a.value)

    out._backward_fn = backward_fn
    return out


class ParameterLeaves:
    """Fresh leaf tensors for one forward/backward pass over parameter blocks.

    Repeated requests for the same block within a pass return the same leaf,
    so gradients from multiple uses accumulate in one backward sweep.
    """

    def __init__(self):
        self._leaves: dict[str, tuple[ParamBlock, Tensor]] = {}

    def leaf(self, block: "ParamBlock") -> Tensor:
        hit = self._leaves.get(block.name)
        if hit is not None:
            return hit[1]
        t = Tensor(block.value)
        self._leaves[block.name] = (block, t)
        return t

    def harvest(self) -> list["ParamBlock"]:
        """Add accumulated leaf gradients into their blocks.

        Returns the blocks that actually received gradient this pass.
        """
        touched = []
        for block, t in self._leaves.values():
            if t.grad is not None:
                block.grad += t.grad
                touched.append(block)
        return touched


@dataclass
class ParamBlock:
    """One trainable matrix with its gradient and Adam state."""

    name: str
    value: np.ndarray
    grad: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step: int = 0

    @classmethod
    def create(cls, name: str, value: np.ndarray) -> "ParamBlock":
        value = np.asarray(value)
        if value.ndim != 2:
            raise DimensionError(f"parameter block '{name}' must be 2-D, got {value.shape}")
        return cls(
            name=name,
            value=value,
            grad=np.zeros_like(value),
            adam_m=np.zeros_like(value),
            adam_v=np.zeros_like(value),
        )

    def zero_grad(self) -> None:
        self.grad[:] = 0

    def copy(self) -> "ParamBlock":
        return ParamBlock(
            self.name,
            self.value.copy(),
            self.grad.copy(),
            self.adam_m.copy(),
            self.adam_v.copy(),
            self.step,
        )


def adam_step(block: ParamBlock, lr: float = 2e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> ParamBlock:
    """Apply one bias-corrected Adam update in place; zeroes the gradient."""
    g = block.grad
    if not np.isfinite(g).all():
        raise TrainingDivergenceError(f"non-finite gradient in block '{block.name}'")
    block.step += 1
    block.adam_m *= beta1
    block.adam_m += (1.0 - beta1) * g
    block.adam_v *= beta2
    block.adam_v += (1.0 - beta2) * (g * g)
    m_hat = block.adam_m / (1.0 - beta1 ** block.step)
    v_hat = block.adam_v / (1.0 - beta2 ** block.step)
    block.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    block.zero_grad()
    return block


@dataclass
class GradCheckReport:
    """Per-block worst relative error of analytic vs. numeric gradients."""

    max_rel_error: dict[str, float]
    passed: bool
    tolerance: float

    def worst(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0


# Relative-error denominator floor; avoids blowup near zero gradients.
REL_ERR_FLOOR = 1e-8


def finite_difference_check(loss_fn, params, h: float = 1e-5, tolerance: float = 1e-4,
                            max_entries_per_block: int = 200, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn(params)`` must return a scalar and leave analytic gradients in
    each block's ``grad`` field (gradients are zeroed here before every call).
    Blocks larger than ``max_entries_per_block`` are subsampled with the given
    seed. Use float64 parameter blocks; float32 resolution cannot support the
    default step size.
    """
    params = list(params)

    def evaluate() -> float:
        for b in params:
            b.zero_grad()
        value = float(loss_fn(params))
        if not np.isfinite(value):
            raise GradientCheckError(f"loss_fn returned non-finite value {value!r}")
        return value

    evaluate()
    analytic = {b.name: b.grad.copy() for b in params}
    rng = np.random.default_rng(seed)
    per_block: dict[str, float] = {}
    for b in params:
        flat = b.value.reshape(-1)
        n = flat.size
        if n <= max_entries_per_block:
            entries = np.arange(n)
        else:
            entries = np.sort(rng.choice(n, size=max_entries_per_block, replace=False))
        ga = analytic[b.name].reshape(-1)
        worst = 0.0
        for i in entries:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = evaluate()
            flat[i] = orig - h
            f_minus = evaluate()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            rel = abs(ga[i] - numeric) / max(abs(ga[i]), abs(numeric), REL_ERR_FLOOR)
            worst = max(worst, rel)
        per_block[b.name] = worst
    # Leave the analytic gradients in place for the caller.
    for b in params:
        b.zero_grad()
        b.grad += analytic[b.name]
    passed = all(v < tolerance for v in per_block.values())
    return GradCheckReport(max_rel_error=per_block, passed=passed, tolerance=tolerance)
