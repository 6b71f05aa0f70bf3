"""Dense float64 tensors with a reverse-mode tape.

Operations record onto the innermost active :class:`Tape`; outside a tape
nothing is recorded, which is how inference and finite-difference probes run.
"""

from __future__ import annotations

from dataclasses import dataclass
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError, UsageError

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_local = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data: object, requires_grad: bool = False, name: str = "") -> None:
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    @staticmethod
    def zeros(shape: Iterable[int], requires_grad: bool = False, name: str = "") -> Tensor:
        return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad, name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def check_finite(self, what: str = "") -> Tensor:
        if not self.is_finite():
            label = what or self.name or "tensor"
            bad = int((~np.isfinite(self.data)).sum())
            raise NumericError(f"{label} holds {bad} non-finite value(s), shape {self.shape}")
        return self

    def __add__(self, other: Tensor | float) -> Tensor:
        return add(self, other)

    def __radd__(self, other: float) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor | float) -> Tensor:
        return add(self, -other if not isinstance(other, Tensor) else scale(other, -1.0))

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __mul__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other: float) -> Tensor:
        return scale(self, float(other))

    def sum(self) -> Tensor:
        return total(self)

    def mean(self) -> Tensor:
        return scale(total(self), 1.0 / max(1, self.size))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{label})"


@dataclass(eq=False)
class _Node:
    tape: Tape
    index: int
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: GradFn


class Tape:
    """Ordered record of differentiable operations.

    Confined to the thread that opened it. Use as a context manager; nested
    tapes shadow outer ones.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, name: str, inputs: tuple[Tensor, ...], output: Tensor, grad_fn: GradFn) -> None:
        node = _Node(self, len(self.nodes), name, inputs, output, grad_fn)
        output._node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        node = loss._node
        if node is None or node.tape is not self:
            raise UsageError("loss was not produced on this tape")

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for current in reversed(self.nodes[: node.index + 1]):
            upstream = pending.pop(id(current.output), None)
            if upstream is None:
                continue
            input_grads = current.grad_fn(upstream)
            for tensor, grad in zip(current.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.shape:
                    grad = grad.reshape(tensor.shape)
                owner = tensor._node
                if owner is not None and owner.tape is self:
                    key = id(tensor)
                    if key in pending:
                        pending[key] = pending[key] + grad
                    else:
                        pending[key] = grad
                elif tensor.grad is None:
                    tensor.grad = np.array(grad, dtype=np.float64)
                else:
                    tensor.grad = tensor.grad + grad


def _stack() -> list[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def current_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def record(name: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, grad_fn: GradFn) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires_grad)
    if requires_grad:
        tape = current_tape()
        if tape is not None:
            tape.record(name, inputs, out, grad_fn)
    return out


def backward(loss: Tensor) -> None:
    node = loss._node
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if node is None:
        raise UsageError("loss is detached from any tape; run the program inside `with Tape():`")
    node.tape.backward(loss)


def add(a: Tensor, b: Tensor | float) -> Tensor:
    if not isinstance(b, Tensor):
        shift = float(b)
        return record("add_scalar", (a,), a.data + shift, lambda g: (g,))
    _same_shape("add", a, b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("residual_add", a, b)
    return record("residual_add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    a_data, b_data = a.data, b.data
    return record("mul", (a, b), a_data * b_data, lambda g: (g * b_data, g * a_data))


def scale(a: Tensor, factor: float) -> Tensor:
    return record("scale", (a,), a.data * factor, lambda g: (g * factor,))


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return record("sum", (a,), np.array(a.data.sum()), lambda g: (np.full(shape, float(g)),))


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    epsilon: float = 1e-5,
    components: Sequence[int] | None = None,
) -> float:
    """Max relative error between the tape gradient and central differences.

    ``x`` is perturbed in place so ``f`` may close over it (network parameters
    included). The error of one component is ``|a - n| / max(1, |a|)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ConfigurationError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")

    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            y = f(x)
            if y.data.size != 1:
                raise DimensionError(f"grad_check needs a scalar program, got shape {y.shape}")
            tape.backward(y)
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

        flat = x.data.reshape(-1)
        indices = range(flat.size) if components is None else components
        worst = 0.0
        for i in indices:
            original = flat[i]
            flat[i] = original + epsilon
            plus = f(x).item()
            flat[i] = original - epsilon
            minus = f(x).item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * epsilon)
            exact = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(exact - numeric) / max(1.0, abs(exact)))
        return worst
    finally:
        x.requires_grad = saved_flag
        x.grad = saved_grad
