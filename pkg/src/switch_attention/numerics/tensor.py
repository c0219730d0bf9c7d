from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from typing_extensions import (
    Any,
    Callable,
    Dict,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

from ..exceptions import (
    ContractViolationError,
    DimensionMismatchError,
    NonFiniteValueError,
)

DEFAULT_DTYPE = np.float64

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
"""
Maps the gradient w.r.t. an operation's output to the gradients w.r.t. each of its inputs.
``None`` marks an input that receives no gradient.
"""

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class NoGradContextManager:
    """
    A context manager that disables recording on the computation tape of the current thread.
    Tensors created inside the context are plain values, even if their inputs require gradients.
    """

    def __enter__(self) -> None:
        self.previous = is_grad_enabled()
        _grad_state.enabled = False

    def __exit__(
        self,
        exc_type: Optional[type],
        exc_val: Optional[Exception],
        exc_tb: Optional[type],
    ) -> None:
        _grad_state.enabled = self.previous


def no_grad() -> NoGradContextManager:
    return NoGradContextManager()


@dataclass(eq=False)
class Operation:
    """
    One recorded entry of the computation tape.
    """

    name: str
    """
    Name of the operation, used in error messages.
    """

    inputs: Tuple[Tensor, ...]
    """
    The tensors the operation consumed.
    """

    backward_rule: BackwardRule = field(repr=False)
    """
    The vector-Jacobian product of the operation.
    """


@dataclass(eq=False)
class Tensor:
    """
    A dense, row-major, 64-bit floating point array with optional gradient tracking.

    Tensors created by operations remember the operation that produced them if any input requires a gradient,
    which is how the computation tape is rebuilt for every forward pass.
    """

    data: np.ndarray
    requires_grad: bool = False
    grad: Optional[np.ndarray] = field(default=None, repr=False)
    """
    Accumulated gradient of a leaf tensor. Repeated backward passes add to it until `zero_grad` is called.
    """

    _operation: Optional[Operation] = field(default=None, repr=False)

    __array_ufunc__ = None
    """
    Makes numpy defer mixed arithmetic such as `array * tensor` to the tensor's reflected operators.
    """

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=DEFAULT_DTYPE)
        assert_finite("tensor", self.data)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._operation is None

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other: Union[Tensor, ArrayLike]) -> Tensor:
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Union[Tensor, ArrayLike]) -> Tensor:
        return subtract(self, other)

    def __rsub__(self, other: ArrayLike) -> Tensor:
        return subtract(other, self)

    def __mul__(self, other: Union[Tensor, ArrayLike]) -> Tensor:
        return multiply(self, other)

    def __rmul__(self, other: ArrayLike) -> Tensor:
        return multiply(other, self)

    def __truediv__(self, other: Union[Tensor, ArrayLike]) -> Tensor:
        return divide(self, other)

    def __rtruediv__(self, other: ArrayLike) -> Tensor:
        return divide(other, self)

    def __neg__(self) -> Tensor:
        return negate(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return getitem(self, index)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes or None)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=DEFAULT_DTYPE))


def parameter(data: ArrayLike) -> Tensor:
    """
    Creates a leaf tensor that requires a gradient.
    """
    return Tensor(np.array(data, dtype=DEFAULT_DTYPE), requires_grad=True)


def assert_finite(operation: str, data: np.ndarray) -> None:
    finite = np.isfinite(data)
    if not finite.all():
        raise NonFiniteValueError(operation=operation, count=int(finite.size - finite.sum()))


def record(
    name: str,
    inputs: Sequence[Tensor],
    data: np.ndarray,
    backward_rule: BackwardRule,
) -> Tensor:
    """
    Wraps the result of an operation in a tensor and appends the operation to the tape if needed.

    :param name: The name of the operation.
    :param inputs: The input tensors of the operation.
    :param data: The forward value.
    :param backward_rule: The vector-Jacobian product for all inputs.
    :return: The output tensor.
    """
    assert_finite(name, data)
    requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
    result = Tensor(data, requires_grad=requires_grad)
    if requires_grad:
        result._operation = Operation(name, tuple(inputs), backward_rule)
    return result


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """
    Sums a broadcast gradient back to the shape of the operand it belongs to.
    """
    if grad.shape == shape:
        return grad
    leading = grad.ndim - len(shape)
    if leading > 0:
        grad = grad.sum(axis=tuple(range(leading)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def subtract(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        "subtract",
        (a, b),
        a.data - b.data,
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def multiply(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        "multiply",
        (a, b),
        a.data * b.data,
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def divide(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        "divide",
        (a, b),
        a.data / b.data,
        lambda g: (
            unbroadcast(g / b.data, a.shape),
            unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def negate(a: Tensor) -> Tensor:
    return record("negate", (a,), -a.data, lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes with broadcasting over leading batch axes.
    dL/da = g·bᵀ, dL/db = aᵀ·g.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionMismatchError("matmul", "at least 2 per operand", (a.ndim, b.ndim))
    if a.shape[-1] != b.shape[-2]:
        raise DimensionMismatchError("matmul", a.shape[-1], b.shape[-2])

    def backward_rule(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)

    return record("matmul", (a, b), a.data @ b.data, backward_rule)


def tensor_sum(
    a: Tensor,
    axis: Optional[Union[int, Tuple[int, ...]]] = None,
    keepdims: bool = False,
) -> Tensor:
    def backward_rule(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", (a,), np.sum(a.data, axis=axis, keepdims=keepdims), backward_rule)


def tensor_mean(
    a: Tensor,
    axis: Optional[Union[int, Tuple[int, ...]]] = None,
    keepdims: bool = False,
) -> Tensor:
    count = a.size / np.sum(a.data, axis=axis, keepdims=keepdims).size
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return record(
        "transpose",
        (a,),
        np.transpose(a.data, axes),
        lambda g: (np.transpose(g, inverse),),
    )


def getitem(a: Tensor, index: Any) -> Tensor:
    def backward_rule(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return record("getitem", (a,), a.data[index], backward_rule)


def repeat_interleave(a: Tensor, repeats: int, axis: int) -> Tensor:
    """
    Repeats every slice along `axis` `repeats` times in place, e.g. heads [h0, h1] -> [h0, h0, h1, h1].
    """
    axis = axis % a.ndim

    def backward_rule(g: np.ndarray) -> Tuple[np.ndarray]:
        grouped = g.reshape(a.shape[:axis] + (a.shape[axis], repeats) + a.shape[axis + 1 :])
        return (grouped.sum(axis=axis + 1),)

    return record("repeat_interleave", (a,), np.repeat(a.data, repeats, axis=axis), backward_rule)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    boundaries = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_rule(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(np.split(g, boundaries, axis=axis))

    return record(
        "concatenate",
        tensors,
        np.concatenate([t.data for t in tensors], axis=axis),
        backward_rule,
    )


@dataclass
class ComputationTape:
    """
    The ordered list of operations that lead to a tensor.
    The tape is rebuilt from the output whenever it is needed, which keeps data-dependent control flow
    (e.g. gates that select a branch) free of bookkeeping.
    """

    tensors: List[Tensor]
    """
    Tensors produced by operations, in topological order: every operation's inputs precede it.
    """

    @classmethod
    def from_output(cls, output: Tensor) -> ComputationTape:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited or tensor._operation is None:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            for parent in tensor._operation.inputs:
                if parent._operation is not None and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def operations(self) -> List[Operation]:
        return [t._operation for t in self.tensors]


def backward(loss: Tensor) -> None:
    """
    Populates `grad` of every leaf that requires a gradient and is reachable from `loss`.
    Gradients accumulate over repeated calls until the leaves are reset with `zero_grad`.

    :param loss: A scalar tensor produced by recorded operations.
    """
    if loss.size != 1:
        raise ContractViolationError("backward", f"loss must be scalar, got shape {loss.shape}")
    tape = ComputationTape.from_output(loss)
    if len(tape) == 0:
        raise ContractViolationError("backward", "the computation tape is empty")

    gradients: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(tape.tensors):
        grad = gradients.pop(id(tensor), None)
        if grad is None:
            continue
        operation = tensor._operation
        for parent, parent_grad in zip(operation.inputs, operation.backward_rule(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            assert_finite(f"{operation.name} (backward)", parent_grad)
            if parent._operation is None:
                parent.grad = parent_grad.copy() if parent.grad is None else parent.grad + parent_grad
            elif id(parent) in gradients:
                gradients[id(parent)] = gradients[id(parent)] + parent_grad
            else:
                gradients[id(parent)] = parent_grad
