"""
Tensor kernels and reverse-mode automatic differentiation.

A Tensor wraps a float64 numpy array. While a Tape is active (``with Tape() as tape``)
every primitive whose inputs require gradients is appended to the tape together with
its vector-Jacobian product; ``tape.backward(loss)`` walks the tape once in reverse
order and returns the gradient of the scalar loss with respect to every watched
parameter. The active tape is thread-local, so frozen-network inference on worker
threads never records anything.

The module also hosts the dispatching helpers used by the right-hand-side functions
(``sin``, ``stack`` ...), which accept either plain arrays or Tensors so that the same
code path serves the plain and the differentiable integrator, and the central
finite-difference oracle used by every gradient acceptance test.
"""

__author__ = "HybridODE contributors"
__copyright__ = "Copyright (C) 2026 HybridODE contributors"
__license__ = "GPL-3.0"


import threading
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union
import numpy as np
from hybridode.utils.exceptions import NonFiniteError, ShapeError, TapeError
from hybridode.utils.logger import StructuredLogger

logger = StructuredLogger()

ArrayLike = Union["Tensor", np.ndarray, float, int]

FD_STEP = 1e-6

_state = threading.local()


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """
    Sums a broadcast gradient back down to the operand shape.
    """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class TapeNode:
    """
    One recorded primitive: output tensor, input tensors and the vector-Jacobian
    product mapping the output gradient to one gradient per input.
    """
    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output: "Tensor", inputs: Tuple["Tensor", ...], vjp: Callable):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """
    Ordered record of primitive operations plus the registered trainable tensors.

    Nodes are appended in execution order, so every node's inputs precede it.

    Methods:
        current() -> Optional[Tape]:
            Returns the tape active on the calling thread.

        watch(*tensors) -> None:
            Registers tensors as parameters; their gradients are reported by backward.

        record(output, inputs, vjp) -> None:
            Appends a node. Called by the primitives.

        backward(loss) -> Dict[Tensor, np.ndarray]:
            Reverse pass; returns d loss / d p for every watched parameter.
    """
    def __init__(self, parameters: Optional[Iterable["Tensor"]] = None):
        self.nodes: List[TapeNode] = []
        self.parameters: List[Tensor] = []
        self._previous: Optional[Tape] = None
        if parameters is not None:
            self.watch(*parameters)

    @staticmethod
    def current() -> Optional["Tape"]:
        return getattr(_state, "tape", None)

    def __enter__(self) -> "Tape":
        self._previous = Tape.current()
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _state.tape = self._previous
        self._previous = None

    def watch(self, *tensors: "Tensor") -> None:
        for tensor in tensors:
            tensor.requires_grad = True
            if not any(tensor is known for known in self.parameters):
                self.parameters.append(tensor)

    def record(self, output: "Tensor", inputs: Tuple["Tensor", ...], vjp: Callable) -> None:
        self.nodes.append(TapeNode(output, inputs, vjp))

    def backward(self, loss: "Tensor") -> Dict["Tensor", np.ndarray]:
        """
        Reverse pass over the tape.

        Args:
            loss (Tensor): Scalar tensor produced while this tape was active.

        Returns:
            Dict[Tensor, np.ndarray]: Gradient per watched parameter. Parameters the loss
            does not depend on receive a zero gradient.

        Raises:
            TapeError: If the loss is not a scalar.
        """
        if loss.data.size != 1:
            raise TapeError(f"Loss must be a scalar, got shape {loss.shape}.")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            grad_out = grads.pop(id(node.output), None)
            if grad_out is None:
                continue
            input_grads = node.vjp(grad_out)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad
            # Parameters are leaves; keep theirs, drop intermediates.
            if not any(node.output is p for p in self.parameters):
                grads.pop(id(node.output), None)

        result = {}
        for parameter in self.parameters:
            grad = grads.get(id(parameter))
            result[parameter] = np.zeros_like(parameter.data) if grad is None else np.array(grad, dtype=np.float64).reshape(parameter.shape)
        return result


def tape_backward(tape: Tape, loss: "Tensor") -> Dict["Tensor", np.ndarray]:
    """
    Functional alias of ``Tape.backward``.
    """
    return tape.backward(loss)


def _record(data: np.ndarray, inputs: Tuple["Tensor", ...], vjp: Callable) -> "Tensor":
    tape = Tape.current()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(out, inputs, vjp)
    return out


def as_tensor(value: ArrayLike) -> "Tensor":
    """
    Lifts arrays and scalars to constant Tensors; Tensors pass through.
    """
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Tensor:
    """
    Float64 array with tape-recorded arithmetic.

    numpy defers to the reflected Tensor operators (``__array_ufunc__ = None``), so
    ``array * tensor`` and ``np.float64 * tensor`` both produce Tensors.
    """
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def check_finite(self, where: str, step: Optional[int] = None) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"Non-finite values produced in {where}.", step=step)
        return self

    # Arithmetic
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(other, self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sin(self) -> "Tensor":
        return tsin(self)

    def cos(self) -> "Tensor":
        return tcos(self)

    def tanh(self) -> "Tensor":
        return ttanh(self)

    def exp(self) -> "Tensor":
        return texp(self)

    def log(self) -> "Tensor":
        return tlog(self)


# Binary primitives
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data * b.data, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data / b.data, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
    )


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Matrix product of two 2-D tensors.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"Invalid shapes {a.shape} @ {b.shape} for matmul.")
    return _record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# Unary primitives
def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    return _record(a.data ** exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tsqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (0.5 * g / out,))


def texp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def tlog(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def tsin(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def tcos(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def ttanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softplus(a: ArrayLike) -> Tensor:
    """
    log(1 + exp(x)), computed without overflow.
    """
    a = as_tensor(a)
    # sigmoid(x) = exp(-softplus(-x))
    return _record(np.logaddexp(0.0, a.data), (a,), lambda g: (g * np.exp(-np.logaddexp(0.0, -a.data)),))


# Reductions and shape primitives
def tsum(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) / float(count)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.T, (a,), lambda g: (g.T,))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(part is Ellipsis or part is None or isinstance(part, (int, np.integer, slice)) for part in parts)


def getitem(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            # Repeated integer indices must accumulate.
            np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), vjp)


def concat(items: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(item) for item in items)
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=axis), tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def tstack(items: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(item) for item in items)
    out = np.stack([t.data for t in tensors], axis=axis)
    axis = axis % out.ndim
    return _record(
        out, tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))),
    )


# Dispatching helpers: plain arrays stay plain, Tensors record.
def is_tensor(value) -> bool:
    return isinstance(value, Tensor)


def sin(x):
    return tsin(x) if isinstance(x, Tensor) else np.sin(x)


def cos(x):
    return tcos(x) if isinstance(x, Tensor) else np.cos(x)


def tanh(x):
    return ttanh(x) if isinstance(x, Tensor) else np.tanh(x)


def stack(items: Sequence, axis: int = -1):
    if any(isinstance(item, Tensor) for item in items):
        return tstack(items, axis=axis)
    return np.stack(items, axis=axis)


def join(items: Sequence, axis: int = -1):
    if any(isinstance(item, Tensor) for item in items):
        return concat(items, axis=axis)
    return np.concatenate(items, axis=axis)


def channel(x, index: int):
    """
    Trailing-axis component `x[..., index]` for arrays and Tensors alike.
    """
    return x[..., index]


def softplus_of(x):
    return softplus(x) if isinstance(x, Tensor) else np.logaddexp(0.0, x)


def values_of(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def all_finite(x) -> bool:
    return bool(np.all(np.isfinite(values_of(x))))


# Gradient utilities
def clip_grad_norm(grads: Dict[Tensor, np.ndarray], max_norm: float) -> float:
    """
    Rescales all gradients in place so that their global L2 norm is at most max_norm.

    Returns:
        float: The global norm before clipping.
    """
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for key in grads:
            grads[key] = grads[key] * scale
    return total


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """
    ||a - b|| / max(||a|| + ||b||, tiny): symmetric relative error used by the gradient checks.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(float(np.linalg.norm(a) + np.linalg.norm(b)), 1e-300)
    return float(np.linalg.norm(a - b)) / denom


def finite_difference_gradient(fn: Callable[[], float], params: Sequence[Tensor], step: float = FD_STEP) -> Dict[Tensor, np.ndarray]:
    """
    Central finite differences of a scalar function with respect to each parameter entry.

    Args:
        fn (Callable[[], float]): Re-evaluates the loss from the current parameter values.
        params (Sequence[Tensor]): Tensors perturbed in place (restored afterwards).
        step (float): Perturbation size; 1e-6 is the reference for float64 checks.

    Returns:
        Dict[Tensor, np.ndarray]: Numerical gradient per parameter.
    """
    result = {}
    for param in params:
        grad = np.zeros_like(param.data)
        flat = param.data.reshape(-1)
        flat_grad = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = float(fn())
            flat[i] = original - step
            minus = float(fn())
            flat[i] = original
            flat_grad[i] = (plus - minus) / (2.0 * step)
        result[param] = grad
    return result


def gradient_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = FD_STEP) -> float:
    """
    Compares tape gradients against central finite differences.

    Args:
        loss_fn (Callable[[], Tensor]): Builds the scalar loss from the current parameters.
        params (Sequence[Tensor]): Parameters to check.
        step (float): Finite-difference step.

    Returns:
        float: Worst relative error over all parameters.
    """
    logger.debug("Starting: gradient_check.")
    with Tape(params) as tape:
        loss = loss_fn()
    analytic = tape.backward(loss)
    numeric = finite_difference_gradient(lambda: loss_fn().item(), params, step=step)
    worst = max(relative_error(analytic[p], numeric[p]) for p in params)
    logger.debug("Finished: gradient_check.", worst_relative_error=worst)
    return worst
