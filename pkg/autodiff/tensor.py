"""
Dense tensors and the define-by-run gradient tape.

Every loss and network in the laboratory is built from ``Tensor`` values.
Operations are applied through :func:`autodiff.functional.apply`; while a
:class:`GradTape` is active, each op whose operands are tracked appends an
``OpRecord`` and the resulting tensor carries the record index as its
tape handle. :func:`backward` replays the records in reverse.
"""
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[float, int, Sequence, np.ndarray]


class AutodiffError(Exception):
    """Raised for misuse of the tape (non-scalar losses, unknown ops)."""

    def __init__(self, message, op=None):
        self.message = message
        self.op = op

        detail = ""
        if op is not None:
            detail += f" (op '{op}')"

        super().__init__(f"{message}{detail}")


class ShapeError(AutodiffError):
    """Raised when operand shapes do not conform to an op"""

    def __init__(self, message, op=None, shapes=None):
        self.shapes = shapes or ()
        if self.shapes:
            rendered = " vs ".join(str(tuple(s)) for s in self.shapes)
            message = f"{message}: {rendered}"
        super().__init__(message, op=op)


def _freeze(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


class Tensor:
    """Immutable 64-bit dense array that may take part in a gradient tape"""

    __slots__ = ("data", "requires_grad", "handle", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = None):
        self.data = _freeze(np.array(data, dtype=np.float64, copy=True))
        self.requires_grad = bool(requires_grad)
        self.handle: Optional[int] = None
        self.name = name

    @classmethod
    def wrap(cls, array: np.ndarray) -> "Tensor":
        """Wrap an op result without copying it."""
        tensor = cls.__new__(cls)
        tensor.data = _freeze(np.asarray(array, dtype=np.float64, order="C"))
        tensor.requires_grad = False
        tensor.handle = None
        tensor.name = None
        return tensor

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
    def tracked(self) -> bool:
        """True when gradients can flow into or through this tensor"""
        return self.requires_grad or self.handle is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor", shapes=[self.shape])
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, tracked={self.tracked})"

    # Operator sugar; the op set itself lives in autodiff.functional

    def __add__(self, other):
        return functional.apply("add", self, other)

    def __radd__(self, other):
        return functional.apply("add", other, self)

    def __sub__(self, other):
        return functional.apply("sub", self, other)

    def __rsub__(self, other):
        return functional.apply("sub", other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return functional.apply("scalar-mul", self, scalar=float(other))
        return functional.apply("mul", self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise AutodiffError("division is only defined by a scalar", op="scalar-mul")
        return functional.apply("scalar-mul", self, scalar=1.0 / float(other))

    def __neg__(self):
        return functional.apply("scalar-mul", self, scalar=-1.0)

    def __matmul__(self, other):
        return functional.apply("matmul", self, other)

    def __getitem__(self, key):
        return functional.apply("slice", self, key=key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return functional.apply("reshape", self, shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return functional.apply("transpose", self, axes=tuple(axes) or None)

    def mean(self, axis=None, keepdims=False):
        return functional.apply("mean", self, axis=axis, keepdims=keepdims)

    def sum(self, axis=None, keepdims=False):
        return functional.apply("sum", self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Named trainable leaf tensor; the optimizer rebinds its data."""

    __slots__ = ()

    def __init__(self, name: str, data: ArrayLike):
        super().__init__(data, requires_grad=True, name=name)

    def assign(self, array: np.ndarray):
        """Replace the value (tensors built from the old value keep it)."""
        array = np.array(array, dtype=np.float64, copy=True)
        if array.shape != self.data.shape:
            raise ShapeError(
                f"cannot assign to parameter '{self.name}'",
                op="assign",
                shapes=[self.data.shape, array.shape],
            )
        self.data = _freeze(array)


def constant(data: ArrayLike) -> Tensor:
    """Untracked tensor (inputs, noise, targets)."""
    return Tensor(data)


def stop_gradient(t: Tensor) -> Tensor:
    """Forward identity, backward zero: the result has no tape handle."""
    return Tensor.wrap(t.data)


BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass
class OpRecord:
    kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass
class GradTape:
    """Ordered op records for one training step plus a parameter registry"""

    records: List[OpRecord] = field(default_factory=list)
    parameters: Dict[str, Tensor] = field(default_factory=dict)

    def watch(self, params: Union[Iterable[Parameter], Dict[str, Parameter]]):
        """Register parameters so that backward reports them, reached or not."""
        values = params.values() if isinstance(params, dict) else params
        for param in values:
            self.parameters[param.name] = param
        return self

    def record(self, kind: str, inputs: Tuple[Tensor, ...], output: Tensor,
               backward: BackwardFn) -> int:
        for tensor in inputs:
            if isinstance(tensor, Parameter):
                self.parameters.setdefault(tensor.name, tensor)
        self.records.append(OpRecord(kind, inputs, output, backward))
        return len(self.records) - 1

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False


_local = threading.local()


def _tape_stack() -> List[GradTape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Optional[GradTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: GradTape = None) -> Dict[str, np.ndarray]:
    """
    Reverse-mode pass from a scalar loss

    Args:
        loss: scalar tensor produced under ``tape``
        tape: the tape the loss was recorded on (defaults to the active one)

    Returns:
        Mapping parameter name -> gradient array; registered parameters the
        loss does not reach map to zeros.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise AutodiffError(
            f"backward needs a scalar loss, got shape {loss.shape}", op="backward"
        )
    tape = tape or current_tape()
    if tape is None:
        raise AutodiffError("no gradient tape is active", op="backward")

    grads: Dict[int, np.ndarray] = {}
    if loss.handle is not None:
        grads[id(loss)] = np.ones_like(loss.data)
        for record in reversed(tape.records[: loss.handle + 1]):
            upstream = grads.pop(id(record.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(record.inputs, record.backward(upstream)):
                if grad is None or not tensor.tracked:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad
    else:
        logger.debug("backward called on a loss with no tape handle; gradients are zero")

    return {
        name: grads.get(id(param), np.zeros_like(param.data)).reshape(param.shape)
        for name, param in tape.parameters.items()
    }


from . import functional  # noqa: E402  (operator sugar needs the op set)
