"""Minimal reverse-mode differentiable tensor engine.

Tensors wrap dense row-major numpy arrays of an explicit dtype (``f32`` or
``f64``). Every differentiable operation is a :class:`Function` subclass with a
numpy ``forward`` and ``backward``; calling ``Function.apply`` records a
:class:`TapeNode` on the output when any input requires a gradient. Calling
``Tensor.backward()`` walks the recorded graph once in reverse topological
order and accumulates gradients into leaf tensors.

Shapes are explicit: apart from bias addition inside the layer operations in
:mod:`ske2grid.functional`, nothing broadcasts.
"""

import threading
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DimensionError, NonFiniteError

DTYPES: Dict[str, np.dtype] = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}

_state = threading.local()


def resolve_dtype(dtype: Union[str, np.dtype, type]) -> np.dtype:
    """Map ``"f32"``/``"f64"`` (or a numpy float dtype) to a numpy dtype."""
    if isinstance(dtype, str) and dtype in DTYPES:
        return DTYPES[dtype]
    resolved = np.dtype(dtype)
    if resolved not in DTYPES.values():
        raise ConfigError(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPES)}", "dtype")
    return resolved


def dtype_name(dtype: np.dtype) -> str:
    return "f64" if np.dtype(dtype) == np.float64 else "f32"


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording for the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Context:
    """Scratch space a Function uses to hand values from forward to backward."""

    def __init__(self) -> None:
        self.saved: Tuple[Any, ...] = ()
        self.needs_input_grad: Tuple[bool, ...] = ()

    def save_for_backward(self, *values: Any) -> None:
        self.saved = values


class TapeNode:
    """One recorded operation: the function, its tensor inputs and its context."""

    __slots__ = ("fn", "inputs", "ctx")

    def __init__(self, fn: type, inputs: Tuple["Tensor", ...], ctx: Context):
        self.fn = fn
        self.inputs = inputs
        self.ctx = ctx

    def __repr__(self) -> str:
        return f"TapeNode({self.fn.__name__}, inputs={len(self.inputs)})"


class Tensor:
    """Dense numpy-backed tensor with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(
        self,
        data: Any,
        dtype: Union[str, np.dtype, None] = None,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data)
        if dtype is None:
            dtype = array.dtype if array.dtype in DTYPES.values() else DTYPES["f64"]
        self.data: np.ndarray = np.ascontiguousarray(array, dtype=resolve_dtype(dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[TapeNode] = None
        self.name = name

    # --- introspection -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name}: " if self.name else ""
        return f"Tensor({label}shape={self.shape}, dtype={dtype_name(self.dtype)}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --- arithmetic (same-shape only) ------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return Add.apply(self, _as_tensor(other, self))

    def __sub__(self, other: "Tensor") -> "Tensor":
        return Add.apply(self, Scale.apply(_as_tensor(other, self), factor=-1.0))

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, (int, float)):
            return Scale.apply(self, factor=float(other))
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return Scale.apply(self, factor=-1.0)

    def __truediv__(self, other: float) -> "Tensor":
        return Scale.apply(self, factor=1.0 / float(other))

    def sum(self) -> "Tensor":
        return Sum.apply(self)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def permute(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Permute.apply(self, axes=tuple(axes))

    # --- reverse mode ----------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if not self.requires_grad:
            raise DimensionError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        pending: Dict[int, np.ndarray] = {id(self): grad}
        for tensor in reversed(_topological_order(self)):
            g = pending.pop(id(tensor), None)
            if g is None:
                continue
            node = tensor._node
            if node is None:
                tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
                continue
            input_grads = node.fn.backward(node.ctx, g)
            if not isinstance(input_grads, tuple):
                input_grads = (input_grads,)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                _check_finite(ig, f"{node.fn.__name__}.backward")
                key = id(inp)
                pending[key] = pending[key] + ig if key in pending else ig


def _topological_order(root: Tensor) -> List[Tensor]:
    """Inputs-before-outputs ordering of every grad-requiring tensor reachable from root."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor._node is not None:
            for inp in tensor._node.inputs:
                if inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))
    return order


def _as_tensor(value: Any, like: Tensor) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=like.dtype)


def _check_finite(array: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(array)):
        bad = np.argwhere(~np.isfinite(array))[0]
        raise NonFiniteError(f"{where} produced a non-finite value at index {tuple(bad)}")


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward(ctx, *arrays, **options) -> ndarray`` and
    ``backward(ctx, grad) -> tuple`` (one entry per tensor input, ``None``
    where no gradient flows).
    """

    @staticmethod
    def forward(ctx: Context, *args: Any, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **options: Any) -> Tensor:
        dtypes = {t.dtype for t in inputs}
        if len(dtypes) > 1:
            names = sorted(dtype_name(d) for d in dtypes)
            raise DimensionError(f"{cls.__name__}: mixed dtypes {names}")
        ctx = Context()
        ctx.needs_input_grad = tuple(t.requires_grad for t in inputs)
        out = cls.forward(ctx, *(t.data for t in inputs), **options)
        _check_finite(out, f"{cls.__name__}.forward")
        dtype = inputs[0].dtype if inputs else out.dtype
        requires_grad = is_grad_enabled() and any(ctx.needs_input_grad)
        result = Tensor(out, dtype=dtype, requires_grad=requires_grad)
        if requires_grad:
            result._node = TapeNode(cls, tuple(inputs), ctx)
        return result


def _require_same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        _require_same_shape("add", a, b)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        return grad, grad


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        _require_same_shape("mul", a, b)
        ctx.save_for_backward(a, b)
        return a * b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        return grad * b, grad * a


class Scale(Function):
    @staticmethod
    def forward(ctx, a, factor):
        ctx.save_for_backward(factor)
        return a * a.dtype.type(factor)

    @staticmethod
    def backward(ctx, grad):
        (factor,) = ctx.saved
        return (grad * grad.dtype.type(factor),)


class Sum(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save_for_backward(a.shape)
        return np.asarray(a.sum(), dtype=a.dtype)

    @staticmethod
    def backward(ctx, grad):
        (shape,) = ctx.saved
        return (np.full(shape, grad, dtype=grad.dtype),)


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx.save_for_backward(a.shape)
        try:
            return a.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {a.shape} into {shape}") from exc

    @staticmethod
    def backward(ctx, grad):
        (shape,) = ctx.saved
        return (grad.reshape(shape),)


class Permute(Function):
    @staticmethod
    def forward(ctx, a, axes):
        if sorted(axes) != list(range(a.ndim)):
            raise DimensionError(f"permute axes {axes} do not match rank {a.ndim}")
        ctx.save_for_backward(axes)
        return np.ascontiguousarray(a.transpose(axes))

    @staticmethod
    def backward(ctx, grad):
        (axes,) = ctx.saved
        return (np.ascontiguousarray(grad.transpose(np.argsort(axes))),)


def tensor(
    data: Any, dtype: Union[str, np.dtype] = "f64", requires_grad: bool = False
) -> Tensor:
    """Convenience constructor mirroring ``Tensor(...)`` with an explicit dtype."""
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def stack_arrays(arrays: Sequence[np.ndarray], dtype: Union[str, np.dtype]) -> Tensor:
    """Stack same-shape arrays along a new leading axis into a constant tensor."""
    return Tensor(np.stack(arrays), dtype=dtype)
