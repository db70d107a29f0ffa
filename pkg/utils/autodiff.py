"""
Reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps an ndarray; every differentiable operation is a `Function`
subclass with a numpy `forward` and a `backward` that maps the output gradient
to one gradient per parent. Calling `Tensor.backward()` walks the recorded
graph in reverse topological order and accumulates `.grad` on every tensor
that requires it.
"""

import threading
from contextlib import contextmanager
from typing import Optional, Sequence, Tuple

import numpy as np

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    def __init__(self, data, requires_grad: bool = False, ctx: Optional["Function"] = None, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=dtype if dtype is not None else np.float32)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx = ctx

    def __repr__(self):
        return f"<Tensor shape={self.data.shape} dtype={self.data.dtype} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # arithmetic
    def __add__(self, other): return Add.apply(self, self._lift(other))
    def __radd__(self, other): return Add.apply(self._lift(other), self)
    def __sub__(self, other): return Sub.apply(self, self._lift(other))
    def __rsub__(self, other): return Sub.apply(self._lift(other), self)
    def __mul__(self, other): return Mul.apply(self, self._lift(other))
    def __rmul__(self, other): return Mul.apply(self._lift(other), self)
    def __truediv__(self, other): return Div.apply(self, self._lift(other))
    def __neg__(self): return Neg.apply(self)
    def __matmul__(self, other): return MatMul.apply(self, self._lift(other))
    def __pow__(self, exponent: float): return Pow.apply(self, exponent=float(exponent))

    # reductions and shape ops
    def sum(self, axis=None, keepdims: bool = False): return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape): return Reshape.apply(self, shape=shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return Transpose.apply(self, axes=axes)

    # elementwise
    def exp(self): return Exp.apply(self)
    def log(self): return Log.apply(self)
    def tanh(self): return Tanh.apply(self)
    def relu(self): return Relu.apply(self)
    def gelu(self): return Gelu.apply(self)
    def softmax(self, axis: int = -1): return Softmax.apply(self, axis=axis)
    def log_softmax(self, axis: int = -1): return LogSoftmax.apply(self, axis=axis)

    def set_rows(self, index: Tuple[np.ndarray, ...], rows: "Tensor") -> "Tensor":
        """Return a copy with `self[index] = rows`; gradients reach both inputs."""
        return SetRows.apply(self, rows, index=index)

    def backward(self, grad: Optional[np.ndarray] = None):
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
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
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        self.grad = np.ones_like(self.data) if grad is None else grad
        for node in reversed(topo):
            if node._ctx is None or node.grad is None:
                continue
            grads = node._ctx.backward(node.grad)
            for parent, g in zip(node._ctx.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = g.astype(parent.data.dtype, copy=False)
                parent.grad = g if parent.grad is None else parent.grad + g


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    return Take.apply(weight, ids=np.asarray(ids, dtype=np.int64))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    return Stack.apply(*tensors)


class Function:
    def __init__(self, *parents: Tensor):
        self.parents = parents

    @classmethod
    def apply(cls, *parents: Tensor, **kwargs) -> Tensor:
        fn = cls(*parents)
        out = fn.forward(*[p.data for p in parents], **kwargs)
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        return Tensor(out, requires_grad=track, ctx=fn if track else None)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, grad: np.ndarray):
        raise NotImplementedError


class Add(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x - y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return _unbroadcast(grad * self.y, self.x.shape), _unbroadcast(grad * self.x, self.y.shape)


class Div(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        gx = grad / self.y
        gy = -grad * self.x / (self.y * self.y)
        return _unbroadcast(gx, self.x.shape), _unbroadcast(gy, self.y.shape)


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    def forward(self, x, exponent):
        self.x, self.exponent = x, exponent
        return x ** exponent

    def backward(self, grad):
        return (grad * self.exponent * self.x ** (self.exponent - 1),)


class MatMul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x @ y

    def backward(self, grad):
        gx = grad @ np.swapaxes(self.y, -1, -2)
        gy = np.swapaxes(self.x, -1, -2) @ grad
        return _unbroadcast(gx, self.x.shape), _unbroadcast(gy, self.y.shape)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.array(np.broadcast_to(grad, self.shape)),)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1 - self.out * self.out),)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class Gelu(Function):
    # tanh approximation
    C = np.sqrt(2.0 / np.pi)
    A = 0.044715

    def forward(self, x):
        self.x = x
        self.t = np.tanh(self.C * (x + self.A * x ** 3))
        return 0.5 * x * (1 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        local = 0.5 * (1 + t) + 0.5 * x * (1 - t * t) * self.C * (1 + 3 * self.A * x * x)
        return (grad * local,)


class Reshape(Function):
    def forward(self, x, shape):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, x, axes):
        self.axes = axes
        return np.transpose(x, axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Softmax(Function):
    def forward(self, x, axis=-1):
        self.axis = axis
        shifted = np.exp(x - x.max(axis=axis, keepdims=True))
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, x, axis=-1):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        self.out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        return self.out

    def backward(self, grad):
        return (grad - np.exp(self.out) * grad.sum(axis=self.axis, keepdims=True),)


class Take(Function):
    def forward(self, weight, ids):
        self.weight_shape, self.ids = weight.shape, ids
        return weight[ids]

    def backward(self, grad):
        gw = np.zeros(self.weight_shape, dtype=grad.dtype)
        np.add.at(gw, self.ids, grad)
        return (gw,)


class SetRows(Function):
    def forward(self, x, rows, index):
        self.index = index
        out = x.copy()
        out[index] = rows
        return out

    def backward(self, grad):
        gx = grad.copy()
        gx[self.index] = 0
        return gx, grad[self.index]


class Stack(Function):
    def forward(self, *xs):
        return np.stack(xs, axis=0)

    def backward(self, grad):
        return tuple(grad[i] for i in range(grad.shape[0]))
