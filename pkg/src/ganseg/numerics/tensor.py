"""Dense tensors with reverse-mode automatic differentiation.

Every ``Function.backward`` is written with ``Tensor`` operations, so the
gradient computation can itself be recorded (``create_graph=True``). The
WGAN-GP critic loss relies on this to differentiate through an input gradient.
"""
from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised when a forward operation produces NaN or Inf from finite inputs."""


@contextlib.contextmanager
def set_grad_enabled(enabled: bool):
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def no_grad():
    return set_grad_enabled(False)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional array node in the differentiation graph.

    ``grad`` is a plain ``numpy`` array populated by :meth:`backward` on
    leaves that have ``requires_grad`` set.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind in "iub" and dtype is None:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._ctx: Function | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad_output=None) -> None:
        backward(self, grad_output)

    # -- operator sugar ----------------------------------------------------
    def _wrap(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return Add.apply(self, self._wrap(other))

    def __radd__(self, other):
        return Add.apply(self._wrap(other), self)

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(self._wrap(other)))

    def __rsub__(self, other):
        return Add.apply(self._wrap(other), Neg.apply(self))

    def __mul__(self, other):
        return Mul.apply(self, self._wrap(other))

    def __rmul__(self, other):
        return Mul.apply(self._wrap(other), self)

    def __truediv__(self, other):
        return Div.apply(self, self._wrap(other))

    def __rtruediv__(self, other):
        return Div.apply(self._wrap(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, self._wrap(other))

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # -- method forms --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return Sum.apply(self, axis=_norm_axis(axis, self.ndim), keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        axes = _norm_axis(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=tuple(axes))

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def exp(self) -> Tensor:
        return Exp.apply(self)

    def log(self) -> Tensor:
        return Log.apply(self)

    def sqrt(self) -> Tensor:
        return Pow.apply(self, exponent=0.5)

    def tanh(self) -> Tensor:
        return Tanh.apply(self)

    def broadcast_to(self, shape) -> Tensor:
        return BroadcastTo.apply(self, shape=tuple(shape))

    def sum_to(self, shape) -> Tensor:
        return SumTo.apply(self, shape=tuple(shape))


def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _sum_to_shape(arr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if arr.shape == shape:
        return arr
    lead = arr.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and arr.shape[i + lead] != 1
    )
    out = arr.sum(axis=axes, keepdims=True)
    if lead:
        out = out.reshape(out.shape[lead:])
    return out.reshape(shape)


class Function:
    """A recorded operation. Subclasses implement ``forward`` on arrays and
    ``backward`` on Tensors, returning one gradient (or None) per input."""

    inputs: tuple[Tensor, ...] = ()

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls()
        fn.kwargs = kwargs
        out_data = fn.forward(*(t.data for t in inputs), **kwargs)
        if not np.all(np.isfinite(out_data)) and all(np.all(np.isfinite(t.data)) for t in inputs):
            raise NonFiniteError(f"{cls.__name__} produced non-finite values from finite inputs")
        out = Tensor(out_data)
        if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
            fn.inputs = inputs
            fn.output = out
            out.requires_grad = True
            out._ctx = fn
        return out

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Sequence[Tensor | None]:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return g.sum_to(a.shape), g.sum_to(b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = (g * b).sum_to(a.shape) if a.requires_grad else None
        gb = (g * a).sum_to(b.shape) if b.requires_grad else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = (g / b).sum_to(a.shape) if a.requires_grad else None
        gb = (-g * a / (b * b)).sum_to(b.shape) if b.requires_grad else None
        return ga, gb


class Pow(Function):
    def forward(self, a, exponent):
        return a**exponent

    def backward(self, g):
        (a,) = self.inputs
        p = self.kwargs["exponent"]
        if p == 1.0:
            return (g,)
        if p == 2.0:
            return (g * a * 2.0,)
        return (g * (a ** (p - 1.0)) * p,)


class Exp(Function):
    def forward(self, a):
        return np.exp(a)

    def backward(self, g):
        return (g * self.output,)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, g):
        return (g / self.inputs[0],)


class Tanh(Function):
    def forward(self, a):
        return np.tanh(a)

    def backward(self, g):
        y = self.output
        return (g * (1.0 - y * y),)


class LeakyReLU(Function):
    def forward(self, a, slope):
        # at exactly 0 the positive branch's slope (1) is used for the gradient
        self.mask = np.where(a >= 0, 1.0, slope).astype(a.dtype)
        return a * self.mask

    def backward(self, g):
        return (g * Tensor(self.mask),)


# ---------------------------------------------------------------------------
# shape / reduction
# ---------------------------------------------------------------------------


class Sum(Function):
    def forward(self, a, axis, keepdims):
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, g):
        (a,) = self.inputs
        axis, keepdims = self.kwargs["axis"], self.kwargs["keepdims"]
        if not keepdims:
            shape = list(a.shape)
            for ax in axis:
                shape[ax] = 1
            g = g.reshape(tuple(shape))
        return (g.broadcast_to(a.shape),)


class BroadcastTo(Function):
    def forward(self, a, shape):
        return np.broadcast_to(a, shape).copy()

    def backward(self, g):
        return (g.sum_to(self.inputs[0].shape),)


class SumTo(Function):
    def forward(self, a, shape):
        return _sum_to_shape(a, shape)

    def backward(self, g):
        return (g.broadcast_to(self.inputs[0].shape),)


class Reshape(Function):
    def forward(self, a, shape):
        return np.reshape(a, shape)

    def backward(self, g):
        return (g.reshape(self.inputs[0].shape),)


class Transpose(Function):
    def forward(self, a, axes):
        return np.transpose(a, axes)

    def backward(self, g):
        inv = tuple(np.argsort(self.kwargs["axes"]))
        return (g.transpose(inv),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        ga = g @ b.T if a.requires_grad else None
        gb = a.T @ g if b.requires_grad else None
        return ga, gb


class GetItem(Function):
    def forward(self, a, index):
        return np.array(a[index])

    def backward(self, g):
        return (Scatter.apply(g, index=self.kwargs["index"], shape=self.inputs[0].shape),)


class Scatter(Function):
    """Place a tensor into a zero array at ``index`` (adjoint of GetItem)."""

    def forward(self, a, index, shape):
        out = np.zeros(shape, dtype=a.dtype)
        if _has_fancy(index):
            np.add.at(out, index, a)
        else:
            out[index] = a
        return out

    def backward(self, g):
        return (g[self.kwargs["index"]],)


def _has_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


class Concat(Function):
    def forward(self, *arrays, axis):
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        axis = self.kwargs["axis"] % g.ndim
        out, start = [], 0
        for size, inp in zip(self.sizes, self.inputs):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + size)
            out.append(g[tuple(idx)] if inp.requires_grad else None)
            start += size
        return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


# ---------------------------------------------------------------------------
# image ops
# ---------------------------------------------------------------------------


class Im2Col(Function):
    """Unfold (N,C,H,W) into columns (C*kh*kw, N*Ho*Wo)."""

    def forward(self, x, kh, kw, stride, padding):
        if x.ndim != 4:
            raise ValueError(f"im2col expects a 4-D input, got shape {x.shape}")
        n, c, h, w = x.shape
        hp, wp = h + 2 * padding, w + 2 * padding
        if kh > hp or kw > wp:
            raise ValueError(f"kernel {kh}x{kw} exceeds padded input {hp}x{wp}")
        if padding:
            x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        ho, wo = win.shape[2], win.shape[3]
        self.geometry = (n, c, h, w, ho, wo)
        return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)

    def backward(self, g):
        kw_ = self.kwargs
        return (Col2Im.apply(g, x_shape=self.inputs[0].shape, **kw_),)


class Col2Im(Function):
    def forward(self, cols, x_shape, kh, kw, stride, padding):
        n, c, h, w = x_shape
        hp, wp = h + 2 * padding, w + 2 * padding
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        cols = cols.reshape(c, kh, kw, n, ho, wo)
        out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
        for i in range(kh):
            for j in range(kw):
                out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                    :, i, j
                ].transpose(1, 0, 2, 3)
        if padding:
            out = out[:, :, padding : padding + h, padding : padding + w]
        return np.ascontiguousarray(out)

    def backward(self, g):
        kw_ = {k: v for k, v in self.kwargs.items() if k != "x_shape"}
        return (Im2Col.apply(g, **kw_),)


class UpsampleNearest(Function):
    def forward(self, x, factor):
        if factor == 1:
            return x.copy()
        return x.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(self, g):
        return (SumPool.apply(g, factor=self.kwargs["factor"]),)


class SumPool(Function):
    """Non-overlapping factor x factor block sums."""

    def forward(self, x, factor):
        n, c, h, w = x.shape
        if h % factor or w % factor:
            raise ValueError(f"spatial extent {h}x{w} not divisible by pooling factor {factor}")
        return x.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))

    def backward(self, g):
        return (UpsampleNearest.apply(g, factor=self.kwargs["factor"]),)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def _topological_order(roots: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in roots:
        if id(root) in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
    return order


def _run_backward(outputs, grad_outputs, create_graph: bool) -> dict[int, Tensor]:
    grads: dict[int, Tensor] = {}
    for out, g in zip(outputs, grad_outputs):
        grads[id(out)] = g if id(out) not in grads else grads[id(out)] + g
    order = _topological_order(outputs)
    with set_grad_enabled(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._ctx is None:
                continue
            ctx = node._ctx
            in_grads = ctx.backward(g)
            for parent, pg in zip(ctx.inputs, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            if not create_graph and id(node) not in _KEEP:
                # intermediate gradients are no longer needed
                grads.pop(id(node), None)
    return grads


_KEEP: set[int] = set()


def grad(outputs, inputs, grad_outputs=None, create_graph: bool = False) -> list[Tensor]:
    """Return d(outputs)/d(inputs) as Tensors without touching ``.grad``.

    With ``create_graph`` the returned tensors are differentiable.
    """
    outputs = [outputs] if isinstance(outputs, Tensor) else list(outputs)
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    if grad_outputs is None:
        for o in outputs:
            if o.size != 1:
                raise ValueError(f"grad of a non-scalar output {o.shape} needs grad_outputs")
        grad_outputs = [Tensor(np.ones_like(o.data)) for o in outputs]
    _KEEP.update(id(t) for t in inputs)
    try:
        grads = _run_backward(outputs, grad_outputs, create_graph)
    finally:
        _KEEP.difference_update(id(t) for t in inputs)
    return [grads.get(id(t), Tensor(np.zeros_like(t.data))) for t in inputs]


def backward(loss: Tensor, grad_output=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if grad_output is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad_output = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise RuntimeError("backward on a tensor that does not require gradients")
    order = _topological_order([loss])
    leaves = [t for t in order if t._ctx is None]
    _KEEP.update(id(t) for t in leaves)
    try:
        grads = _run_backward([loss], [as_tensor(grad_output)], create_graph=False)
    finally:
        _KEEP.difference_update(id(t) for t in leaves)
    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is None:
            continue
        leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"{what} contains non-finite values (shape {t.shape})")
    return t
