"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation below computes its value with numpy and, when any input
requires a gradient, records a `Node` holding the inputs and a local gradient
rule. `backward` walks the recorded nodes once, in reverse topological order.

Broadcasting is limited to leading batch dimensions: two operands combine when
their shapes are equal, when one is a scalar, or when one shape is a suffix of
the other (a bias of width C added to rows of width C).
"""
import logging
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from rego.base import DimensionError, GradientError, shape_str

logger = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Node:
    """One recorded operation: its inputs, output value and gradient rule.
    """

    __slots__ = ('op', 'inputs', 'value', 'grad_fn')

    def __init__(self, op: str, inputs: tuple['Tensor', ...], value: np.ndarray,
                 grad_fn: GradFn) -> None:
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad_fn = grad_fn

    def __repr__(self) -> str:
        return f'Node({self.op}, out={shape_str(self.value.shape)})'


class Tensor:
    """Dense row-major float64 value with optional gradient and graph link.
    """

    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False,
                 node: Node | None = None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> 'Tensor':
        return swapaxes(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        """Return a graph-free tensor sharing this value.
        """
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, accumulate: bool = False) -> 'ComputationGraph':
        return backward(self, accumulate=accumulate)

    def __repr__(self) -> str:
        flag = ', requires_grad=True' if self.requires_grad else ''
        return f'Tensor(shape={shape_str(self.shape)}{flag})'

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other: Any) -> 'Tensor':
        return add(self, other)

    def __radd__(self, other: Any) -> 'Tensor':
        return add(other, self)

    def __sub__(self, other: Any) -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: Any) -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: Any) -> 'Tensor':
        return mul(self, other)

    def __rmul__(self, other: Any) -> 'Tensor':
        return mul(other, self)

    def __truediv__(self, other: Any) -> 'Tensor':
        return div(self, other)

    def __rtruediv__(self, other: Any) -> 'Tensor':
        return div(other, self)

    def __neg__(self) -> 'Tensor':
        return neg(self)

    def __pow__(self, exponent: float) -> 'Tensor':
        return power(self, exponent)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)

    def __getitem__(self, index: Any) -> 'Tensor':
        return getitem(self, index)

    def sum(self, axis: int | tuple[int, ...] | None = None,
            keepdims: bool = False) -> 'Tensor':
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None,
             keepdims: bool = False) -> 'Tensor':
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], tuple | list):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> 'Tensor':
        return transpose(self, axes or None)

    def relu(self) -> 'Tensor':
        return relu(self)

    def sigmoid(self) -> 'Tensor':
        return sigmoid(self)

    def exp(self) -> 'Tensor':
        return exp(self)

    def log(self) -> 'Tensor':
        return log(self)

    def abs(self) -> 'Tensor':
        return tabs(self)


def tensor(data: Any, requires_grad: bool = False) -> Tensor:
    """Build a tensor from nested lists or an array (always copies).
    """
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_op(op: str, value: np.ndarray, inputs: Sequence[Tensor],
             grad_fn: GradFn) -> Tensor:
    """Wrap a computed value, recording a node only when a gradient is needed.

    Operations implemented outside this module (RoIAlign) use this to join
    the graph.
    """
    inputs = tuple(inputs)
    if any(t.requires_grad for t in inputs):
        node = Node(op, inputs, value, grad_fn)
        return Tensor(value, requires_grad=True, node=node)
    return Tensor(value)


def _combine_check(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or not sa or not sb:
        return
    if len(sa) > len(sb) and sa[-len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[-len(sa):] == sa:
        return
    raise DimensionError(f'{op}: cannot combine {shape_str(sa)} with {shape_str(sb)}')


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient over the leading dimensions its operand lacked.
    """
    if grad.shape == shape:
        return grad
    if not shape:
        return np.asarray(grad.sum())
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _combine_check('add', a, b)
    return apply_op('add', a.data + b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _combine_check('sub', a, b)
    return apply_op('sub', a.data - b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _combine_check('mul', a, b)
    return apply_op('mul', a.data * b.data, (a, b),
                    lambda g: (_unbroadcast(g * b.data, a.shape),
                               _unbroadcast(g * a.data, b.shape)))


def div(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _combine_check('div', a, b)
    return apply_op('div', a.data / b.data, (a, b),
                    lambda g: (_unbroadcast(g / b.data, a.shape),
                               _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(x: Tensor) -> Tensor:
    return apply_op('neg', -x.data, (x,), lambda g: (-g,))


def power(x: Tensor, exponent: float) -> Tensor:
    value = x.data ** exponent
    return apply_op('power', value, (x,),
                    lambda g: (g * exponent * x.data ** (exponent - 1),))


def exp(x: Tensor) -> Tensor:
    value = np.exp(x.data)
    return apply_op('exp', value, (x,), lambda g: (g * value,))


def log(x: Tensor) -> Tensor:
    return apply_op('log', np.log(x.data), (x,), lambda g: (g / x.data,))


def tabs(x: Tensor) -> Tensor:
    return apply_op('abs', np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return apply_op('relu', np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    value = _sigmoid(x.data)
    return apply_op('sigmoid', value, (x,), lambda g: (g * value * (1.0 - value),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|.
    """
    return apply_op('softplus', np.logaddexp(0.0, x.data), (x,),
                    lambda g: (g * _sigmoid(x.data),))


def inverse_sigmoid(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Logit of a probability tensor, clamped away from 0 and 1.
    """
    x = clip(x, 0.0, 1.0)
    return log(clip(x, eps, 1.0)) - log(clip(1.0 - x, eps, 1.0))


def maximum(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _combine_check('maximum', a, b)
    pick = a.data >= b.data
    return apply_op('maximum', np.where(pick, a.data, b.data), (a, b),
                    lambda g: (_unbroadcast(g * pick, a.shape),
                               _unbroadcast(g * ~pick, b.shape)))


def minimum(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _combine_check('minimum', a, b)
    pick = a.data <= b.data
    return apply_op('minimum', np.where(pick, a.data, b.data), (a, b),
                    lambda g: (_unbroadcast(g * pick, a.shape),
                               _unbroadcast(g * ~pick, b.shape)))


def clip(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    mask = (x.data >= lo_) & (x.data <= hi_)
    return apply_op('clip', np.clip(x.data, lo_, hi_), (x,), lambda g: (g * mask,))


def _check_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f'{op}: axis {axis} out of range for rank {ndim}')
    return axis % ndim


def tsum(x: Tensor, axis: int | tuple[int, ...] | None = None,
         keepdims: bool = False) -> Tensor:
    value = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return apply_op('sum', np.asarray(value), (x,), grad_fn)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None,
         keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis=axis, keepdims=keepdims) / float(count)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        value = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f'reshape: cannot view {shape_str(x.shape)} as {shape}') from exc
    return apply_op('reshape', value, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return apply_op('transpose', x.data.transpose(axes), (x,),
                    lambda g: (g.transpose(inverse),))


def swapaxes(x: Tensor, a: int = -1, b: int = -2) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def getitem(x: Tensor, index: Any) -> Tensor:
    value = x.data[index]

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return apply_op('getitem', np.array(value), (x,), grad_fn)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along `axis`; the gradient splits back to the parts.
    """
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError('concat: no parts')
    ndim = parts[0].ndim
    axis = _check_axis('concat', axis, ndim)
    for p in parts[1:]:
        if p.ndim != ndim or any(
                p.shape[d] != parts[0].shape[d] for d in range(ndim) if d != axis):
            raise DimensionError(
                f'concat: {shape_str(parts[0].shape)} and {shape_str(p.shape)} '
                f'disagree off axis {axis}')
    value = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return apply_op('concat', value, parts,
                    lambda g: tuple(np.split(g, offsets, axis=axis)))


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise DimensionError(f'stack: mismatched shapes {sorted(shapes)}')
    value = np.stack([p.data for p in parts], axis=axis)
    return apply_op('stack', value, parts,
                    lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(parts))))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f'matmul: {shape_str(a.shape)} @ {shape_str(b.shape)}')
    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    if lead_a and lead_b and lead_a != lead_b:
        raise DimensionError(
            f'matmul: batch dimensions of {shape_str(a.shape)} and {shape_str(b.shape)} differ')

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op('matmul', a.data @ b.data, (a, b), grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax; every slice along `axis` sums to one.
    """
    axis = _check_axis('softmax', axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)
    return apply_op('softmax', value, (x,),
                    lambda g: (value * (g - (g * value).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis('log_softmax', axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    value = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return apply_op('log_softmax', value, (x,),
                    lambda g: (g - np.exp(value) * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift.
    """
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f'layer_norm: gain {shape_str(gain.shape)} / bias {shape_str(bias.shape)} '
            f'do not match width {width}')
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    value = xhat * gain.data + bias.data

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return apply_op('layer_norm', value, (x, gain, bias), grad_fn)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """Cross-correlate a B x C x H x W batch with an O x C x kH x kW kernel.

    Output extent per axis is floor((H + 2 * padding - kH) / stride) + 1.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f'conv2d: expected 4-d input and kernel, got {shape_str(x.shape)} '
            f'and {shape_str(kernel.shape)}')
    b, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(
            f'conv2d: input {shape_str(x.shape)} has {c} channels, '
            f'kernel {shape_str(kernel.shape)} expects {kc}')
    if stride < 1 or padding < 0:
        raise ValueError(f'conv2d: stride {stride} / padding {padding} invalid')
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f'conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}')
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    value = np.einsum('bchwij,ocij->bohw', cols, kernel.data, optimize=True)
    inputs: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        if bias.shape != (o,):
            raise DimensionError(f'conv2d: bias {shape_str(bias.shape)} for {o} filters')
        value = value + bias.data[None, :, None, None]
        inputs = (x, kernel, bias)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        gx = None
        if x.requires_grad:
            gcols = np.einsum('bohw,ocij->bchwij', g, kernel.data, optimize=True)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[..., i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        gk = np.einsum('bchwij,bohw->ocij', cols, g, optimize=True) if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    return apply_op('conv2d', value, inputs, grad_fn)


class ComputationGraph:
    """Nodes reachable from one output, in topological order (inputs first).
    """

    def __init__(self, output: Tensor) -> None:
        if output.node is None:
            raise GradientError('backward: output is not linked to a computation graph')
        self.output = output
        self.nodes = self._toposort(output.node)
        self.leaves = self._collect_leaves()
        self.visits = 0

    @staticmethod
    def _toposort(root: Node) -> list[Node]:
        order: list[Node] = []
        seen: set[int] = {id(root)}
        stack: list[tuple[Node, int]] = [(root, 0)]
        while stack:
            node, i = stack.pop()
            if i < len(node.inputs):
                stack.append((node, i + 1))
                child = node.inputs[i].node
                if child is not None and id(child) not in seen:
                    seen.add(id(child))
                    stack.append((child, 0))
            else:
                order.append(node)
        return order

    def _collect_leaves(self) -> list[Tensor]:
        leaves: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.node is None and t.requires_grad:
                    leaves.setdefault(id(t), t)
        return list(leaves.values())

    def backward(self, accumulate: bool = False) -> None:
        """Populate `grad` on every reachable leaf that requires it.
        """
        if not accumulate:
            stale = [t for t in self.leaves if t.grad is not None]
            if stale:
                raise GradientError(
                    f'backward: {len(stale)} leaf gradient(s) already populated; '
                    'call zero_grad() first or pass accumulate=True')
        grads: dict[int, np.ndarray] = {id(self.output.node): np.ones(self.output.shape)}
        leaf_grads: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            self.visits += 1
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.grad_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.node is not None:
                    key, store = id(t.node), grads
                else:
                    key, store = id(t), leaf_grads
                store[key] = gi if key not in store else store[key] + gi
        for t in self.leaves:
            g = leaf_grads.get(id(t))
            if g is None:
                continue
            g = np.array(g, dtype=np.float64).reshape(t.shape)
            t.grad = g if t.grad is None else t.grad + g

    def first_nonfinite_op(self) -> str | None:
        """Name of the earliest op whose output holds NaN or inf.
        """
        for node in self.nodes:
            if not np.all(np.isfinite(node.value)):
                return node.op
        return None


def backward(loss: Tensor, accumulate: bool = False) -> ComputationGraph:
    """Back-propagate from a scalar loss; returns the traversed graph.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise GradientError(f'backward: loss must be a scalar, got {shape_str(loss.shape)}')
    graph = ComputationGraph(loss)
    graph.backward(accumulate=accumulate)
    logger.debug(f'backward visited {graph.visits} nodes, {len(graph.leaves)} leaves')
    return graph


def save_tensor(path: str | Path, x: Tensor | np.ndarray) -> None:
    """Write the flat binary format: u32 rank, u32 extents, f64 payload (little-endian).
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    header = np.array([data.ndim, *data.shape], dtype='<u4')
    with Path(path).open('wb') as f:
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(data, dtype='<f8').tobytes())


def load_tensor(path: str | Path, requires_grad: bool = False) -> Tensor:
    """Read a tensor written by `save_tensor`.
    """
    buf = Path(path).read_bytes()
    rank = int(np.frombuffer(buf[:4], dtype='<u4')[0])
    shape = tuple(int(s) for s in np.frombuffer(buf[4:4 + 4 * rank], dtype='<u4'))
    payload = np.frombuffer(buf[4 + 4 * rank:], dtype='<f8')
    if payload.size != int(np.prod(shape)):
        raise DimensionError(
            f'{path}: payload of {payload.size} values does not fill {shape_str(shape)}')
    return Tensor(payload.reshape(shape).astype(np.float64), requires_grad=requires_grad)
