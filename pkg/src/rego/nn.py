"""Parameter containers: a minimal Module tree with linear, norm and conv layers.
"""
import logging
from collections.abc import Iterator, Sequence

import numpy as np
from rego.base import DimensionError, shape_str
from rego.tensor import Tensor, conv2d, layer_norm, relu

from libb import copydoc

logger = logging.getLogger(__name__)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def kaiming_uniform(rng: np.random.Generator, fan_in: int,
                    shape: tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Base class walking its attributes for parameters and submodules.

    Traversal follows attribute insertion order, so parameter names and the
    order an optimizer sees them in are stable across runs.
    """

    def named_parameters(self, prefix: str = '') -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f'{prefix}{name}'
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f'{full}.')
            elif isinstance(value, list | tuple):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f'{full}.{i}.')

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy values into existing parameters; names and shapes must agree.
        """
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f'state mismatch: missing={missing} unexpected={unexpected}')
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(
                    f'{name}: stored {shape_str(value.shape)}, expected {shape_str(p.shape)}')
            p.data = value.copy()


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map x @ W + b over the last axis of x.
    """
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f'linear: input {shape_str(x.shape)} does not match weight {shape_str(weight.shape)}')
    out = x @ weight
    return out if bias is None else out + bias


class Linear(Module):

    def __init__(self, in_width: int, out_width: int,
                 rng: np.random.Generator | None = None, bias: bool = True) -> None:
        init = (xavier_uniform(rng, in_width, out_width, (in_width, out_width))
                if rng is not None else np.zeros((in_width, out_width)))
        self.weight = parameter(init)
        self.bias = parameter(np.zeros(out_width)) if bias else None

    @copydoc(linear)
    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):

    def __init__(self, width: int, eps: float = 1e-5) -> None:
        self.gain = parameter(np.ones(width))
        self.bias = parameter(np.zeros(width))
        self.eps = eps

    @copydoc(layer_norm)
    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Stack of linear layers with ReLU between them (none after the last).
    """

    def __init__(self, widths: Sequence[int], rng: np.random.Generator | None = None) -> None:
        if len(widths) < 2:
            raise ValueError(f'MLP needs at least input and output widths, got {widths}')
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


class Conv2d(Module):

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None) -> None:
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = parameter(kaiming_uniform(rng, fan_in, shape) if rng is not None
                                else np.zeros(shape))
        self.bias = parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    @copydoc(conv2d)
    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.stride, self.padding, bias=self.bias)
