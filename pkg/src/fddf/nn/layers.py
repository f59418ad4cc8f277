"""Parameter containers and the layers the backbones are assembled from."""

from __future__ import annotations

import re
from typing import Iterator

import numpy as np

from fddf.errors import ConfigurationError
from fddf.nn import functional as F
from fddf.nn.tensor import Tensor, default_dtype

_NAME_RE = re.compile(r"^[a-z0-9._]+$")


class Parameter(Tensor):
    """A leaf tensor that always requires grad."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Registers parameters, buffers and submodules in assignment order.

    Hierarchical names are the dotted attribute path, e.g.
    ``branch.moire.stage1.block0.conv1.weight``.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        setattr(self, name, module)

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        """Replace a dotted-path buffer (used when restoring checkpoints)."""
        *path, leaf = name.split(".")
        owner = self
        for part in path:
            owner = owner._modules[part]
        owner._buffers[leaf][...] = value

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for prefix, mod in self.named_modules():
            for name, p in mod._params.items():
                full = f"{prefix}.{name}" if prefix else name
                if not _NAME_RE.match(full):
                    raise ConfigurationError(f"parameter name {full!r} is outside [a-z0-9._]")
                yield full, p

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for prefix, mod in self.named_modules():
            for name, b in mod._buffers.items():
                yield (f"{prefix}.{name}" if prefix else name), b

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state(self) -> dict[str, np.ndarray]:
        """All parameters and buffers by name."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for _, mod in self.named_modules():
            for p in mod._params.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for name, b in list(mod._buffers.items()):
                mod.register_buffer(name, b.astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 2.0) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape).astype(default_dtype())


class Conv2d(Module):
    def __init__(self, rng, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=False):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(kaiming_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=default_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm2d(
            x, self.weight, self.bias, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class Linear(Module):
    def __init__(self, rng, in_features: int, out_features: int, gain: float = 1.0):
        super().__init__()
        self.weight = Parameter(kaiming_normal(rng, (out_features, in_features), in_features, gain))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class ConvBN(Module):
    """conv -> batchnorm, optionally followed by relu6."""

    def __init__(self, rng, in_channels, out_channels, kernel_size=3, stride=1, act=True):
        super().__init__()
        self.act = act
        self.conv = Conv2d(rng, in_channels, out_channels, kernel_size, stride, padding=kernel_size // 2)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return F.relu6(y) if self.act else y
