"""Layer containers on top of :mod:`gwcstereo.functional`."""

from __future__ import annotations

import contextlib
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor

_shape_log: Optional[List[Tuple[str, Tuple[int, ...]]]] = None


@contextlib.contextmanager
def trace_shapes() -> Iterator[List[Tuple[str, Tuple[int, ...]]]]:
    """Collect ``(name, shape)`` pairs reported through :func:`record` in the block."""
    global _shape_log
    prev = _shape_log
    _shape_log = []
    try:
        yield _shape_log
    finally:
        _shape_log = prev


def record(name: str, t: Tensor) -> Tensor:
    if _shape_log is not None:
        _shape_log.append((name, tuple(t.shape)))
    return t


class Module:
    """Minimal module tree: parameters, running-stat buffers and a train flag."""

    def __init__(self):
        self.training = True
        self._buffers: Dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Module, Parameter)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, child in self._children():
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(child, Parameter):
                yield full, child
            else:
                yield from child.named_parameters(full)

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        for prefix, mod in self.named_modules():
            for name, buf in mod._buffers.items():
                yield (f"{prefix}.{name}" if prefix else name), buf

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        """Cast every parameter and buffer to ``dtype`` in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, mod in self.named_modules():
            for name, buf in mod._buffers.items():
                mod._buffers[name] = buf.astype(dtype)
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = {}
        for prefix, mod in self.named_modules():
            for name in mod._buffers:
                buffers[f"{prefix}.{name}" if prefix else name] = (mod, name)
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} does not match parameter {p.shape}")
            p.data = value.astype(p.dtype).copy()
        for name, (mod, key) in buffers.items():
            value = np.asarray(state[name])
            mod._buffers[key] = value.astype(mod._buffers[key].dtype).copy()


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


class ConvNd(Module):
    def __init__(self, nsp: int, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, dilation: int = 1, bias: bool = False):
        super().__init__()
        shape = (cout, cin) + (kernel,) * nsp
        self.weight = Parameter(he_normal(rng, shape, cin * kernel ** nsp))
        self.bias = Parameter(np.zeros(cout, dtype=np.float32)) if bias else None
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.nsp = nsp

    def forward(self, x: Tensor) -> Tensor:
        return F.convnd(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class Conv2d(ConvNd):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, dilation=1, bias=False):
        super().__init__(2, cin, cout, kernel, rng, stride, padding, dilation, bias)


class Conv3d(ConvNd):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, bias=False):
        super().__init__(3, cin, cout, kernel, rng, stride, padding, 1, bias)


class ConvTranspose3d(Module):
    """Stride-2 transposed 3D convolution that exactly doubles D, H and W."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, kernel: int = 3,
                 stride: int = 2, padding: int = 1, output_padding: int = 1, bias: bool = False):
        super().__init__()
        self.weight = Parameter(he_normal(rng, (cin, cout) + (kernel,) * 3, cout * kernel ** 3))
        self.bias = Parameter(np.zeros(cout, dtype=np.float32)) if bias else None
        self.stride, self.padding, self.output_padding = stride, padding, output_padding

    def forward(self, x: Tensor) -> Tensor:
        out = F.conv_transpose3d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)
        if out.shape[2:] != tuple(2 * n for n in x.shape[2:]):
            raise ValueError(
                f"deconvolution must double every spatial extent: {x.shape[2:]} -> {out.shape[2:]}; "
                "use kernel 3, stride 2, padding 1, output_padding 1")
        return out


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))
        self.momentum = momentum

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm(x, self.gamma, self.beta, self._buffers["running_mean"],
                           self._buffers["running_var"], self.training, self.momentum)


class ConvBN(Module):
    """Convolution followed by batch normalization and an optional ReLU."""

    def __init__(self, conv: Module, channels: int, relu: bool = True):
        super().__init__()
        self.conv = conv
        self.bn = BatchNorm(channels)
        self.relu = relu

    def forward(self, x: Tensor) -> Tensor:
        x = self.bn(self.conv(x))
        return F.relu(x) if self.relu else x


def conv2d_bn(cin, cout, rng, kernel=3, stride=1, dilation=1, relu=True) -> ConvBN:
    pad = dilation * (kernel - 1) // 2
    return ConvBN(Conv2d(cin, cout, kernel, rng, stride, pad, dilation), cout, relu)


def conv3d_bn(cin, cout, rng, kernel=3, stride=1, relu=True) -> ConvBN:
    return ConvBN(Conv3d(cin, cout, kernel, rng, stride, (kernel - 1) // 2), cout, relu)


def deconv3d_bn(cin, cout, rng) -> ConvBN:
    return ConvBN(ConvTranspose3d(cin, cout, rng), cout, relu=False)
