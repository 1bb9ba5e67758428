"""Parameterized building blocks: 1x1 convs, heads, the toy stride-8 backbone."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, UsageError
from .tensor import Tensor


@dataclass
class ModelConfig:
    channels: int = 64
    num_classes: int = 5
    alpha: float = 0.4
    dropout: float = 0.1
    aux_hidden: int | None = None  # hidden width of the auxiliary head; None -> channels
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.channels < 1 or self.num_classes < 1:
            raise ConfigError("channels and num_classes must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def hidden(self) -> int:
        return self.aux_hidden or self.channels


class Module:
    """Container whose Tensor attributes are parameters and Module attributes are children.

    Names follow attribute insertion order, which makes checkpoints stable.
    """

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")
            elif isinstance(val, list):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{prefix}{key}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_buffers(prefix + key + ".")
            elif isinstance(val, list):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_buffers(f"{prefix}{key}.{i}.")
        for key, arr in getattr(self, "_buffers", {}).items():
            yield prefix + key, arr

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def children(self) -> Iterator["Module"]:
        for val in vars(self).values():
            if isinstance(val, Module):
                yield val
            elif isinstance(val, list):
                yield from (m for m in val if isinstance(m, Module))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    # variance bound^2 / 3 = 2 / fan_in
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected [C, h, w] or [B, C, h, w], got {x.shape}")
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return T.reshape(x, x.shape[1:]) if squeeze else x


class Conv1x1(Module):
    """Per-position affine map ``y[:, p] = W x[:, p] + b``."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        self.weight = Tensor(uniform_fan_in(rng, (c_out, c_in), c_in, dtype), requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        else:
            self.bias = None

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return conv1x1_forward(self, x)


def conv1x1_forward(layer: Conv1x1, x: Tensor) -> Tensor:
    if x.ndim < 3 or x.shape[-3] != layer.c_in:
        raise DimensionError(f"conv1x1 expects {layer.c_in} input channels, got input {x.shape}")
    lead = x.shape[:-3]
    h, w = x.shape[-2:]
    flat = T.reshape(x, lead + (layer.c_in, h * w))
    out = T.matmul(layer.weight, flat)
    if layer.bias is not None:
        out = out + T.reshape(layer.bias, (layer.c_out, 1))
    return T.reshape(out, lead + (layer.c_out, h, w))


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        xb, squeeze = _as_batch(x)
        running = (self._buffers["running_mean"], self._buffers["running_var"])
        out = T.batch_norm(xb, self.gamma, self.beta, running, self.training, self.momentum, self.eps)
        return _unbatch(out, squeeze)


class ConvBNReLU(Module):
    """1x1 conv, then batch norm and ReLU; either can be switched off.

    The conv carries a bias only when normalization is off, since batch norm
    cancels any per-channel offset.
    """

    def __init__(self, c_in: int, c_out: int, rng, dtype=np.float32, norm: bool = True, act: bool = True):
        self.conv = Conv1x1(c_in, c_out, rng, dtype, bias=not norm)
        self.norm = BatchNorm(c_out, dtype) if norm else None
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        if self.norm is not None:
            y = self.norm(y)
        return T.relu(y) if self.act else y


class HeadAux(Module):
    """Two stacked 1x1 convs with BN + ReLU in between; predicts K raw logits."""

    def __init__(self, c_in: int, hidden: int, num_classes: int, rng, dtype=np.float32):
        self.hidden = ConvBNReLU(c_in, hidden, rng, dtype)
        self.cls = Conv1x1(hidden, num_classes, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.cls(self.hidden(x))


class HeadMain(Module):
    """Dropout followed by a single 1x1 conv producing K logits."""

    def __init__(self, c_in: int, num_classes: int, rng, dtype=np.float32, dropout: float = 0.1):
        self.cls = Conv1x1(c_in, num_classes, rng, dtype)
        self.dropout = dropout
        self.rng: np.random.Generator | None = None

    def __call__(self, x: Tensor) -> Tensor:
        if self.training and self.dropout > 0:
            rng = self.rng if self.rng is not None else np.random.default_rng(0)
            keep = (rng.random(x.shape) >= self.dropout).astype(x.dtype) / (1.0 - self.dropout)
            x = x * keep
        return self.cls(x)


class ConvBlock3x3(Module):
    """3x3 stride-2 conv, batch norm, ReLU."""

    def __init__(self, c_in: int, c_out: int, rng, dtype=np.float32):
        self.weight = Tensor(uniform_fan_in(rng, (c_out, c_in, 3, 3), 9 * c_in, dtype), requires_grad=True)
        self.norm = BatchNorm(c_out, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(T.conv2d(x, self.weight, None, stride=2, padding=1)))


def backbone_widths(channels: int) -> tuple[int, int, int]:
    return max(channels // 4, 4), max(channels // 2, 4), channels


class ToyBackbone(Module):
    """Three stride-2 conv blocks mapping [3, H, W] to [C, H/8, W/8]."""

    def __init__(self, channels: int, rng, dtype=np.float32):
        w1, w2, w3 = backbone_widths(channels)
        self.blocks = [
            ConvBlock3x3(3, w1, rng, dtype),
            ConvBlock3x3(w1, w2, rng, dtype),
            ConvBlock3x3(w2, w3, rng, dtype),
        ]

    def __call__(self, img: Tensor) -> Tensor:
        return backbone_forward(self, img)


def backbone_forward(bb: ToyBackbone, img: Tensor) -> Tensor:
    x, squeeze = _as_batch(img)
    H, W = x.shape[-2:]
    if x.shape[1] != 3:
        raise DimensionError(f"backbone expects 3 input channels, got {img.shape}")
    if H % 8 or W % 8:
        raise UsageError(f"image extents {H}x{W} must be multiples of 8; pad or crop the input first")
    for block in bb.blocks:
        x = block(x)
    return _unbatch(x, squeeze)


def upsample8x(x: Tensor) -> Tensor:
    return T.upsample8x(x)


def init_params(module: Module, seed: int) -> Module:
    """Re-draw every weight of ``module`` from the fan-in uniform law; biases to zero.

    Parameters are visited in name order so the draw is a pure function of
    ``seed`` and the module structure.
    """
    rng = np.random.default_rng(seed)
    for name, p in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "beta"):
            p.data[...] = 0
        elif leaf == "gamma":
            p.data[...] = 1
        else:
            fan_in = int(np.prod(p.shape[1:]))
            p.data[...] = uniform_fan_in(rng, p.shape, fan_in, p.dtype)
    return module
