"""Image-level context: channel-wise global mean fused back at every position."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .layers import ConvBNReLU, Module
from .tensor import Tensor


class ILCM(Module):
    """Holds the fusion transform mapping [repeat(G) ; R] (2C channels) to C."""

    def __init__(self, channels: int, rng, dtype=np.float32, norm: bool = True, act: bool = True):
        self.fuse = ConvBNReLU(2 * channels, channels, rng, dtype, norm=norm, act=act)

    @property
    def channels(self) -> int:
        return self.fuse.conv.c_out

    def __call__(self, r: Tensor) -> Tensor:
        return ilcm_forward(self, r)


def global_context(r: Tensor) -> Tensor:
    """[..., C, h, w] -> [..., C, 1, 1] spatial mean."""
    return T.mean_spatial(r)


def ilcm_forward(state: ILCM, r: Tensor) -> Tensor:
    C = state.channels
    if r.ndim < 3 or r.shape[-3] != C:
        raise DimensionError(f"ILCM built for {C} channels, got input {r.shape}")
    lead = r.shape[:-3]
    h, w = r.shape[-2:]
    g = global_context(r)
    # The fused conv splits into a G part and an R part, so repeat(G) is
    # never materialized: W [G ; R] = W_g G + W_r R.
    conv = state.fuse.conv
    w_g, w_r = T.split(conv.weight, [C, C], axis=1)
    y = T.matmul(w_r, T.reshape(r, lead + (C, h * w)))
    y = y + T.matmul(w_g, T.reshape(g, lead + (C, 1)))
    if conv.bias is not None:
        y = y + T.reshape(conv.bias, (C, 1))
    y = T.reshape(y, lead + (C, h, w))
    if state.fuse.norm is not None:
        y = state.fuse.norm(y)
    return T.relu(y) if state.fuse.act else y
