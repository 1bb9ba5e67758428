"""Similarity-weighted context retrieval, augmentation and the assembled network."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import DimensionError, UsageError
from .ilcm import ILCM
from .layers import ConvBNReLU, HeadMain, Module, ModelConfig, ToyBackbone, init_params
from .slcm import SLCM
from .tensor import Tensor

ATTENTION_CAP = 16_384
VARIANTS = ("baseline", "ilcm", "slcm", "isnet")


def _swap_last(x: Tensor) -> Tensor:
    nd = x.ndim
    return T.permute(x, tuple(range(nd - 2)) + (nd - 1, nd - 2))


def similarity(r: Tensor, ctx: Tensor, cap: int = ATTENTION_CAP) -> Tensor:
    """Row-softmaxed scaled dot products, [..., N, N] with N = h*w.

    Row n is the distribution of query pixel n over context positions.
    """
    if r.shape != ctx.shape or r.ndim < 3:
        raise DimensionError(f"similarity needs matching [.., C, h, w] maps, got {r.shape} and {ctx.shape}")
    lead = r.shape[:-3]
    C, h, w = r.shape[-3:]
    N = h * w
    if N > cap:
        raise UsageError(f"{N} positions exceed the attention cap of {cap}; the similarity matrix is O(N^2)")
    q = _swap_last(T.reshape(r, lead + (C, N)))  # [.., N, C]
    k = T.reshape(ctx, lead + (C, N))  # [.., C, N]
    scores = T.matmul(q, k) * (1.0 / math.sqrt(C))
    return T.softmax_last(scores)


def attend(s: Tensor, ctx: Tensor) -> Tensor:
    """Reshape(S @ ctx_flat) back to [.., C, h, w]."""
    lead = ctx.shape[:-3]
    C, h, w = ctx.shape[-3:]
    N = h * w
    if s.shape[-2:] != (N, N):
        raise DimensionError(f"similarity {s.shape} does not match {N} context positions")
    v = _swap_last(T.reshape(ctx, lead + (C, N)))  # [.., N, C]
    out = T.matmul(s, v)
    return T.reshape(_swap_last(out), lead + (C, h, w))


class FusionState(Module):
    """Augmentation transform (n_ctx*C + C -> C) and the main classification head."""

    def __init__(self, channels: int, num_classes: int, n_ctx: int, rng, dtype=np.float32, dropout: float = 0.1):
        self.n_ctx = n_ctx
        self.transform = ConvBNReLU((n_ctx + 1) * channels, channels, rng, dtype) if n_ctx else None
        self.head_main = HeadMain(channels, num_classes, rng, dtype, dropout)


def augment(state: FusionState, r: Tensor, *attended: Tensor) -> Tensor:
    """R_aug = transform(attended_1 ; ... ; R), concatenated in that order."""
    if state.transform is None:
        return r
    if len(attended) != state.n_ctx:
        raise DimensionError(f"transform expects {state.n_ctx} attended contexts, got {len(attended)}")
    for a in attended:
        if a.shape != r.shape:
            raise DimensionError(f"attended context {a.shape} does not match R {r.shape}")
    return state.transform(T.concat_channels(list(attended) + [r]))


def classify(state: FusionState, r_aug: Tensor, out_hw: tuple[int, int] | None = None) -> Tensor:
    """Raw logits O = upsample(head(R_aug)), 8x by default."""
    logits = state.head_main(r_aug)
    h, w = logits.shape[-2:]
    H, W = out_hw if out_hw is not None else (8 * h, 8 * w)
    return T.upsample_bilinear(logits, H, W)


class ISNet(Module):
    """Backbone plus the context branches selected by ``variant``.

    ``baseline``: head on R.  ``ilcm`` / ``slcm``: one context branch
    attended and fused with R.  ``isnet``: both branches.
    """

    def __init__(self, config: ModelConfig, variant: str = "isnet", attention_cap: int = ATTENTION_CAP):
        if variant not in VARIANTS:
            raise UsageError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.config = config
        self.variant = variant
        self.attention_cap = attention_cap
        rng = np.random.default_rng(config.seed)
        C, K, dt = config.channels, config.num_classes, config.dtype
        self.backbone = ToyBackbone(C, rng, dt)
        self.ilcm = ILCM(C, rng, dt) if variant in ("ilcm", "isnet") else None
        self.slcm = SLCM(C, config.hidden, K, rng, dt) if variant in ("slcm", "isnet") else None
        n_ctx = (self.ilcm is not None) + (self.slcm is not None)
        self.fusion = FusionState(C, K, n_ctx, rng, dt, config.dropout)
        init_params(self, config.seed)

    def set_dropout_rng(self, rng: np.random.Generator | None) -> None:
        self.fusion.head_main.rng = rng

    def __call__(self, img: Tensor) -> tuple[Tensor, Tensor | None]:
        return isnet_forward(self, img)

    def forward_features(self, r: Tensor, out_hw: tuple[int, int] | None = None) -> tuple[Tensor, Tensor | None]:
        """Everything after the backbone: R -> (O, D)."""
        attended = []
        d = None
        if self.ilcm is not None:
            r_il = self.ilcm(r)
            attended.append(attend(similarity(r, r_il, self.attention_cap), r_il))
        if self.slcm is not None:
            r_sl, d = self.slcm(r)
            attended.append(attend(similarity(r, r_sl, self.attention_cap), r_sl))
        r_aug = augment(self.fusion, r, *attended)
        return classify(self.fusion, r_aug, out_hw), d


def isnet_forward(model: ISNet, img: Tensor) -> tuple[Tensor, Tensor | None]:
    """Full pipeline on [3, H, W] or [B, 3, H, W]; returns (O, D).  D is None without SLCM."""
    r = model.backbone(img)
    return model.forward_features(r, img.shape[-2:])
