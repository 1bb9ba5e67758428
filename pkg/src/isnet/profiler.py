"""Analytic parameter and FLOP counts for the context heads, plus wall-clock probes.

FLOP convention (version 1), all counts derived from shapes only:

* matmul [m, k] x [k, n]: 2*m*k*n
* 1x1 conv: 2*C_in*C_out*h*w, plus C_out*h*w when the conv has a bias
* batch norm at inference: 2 ops per element (scale and shift)
* ReLU, elementwise add/mul/sub/div, exp, mean: 1 op per element
* softmax: 5 ops per element
* argmax: 1 op per scanned logit
* concat, reshape, repeat and scatter: free (data movement)

The probe input is a backbone feature map, so the counted graph starts with
a 1x1 bottleneck to C channels and ends with the main head's logits; the
final 8x upsampling to image resolution is not part of the head.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, UsageError
from .fusion import ATTENTION_CAP, FusionState
from .ilcm import ILCM
from .layers import Conv1x1, ConvBNReLU, HeadAux, Module
from .slcm import SLCM
from .tensor import Tensor

FLOP_CONVENTION = "v1"

# Published competitor context heads at 1x2048x128x128: (params, FLOPs, ms on
# the original accelerator).  Comparison constants only.
COMPETITORS = {
    "ASPP": (42.21e6, 674.47e9, 101.44),
    "PPM": (23.07e6, 309.45e9, 29.57),
    "CCNet": (23.92e6, 397.38e9, 56.90),
    "OCRNet": (14.82e6, 237.45e9, 20.22),
    "DANet": (23.92e6, 392.02e9, 62.64),
    "ANN": (20.32e6, 335.24e9, 49.66),
    "DNL": (24.12e6, 395.25e9, 68.62),
    "APCNet": (30.46e6, 413.12e9, 54.20),
}
REFERENCE_HEADS = {
    "ILCM": (10.36e6, 169.77e9, 42.56),
    "SLCM": (10.10e6, 165.47e9, 53.12),
    "ILCM+SLCM": (11.02e6, 180.60e9, 84.19),
}
PROBE_SHAPE = (1, 2048, 128, 128)
HEAD_NAMES = {"ilcm": "ILCM", "slcm": "SLCM", "isnet": "ILCM+SLCM"}


class ContextHead(Module):
    """Bottleneck plus the context branches and fusion of one variant, fed a feature map."""

    def __init__(
        self,
        in_channels: int = 2048,
        channels: int = 512,
        num_classes: int = 150,
        variant: str = "isnet",
        seed: int = 0,
        attention_cap: int = ATTENTION_CAP,
    ):
        if variant not in ("baseline", "ilcm", "slcm", "isnet"):
            raise UsageError(f"unknown variant {variant!r}")
        rng = np.random.default_rng(seed)
        dt = np.float32
        self.variant = variant
        self.attention_cap = attention_cap
        self.bottleneck = ConvBNReLU(in_channels, channels, rng, dt)
        self.ilcm = ILCM(channels, rng, dt) if variant in ("ilcm", "isnet") else None
        self.slcm = SLCM(channels, channels, num_classes, rng, dt) if variant in ("slcm", "isnet") else None
        n_ctx = (self.ilcm is not None) + (self.slcm is not None)
        self.fusion = FusionState(channels, num_classes, n_ctx, rng, dt, dropout=0.0)
        self.eval()

    @property
    def in_channels(self) -> int:
        return self.bottleneck.conv.c_in

    def __call__(self, x: Tensor) -> Tensor:
        from .fusion import attend, augment, similarity

        r = self.bottleneck(x)
        attended = []
        if self.ilcm is not None:
            r_il = self.ilcm(r)
            attended.append(attend(similarity(r, r_il, self.attention_cap), r_il))
        if self.slcm is not None:
            r_sl, _ = self.slcm(r)
            attended.append(attend(similarity(r, r_sl, self.attention_cap), r_sl))
        return self.fusion.head_main(augment(self.fusion, r, *attended))


# --------------------------------------------------------------------------
# parameters


def count_params(module: Module | None) -> int:
    if module is None:
        return 0
    return int(sum(p.size for p in module.parameters()))


# --------------------------------------------------------------------------
# FLOPs


def matmul_flops(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def conv1x1_flops(layer: Conv1x1, hw: int) -> int:
    f = 2 * layer.c_in * layer.c_out * hw
    if layer.bias is not None:
        f += layer.c_out * hw
    return f


def _block_flops(block: ConvBNReLU, hw: int) -> int:
    c_out = block.conv.c_out
    f = conv1x1_flops(block.conv, hw)
    if block.norm is not None:
        f += 2 * c_out * hw
    if block.act:
        f += c_out * hw
    return f


def similarity_flops(C: int, N: int) -> int:
    return matmul_flops(N, C, N) + N * N + 5 * N * N


def attend_flops(C: int, N: int) -> int:
    return matmul_flops(N, N, C)


@dataclass
class FlopItem:
    component: str  # bottleneck | ilcm | slcm | shared
    op: str
    flops: int


@dataclass
class CostReport:
    name: str
    shape: tuple[int, ...]
    params: int
    items: list[FlopItem] = field(default_factory=list)
    time_ms: float | None = None

    @property
    def flops(self) -> int:
        return sum(i.flops for i in self.items)

    def by_component(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for i in self.items:
            out[i.component] = out.get(i.component, 0) + i.flops
        return out


def trace_flops(head: ContextHead, shape: tuple[int, ...]) -> list[FlopItem]:
    """Walk the head symbolically for an input of ``shape`` = (B, C_in, h, w)."""
    if len(shape) != 4:
        raise DimensionError(f"probe shape must be B x C x h x w, got {shape}")
    B, c_in, h, w = shape
    if c_in != head.in_channels:
        raise DimensionError(f"head expects {head.in_channels} input channels, probe has {c_in}")
    hw = h * w
    C = head.bottleneck.conv.c_out
    items = [FlopItem("bottleneck", "bottleneck conv+bn+relu", B * _block_flops(head.bottleneck, hw))]
    if head.ilcm is not None:
        fuse = head.ilcm.fuse
        items += [
            FlopItem("ilcm", "global mean", B * C * hw),
            # the repeated G half of the fuse conv acts on one column per image
            FlopItem("ilcm", "fuse conv, R half", B * matmul_flops(C, C, hw)),
            FlopItem("ilcm", "fuse conv, G half", B * matmul_flops(C, C, 1)),
            FlopItem("ilcm", "fuse broadcast add", B * C * hw),
            FlopItem("ilcm", "fuse bn+relu", B * 3 * C * hw if fuse.norm is not None else B * C * hw),
            FlopItem("ilcm", "similarity R.R_il", B * similarity_flops(C, hw)),
            FlopItem("ilcm", "attend S_il.R_il", B * attend_flops(C, hw)),
        ]
    if head.slcm is not None:
        aux: HeadAux = head.slcm.head
        K = aux.cls.c_out
        items += [
            FlopItem("slcm", "aux head hidden", B * _block_flops(aux.hidden, hw)),
            FlopItem("slcm", "aux head cls", B * conv1x1_flops(aux.cls, hw)),
            FlopItem("slcm", "argmax", B * K * hw),
            # per pixel: max-shift, exp, sum, divide
            FlopItem("slcm", "region weights", B * 4 * hw),
            FlopItem("slcm", "region pooling", B * 2 * C * hw),
            FlopItem("slcm", "similarity R.R_sl", B * similarity_flops(C, hw)),
            FlopItem("slcm", "attend S_sl.R_sl", B * attend_flops(C, hw)),
        ]
    if head.fusion.transform is not None:
        items.append(FlopItem("shared", "augment transform", B * _block_flops(head.fusion.transform, hw)))
    items.append(FlopItem("shared", "main head", B * conv1x1_flops(head.fusion.head_main.cls, hw)))
    return items


def count_flops(head: ContextHead, shape: tuple[int, ...]) -> int:
    return sum(i.flops for i in trace_flops(head, shape))


def profile(variant: str, shape: tuple[int, ...] = PROBE_SHAPE, channels: int = 512, num_classes: int = 150) -> CostReport:
    head = ContextHead(shape[1], channels, num_classes, variant)
    return CostReport(HEAD_NAMES.get(variant, variant), tuple(shape), count_params(head), trace_flops(head, shape))


# --------------------------------------------------------------------------
# timing


def timing_probe(fn, repetitions: int = 5, warmup: int = 1) -> float:
    """Median wall time in seconds of ``fn()``, after ``warmup`` discarded runs."""
    if repetitions < 1:
        raise UsageError("repetitions must be at least 1")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def time_head(variant: str, shape: tuple[int, ...], channels: int | None = None, repetitions: int = 5, num_classes: int = 150, attention_cap: int = ATTENTION_CAP) -> float:
    """Median forward time of a context head on a random feature map of ``shape``."""
    B, c_in, h, w = shape
    if h * w > attention_cap:
        raise UsageError(f"{h * w} positions exceed the attention cap of {attention_cap}")
    head = ContextHead(c_in, channels or min(512, c_in), num_classes, variant, attention_cap=attention_cap)
    x = Tensor(np.random.default_rng(0).standard_normal(shape).astype(np.float32))

    def run():
        with T.no_tape():
            head(x)

    return timing_probe(run, repetitions)


def format_table(reports: list[CostReport], tsv: bool = False) -> str:
    rows = [("module", "params(M)", "FLOPs(G)", "note")]
    for r in reports:
        ref = REFERENCE_HEADS.get(r.name)
        note = ""
        if ref:
            note = f"reference {ref[0] / 1e6:.2f}M / {ref[1] / 1e9:.2f}G; deviation {(r.params - ref[0]) / 1e6:+.2f}M / {(r.flops - ref[1]) / 1e9:+.2f}G"
        rows.append((r.name, f"{r.params / 1e6:.2f}", f"{r.flops / 1e9:.2f}", note))
    for name, (p, f, _) in COMPETITORS.items():
        rows.append((name, f"{p / 1e6:.2f}", f"{f / 1e9:.2f}", "competitor constant"))
    if tsv:
        return "\n".join("\t".join(r) for r in rows)
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    return "\n".join(
        "  ".join(c.ljust(widths[i]) if i < 3 else c for i, c in enumerate(r)).rstrip() for r in rows
    )
