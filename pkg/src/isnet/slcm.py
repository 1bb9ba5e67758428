"""Semantic-level context.

Pixels are grouped by the argmax of the auxiliary logits D.  Each present
class gets one region vector: the softmax-over-members (of that class's
logit) weighted sum of its members' representations.  Every pixel then
receives the vector of its own region.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConsistencyError, DimensionError, EmptyRegionError
from .layers import HeadAux, Module
from .tensor import Tensor


class SLCM(Module):
    def __init__(self, channels: int, hidden: int, num_classes: int, rng, dtype=np.float32):
        self.head = HeadAux(channels, hidden, num_classes, rng, dtype)

    def __call__(self, r: Tensor) -> tuple[Tensor, Tensor]:
        return slcm_forward(self.head, r)


@dataclass
class RegionRepr:
    """Region vectors keyed by class index, with member counts."""

    vectors: dict[int, Tensor] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)


def predict_distribution(head: HeadAux, r: Tensor) -> Tensor:
    """Raw class logits D, shape [..., K, h, w]."""
    c_in = head.hidden.conv.c_in
    if r.ndim < 3 or r.shape[-3] != c_in:
        raise DimensionError(f"auxiliary head expects {c_in} channels, got {r.shape}")
    return head(r)


def group_regions(d: Tensor | np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the smallest index."""
    data = d.data if isinstance(d, Tensor) else np.asarray(d)
    return np.argmax(data, axis=-3)


def region_representation(r: Tensor, d: Tensor, a: np.ndarray, c: int) -> Tensor:
    """Region vector [C] of class ``c`` for a single [C, h, w] map."""
    members = np.flatnonzero(a.reshape(-1) == c)
    if members.size == 0:
        raise EmptyRegionError(f"class {c} has no member pixels")
    C = r.shape[0]
    rf = T.reshape(r, (C, -1))
    df = T.reshape(d, (d.shape[0], -1))
    logits = T.split(df, [c, 1, df.shape[0] - c - 1], axis=0)[1] if df.shape[0] > 1 else df
    sel = np.zeros((df.shape[1], members.size), dtype=r.dtype)
    sel[members, np.arange(members.size)] = 1
    member_logits = T.matmul(logits, Tensor(sel))  # [1, N_c]
    weights = T.softmax_last(member_logits)
    member_vecs = T.matmul(rf, Tensor(sel))  # [C, N_c]
    return T.reshape(T.matmul(member_vecs, T.permute(weights, (1, 0))), (C,))


def region_representations(r: Tensor, d: Tensor, a: np.ndarray) -> RegionRepr:
    out = RegionRepr()
    for c in np.unique(a):
        c = int(c)
        out.vectors[c] = region_representation(r, d, a, c)
        out.counts[c] = int((a == c).sum())
    return out


def scatter_regions(a: np.ndarray, reprs: RegionRepr) -> Tensor:
    """[C, h, w] map whose column at each pixel is its class's region vector."""
    present = [int(c) for c in np.unique(a)]
    missing = [c for c in present if c not in reprs.vectors]
    if missing:
        raise ConsistencyError(f"no region vector for assigned classes {missing}")
    h, w = a.shape
    vecs = [reprs.vectors[c] for c in present]
    C = vecs[0].shape[0]
    table = T.concat([T.reshape(v, (C, 1)) for v in vecs], axis=1)  # [C, P]
    onehot = (a.reshape(1, -1) == np.array(present)[:, None]).astype(table.dtype)  # [P, N]
    return T.reshape(T.matmul(table, Tensor(onehot)), (C, h, w))


def region_weights(d: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Pooling weights [..., K, N]: softmax of D[k] over the pixels assigned to k.

    Absent classes get an all-zero row.  Pure numpy; used for inspection.
    """
    K = d.shape[-3]
    lead = d.shape[:-3]
    df = d.reshape(lead + (K, -1))
    member = labels.reshape(lead + (1, -1)) == np.arange(K).reshape((K, 1))
    shift = np.where(member, df, -np.inf).max(axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0)
    e = np.where(member, np.exp(np.where(member, df - shift, 0)), 0)
    denom = e.sum(axis=-1, keepdims=True)
    return e / np.where(denom > 0, denom, 1)


def pool_and_scatter(r: Tensor, d: Tensor, labels: np.ndarray) -> Tensor:
    """Vectorized region pooling plus scatter for [..., C, h, w] inputs."""
    C = r.shape[-3]
    K = d.shape[-3]
    lead = r.shape[:-3]
    h, w = r.shape[-2:]
    N = h * w
    member = labels.reshape(lead + (1, N)) == np.arange(K).reshape((K, 1))
    onehot = member.astype(r.dtype)  # [..., K, N]
    df = T.reshape(d, lead + (K, N))
    # shift by the per-region max; softmax is shift invariant so the
    # constant carries no gradient
    shift = np.where(member, df.data, -np.inf).max(axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0).astype(r.dtype)
    e = T.exp(T.where(member, df - shift, 0.0)) * onehot
    present = member.any(axis=-1, keepdims=True)
    denom = T.sum(e, axis=-1, keepdims=True) + (~present).astype(r.dtype)
    weights = e / denom  # [..., K, N]
    rf = T.reshape(r, lead + (C, N))
    nd = len(lead) + 2
    swap = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    regions = T.matmul(weights, T.permute(rf, swap))  # [..., K, C]
    r_sl = T.matmul(T.permute(regions, swap), Tensor(onehot))  # [..., C, N]
    return T.reshape(r_sl, lead + (C, h, w))


def slcm_forward(head: HeadAux, r: Tensor) -> tuple[Tensor, Tensor]:
    """Returns (R_sl, D)."""
    d = predict_distribution(head, r)
    labels = group_regions(d)
    return pool_and_scatter(r, d, labels), d
