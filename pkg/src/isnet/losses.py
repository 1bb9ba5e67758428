"""Multi-task objective and the mIoU metric."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DataError, DimensionError, UndefinedMetricError, UsageError
from .tensor import Tensor

IGNORE = 255


def _batched(logits: Tensor, gt: np.ndarray) -> tuple[Tensor, np.ndarray]:
    gt = np.asarray(gt)
    if logits.ndim == 3:
        logits = T.reshape(logits, (1,) + logits.shape)
        gt = gt[None]
    return logits, gt


def cross_entropy_pixel(logits: Tensor, target: int, ignore_index: int = IGNORE) -> Tensor:
    """-log softmax(logits)[target] for one pixel's [K] logit vector."""
    K = logits.shape[-1]
    if target == ignore_index:
        return T.sum(logits * 0.0)
    if not 0 <= target < K:
        raise DataError(f"target {target} outside [0, {K})")
    logp = T.log_softmax_last(T.reshape(logits, (1, K)))
    pick = np.zeros((K, 1), dtype=logits.dtype)
    pick[target, 0] = 1
    return -T.reshape(T.matmul(logp, Tensor(pick)), ())


def loss_O(o: Tensor, gt: np.ndarray) -> Tensor:
    """Mean cross entropy of full-resolution logits [.., K, H, W] against labels [.., H, W]."""
    o, gt = _batched(o, gt)
    if o.shape[-2:] != gt.shape[-2:]:
        raise DimensionError(f"logits {o.shape} and labels {gt.shape} differ in extent")
    return T.cross_entropy(o, gt, IGNORE)


def loss_D(d: Tensor, gt: np.ndarray) -> Tensor:
    """Upsample D by 8, then softmax cross entropy against the full-resolution labels."""
    d, gt = _batched(d, gt)
    h, w = d.shape[-2:]
    if gt.shape[-2:] != (8 * h, 8 * w):
        raise DimensionError(f"labels {gt.shape} are not 8x the extent of D {d.shape}")
    return T.cross_entropy(T.upsample8x(d), gt, IGNORE)


def total_loss(l_d: Tensor | None, l_o: Tensor, alpha: float) -> Tensor:
    if alpha < 0:
        raise UsageError(f"alpha must be nonnegative, got {alpha}")
    if l_d is None or alpha == 0:
        return l_o
    return l_d * alpha + l_o


class ConfusionMatrix:
    """K x K counts, rows ground truth and columns prediction."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts.astype(np.int64)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DimensionError("cannot merge confusion matrices of different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate_confusion(pred: np.ndarray, gt: np.ndarray, cm: ConfusionMatrix) -> ConfusionMatrix:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and labels {gt.shape} differ in extent")
    K = cm.num_classes
    keep = gt != IGNORE
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.max() >= K or p.max() >= K or min(g.min(), p.min()) < 0):
        raise DataError(f"labels outside [0, {K})")
    counts = np.bincount(g * K + p, minlength=K * K).reshape(K, K)
    return ConfusionMatrix(K, cm.counts + counts)


def miou(cm: ConfusionMatrix) -> tuple[list[float | None], float]:
    """Per-class IoU (None where the class is absent from both sides) and their mean."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(axis=0) + c.sum(axis=1) - tp
    ious: list[float | None] = [float(tp[k] / denom[k]) if denom[k] > 0 else None for k in range(cm.num_classes)]
    present = [v for v in ious if v is not None]
    if not present:
        raise UndefinedMetricError("mIoU undefined: no class present in ground truth or prediction")
    return ious, float(np.mean(present))


def format_report(ious: list[float | None], mean: float) -> str:
    """Tab-separated ``class_id<TAB>iou`` rows then ``mIoU<TAB>value``; absent classes print ``nan``."""
    rows = [f"{k}\t{'nan' if v is None else f'{v:.6f}'}" for k, v in enumerate(ious)]
    rows.append(f"mIoU\t{mean:.6f}")
    return "\n".join(rows)


def parse_report(text: str) -> tuple[list[float | None], float]:
    ious: list[float | None] = []
    mean = float("nan")
    for line in text.strip().splitlines():
        key, val = line.split("\t")
        if key == "mIoU":
            mean = float(val)
        else:
            ious.append(None if val == "nan" else float(val))
    return ious, mean
