"""Finite-difference gradient suites for the ``gradcheck`` command (float64)."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .fusion import FusionState, ISNet, attend, augment, classify, similarity
from .ilcm import ILCM, ilcm_forward
from .layers import ModelConfig
from .losses import loss_D, loss_O, total_loss
from .slcm import SLCM, group_regions, slcm_forward
from .tensor import Tensor, grad_check

EPS = 1e-5
TOLERANCE = 1e-5
# well above the 10*EPS a perturbation could move a logit by
MIN_MARGIN = 1e-2
F64 = np.float64


class AssignmentChanged(AssertionError):
    pass


def _margin(d: np.ndarray) -> float:
    top = np.sort(d, axis=-3)
    return float((top[..., -1, :, :] - top[..., -2, :, :]).min())


def check_ilcm(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    state = ILCM(8, rng, F64)
    r = Tensor(rng.standard_normal((2, 8, 4, 4)))

    def fn(r, *params):
        return T.sum(ilcm_forward(state, r) * ilcm_forward(state, r))

    return grad_check(fn, [r] + state.parameters(), EPS)


def check_slcm(seed: int = 0) -> float:
    """Region pooling with the argmax assignment pinned at the probe point."""
    for attempt in range(100):
        rng = np.random.default_rng([seed, attempt])
        state = SLCM(8, 8, 3, rng, F64)
        r = Tensor(rng.standard_normal((2, 8, 8, 8)))
        with T.no_tape():
            d = state.head(r).data
        if _margin(d) > MIN_MARGIN:
            break
    base = group_regions(d)
    proj = rng.standard_normal((2, 8, 8, 8))

    def fn(r, *params):
        r_sl, dd = slcm_forward(state.head, r)
        if not np.array_equal(group_regions(dd), base):
            raise AssignmentChanged("argmax assignment moved under perturbation")
        return T.sum(r_sl * proj) + T.sum(dd * dd) * 0.1

    return grad_check(fn, [r] + state.parameters(), EPS)


def check_fusion(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    state = FusionState(8, 3, 2, rng, F64, dropout=0.0)
    r, r_il, r_sl = (Tensor(rng.standard_normal((2, 8, 2, 2))) for _ in range(3))
    gt = rng.integers(0, 3, size=(2, 16, 16))

    def fn(r, r_il, r_sl, *params):
        a_il = attend(similarity(r, r_il), r_il)
        a_sl = attend(similarity(r, r_sl), r_sl)
        return loss_O(classify(state, augment(state, r, a_il, a_sl)), gt)

    return grad_check(fn, [r, r_il, r_sl] + state.parameters(), EPS)


def check_loss(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    d = Tensor(rng.standard_normal((2, 3, 2, 2)))
    o = Tensor(rng.standard_normal((2, 3, 16, 16)))
    gt = rng.integers(0, 3, size=(2, 16, 16))
    gt[0, :2, :3] = 255

    def fn(d, o):
        return total_loss(loss_D(d, gt), loss_O(o, gt), 0.4)

    return grad_check(fn, [d, o], EPS)


def check_isnet(seed: int = 0) -> float:
    """Whole network on 2 x 3 x 16 x 16 images, C=8, K=3."""
    for attempt in range(100):
        rng = np.random.default_rng([seed, attempt])
        model = ISNet(ModelConfig(channels=8, num_classes=3, dropout=0.0, precision="float64", seed=seed + attempt), "isnet")
        x = Tensor(rng.random((2, 3, 16, 16)))
        with T.no_tape():
            _, d = model(x)
        if _margin(d.data) > MIN_MARGIN:
            break
    base = group_regions(d)
    gt = rng.integers(0, 3, size=(2, 16, 16))

    def fn(x, *params):
        o, dd = model(x)
        if not np.array_equal(group_regions(dd), base):
            raise AssignmentChanged("argmax assignment moved under perturbation")
        return total_loss(loss_D(dd, gt), loss_O(o, gt), 0.4)

    return grad_check(fn, [x] + model.parameters(), EPS)


SUITES: dict[str, Callable[[], float]] = {
    "ilcm": check_ilcm,
    "slcm": check_slcm,
    "fusion": check_fusion,
    "loss": check_loss,
    "isnet": check_isnet,
}


def run(module: str = "all") -> list[tuple[str, float, bool, float]]:
    """Rows of (suite, max relative error, passed, seconds)."""
    names = list(SUITES) if module == "all" else [module]
    rows = []
    for name in names:
        t0 = time.perf_counter()
        try:
            err = SUITES[name]()
        except AssignmentChanged:
            err = float("inf")
        rows.append((name, float(err), bool(err <= TOLERANCE), time.perf_counter() - t0))
    return rows
