"""SGD with the poly schedule, evaluation, and the four-variant ablation."""

from __future__ import annotations

import contextlib
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, capture, load_state, restore
from .config import load_config
from .data import DatasetSpec, Sample, augment_train, batch, generate, load_split
from .errors import ConfigError, DataError, DimensionError, IsnetError, UsageError
from .fusion import VARIANTS, ISNet
from .layers import ModelConfig
from .losses import ConfusionMatrix, accumulate_confusion, loss_D, loss_O, miou, total_loss
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

# Reference mIoU of the four variants on ADE20K val with ResNet-50, for
# printing next to desk-scale results only.
REFERENCE_ABLATION = {"baseline": 36.96, "ilcm": 42.50, "slcm": 42.89, "isnet": 44.09}

NO_DECAY = ("bias", "gamma", "beta")


class TrainingDiverged(IsnetError):
    exit_code = 1


@dataclass
class TrainConfig:
    variant: str = "isnet"
    base_lr: float = 0.01
    weight_decay: float = 0.0005
    momentum: float = 0.9
    batch_size: int = 8
    iterations: int = 2000
    crop_size: int = 64
    alpha: float = 0.4
    channels: int = 64
    num_classes: int = 5
    dropout: float = 0.1
    seed: int = 0
    eval_interval: int = 0
    output_dir: str = ""
    dataset: str = ""  # DatasetSpec config file; empty -> defaults
    data_dir: str = ""  # read ISEG files from here instead of generating
    deterministic: bool = True
    augment: bool = True  # off: full-size samples, no scaling or flipping

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        if self.crop_size % 8 or self.crop_size < 8:
            raise ConfigError(f"crop_size {self.crop_size} must be a positive multiple of 8")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {', '.join(VARIANTS)}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            channels=self.channels,
            num_classes=self.num_classes,
            alpha=self.alpha,
            dropout=self.dropout,
            seed=self.seed,
        )


def poly_lr(base: float, it: int, total: int) -> float:
    if not 0 <= it <= total:
        raise UsageError(f"iteration {it} outside [0, {total}]")
    return base * (1.0 - it / total) ** 0.9


def sgd_step(
    params: dict[str, Tensor],
    lr: float,
    momentum: float,
    weight_decay: float,
    velocity: dict[str, np.ndarray],
) -> None:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v.

    Biases and normalization scale/shift skip weight decay.
    """
    for name, p in params.items():
        if p.grad is None:
            continue
        if p.grad.shape != p.shape:
            raise DimensionError(f"gradient {p.grad.shape} does not match parameter {name} {p.shape}")
        g = p.grad
        if weight_decay and name.rsplit(".", 1)[-1] not in NO_DECAY:
            g = g + p.data.dtype.type(weight_decay) * p.data
        v = velocity.get(name)
        v = g.copy() if v is None else p.data.dtype.type(momentum) * v + g
        velocity[name] = v
        p.data -= p.data.dtype.type(lr) * v


@dataclass
class Datasets:
    train: list[Sample]
    val: list[Sample]
    num_classes: int


def load_datasets(cfg: TrainConfig, spec: DatasetSpec | None = None) -> Datasets:
    if cfg.data_dir:
        if not Path(cfg.data_dir).is_dir():
            raise DataError(f"dataset directory {cfg.data_dir} does not exist")
        train, val = load_split(cfg.data_dir, "train"), load_split(cfg.data_dir, "val")
        K = train[0].num_classes
    else:
        if spec is None:
            spec = load_config(DatasetSpec, cfg.dataset) if cfg.dataset else DatasetSpec(num_classes=cfg.num_classes)
        train = [generate(spec, i) for i in spec.split_indices("train")]
        val = [generate(spec, i) for i in spec.split_indices("val")]
        K = spec.num_classes
    if K != cfg.num_classes:
        raise ConfigError(f"data has {K} classes but the model is configured for {cfg.num_classes}")
    return Datasets(train, val, K)


def predict(model: ISNet, images: np.ndarray) -> np.ndarray:
    with T.no_tape():
        o, _ = model(Tensor(images))
    return np.argmax(o.data, axis=-3)


def evaluate(model: ISNet, samples: list[Sample], batch_size: int = 16) -> ConfusionMatrix:
    """Single-scale evaluation at native size; returns the confusion matrix."""
    K = model.config.num_classes
    for s in samples:
        if s.num_classes != K:
            raise ConfigError(f"sample has {s.num_classes} classes, checkpoint has {K}")
    was_training = model.training
    model.eval()
    cm = ConfusionMatrix(K)
    try:
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            by_shape: dict[tuple, list[Sample]] = {}
            for s in chunk:
                by_shape.setdefault(s.image.shape, []).append(s)
            for group in by_shape.values():
                x, y = batch(group)
                cm = accumulate_confusion(predict(model, x), y, cm)
    finally:
        model.train(was_training)
    return cm


def evaluate_checkpoint(ck: Checkpoint, samples: list[Sample]) -> tuple[list[float | None], float]:
    return miou(evaluate(restore(ck), samples))


@dataclass
class TrainResult:
    model: ISNet
    checkpoint: Checkpoint
    log: list[str] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    final_miou: float | None = None


def train_step(model: ISNet, cfg: TrainConfig, data: Datasets, it: int, velocity: dict) -> tuple[float, float]:
    """One update at 0-based iteration ``it``; returns (loss, lr)."""
    rng = np.random.default_rng([cfg.seed, it])
    picks = rng.integers(0, len(data.train), size=cfg.batch_size)
    crop = (cfg.crop_size, cfg.crop_size)
    if cfg.augment:
        x, y = batch([augment_train(data.train[i], rng, crop) for i in picks])
    else:
        x, y = batch([data.train[i] for i in picks])
    model.train()
    model.set_dropout_rng(rng)
    params = dict(model.named_parameters())
    with Tape() as tape:
        o, d = model(Tensor(x, dtype=model.config.dtype))
        l_o = loss_O(o, y)
        l_d = loss_D(d, y) if d is not None else None
        loss = total_loss(l_d, l_o, cfg.alpha)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at iteration {it + 1}")
    tape.backward(loss)
    lr = poly_lr(cfg.base_lr, it, cfg.iterations)
    sgd_step(params, lr, cfg.momentum, cfg.weight_decay, velocity)
    return value, lr


def train(
    cfg: TrainConfig,
    spec: DatasetSpec | None = None,
    resume: Checkpoint | None = None,
    data: Datasets | None = None,
    stop_at: int | None = None,
) -> TrainResult:
    """Run ``cfg.iterations`` updates (or up to ``stop_at``) and return the final state.

    Every random choice of iteration ``it`` comes from a generator seeded by
    ``(seed, it)``, so a resumed run replays exactly.
    """
    data = data or load_datasets(cfg, spec)
    model = ISNet(cfg.model_config(), cfg.variant)
    velocity: dict[str, np.ndarray] = {}
    start = 0
    if resume is not None:
        load_state(model, resume)
        velocity = {k: v.copy() for k, v in resume.momentum.items()}
        start = resume.iteration
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    result = TrainResult(model, Checkpoint())
    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    guard = T.single_threaded() if cfg.deterministic else contextlib.nullcontext()
    with guard:
        for it in range(start, end):
            loss, lr = train_step(model, cfg, data, it, velocity)
            line = f"{it + 1}\t{loss!r}\t{lr!r}"
            if cfg.eval_interval and (it + 1) % cfg.eval_interval == 0:
                _, m = miou(evaluate(model, data.val))
                line += f"\t{m!r}"
                result.final_miou = m
            result.losses.append(loss)
            result.log.append(line)
            log.debug(line)
        evaluated_last = cfg.eval_interval and end % cfg.eval_interval == 0 and end > start
        if end == cfg.iterations and data.val and not evaluated_last:
            _, result.final_miou = miou(evaluate(model, data.val))
    result.checkpoint = capture(model, end, cfg.seed, velocity)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint.save(out_dir / "final.isnc")
        with open(out_dir / "metrics.tsv", "a", encoding="utf-8") as fh:
            fh.write("".join(line + "\n" for line in result.log))
    return result


# --------------------------------------------------------------------------
# ablation


def _ablation_job(args) -> tuple[str, int, float]:
    cfg, spec = args
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    res = train(cfg, spec)
    return cfg.variant, cfg.seed, float(res.final_miou)


def ablation(
    cfg: TrainConfig,
    spec: DatasetSpec | None = None,
    seeds: tuple[int, ...] = (0, 1, 2),
    workers: int | None = None,
) -> list[tuple[str, float, list[float]]]:
    """Train all four variants per seed; rows are (variant, median val mIoU, per-seed mIoU)."""
    jobs = [(replace(cfg, variant=v, seed=s, output_dir=""), spec) for v in VARIANTS for s in seeds]
    workers = workers or os.cpu_count() or 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablation_job, jobs))
    else:
        results = [_ablation_job(j) for j in jobs]
    rows = []
    for v in VARIANTS:
        scores = [m for var, _, m in results if var == v]
        rows.append((v, float(np.median(scores)), scores))
    return rows


def format_ablation(rows) -> str:
    lines = ["variant\tmIoU\tseeds\treference_mIoU(ADE20K, not comparable)"]
    for v, med, scores in rows:
        per = ",".join(f"{s:.4f}" for s in scores)
        lines.append(f"{v}\t{med:.4f}\t{per}\t{REFERENCE_ABLATION[v]:.2f}")
    return "\n".join(lines)
