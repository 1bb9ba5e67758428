"""Synthetic segmentation scenes with controlled class co-occurrence.

Each image draws a *scene*: a set of object classes that are always present
plus optional classes included independently.  Class 0 is background.  In
the default 5-class layout, classes 3 and 4 share one colour and can only
be told apart by which other class appears in the same image.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DimensionError, FormatError
from .tensor import bilinear_matrix

IGNORE = 255
MAGIC = b"ISEG"
VERSION = 1
HEADER = struct.Struct("<4sBIIH")

DEFAULT_SCENES = "0.4: 1 3@0.8 | 0.4: 2 4@0.8 | 0.2: 1 2"


@dataclass(frozen=True)
class Scene:
    prob: float
    always: tuple[int, ...]
    optional: tuple[tuple[int, float], ...] = ()


def parse_scenes(text: str) -> list[Scene]:
    """``p: a b c@q | ...`` -> scenes; ``c@q`` marks an optional class kept with probability q."""
    scenes = []
    for chunk in text.split("|"):
        if not chunk.strip():
            continue
        try:
            prob, body = chunk.split(":", 1)
            always, optional = [], []
            for tok in body.split():
                if "@" in tok:
                    c, q = tok.split("@")
                    optional.append((int(c), float(q)))
                else:
                    always.append(int(tok))
            scenes.append(Scene(float(prob), tuple(always), tuple(optional)))
        except ValueError:
            raise ConfigError(f"cannot parse scene {chunk.strip()!r}") from None
    return scenes


def default_palette(num_classes: int) -> np.ndarray:
    if num_classes == 5:
        return np.array(
            [
                [0.15, 0.15, 0.15],
                [0.85, 0.25, 0.20],
                [0.20, 0.35, 0.85],
                [0.35, 0.80, 0.30],
                [0.35, 0.80, 0.30],
            ]
        )
    rows = [[0.15, 0.15, 0.15]]
    for k in range(1, num_classes):
        rows.append(colorsys.hsv_to_rgb((k * 0.618034) % 1.0, 0.7, 0.9))
    return np.array(rows)


@dataclass
class DatasetSpec:
    seed: int = 0
    count: int = 640
    size: int = 64
    num_classes: int = 5
    noise: float = 0.05
    scenes: str = ""  # empty -> default layout for K=5, else independent presence 0.5
    min_shape: int = 6
    max_shape: int = 32
    val_every: int = 2  # index % val_every == val_every - 1 goes to val

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.size % 8:
            raise ConfigError(f"size {self.size} must be a multiple of 8")
        if not 1 <= self.min_shape <= self.max_shape <= self.size:
            raise ConfigError("need 1 <= min_shape <= max_shape <= size")
        if self.val_every < 2:
            raise ConfigError("val_every must be at least 2")
        for s in self.scene_list():
            if not 0 <= s.prob <= 1 or any(not 0 <= q <= 1 for _, q in s.optional):
                raise ConfigError("scene probabilities must lie in [0, 1]")
            for c in s.always + tuple(c for c, _ in s.optional):
                if not 1 <= c < self.num_classes:
                    raise ConfigError(f"scene class {c} outside [1, {self.num_classes})")
        if abs(sum(s.prob for s in self.scene_list()) - 1.0) > 1e-9:
            raise ConfigError("scene probabilities must sum to 1")

    def scene_list(self) -> list[Scene]:
        if self.scenes:
            return parse_scenes(self.scenes)
        if self.num_classes == 5:
            return parse_scenes(DEFAULT_SCENES)
        return [Scene(1.0, (), tuple((c, 0.5) for c in range(1, self.num_classes)))]

    def palette(self) -> np.ndarray:
        return default_palette(self.num_classes)

    def cooccurrence(self) -> np.ndarray:
        """P(class i and class j both appear); the diagonal is P(class i appears)."""
        K = self.num_classes
        table = np.zeros((K, K))
        for s in self.scene_list():
            q = np.zeros(K)
            q[0] = 1.0
            for c in s.always:
                q[c] = 1.0
            for c, p in s.optional:
                q[c] = 1 - (1 - q[c]) * (1 - p)
            pair = np.outer(q, q)
            np.fill_diagonal(pair, q)
            table += s.prob * pair
        return table

    def split_indices(self, split: str) -> list[int]:
        if split not in ("train", "val"):
            raise DataError(f"unknown split {split!r}")
        is_val = split == "val"
        return [i for i in range(self.count) if (i % self.val_every == self.val_every - 1) == is_val]


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    label: np.ndarray  # [H, W] uint8, class index or 255
    num_classes: int = 5
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3 or self.image.shape[1:] != self.label.shape:
            raise DimensionError(f"image {self.image.shape} and label {self.label.shape} disagree")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Sample)
            and self.num_classes == other.num_classes
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.label, other.label)
        )


def _shape_mask(rng: np.random.Generator, size: int, lo: int, hi: int) -> np.ndarray:
    h = int(rng.integers(lo, hi + 1))
    w = int(rng.integers(lo, hi + 1))
    y0 = int(rng.integers(0, size - h + 1))
    x0 = int(rng.integers(0, size - w + 1))
    mask = np.zeros((size, size), dtype=bool)
    if rng.random() < 0.5:
        mask[y0 : y0 + h, x0 : x0 + w] = True
    else:
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        cy, cx = y0 + h / 2, x0 + w / 2
        mask = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
        if not mask.any():
            mask[int(cy), int(cx)] = True
    return mask


def generate(spec: DatasetSpec, index: int) -> Sample:
    """Sample ``index`` of the dataset; a pure function of (spec, index)."""
    if not 0 <= index < spec.count:
        raise DataError(f"index {index} outside dataset of {spec.count}")
    rng = np.random.default_rng([spec.seed, index])
    scenes = spec.scene_list()
    s = scenes[int(rng.choice(len(scenes), p=[sc.prob for sc in scenes]))]
    classes = list(s.always) + [c for c, q in s.optional if rng.random() < q]
    classes = list(dict.fromkeys(classes))
    rng.shuffle(classes)
    label = np.zeros((spec.size, spec.size), dtype=np.uint8)
    for _ in range(100):
        label[...] = 0
        for c in classes:
            label[_shape_mask(rng, spec.size, spec.min_shape, spec.max_shape)] = c
        visible = set(np.unique(label).tolist())
        if 0 in visible and all(c in visible for c in classes):
            break
    else:
        raise DataError(f"could not place visible shapes for index {index}")
    image = spec.palette()[label].transpose(2, 0, 1)
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image, label, spec.num_classes, {"index": index, "classes": sorted(classes)})


def resize_label_nearest(label: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    H, W = label.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * H / out_h).astype(np.int64), H - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * W / out_w).astype(np.int64), W - 1)
    return label[rows[:, None], cols[None, :]]


def resize_image_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _, H, W = image.shape
    mh = bilinear_matrix(H, out_h)
    mw = bilinear_matrix(W, out_w)
    return (mh @ image.astype(np.float64) @ mw.T).astype(image.dtype)


def flip(sample: Sample) -> Sample:
    return Sample(
        np.ascontiguousarray(sample.image[:, :, ::-1]),
        np.ascontiguousarray(sample.label[:, ::-1]),
        sample.num_classes,
        dict(sample.meta),
    )


def augment_train(
    sample: Sample,
    rng: np.random.Generator,
    crop: tuple[int, int] = (64, 64),
    scale_range: tuple[float, float] = (0.5, 2.0),
    flip_prob: float = 0.5,
) -> Sample:
    """Random scale, pad-then-crop to ``crop`` and a left-right flip."""
    ch, cw = crop
    if ch % 8 or cw % 8:
        raise ConfigError(f"crop {crop} must be a multiple of 8")
    _, H, W = sample.image.shape
    s = rng.uniform(*scale_range) if scale_range[0] != scale_range[1] else scale_range[0]
    nh, nw = max(1, int(round(H * s))), max(1, int(round(W * s)))
    if (nh, nw) != (H, W):
        image = resize_image_bilinear(sample.image, nh, nw)
        label = resize_label_nearest(sample.label, nh, nw)
    else:
        image, label = sample.image, sample.label
    ph, pw = max(ch, nh), max(cw, nw)
    if (ph, pw) != (nh, nw):
        image = np.pad(image, ((0, 0), (0, ph - nh), (0, pw - nw)))
        label = np.pad(label, ((0, ph - nh), (0, pw - nw)), constant_values=IGNORE)
    y = int(rng.integers(0, ph - ch + 1))
    x = int(rng.integers(0, pw - cw + 1))
    out = Sample(
        np.ascontiguousarray(image[:, y : y + ch, x : x + cw]),
        np.ascontiguousarray(label[y : y + ch, x : x + cw]),
        sample.num_classes,
        dict(sample.meta),
    )
    if flip_prob > 0 and rng.random() < flip_prob:
        out = flip(out)
    return out


def batch(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise DimensionError("cannot batch zero samples")
    ref = samples[0].image.shape
    for s in samples:
        if s.image.shape != ref:
            raise DimensionError(f"cannot batch extents {ref} and {s.image.shape}")
    return np.stack([s.image for s in samples]), np.stack([s.label for s in samples])


def unbatch(images: np.ndarray, labels: np.ndarray, num_classes: int = 5) -> list[Sample]:
    return [Sample(images[i], labels[i], num_classes) for i in range(images.shape[0])]


# --------------------------------------------------------------------------
# ISEG files


def encode_sample(sample: Sample) -> bytes:
    _, H, W = sample.image.shape
    return (
        HEADER.pack(MAGIC, VERSION, H, W, sample.num_classes)
        + sample.image.astype("<f4").tobytes()
        + sample.label.astype(np.uint8).tobytes()
    )


def decode_sample(buf: bytes) -> Sample:
    if len(buf) < HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, H, W, K = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    n_img = 3 * H * W * 4
    need = HEADER.size + n_img + H * W
    if len(buf) < need:
        off = HEADER.size if len(buf) < HEADER.size + n_img else HEADER.size + n_img
        raise FormatError(f"truncated payload: {len(buf)} of {need} bytes", off)
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes", need)
    image = np.frombuffer(buf, dtype="<f4", count=3 * H * W, offset=HEADER.size).reshape(3, H, W)
    label = np.frombuffer(buf, dtype=np.uint8, count=H * W, offset=HEADER.size + n_img).reshape(H, W)
    return Sample(image.astype(np.float32), label.copy(), K)


def save_sample(path: str | Path, sample: Sample) -> None:
    Path(path).write_bytes(encode_sample(sample))


def load_sample(path: str | Path) -> Sample:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    return decode_sample(buf)


def sample_path(root: str | Path, split: str, index: int) -> Path:
    return Path(root) / split / f"{index:06d}.iseg"


def write_dataset(spec: DatasetSpec, root: str | Path) -> dict[str, int]:
    counts = {}
    for split in ("train", "val"):
        (Path(root) / split).mkdir(parents=True, exist_ok=True)
        idx = spec.split_indices(split)
        for i in idx:
            save_sample(sample_path(root, split, i), generate(spec, i))
        counts[split] = len(idx)
    return counts


def load_split(root: str | Path, split: str) -> list[Sample]:
    folder = Path(root) / split
    if not folder.is_dir():
        raise DataError(f"no split directory {folder}")
    files = sorted(folder.glob("*.iseg"))
    if not files:
        raise DataError(f"no .iseg files in {folder}")
    return [load_sample(f) for f in files]
