"""ISNC checkpoint files.

Layout: ``b"ISNC"``, version u8, then records to end of file, each
``name_len u16 | utf-8 name | rank u8 | extents u32 * rank | float32 payload``,
all little-endian.  Record names carry a section prefix (``param/``,
``buffer/``, ``momentum/``, ``meta/``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .fusion import VARIANTS, ISNet
from .layers import ModelConfig

MAGIC = b"ISNC"
VERSION = 1


def encode_records(records: list[tuple[str, np.ndarray]]) -> bytes:
    out = [MAGIC, struct.pack("<B", VERSION)]
    for name, arr in records:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_records(buf: bytes) -> list[tuple[str, np.ndarray]]:
    if len(buf) < 5:
        raise FormatError("truncated header", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    if buf[4] != VERSION:
        raise FormatError(f"unsupported version {buf[4]}", 4)
    pos = 5
    records = []

    def need(n: int, what: str) -> None:
        if pos + n > len(buf):
            raise FormatError(f"truncated {what}", pos)

    while pos < len(buf):
        need(2, "name length")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(n, "name")
        try:
            name = buf[pos : pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("name is not utf-8", pos) from None
        pos += n
        need(1, "rank")
        rank = buf[pos]
        pos += 1
        need(4 * rank, "extents")
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        need(4 * count, f"payload of {name!r}")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
        records.append((name, arr))
    return records


@dataclass
class Checkpoint:
    iteration: int = 0
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, float] = field(default_factory=dict)

    def to_records(self) -> list[tuple[str, np.ndarray]]:
        recs = [("meta/iteration", np.array(self.iteration, dtype=np.float32))]
        recs += [(f"meta/{k}", np.array(v, dtype=np.float32)) for k, v in self.meta.items()]
        recs += [(f"param/{k}", v) for k, v in self.params.items()]
        recs += [(f"buffer/{k}", v) for k, v in self.buffers.items()]
        recs += [(f"momentum/{k}", v) for k, v in self.momentum.items()]
        return recs

    @classmethod
    def from_records(cls, records) -> "Checkpoint":
        ck = cls()
        for name, arr in records:
            section, _, key = name.partition("/")
            if name == "meta/iteration":
                ck.iteration = int(arr)
            elif section == "meta":
                ck.meta[key] = float(arr)
            elif section == "param":
                ck.params[key] = arr
            elif section == "buffer":
                ck.buffers[key] = arr
            elif section == "momentum":
                ck.momentum[key] = arr
            else:
                raise FormatError(f"unknown record section in {name!r}")
        return ck

    def to_bytes(self) -> bytes:
        return encode_records(self.to_records())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        return cls.from_records(decode_records(buf))

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            buf = Path(path).read_bytes()
        except OSError as exc:
            raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
        return cls.from_bytes(buf)


def model_meta(model: ISNet, seed: int) -> dict[str, float]:
    cfg = model.config
    return {
        "seed": seed,
        "channels": cfg.channels,
        "num_classes": cfg.num_classes,
        "aux_hidden": cfg.hidden,
        "dropout": cfg.dropout,
        "alpha": cfg.alpha,
        "variant": VARIANTS.index(model.variant),
    }


def capture(model: ISNet, iteration: int, seed: int, velocity: dict[str, np.ndarray] | None = None) -> Checkpoint:
    return Checkpoint(
        iteration=iteration,
        params={k: p.data.astype(np.float32) for k, p in model.named_parameters()},
        buffers={k: b.astype(np.float32) for k, b in model.named_buffers()},
        momentum={k: v.astype(np.float32) for k, v in (velocity or {}).items()},
        meta=model_meta(model, seed),
    )


def restore(ck: Checkpoint) -> ISNet:
    """Rebuild the float32 model a checkpoint was taken from."""
    m = ck.meta
    try:
        cfg = ModelConfig(
            channels=int(m["channels"]),
            num_classes=int(m["num_classes"]),
            aux_hidden=int(m["aux_hidden"]),
            dropout=float(np.float32(m["dropout"])),
            alpha=float(np.float32(m["alpha"])),
            seed=int(m["seed"]),
        )
        variant = VARIANTS[int(m["variant"])]
    except (KeyError, IndexError):
        raise ConfigError("checkpoint is missing model metadata") from None
    model = ISNet(cfg, variant)
    load_state(model, ck)
    return model


def load_state(model: ISNet, ck: Checkpoint) -> None:
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    if set(params) != set(ck.params):
        raise ConfigError("checkpoint parameters do not match the model structure")
    for k, p in params.items():
        if p.shape != ck.params[k].shape:
            raise ConfigError(f"parameter {k}: checkpoint shape {ck.params[k].shape} vs model {p.shape}")
        p.data[...] = ck.params[k]
    for k, b in buffers.items():
        if k in ck.buffers:
            b[...] = ck.buffers[k]
