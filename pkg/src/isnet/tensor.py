"""Dense tensors on numpy with a define-by-run reverse-mode tape.

Every differentiable op records ``(output, parents, backward_fn)`` on the
active :class:`Tape`.  ``Tape.backward`` walks the records in exact reverse
order and leaves gradients on the tracked leaf tensors.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    >>> float(x.grad[0])
    6.0
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "no_tape",
    "current_tape",
    "single_threaded",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "relu",
    "matmul",
    "sum",
    "mean",
    "mean_spatial",
    "reshape",
    "permute",
    "concat",
    "concat_channels",
    "split",
    "split_channels",
    "where",
    "softmax_last",
    "log_softmax_last",
    "conv2d",
    "batch_norm",
    "upsample_bilinear",
    "upsample8x",
    "bilinear_matrix",
    "cross_entropy",
    "grad_check",
]


def _contig(a: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray turns 0-d arrays into shape (1,)
    return a if a.flags.c_contiguous else np.ascontiguousarray(a)


class Tensor:
    """Row-major dense array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = _contig(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# --------------------------------------------------------------------------
# tape


_local = threading.local()


def current_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed differentiable ops for one forward pass."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        self.records.append((out, parents, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(rec[0]) for rec in self.records}
        leaves: dict[int, Tensor] = {}
        for out, parents, fn in reversed(self.records):
            for p in parents:
                if p.requires_grad and id(p) not in produced:
                    leaves[id(p)] = p
            g = grads.pop(id(out), None)
            if g is None:
                continue
            pgrads = fn(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if loss.requires_grad and id(loss) not in produced:
            leaves[id(loss)] = loss
        for key, leaf in leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)


@contextlib.contextmanager
def no_tape():
    """Run ops without recording, e.g. for evaluation."""
    if not hasattr(_local, "stack"):
        _local.stack = []
    _local.stack.append(None)
    try:
        yield
    finally:
        _local.stack.pop()


@contextlib.contextmanager
def single_threaded():
    """Pin BLAS to one thread so reductions run in a fixed order."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = current_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` holds, else from ``b``; ``cond`` is constant."""
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(np.where(cond, g, 0), sa), _unbroadcast(np.where(cond, 0, g), sb)

    return _make(np.where(cond, a.data, b.data), (a, b), backward)


# --------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def mean_spatial(t: Tensor) -> Tensor:
    """Per-channel mean over the two trailing spatial axes: [..., C, h, w] -> [..., C, 1, 1]."""
    if t.ndim < 3:
        raise DimensionError(f"mean_spatial expects [..., C, h, w], got {t.shape}")
    h, w = t.shape[-2:]
    if h < 1 or w < 1:
        raise DimensionError(f"mean_spatial on empty spatial extent {t.shape}")
    return mean(t, axis=(-2, -1), keepdims=True)


# --------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} ({a.size} elements) to {shape}") from None
    return _make(_contig(out), (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make(_contig(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat of an empty list")
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat extent mismatch: {ref} vs {p.shape} on axis {axis}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), backward)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack [C_i, h, w] (or [B, C_i, h, w]) maps along channels in argument order."""
    return concat(parts, axis=-3)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    ax = axis % a.ndim
    if int(np.sum(sizes)) != a.shape[ax]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover axis of extent {a.shape[ax]}")
    out = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, start + n)
        idx = tuple(idx)

        def backward(g, idx=idx):
            full = np.zeros_like(a.data)
            full[idx] = g
            return (full,)

        out.append(_make(_contig(a.data[idx]), (a,), backward))
        start += n
    return out


def split_channels(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    return split(a, sizes, axis=-3)


# --------------------------------------------------------------------------
# softmax family


def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax_last(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward)


# --------------------------------------------------------------------------
# convolution, normalization, resampling


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [B, Ci, H, W] with ``w`` [Co, Ci, k, k]."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    B, Ci, H, W = x.shape
    Co, _, kh, kw = w.shape
    xd = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    cols = np.empty((B, Ci, kh, kw, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xd[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    cols = cols.reshape(B, Ci * kh * kw, Ho * Wo)
    wm = w.data.reshape(Co, -1)
    out = wm @ cols
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(B, Co, Ho, Wo)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(B, Co, Ho * Wo)
        gw = np.einsum("bol,bkl->ok", g2, cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (wm.T @ g2).reshape(B, Ci, kh, kw, Ho, Wo)
            gxp = np.zeros_like(xd)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    return _make(out, parents, backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: tuple[np.ndarray, np.ndarray] | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of [B, C, h, w] over (B, h, w).

    In training mode batch statistics are used and ``running`` (mean, var)
    arrays are updated in place.  In eval mode the running statistics are
    treated as constants.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batch_norm channel mismatch: input {x.shape}, scale {gamma.shape}")
    xd = x.data
    shape = (1, -1, 1, 1)
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if running is not None:
            n = xd.size // xd.shape[1]
            unbiased = var * (n / max(n - 1, 1))
            running[0][...] = (1 - momentum) * running[0] + momentum * mu
            running[1][...] = (1 - momentum) * running[1] + momentum * unbiased
    else:
        mu, var = running
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (xd - mu.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(shape)
        if training:
            m = xd.size // xd.shape[1]
            gx = (inv.reshape(shape) / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(shape)
        return gx, gg, gb

    return _make(out.astype(x.dtype), (x, gamma, beta), backward)


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """[n_out, n_in] weights of 1-D linear interpolation with half-pixel centres.

    Matches ``align_corners=False``: output sample ``o`` reads source
    coordinate ``(o + 0.5) * n_in / n_out - 0.5`` clamped at the borders.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0 if i1 != i0 else 0.0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of the two trailing axes."""
    h, w = x.shape[-2:]
    mh = bilinear_matrix(h, out_h, x.dtype)
    mw = bilinear_matrix(w, out_w, x.dtype)
    out = mh @ x.data @ mw.T
    return _make(out, (x,), lambda g: (mh.T @ g @ mw,))


def upsample8x(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    return upsample_bilinear(x, 8 * h, 8 * w)


def cross_entropy(logits: Tensor, target: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean per-pixel cross entropy of [B, K, H, W] logits against [B, H, W] labels.

    Ignored pixels contribute nothing to the sum or to the denominator; an
    all-ignored target yields 0 with zero gradient.
    """
    target = np.asarray(target)
    if logits.ndim != 4 or target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"cross_entropy extent mismatch: logits {logits.shape}, target {target.shape}")
    K = logits.shape[1]
    valid = target != ignore_index
    if np.any(target[valid] >= K) or np.any(target[valid] < 0):
        from .errors import DataError

        raise DataError(f"target label outside [0, {K}) and not ignore ({ignore_index})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    safe = np.where(valid, target, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    n = int(valid.sum())
    total = -(picked * valid).sum()
    out = np.asarray(total / n if n else 0.0, dtype=logits.dtype)

    def backward(g):
        if n == 0:
            return (np.zeros_like(logits.data),)
        p = np.exp(logp)
        np.put_along_axis(p, safe[:, None], np.take_along_axis(p, safe[:, None], axis=1) - 1.0, axis=1)
        return (p * valid[:, None] * (g / n),)

    return _make(out, (logits,), backward)


# --------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[..., Tensor], inputs: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn(*inputs)`` must return a scalar tensor and be deterministic.  The
    error per component is ``|a - cd| / max(|a|, |cd|, 1e-12)``.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
    with Tape() as tape:
        loss = fn(*inputs)
    tape.backward(loss)
    analytic = [t.grad.copy() for t in inputs]
    worst = 0.0
    with no_tape():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            af = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(np.asarray(fn(*inputs).data).reshape(()))
                flat[i] = orig - eps
                fm = float(np.asarray(fn(*inputs).data).reshape(()))
                flat[i] = orig
                cd = (fp - fm) / (2 * eps)
                err = abs(af[i] - cd) / max(abs(af[i]), abs(cd), 1e-12)
                worst = max(worst, err)
    return worst
