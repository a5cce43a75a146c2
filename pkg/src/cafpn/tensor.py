"""Dense tensor primitives over numpy arrays.

Every image tensor uses the row-major ``batch x channels x height x width``
layout. Functions never mutate their inputs. Only float32 and float64 are
accepted; integer inputs are promoted to float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

from .counter import OpCounter, record

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand extents violate an operation's precondition."""


class NonFiniteError(ValueError):
    """An operation received NaN or infinite values it cannot handle."""


def as_tensor(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype not in FLOAT_DTYPES:
        if dtype is not None:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        arr = arr.astype(np.float64)
    if any(d <= 0 for d in arr.shape):
        raise ShapeError(f"extents must be positive, got {arr.shape}")
    return arr


def _require_ndim(x: np.ndarray, ndim: int, what: str) -> None:
    if x.ndim != ndim:
        raise ShapeError(f"{what} must be {ndim}-D, got shape {x.shape}")


def _require_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"operand shapes differ: {a.shape} vs {b.shape}")


@dataclass(frozen=True)
class ConvSpec:
    """Weights and geometry of a stride-1 2-D convolution.

    ``padding`` defaults to ``dilation * (K - 1) // 2`` so spatial size is
    preserved.
    """

    weight: np.ndarray
    bias: np.ndarray
    dilation: int = 1
    padding: int | None = field(default=None)

    def __post_init__(self):
        w = as_tensor(self.weight)
        _require_ndim(w, 4, "conv weight")
        out_ch, _, kh, kw = w.shape
        if kh != kw:
            raise ShapeError(f"kernel must be square, got {kh}x{kw}")
        if kh % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {kh}")
        b = as_tensor(self.bias)
        if b.shape != (out_ch,):
            raise ShapeError(f"bias shape {b.shape} does not match {out_ch} output channels")
        if self.dilation < 1:
            raise ValueError(f"dilation must be positive, got {self.dilation}")
        pad = self.dilation * (kh - 1) // 2 if self.padding is None else self.padding
        if pad < 0:
            raise ValueError(f"padding must be non-negative, got {pad}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "padding", pad)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        span = self.dilation * (self.kernel_size - 1)
        return h + 2 * self.padding - span, w + 2 * self.padding - span


def conv2d(x: np.ndarray, spec: ConvSpec, counter: OpCounter | None = None) -> np.ndarray:
    """Stride-1 dilated convolution with zero padding.

    Accumulates one tap at a time; each tap is a channel contraction over a
    shifted window of the padded input.
    """
    x = as_tensor(x)
    _require_ndim(x, 4, "conv input")
    b, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv expects {spec.in_channels} input channels, got {c}")
    ho, wo = spec.output_size(h, w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{w} too small for kernel footprint")
    p, d, k = spec.padding, spec.dilation, spec.kernel_size
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    weight = spec.weight.astype(np.result_type(x, spec.weight), copy=False)
    out = np.zeros((b, spec.out_channels, ho, wo), dtype=np.result_type(x, weight))
    for ky in range(k):
        for kx in range(k):
            window = xp[:, :, ky * d: ky * d + ho, kx * d: kx * d + wo]
            out += np.einsum("oc,bchw->bohw", weight[:, :, ky, kx], window, optimize=True)
    out += spec.bias.astype(out.dtype)[None, :, None, None]
    record(counter, b * spec.out_channels * c * k * k * ho * wo)
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)


ElementwiseKind = Literal["relu", "sigmoid", "add", "mul", "scale"]


def elementwise(
    x: np.ndarray,
    kind: ElementwiseKind,
    other: np.ndarray | None = None,
    alpha: float | None = None,
) -> np.ndarray:
    """Point-wise ``relu``, ``sigmoid``, ``add``, ``mul`` or ``scale``.

    Binary kinds require ``other`` with identical dims (no broadcasting).
    Non-finite inputs propagate unchanged.
    """
    x = as_tensor(x)
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "scale":
        if alpha is None:
            raise ValueError("scale needs alpha")
        return x * np.asarray(alpha, dtype=x.dtype)
    if kind in ("add", "mul"):
        if other is None:
            raise ValueError(f"{kind} needs a second operand")
        other = as_tensor(other)
        _require_same_shape(x, other)
        return x + other if kind == "add" else x * other
    raise ValueError(f"unknown elementwise kind {kind!r}")


def matmul(a: np.ndarray, b: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    _require_ndim(a, 2, "matmul lhs")
    _require_ndim(b, 2, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    record(counter, a.shape[0] * b.shape[1] * a.shape[1])
    return a @ b


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    x = as_tensor(logits)
    _require_ndim(x, 2, "softmax input")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("softmax_rows received non-finite logits")
    e = x - x.max(axis=1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=1, keepdims=True)
    return e


def l2_normalize_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Divide each row by its Euclidean norm plus ``eps``; zero rows stay zero."""
    x = as_tensor(x)
    _require_ndim(x, 2, "l2_normalize_rows input")
    return x / (np.linalg.norm(x, axis=1, keepdims=True) + eps)


def rescale(x: np.ndarray, mode: Literal["nearest_up_2x", "maxpool_down_2x"]) -> np.ndarray:
    x = as_tensor(x)
    _require_ndim(x, 4, "rescale input")
    if mode == "nearest_up_2x":
        return x.repeat(2, axis=2).repeat(2, axis=3)
    if mode == "maxpool_down_2x":
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool_down_2x needs even extents, got {h}x{w}")
        return x.reshape(b, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))
    raise ValueError(f"unknown rescale mode {mode!r}")


def channel_concat(inputs: Sequence[np.ndarray]) -> np.ndarray:
    if not inputs:
        raise ShapeError("channel_concat needs at least one input")
    arrs = [as_tensor(t) for t in inputs]
    for t in arrs:
        _require_ndim(t, 4, "channel_concat input")
    ref = arrs[0].shape
    for t in arrs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"batch/spatial mismatch: {t.shape} vs {ref}")
    return np.concatenate(arrs, axis=1)


def channel_stats(x: np.ndarray) -> np.ndarray:
    """Two-channel map of per-position channel mean (0) and channel max (1)."""
    x = as_tensor(x)
    _require_ndim(x, 4, "channel_stats input")
    return np.concatenate([x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)], axis=1)


def bilinear_sample(x: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``x`` (B, C, H, W) at fractional positions.

    ``ys`` and ``xs`` have shape (B, Ho, Wo) and give the row and column of
    every output position. Each of the four neighbouring corners that falls
    outside the input contributes zero. Returns (B, C, Ho, Wo).
    """
    x = as_tensor(x)
    _require_ndim(x, 4, "bilinear_sample input")
    ys, xs = np.asarray(ys, dtype=np.float64), np.asarray(xs, dtype=np.float64)
    if ys.shape != xs.shape or ys.ndim != 3 or ys.shape[0] != x.shape[0]:
        raise ShapeError(f"coordinate grids {ys.shape}/{xs.shape} do not fit input {x.shape}")
    if not (np.all(np.isfinite(ys)) and np.all(np.isfinite(xs))):
        raise NonFiniteError("bilinear_sample coordinates must be finite")
    b, c, h, w = x.shape
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = ys - y0
    fx = xs - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    channels_last = np.moveaxis(x, 1, -1)
    bidx = np.arange(b)[:, None, None]
    out = np.zeros(ys.shape + (c,), dtype=x.dtype)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yi = y0 + dy
            xi = x0 + dx
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            vals = channels_last[bidx, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            weight = np.where(valid, wy * wx, 0.0).astype(x.dtype)
            out += vals * weight[..., None]
    return np.moveaxis(out, -1, 1)


def group_norm(
    x: np.ndarray,
    groups: int,
    gamma: np.ndarray | None = None,
    beta: np.ndarray | None = None,
    eps: float = 1e-5,
) -> np.ndarray:
    x = as_tensor(x)
    _require_ndim(x, 4, "group_norm input")
    b, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"{c} channels are not divisible into {groups} groups")
    g = x.reshape(b, groups, -1)
    mean = g.mean(axis=2, keepdims=True)
    var = g.var(axis=2, keepdims=True)
    y = ((g - mean) / np.sqrt(var + eps)).reshape(b, c, h, w)
    if gamma is not None:
        y = y * np.asarray(gamma, dtype=y.dtype)[None, :, None, None]
    if beta is not None:
        y = y + np.asarray(beta, dtype=y.dtype)[None, :, None, None]
    return y


def finite_diff_jacobian(
    f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference Jacobian with shape ``(f(x).size, x.size)``."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    cols = []
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = np.array(f(x), dtype=np.float64).reshape(-1)
        flat[i] = orig - h
        fm = np.array(f(x), dtype=np.float64).reshape(-1)
        flat[i] = orig
        cols.append((fp - fm) / (2 * h))
    return np.stack(cols, axis=1)
