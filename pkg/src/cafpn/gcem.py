"""Global content extraction over the topmost backbone map.

Each block compresses its densely connected input with a 1x1 conv, applies a
modulated deformable 3x3 conv at the block's dilation and refines the result
with a residual spatial attention gate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .counter import OpCounter
from .tensor import (
    ConvSpec,
    ShapeError,
    as_tensor,
    bilinear_sample,
    channel_concat,
    channel_stats,
    conv2d,
    sigmoid,
)

KERNEL = 3
TAPS = KERNEL * KERNEL


class GcemError(ShapeError):
    def __init__(self, block: int, message: str):
        super().__init__(f"GCEM block {block}: {message}")
        self.block = block


@dataclass(frozen=True)
class GcemConfig:
    in_channels: int
    compress_channels: int = 512
    block_channels: int = 256
    num_blocks: int = 5
    dilations: tuple[int, ...] = field(default=(1, 2, 3, 4, 5))

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(self.dilations))
        if len(self.dilations) != self.num_blocks:
            raise ValueError(f"{len(self.dilations)} dilations for {self.num_blocks} blocks")
        if any(d < 1 for d in self.dilations):
            raise ValueError("dilations must be positive")

    def compressor_width(self, block: int) -> int:
        """Input width of block ``block``'s compressor (blocks count from 1)."""
        if not 1 <= block <= self.num_blocks:
            raise IndexError(block)
        return self.in_channels + self.block_channels * (block - 1)


@dataclass(frozen=True)
class DcnV2Params:
    """Main 3x3 weights plus offset (2*9 ch) and mask (9 ch) predictors.

    Offset channel ``2k`` holds the row shift and ``2k + 1`` the column shift
    of tap ``k``; taps are numbered row-major over the 3x3 grid.
    """

    main: ConvSpec
    offset: ConvSpec
    mask: ConvSpec

    def __post_init__(self):
        if self.main.kernel_size != KERNEL:
            raise ShapeError(f"deformable kernel must be {KERNEL}x{KERNEL}")
        if self.offset.out_channels != 2 * TAPS:
            raise ShapeError(f"offset predictor emits {self.offset.out_channels} channels, need {2 * TAPS}")
        if self.mask.out_channels != TAPS:
            raise ShapeError(f"mask predictor emits {self.mask.out_channels} channels, need {TAPS}")
        if not self.main.in_channels == self.offset.in_channels == self.mask.in_channels:
            raise ShapeError("predictors must read the same input as the main conv")

    @property
    def dilation(self) -> int:
        return self.main.dilation


@dataclass(frozen=True)
class GcemBlockParams:
    compress: ConvSpec
    dcn: DcnV2Params
    sam: ConvSpec


def dcn_v2(x: np.ndarray, params: DcnV2Params, offsets: np.ndarray, mask: np.ndarray,
           counter: OpCounter | None = None) -> np.ndarray:
    """Modulated deformable 3x3 convolution, stride 1, spatial size preserved.

    ``mask`` must already lie in [0, 1].
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"dcn_v2 input must be 4-D, got {x.shape}")
    b, c, h, w = x.shape
    if c != params.main.in_channels:
        raise ShapeError(f"dcn_v2 expects {params.main.in_channels} channels, got {c}")
    offsets, mask = as_tensor(offsets), as_tensor(mask)
    if offsets.shape != (b, 2 * TAPS, h, w):
        raise ShapeError(f"offsets shape {offsets.shape}, expected {(b, 2 * TAPS, h, w)}")
    if mask.shape != (b, TAPS, h, w):
        raise ShapeError(f"mask shape {mask.shape}, expected {(b, TAPS, h, w)}")
    d = params.dilation
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    weight = params.main.weight
    out = np.zeros((b, params.main.out_channels, h, w), dtype=np.result_type(x, weight))
    for k in range(TAPS):
        gy, gx = k // KERNEL - 1, k % KERNEL - 1
        ys = rows[None] + d * gy + offsets[:, 2 * k]
        xs = cols[None] + d * gx + offsets[:, 2 * k + 1]
        sampled = bilinear_sample(x, ys, xs) * mask[:, k: k + 1]
        out += np.einsum("oc,bchw->bohw", weight[:, :, gy + 1, gx + 1], sampled, optimize=True)
    out += params.main.bias[None, :, None, None]
    if counter is not None:
        counter.mac(b * params.main.out_channels * c * TAPS * h * w)
    return out


def predict_offsets_mask(x: np.ndarray, params: DcnV2Params,
                         counter: OpCounter | None = None) -> tuple[np.ndarray, np.ndarray]:
    offsets = conv2d(x, params.offset, counter)
    mask = sigmoid(conv2d(x, params.mask, counter))
    return offsets, mask


def residual_sam(x: np.ndarray, sam_conv: ConvSpec, counter: OpCounter | None = None) -> np.ndarray:
    """``x + x * sigmoid(conv(channel mean/max of x))``, the gate broadcast over channels."""
    if sam_conv.in_channels != 2 or sam_conv.out_channels != 1:
        raise ShapeError(
            f"spatial attention conv must be 2 -> 1 channels, got {sam_conv.in_channels} -> {sam_conv.out_channels}")
    x = as_tensor(x)
    gate = sigmoid(conv2d(channel_stats(x), sam_conv, counter))
    return x + x * gate


def gcem_block(x: np.ndarray, params: GcemBlockParams, counter: OpCounter | None = None) -> np.ndarray:
    compressed = conv2d(x, params.compress, counter)
    offsets, mask = predict_offsets_mask(compressed, params.dcn, counter)
    deformed = dcn_v2(compressed, params.dcn, offsets, mask, counter)
    return residual_sam(deformed, params.sam, counter)


def gcem_forward(topmost: np.ndarray, config: GcemConfig, blocks: list[GcemBlockParams],
                 counter: OpCounter | None = None, trace: list | None = None) -> np.ndarray:
    """Run the densely connected blocks and return the last block's output.

    If ``trace`` is a list, one dict per block is appended with its
    compressor input width and output.
    """
    topmost = as_tensor(topmost)
    if topmost.ndim != 4 or topmost.shape[1] != config.in_channels:
        raise ShapeError(f"GCEM expects {config.in_channels} input channels, got shape {topmost.shape}")
    if len(blocks) != config.num_blocks:
        raise ValueError(f"{len(blocks)} block parameter sets for {config.num_blocks} blocks")
    outputs: list[np.ndarray] = []
    for i, params in enumerate(blocks, start=1):
        x_in = channel_concat([topmost, *outputs])
        expected = config.compressor_width(i)
        try:
            if params.compress.in_channels != expected:
                raise ShapeError(f"compressor reads {params.compress.in_channels} channels, dense input has {expected}")
            if params.compress.out_channels != config.compress_channels:
                raise ShapeError(f"compressor emits {params.compress.out_channels}, expected {config.compress_channels}")
            if params.dcn.main.out_channels != config.block_channels:
                raise ShapeError(f"deformable conv emits {params.dcn.main.out_channels}, expected {config.block_channels}")
            if params.dcn.dilation != config.dilations[i - 1]:
                raise ShapeError(f"dilation {params.dcn.dilation}, expected {config.dilations[i - 1]}")
            out = gcem_block(x_in, params, counter)
        except ShapeError as exc:
            raise GcemError(i, str(exc)) from exc
        if trace is not None:
            trace.append({"block": i, "compressor_width": x_in.shape[1], "output": out})
        outputs.append(out)
    return outputs[-1]


def init_gcem(rng: np.random.Generator, config: GcemConfig, dtype=np.float64,
              zero_bias: bool = False) -> list[GcemBlockParams]:
    """Seeded block parameters: uniform main/compress/SAM convs, zeroed predictors."""

    def uniform(out_ch, in_ch, k):
        bound = 1.0 / np.sqrt(in_ch * k * k)
        w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k)).astype(dtype)
        b = np.zeros(out_ch, dtype) if zero_bias else rng.uniform(-bound, bound, size=out_ch).astype(dtype)
        return w, b

    blocks = []
    for i in range(1, config.num_blocks + 1):
        d = config.dilations[i - 1]
        cw = config.compress_channels
        compress = ConvSpec(*uniform(cw, config.compressor_width(i), 1))
        main = ConvSpec(*uniform(config.block_channels, cw, KERNEL), dilation=d)
        offset = ConvSpec(np.zeros((2 * TAPS, cw, KERNEL, KERNEL), dtype), np.zeros(2 * TAPS, dtype), dilation=d)
        mask = ConvSpec(np.zeros((TAPS, cw, KERNEL, KERNEL), dtype), np.zeros(TAPS, dtype), dilation=d)
        sam = ConvSpec(*uniform(1, 2, 7))
        blocks.append(GcemBlockParams(compress, DcnV2Params(main, offset, mask), sam))
    return blocks


def gcem_to_named(blocks: list[GcemBlockParams], prefix: str = "gcem") -> dict[str, np.ndarray]:
    out = {}
    for i, blk in enumerate(blocks, start=1):
        p = f"{prefix}.block{i}"
        for name, spec in (("compress", blk.compress), ("dcn", blk.dcn.main),
                           ("dcn_offset", blk.dcn.offset), ("dcn_mask", blk.dcn.mask), ("sam", blk.sam)):
            out[f"{p}.{name}.weight"] = spec.weight
            out[f"{p}.{name}.bias"] = spec.bias
    return out


def gcem_from_named(tensors: Mapping[str, np.ndarray], config: GcemConfig,
                    prefix: str = "gcem") -> list[GcemBlockParams]:
    blocks = []
    for i in range(1, config.num_blocks + 1):
        p = f"{prefix}.block{i}"
        d = config.dilations[i - 1]

        def spec(name, dilation=1):
            return ConvSpec(tensors[f"{p}.{name}.weight"], tensors[f"{p}.{name}.bias"], dilation=dilation)

        dcn = DcnV2Params(spec("dcn", d), spec("dcn_offset", d), spec("dcn_mask", d))
        blocks.append(GcemBlockParams(spec("compress"), dcn, spec("sam")))
    return blocks
