"""Feature pyramid fusion and content-augmented assembly.

Parameters live in a flat ``name -> array`` mapping (see :func:`init_params`)
so a whole model can be written to and read from a TNSR manifest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import gcem as G
from . import tnsr
from .attention import AttentionConfig, ProjectionSet, cross_attention_block
from .counter import OpCounter
from .tensor import ConvSpec, ShapeError, as_tensor, conv2d, elementwise, group_norm, rescale

FUSED_LEVELS = (2, 3, 4, 5)
BACKBONE_WIDTHS = {2: 64, 3: 128, 4: 256, 5: 512}


class StageError(ShapeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class FeatureMap:
    tensor: np.ndarray
    level: int

    def __post_init__(self):
        if not 2 <= self.level <= 6:
            raise ValueError(f"pyramid level {self.level} outside 2..6")
        if np.ndim(self.tensor) != 4:
            raise ShapeError(f"feature map must be 4-D, got {np.shape(self.tensor)}")

    @property
    def stride(self) -> int:
        return 2 ** self.level

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape


@dataclass(frozen=True)
class PyramidConfig:
    fpn_channels: int = 256
    levels: tuple[int, ...] = (2, 3, 4, 5, 6)
    lt_levels: frozenset[int] = field(default=frozenset({2, 3, 4, 5}))
    high_partition_levels: frozenset[int] = field(default=frozenset({4, 5}))
    high_partitions: int = 2
    groups: int = 32
    denom_eps: float = 1e-6
    gcem: G.GcemConfig = field(default_factory=lambda: G.GcemConfig(in_channels=BACKBONE_WIDTHS[5]))

    def __post_init__(self):
        object.__setattr__(self, "lt_levels", frozenset(self.lt_levels))
        object.__setattr__(self, "high_partition_levels", frozenset(self.high_partition_levels))
        if not self.high_partition_levels <= self.lt_levels:
            raise ValueError("high_partition_levels must be a subset of lt_levels")
        if not self.lt_levels <= set(FUSED_LEVELS):
            raise ValueError(f"attention can only target fused levels {FUSED_LEVELS}")
        if self.fpn_channels % self.groups or self.fpn_channels % self.high_partitions:
            raise ValueError("fpn_channels must divide by the group count and every partition count")
        if self.gcem.block_channels != self.fpn_channels:
            raise ValueError("GCEM output width must equal fpn_channels")

    def partitions(self, level: int) -> int:
        return self.high_partitions if level in self.high_partition_levels else 1


def _conv(params: Mapping[str, np.ndarray], name: str, dilation: int = 1) -> ConvSpec:
    return ConvSpec(params[f"{name}.weight"], params[f"{name}.bias"], dilation=dilation)


def backbone_stub(image: np.ndarray, params: Mapping[str, np.ndarray],
                  counter: OpCounter | None = None) -> dict[int, FeatureMap]:
    """Deterministic four-stage CNN standing in for a real backbone.

    Stem: 3x3 conv (3 -> 64), relu, two 2x max-pools gives C2 at stride 4.
    Each later stage doubles the width with a 3x3 conv, relu and one pool.
    """
    image = as_tensor(image)
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"image must be B x 3 x H x W, got {image.shape}")
    h, w = image.shape[2:]
    if h % 32 or w % 32:
        raise ShapeError(f"image extents {h}x{w} must be divisible by 32")
    x = elementwise(conv2d(image, _conv(params, "backbone.stem"), counter), "relu")
    x = rescale(rescale(x, "maxpool_down_2x"), "maxpool_down_2x")
    out = {2: FeatureMap(x, 2)}
    for level in (3, 4, 5):
        x = elementwise(conv2d(x, _conv(params, f"backbone.stage{level}"), counter), "relu")
        x = rescale(x, "maxpool_down_2x")
        out[level] = FeatureMap(x, level)
    return out


def fpn_fuse(laterals: Mapping[int, FeatureMap], params: Mapping[str, np.ndarray],
             groups: int = 32, counter: OpCounter | None = None) -> dict[int, FeatureMap]:
    """Top-down lateral fusion; each output gets a 3x3 conv and group norm."""
    for level in (2, 3, 4):
        hi, lo = laterals[level].shape, laterals[level + 1].shape
        if hi[2:] != (2 * lo[2], 2 * lo[3]):
            raise ShapeError(f"C{level} {hi[2:]} is not twice C{level + 1} {lo[2:]}")
    fused: dict[int, FeatureMap] = {}
    top = None
    for level in (5, 4, 3, 2):
        inner = conv2d(laterals[level].tensor, _conv(params, f"fpn.inner{level}"), counter)
        top = inner if top is None else inner + rescale(top, "nearest_up_2x")
        layer = conv2d(top, _conv(params, f"fpn.layer{level}"), counter)
        normed = group_norm(layer, groups, params[f"fpn.norm{level}.weight"], params[f"fpn.norm{level}.bias"])
        fused[level] = FeatureMap(normed, level)
    return {lv: fused[lv] for lv in FUSED_LEVELS}


def make_p6(p5: FeatureMap) -> FeatureMap:
    h, w = p5.shape[2:]
    if (h, w) == (1, 1):
        return FeatureMap(p5.tensor, 6)
    if h % 2 or w % 2:
        raise ShapeError(f"P5 extents {h}x{w} must be even to pool into P6")
    return FeatureMap(rescale(p5.tensor, "maxpool_down_2x"), 6)


def projection_set(params: Mapping[str, np.ndarray], level: int) -> ProjectionSet:
    p = f"attn.p{level}"
    return ProjectionSet(params[f"{p}.w_q"], params[f"{p}.w_k"], params[f"{p}.w_v"])


@dataclass
class ForwardTrace:
    gcem_calls: int = 0
    partitions: dict[int, int] = field(default_factory=dict)
    attention: dict[int, np.ndarray] = field(default_factory=dict)
    gcem_output: np.ndarray | None = None


def ca_fpn_forward(
    image: np.ndarray,
    params: Mapping[str, np.ndarray],
    config: PyramidConfig = PyramidConfig(),
    counter: OpCounter | None = None,
    trace: ForwardTrace | None = None,
    queried_hook: Callable[[np.ndarray], np.ndarray] | None = None,
) -> dict[int, FeatureMap]:
    """Backbone, FPN fusion and GCEM cross-attention; returns levels 2..6.

    ``queried_hook`` may rewrite the GCEM map before every level attends to
    it (used to check that attention treats keys as a set).
    """
    trace = trace if trace is not None else ForwardTrace()

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ShapeError, KeyError) as exc:
            raise StageError(name, str(exc)) from exc

    laterals = stage("backbone", backbone_stub, image, params, counter)
    fused = stage("fpn", fpn_fuse, laterals, params, config.groups, counter)
    gcem_blocks = stage("gcem", G.gcem_from_named, params, config.gcem)
    queried = stage("gcem", G.gcem_forward, laterals[5].tensor, config.gcem, gcem_blocks, counter)
    trace.gcem_calls += 1
    trace.gcem_output = queried
    if queried_hook is not None:
        queried = queried_hook(queried)
    out: dict[int, FeatureMap] = {}
    for level in FUSED_LEVELS:
        p = fused[level]
        if level in config.lt_levels:
            s = config.partitions(level)
            acfg = AttentionConfig(config.fpn_channels, partitions=s, denom_eps=config.denom_eps)
            proj = stage(f"attention P{level}", projection_set, params, level)
            a = stage(f"attention P{level}", cross_attention_block, p.tensor, queried, proj, acfg, counter)
            trace.partitions[level] = s
            trace.attention[level] = a
            p = FeatureMap(p.tensor + a, level)
        out[level] = p
    out[6] = stage("p6", make_p6, out[5])
    return out


def vanilla_fpn_forward(image: np.ndarray, params: Mapping[str, np.ndarray],
                        config: PyramidConfig = PyramidConfig()) -> dict[int, FeatureMap]:
    """Plain FPN plus pooled P6, without any content augmentation."""
    fused = fpn_fuse(backbone_stub(image, params), params, config.groups)
    fused[6] = make_p6(fused[5])
    return fused


def init_params(seed: int, config: PyramidConfig = PyramidConfig(), dtype=np.float64,
                zero_bias: bool = False) -> dict[str, np.ndarray]:
    """Seeded parameters for the whole pipeline.

    Convolutions draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); attention
    projections from U(-1/sqrt(C), 1/sqrt(C)); group-norm affines start at
    (1, 0); deformable offset/mask predictors start at zero.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    def conv(name, out_ch, in_ch, k):
        bound = 1.0 / np.sqrt(in_ch * k * k)
        params[f"{name}.weight"] = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k)).astype(dtype)
        params[f"{name}.bias"] = (np.zeros(out_ch) if zero_bias
                                  else rng.uniform(-bound, bound, size=out_ch)).astype(dtype)

    conv("backbone.stem", BACKBONE_WIDTHS[2], 3, 3)
    for level in (3, 4, 5):
        conv(f"backbone.stage{level}", BACKBONE_WIDTHS[level], BACKBONE_WIDTHS[level - 1], 3)
    c = config.fpn_channels
    for level in FUSED_LEVELS:
        conv(f"fpn.inner{level}", c, BACKBONE_WIDTHS[level], 1)
        conv(f"fpn.layer{level}", c, c, 3)
        params[f"fpn.norm{level}.weight"] = np.ones(c, dtype)
        params[f"fpn.norm{level}.bias"] = np.zeros(c, dtype)
    params.update(G.gcem_to_named(G.init_gcem(rng, config.gcem, dtype, zero_bias)))
    for level in sorted(config.lt_levels):
        proj = ProjectionSet.seeded(rng, c, c)
        for name in ("w_q", "w_k", "w_v"):
            params[f"attn.p{level}.{name}"] = getattr(proj, name).astype(dtype)
    return params


def save_params(directory: str | os.PathLike, params: Mapping[str, np.ndarray]) -> Path:
    return tnsr.save_manifest(directory, params)


def load_params(manifest: str | os.PathLike) -> dict[str, np.ndarray]:
    return tnsr.load_manifest(manifest)


def to_pgm(x: np.ndarray) -> bytes:
    """Binary 8-bit PGM of a 2-D map, min-max scaled; a flat map is mid-gray."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"PGM needs a 2-D map, got {x.shape}")
    lo, hi = float(x.min()), float(x.max())
    if hi > lo:
        pixels = np.rint((x - lo) / (hi - lo) * 255.0)
    else:
        pixels = np.full(x.shape, 128.0)
    h, w = x.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.astype(np.uint8).tobytes()


def dump_activations(levels: Mapping[int, FeatureMap], directory: str | os.PathLike) -> list[Path]:
    """Write channel 0 of the first batch item of each level to ``P{level}.pgm``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for level in sorted(levels):
        path = directory / f"P{level}.pgm"
        path.write_bytes(to_pgm(levels[level].tensor[0, 0]))
        paths.append(path)
    return paths
