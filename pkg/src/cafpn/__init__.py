"""Content-augmented feature pyramid forward pipeline.

Linearized cross-attention between FPN levels and a global content map,
with exact-softmax oracles, gradient checks and MAC/storage counters.
"""

from .attention import (
    AttentionConfig,
    ProjectionSet,
    SequencedMap,
    cross_attention_block,
    lt_attention,
    lt_bruteforce,
    multi_head_lt,
    multi_head_sa,
    sa_exact,
)
from .counter import OpCounter
from .gcem import GcemConfig, gcem_forward
from .pyramid import FeatureMap, PyramidConfig, ca_fpn_forward, init_params

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "ProjectionSet", "SequencedMap", "cross_attention_block", "lt_attention",
    "lt_bruteforce", "multi_head_lt", "multi_head_sa", "sa_exact", "OpCounter", "GcemConfig",
    "gcem_forward", "FeatureMap", "PyramidConfig", "ca_fpn_forward", "init_params",
]
