"""Softmax attention, Taylor-linearized attention and their multi-head forms.

Sequences are ``C x N`` matrices: column ``i`` is the feature vector at the
``i``-th position of a row-major spatial scan. Every op accepts plain arrays
or :class:`~cafpn.autograd.Var` leaves; with plain arrays it returns a plain
array, with Vars it returns a Var so gradients can flow back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .counter import OpCounter
from .tensor import ShapeError, as_tensor

NORM_EPS = 1e-12


@dataclass(frozen=True)
class SequencedMap:
    """A single ``C x H x W`` map flattened to ``C x N`` (N = H * W)."""

    data: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != self.height * self.width:
            raise ShapeError(f"data {self.data.shape} is not C x {self.height}*{self.width}")

    @classmethod
    def from_map(cls, x: np.ndarray) -> SequencedMap:
        x = np.asarray(x)
        if x.ndim != 3:
            raise ShapeError(f"expected a C x H x W map, got {x.shape}")
        c, h, w = x.shape
        return cls(x.reshape(c, h * w), h, w)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    def to_map(self) -> np.ndarray:
        return self.data.reshape(self.channels, self.height, self.width)


@dataclass(frozen=True)
class ProjectionSet:
    """Query/key/value embeddings (``C x C_in``) and an optional output
    compression (``C x h*C``) for concatenated heads."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_out: np.ndarray | None = None

    def __post_init__(self):
        shapes = {ag.value(w).shape[0] for w in (self.w_q, self.w_k, self.w_v)}
        if len(shapes) != 1:
            raise ShapeError("w_q, w_k and w_v must share the embedded width")
        if ag.value(self.w_k).shape[1] != ag.value(self.w_v).shape[1]:
            raise ShapeError("w_k and w_v must read the same queried width")
        if self.w_out is not None and ag.value(self.w_out).shape[0] != self.channels:
            raise ShapeError("w_out must map back to the embedded width")

    @property
    def channels(self) -> int:
        return ag.value(self.w_q).shape[0]

    @classmethod
    def seeded(cls, rng: np.random.Generator, in_channels: int, channels: int,
               heads: int | None = None) -> ProjectionSet:
        bound = 1.0 / math.sqrt(channels)
        draw = lambda *shape: rng.uniform(-bound, bound, size=shape)  # noqa: E731
        w_out = draw(channels, heads * channels) if heads else None
        return cls(draw(channels, in_channels), draw(channels, in_channels),
                   draw(channels, in_channels), w_out)


@dataclass(frozen=True)
class AttentionConfig:
    channels: int
    partitions: int = 1
    denom_eps: float = 1e-6
    ffn_hidden: int | None = field(default=None)

    def __post_init__(self):
        if self.partitions < 1 or self.channels % self.partitions:
            raise ValueError(f"{self.channels} channels are not divisible into {self.partitions} parts")
        if self.denom_eps <= 0:
            raise ValueError("denom_eps must be positive")
        if self.ffn_hidden is None:
            object.__setattr__(self, "ffn_hidden", 2 * self.channels)


def _is_var(*xs) -> bool:
    return any(isinstance(x, ag.Var) for x in xs)


def _out(v: ag.Var, differentiable: bool):
    return v if differentiable else v.value


def _check_qkv(q, k, v) -> tuple[int, int, int]:
    qs, ks, vs = ag.value(q).shape, ag.value(k).shape, ag.value(v).shape
    if len(qs) != 2 or len(ks) != 2 or len(vs) != 2:
        raise ShapeError(f"Q, K, V must be 2-D C x N, got {qs}, {ks}, {vs}")
    if qs[0] != ks[0]:
        raise ShapeError(f"Q and K channel widths differ: {qs[0]} vs {ks[0]}")
    if ks[1] != vs[1]:
        raise ShapeError(f"K and V lengths differ: {ks[1]} vs {vs[1]}")
    return qs[0], qs[1], ks[1]


def project_qkv(x_query, x_queried, proj: ProjectionSet, counter: OpCounter | None = None):
    """Embed the query sequence with ``w_q`` and the queried one with ``w_k``/``w_v``.

    The two sequences may have different lengths.
    """
    diff = _is_var(x_query, x_queried, proj.w_q, proj.w_k, proj.w_v)
    xq = x_query.data if isinstance(x_query, SequencedMap) else x_query
    xk = x_queried.data if isinstance(x_queried, SequencedMap) else x_queried
    if ag.value(xq).shape[0] != ag.value(proj.w_q).shape[1]:
        raise ShapeError(f"query has {ag.value(xq).shape[0]} channels, w_q expects {ag.value(proj.w_q).shape[1]}")
    if ag.value(xk).shape[0] != ag.value(proj.w_k).shape[1]:
        raise ShapeError(f"queried map has {ag.value(xk).shape[0]} channels, w_k expects {ag.value(proj.w_k).shape[1]}")
    q = ag.matmul(proj.w_q, xq, counter)
    k = ag.matmul(proj.w_k, xk, counter)
    v = ag.matmul(proj.w_v, xk, counter)
    return _out(q, diff), _out(k, diff), _out(v, diff)


def sa_exact(q, k, v, counter: OpCounter | None = None):
    """Softmax attention: ``out_i = sum_j softmax_j(q_i . k_j) v_j``.

    The full ``N_q x N_k`` weight matrix is materialized; the softmax reuses
    its storage, so ``aux_peak`` is exactly ``N_q * N_k``.
    """
    _, nq, nk = _check_qkv(q, k, v)
    diff = _is_var(q, k, v)
    if counter is not None:
        counter.alloc(nq * nk)
    logits = ag.matmul(ag.transpose(q), k, counter)
    weights = ag.softmax_rows(logits)
    del logits
    out = ag.matmul(v, ag.transpose(weights), counter)
    if counter is not None:
        counter.free(nq * nk)
    return _out(out, diff)


def f_theta(x, w1, b1, w2, b2, counter: OpCounter | None = None):
    """Position-wise feed-forward map: 1x1 conv, relu, 1x1 conv on ``C x N``."""
    diff = _is_var(x, w1, b1, w2, b2)
    if ag.value(x).shape[0] != ag.value(w1).shape[1]:
        raise ShapeError(f"input has {ag.value(x).shape[0]} channels, first layer expects {ag.value(w1).shape[1]}")
    if ag.value(w2).shape[1] != ag.value(w1).shape[0]:
        raise ShapeError("second layer does not read the hidden width")
    hidden = ag.relu(ag.add(ag.matmul(w1, x, counter), ag.reshape(b1, (-1, 1))))
    out = ag.add(ag.matmul(w2, hidden, counter), ag.reshape(b2, (-1, 1)))
    return _out(out, diff)


def multi_head_sa(x_query, x_queried, heads: Sequence[ProjectionSet], w_out,
                  counter: OpCounter | None = None):
    """Per-head softmax attention, concatenated on channels, compressed by ``w_out``."""
    if not heads:
        raise ShapeError("multi_head_sa needs at least one head")
    widths = {h.channels for h in heads}
    if len(widths) != 1:
        raise ShapeError("all heads must share the embedded width")
    diff = _is_var(x_query, x_queried, w_out) or any(
        _is_var(h.w_q, h.w_k, h.w_v) for h in heads)
    outs = []
    for h in heads:
        q, k, v = project_qkv(x_query, x_queried, h, counter)
        outs.append(sa_exact(q, k, v, counter))
    stacked = ag.concat(outs, axis=0)
    if ag.value(w_out).shape[1] != stacked.shape[0]:
        raise ShapeError(f"w_out reads {ag.value(w_out).shape[1]} channels, heads give {stacked.shape[0]}")
    return _out(ag.matmul(w_out, stacked, counter), diff)


def lt_bruteforce(q, k, v, eps: float = 1e-6) -> np.ndarray:
    """Unfactored linearized attention by explicit double loop.

    ``out_i = sum_j (1 + qh_i . kh_j) v_j / (sum_j (1 + qh_i . kh_j) + eps)``
    with ``qh``, ``kh`` the unit-normalized columns. Reference only.
    """
    q, k, v = (np.asarray(ag.value(a), dtype=np.float64) for a in (q, k, v))
    _, nq, nk = _check_qkv(q, k, v)
    cv = v.shape[0]

    def unit(col):
        return col / (math.sqrt(float(col @ col)) + NORM_EPS)

    qh = [unit(q[:, i]) for i in range(nq)]
    kh = [unit(k[:, j]) for j in range(nk)]
    out = np.zeros((cv, nq))
    for i in range(nq):
        num = np.zeros(cv)
        den = 0.0
        for j in range(nk):
            s = 1.0 + float(qh[i] @ kh[j])
            num += s * v[:, j]
            den += s
        out[:, i] = num / (den + eps)
    return out


def lt_attention(q, k, v, eps: float = 1e-6, counter: OpCounter | None = None):
    """Linearized attention in factored form, linear in sequence length.

    Precomputes ``S_v = sum_j v_j``, ``M = sum_j kh_j v_j^T`` and
    ``s_k = sum_j kh_j``; then ``out_i = (S_v + M^T qh_i) / (N_k + qh_i . s_k + eps)``.
    Only ``M``, ``S_v`` and ``s_k`` count as auxiliary storage; the unit
    vectors are treated as produced on the fly per position.
    """
    c, nq, nk = _check_qkv(q, k, v)
    cv = ag.value(v).shape[0]
    diff = _is_var(q, k, v)
    aux = c * cv + cv + c
    if counter is not None:
        counter.alloc(aux)
    qh = ag.l2_normalize_rows(ag.transpose(q), NORM_EPS)  # N_q x C
    kh = ag.l2_normalize_rows(ag.transpose(k), NORM_EPS)  # N_k x C
    vt = ag.transpose(v)  # N_k x C_v
    s_v = ag.sum(vt, axis=0, keepdims=True)  # 1 x C_v
    m = ag.matmul(ag.transpose(kh), vt, counter)  # C x C_v
    s_k = ag.sum(kh, axis=0, keepdims=True)  # 1 x C
    num = ag.add(ag.matmul(qh, m, counter), s_v)
    den = ag.add(ag.matmul(qh, ag.transpose(s_k), counter), float(nk) + eps)
    if np.any(den.value <= 0):
        raise FloatingPointError("linearized attention denominator is not positive")
    out = ag.transpose(ag.divide(num, den))
    if counter is not None:
        counter.free(aux)
    return _out(out, diff)


def multi_head_lt(q, k, v, partitions: int, eps: float = 1e-6, counter: OpCounter | None = None):
    """Average of linearized attention over ``partitions`` channel slices of q and k.

    V is shared at full width by every slice; each slice is normalized on its own.
    """
    c, _, _ = _check_qkv(q, k, v)
    if partitions < 1 or c % partitions:
        raise ShapeError(f"{c} channels are not divisible into {partitions} parts")
    diff = _is_var(q, k, v)
    step = c // partitions
    total = None
    for s in range(partitions):
        rows = (slice(s * step, (s + 1) * step),)
        part = lt_attention(ag.getitem(ag.lift(q), rows), ag.getitem(ag.lift(k), rows),
                            ag.lift(v), eps, counter)
        total = part if total is None else ag.add(total, part)
    return _out(ag.scale(total, 1.0 / partitions), diff)


def cross_attention_block(query_map: np.ndarray, queried_map: np.ndarray, proj: ProjectionSet,
                          config: AttentionConfig, counter: OpCounter | None = None) -> np.ndarray:
    """Linearized cross-attention from every query position onto the queried map.

    Both maps are (B, C, H, W) with a shared batch; spatial sizes may differ.
    Returns a (B, C, Hq, Wq) map. No positional encoding, feed-forward or
    residual addition happens here.
    """
    query_map, queried_map = as_tensor(query_map), as_tensor(queried_map)
    if query_map.ndim != 4 or queried_map.ndim != 4:
        raise ShapeError("cross_attention_block needs two 4-D maps")
    if query_map.shape[0] != queried_map.shape[0]:
        raise ShapeError(f"batch sizes differ: {query_map.shape[0]} vs {queried_map.shape[0]}")
    if proj.channels != config.channels:
        raise ShapeError(f"projections embed {proj.channels} channels, config says {config.channels}")
    outs = []
    for b in range(query_map.shape[0]):
        xq = SequencedMap.from_map(query_map[b])
        xk = SequencedMap.from_map(queried_map[b])
        q, k, v = project_qkv(xq, xk, proj, counter)
        out = multi_head_lt(q, k, v, config.partitions, config.denom_eps, counter)
        outs.append(SequencedMap(out, xq.height, xq.width).to_map())
    return np.stack(outs)
