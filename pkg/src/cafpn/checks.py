"""Runtime verification: gradient checks and the self-check suite.

Each self-check returns a short detail string and raises ``CheckFailed``
(or any exception) on failure, so the runner can report every suite
independently.
"""

from __future__ import annotations

import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import attention as A
from . import autograd as ag
from . import bench, fixtures, gcem, pyramid, tnsr
from . import tensor as T
from .counter import OpCounter


class CheckFailed(AssertionError):
    pass


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise CheckFailed(message)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Max-norm relative error ``|a - n|_inf / max(|a|_inf, |n|_inf)``."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    return T.finite_diff_jacobian(lambda z: np.array([f(z)]), x, h).reshape(x.shape)


# -- gradient check -----------------------------------------------------------


@dataclass
class GradcheckReport:
    tol: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> tuple[str, float]:
        return max(self.errors.items(), key=lambda kv: kv[1])

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())


def run_gradcheck(seed: int = 0, h: float = 1e-5, tol: float = 1e-4, channels: int = 4,
                  length: int = 5) -> GradcheckReport:
    """Compare analytic and central-difference gradients of ``sum(output)``.

    Covers softmax and linearized attention with respect to Q, K, V and,
    through a projection stage, w_q, w_k, w_v.
    """
    rng = np.random.default_rng(seed)
    c, n = channels, length
    q, k, v = (rng.standard_normal((c, n)) for _ in range(3))
    x_query = rng.standard_normal((c, n))
    x_queried = rng.standard_normal((c, n + 2))
    proj = A.ProjectionSet.seeded(rng, c, c)
    report = GradcheckReport(tol)
    for kind, attend in (("sa_exact", A.sa_exact), ("lt_attention", A.lt_attention)):
        def core(qq, kk, vv):
            return ag.sum(attend(qq, kk, vv))

        grads = ag.grad_of(core, q, k, v)
        for name, g, idx in zip("QKV", grads, range(3)):
            def scalar(z, idx=idx):
                args = [q, k, v]
                args[idx] = z
                return float(np.sum(attend(*args)))

            report.errors[f"{kind}.{name}"] = rel_error(g, numeric_grad(scalar, (q, k, v)[idx], h))

        def projected(wq, wk, wv):
            qq, kk, vv = A.project_qkv(x_query, x_queried, A.ProjectionSet(wq, wk, wv))
            return ag.sum(attend(qq, kk, vv))

        weights = (proj.w_q, proj.w_k, proj.w_v)
        grads = ag.grad_of(projected, *weights)
        for name, g, idx in zip(("w_q", "w_k", "w_v"), grads, range(3)):
            def scalar(z, idx=idx):
                ws = list(weights)
                ws[idx] = z
                qq, kk, vv = A.project_qkv(x_query, x_queried, A.ProjectionSet(*ws))
                return float(np.sum(attend(qq, kk, vv)))

            report.errors[f"{kind}.{name}"] = rel_error(g, numeric_grad(scalar, weights[idx], h))
    return report


# -- tensor core ----------------------------------------------------------------


def check_tnsr_roundtrip(ctx: Context) -> str:
    rng = np.random.default_rng(1)
    for dtype in (np.float32, np.float64):
        for shape in ((1,), (3, 4), (2, 3, 4, 5)):
            x = rng.standard_normal(shape).astype(dtype)
            raw = tnsr.dumps(x)
            y = tnsr.loads(raw)
            _require(y.dtype == x.dtype and y.shape == x.shape, f"dims/dtype changed for {shape}")
            _require(y.tobytes() == x.tobytes(), "payload bytes changed")
            _require(tnsr.dumps(y) == raw, "re-serialization differs")
    return "float32/float64 x 3 shapes byte-exact"


def check_conv_linearity(ctx: Context) -> str:
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        k = int(rng.choice([1, 3, 5]))
        d = int(rng.integers(1, 3))
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        spec = T.ConvSpec(rng.standard_normal((cout, cin, k, k)), np.zeros(cout), dilation=d)
        x, y = rng.standard_normal((2, 1, cin, 7, 6))
        a, b = rng.standard_normal(2)
        lhs = T.conv2d(a * x + b * y, spec)
        rhs = a * T.conv2d(x, spec) + b * T.conv2d(y, spec)
        worst = max(worst, float(np.abs(lhs - rhs).max() / max(np.abs(rhs).max(), 1e-300)))
    _require(worst <= 1e-10, f"relative deviation {worst:.2e}")
    return f"50 cases, worst relative deviation {worst:.1e}"


def check_softmax_sums(ctx: Context) -> str:
    rng = np.random.default_rng(3)
    logits = np.vstack([rng.standard_normal((20, 9)) * 10, rng.uniform(-1e4, 1e4, (20, 9)),
                        np.full((1, 9), 1e4), np.full((1, 9), -1e4)])
    p = T.softmax_rows(logits)
    dev = float(np.abs(p.sum(axis=1) - 1).max())
    _require(dev <= 1e-6 and np.all(p >= 0), f"row sums off by {dev:.2e}")
    return f"42 rows incl. +/-1e4 logits, max |sum-1| = {dev:.1e}"


def check_counter_composition(ctx: Context) -> str:
    rng = np.random.default_rng(4)
    a, b, c = rng.standard_normal((3, 5)), rng.standard_normal((5, 4)), rng.standard_normal((4, 2))
    cf, cg, whole = OpCounter(), OpCounter(), OpCounter()
    T.matmul(T.matmul(a, b, cf), c, cg)
    T.matmul(T.matmul(a, b, whole), c, whole)
    _require(whole.macs == cf.macs + cg.macs == (cf + cg).macs, "MAC totals do not add")
    q, k, v = (rng.standard_normal((4, 6)) for _ in range(3))
    c1, c2, both = OpCounter(), OpCounter(), OpCounter()
    A.sa_exact(q, k, v, c1)
    A.lt_attention(q, k, v, counter=c2)
    A.sa_exact(q, k, v, both)
    A.lt_attention(q, k, v, counter=both)
    _require(both.macs == c1.macs + c2.macs, "attention MAC totals do not add")
    return f"matmul chain {whole.macs} = {cf.macs} + {cg.macs}"


def check_differentiable_contract(ctx: Context) -> str:
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((4, 3))
    w = rng.standard_normal((3, 5))
    m = rng.standard_normal((4, 5))
    cw = rng.standard_normal((2, 4))
    cb = rng.standard_normal(2)

    def f(x, w, m, cw):
        z = ag.matmul(ag.l2_normalize_rows(x), w)
        p = ag.softmax_rows(ag.scale(z, 2.0))
        p = ag.add(ag.mul(ag.sigmoid(p), m), ag.relu(z))
        y = ag.conv1x1(ag.reshape(p, (1, 4, 5, 1)), ag.reshape(cw, (2, 4, 1, 1)), cb)
        return ag.sum(y)

    args = (x0, w, m, cw)
    grads = ag.grad_of(f, *args)
    worst = 0.0
    for i, g in enumerate(grads):
        def scalar(z, i=i):
            vals = list(args)
            vals[i] = z
            return float(f(*vals).value)

        worst = max(worst, rel_error(g, numeric_grad(scalar, args[i], 1e-5)))
    _require(worst < 1e-4, f"relative gradient error {worst:.2e}")
    return f"matmul/elementwise/softmax/l2norm/conv1x1 chain, worst {worst:.1e}"


# -- attention --------------------------------------------------------------------


def check_lt_identity(ctx: Context, instances: int = 120) -> str:
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(instances):
        c = int(rng.integers(2, 17))
        nq, nk = (int(t) for t in rng.integers(1, 65, size=2))
        q, k, v = rng.standard_normal((c, nq)), rng.standard_normal((c, nk)), rng.standard_normal((c, nk))
        worst = max(worst, float(np.abs(A.lt_attention(q, k, v) - A.lt_bruteforce(q, k, v)).max()))
    _require(worst <= 1e-10, f"max |factored - brute force| = {worst:.2e}")
    return f"{instances} instances, max deviation {worst:.1e}"


def check_key_permutation(ctx: Context) -> str:
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        c, nq, nk = 6, 9, 13
        q, k, v = rng.standard_normal((c, nq)), rng.standard_normal((c, nk)), rng.standard_normal((c, nk))
        perm = rng.permutation(nk)
        for fn in (A.sa_exact, A.lt_attention):
            worst = max(worst, float(np.abs(fn(q, k, v) - fn(q, k[:, perm], v[:, perm])).max()))
    _require(worst <= 1e-10, f"permutation changed outputs by {worst:.2e}")
    return f"20 cases x 2 kernels, max deviation {worst:.1e}"


def check_convexity(ctx: Context) -> str:
    rng = np.random.default_rng(8)
    for _ in range(30):
        q, k, v = rng.standard_normal((5, 8)) * 3, rng.standard_normal((5, 10)) * 3, rng.standard_normal((4, 10))
        lo, hi = v.min(axis=1, keepdims=True), v.max(axis=1, keepdims=True)
        for fn in (A.sa_exact, A.lt_attention):
            out = fn(q, k, v)
            _require(np.all(out >= lo - 1e-9) and np.all(out <= hi + 1e-9), f"{fn.__name__} left the hull")
        qh = T.l2_normalize_rows(q.T)
        kh = T.l2_normalize_rows(k.T)
        _require(np.all(1 + qh @ kh.T >= 0), "negative linearized mixing weight")
    return "30 cases, both kernels inside the value hull"


def mixing_weight_gap(q: np.ndarray, k: np.ndarray, t: float) -> float:
    """Sup-norm gap between softmax(t qh.kh) and normalized (1 + t qh.kh) weights."""
    qh = T.l2_normalize_rows(q.T)
    kh = T.l2_normalize_rows(k.T)
    sims = qh @ kh.T
    soft = T.softmax_rows(t * sims)
    lin = 1 + t * sims
    lin = lin / lin.sum(axis=1, keepdims=True)
    return float(np.abs(soft - lin).max())


def check_taylor_order(ctx: Context, trials: int = 25) -> str:
    rng = np.random.default_rng(9)
    ratios = []
    for _ in range(trials):
        q, k = rng.standard_normal((8, 6)), rng.standard_normal((8, 12))
        ratios.append(mixing_weight_gap(q, k, 0.1) / mixing_weight_gap(q, k, 0.01))
    lo, hi = min(ratios), max(ratios)
    _require(30 <= lo and hi <= 300, f"error ratios span [{lo:.1f}, {hi:.1f}]")
    return f"{trials} trials, ratio in [{lo:.1f}, {hi:.1f}]"


def check_gradients(ctx: Context) -> str:
    report = run_gradcheck()
    name, err = report.worst
    _require(report.passed, f"{name} relative error {err:.2e}")
    return f"{len(report.errors)} gradients, worst {name} {err:.1e}"


def check_counter_law(ctx: Context) -> str:
    c = 4
    rng = np.random.default_rng(10)
    for n in (4, 16, 64, 256):
        q, k, v = (rng.standard_normal((c, n)) for _ in range(3))
        sa, lt = OpCounter(), OpCounter()
        A.sa_exact(q, k, v, sa)
        A.lt_attention(q, k, v, counter=lt)
        _require(sa.macs == 2 * n * n * c and sa.aux_peak == n * n, f"softmax counts off at N={n}")
        _require(lt.macs == bench.lt_core_macs(c, n, n), f"linearized MACs off at N={n}")
        _require(lt.aux_peak == c * c + 2 * c, f"linearized storage off at N={n}")
    return "softmax 2N^2C / N^2, linearized 2NC^2+NC / C^2+2C"


def check_softmax_shift(ctx: Context) -> str:
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        q, k, v = rng.standard_normal((5, 7)), rng.standard_normal((5, 9)), rng.standard_normal((5, 9))
        shift = rng.standard_normal((5, 1)) * 5
        # every logit in row i moves by q_i . shift
        worst = max(worst, float(np.abs(A.sa_exact(q, k, v) - A.sa_exact(q, k + shift, v)).max()))
    _require(worst <= 1e-10, f"shifted logits changed outputs by {worst:.2e}")
    return f"20 cases, max deviation {worst:.1e}"


def check_lt_fixture(ctx: Context) -> str:
    q, k, v, expected = (fixtures.load_verified(n, ctx.data_dir) for n in fixtures.LT_CASE)
    dev = float(np.abs(A.lt_attention(q, k, v) - expected).max())
    _require(dev <= 1e-10, f"fixture {fixtures.LT_CASE[3]} deviates by {dev:.2e}")
    return f"{fixtures.LT_CASE[3]} reproduced to {dev:.1e}"


# -- gcem ---------------------------------------------------------------------------


def _small_gcem(c_in: int, seed: int) -> tuple[gcem.GcemConfig, list[gcem.GcemBlockParams]]:
    config = gcem.GcemConfig(in_channels=c_in, compress_channels=16, block_channels=8)
    return config, gcem.init_gcem(np.random.default_rng(seed), config)


def check_gcem_shape_law(ctx: Context) -> str:
    rng = np.random.default_rng(12)
    for c_in, hw in ((3, (1, 1)), (5, (2, 3)), (8, (7, 7)), (4, (9, 5))):
        config, blocks = _small_gcem(c_in, 13)
        out = gcem.gcem_forward(rng.standard_normal((1, c_in) + hw), config, blocks)
        _require(out.shape == (1, config.block_channels) + hw, f"shape {out.shape} for input {c_in}x{hw}")
    return "spatial size kept from 1x1 to 9x5, block width emitted"


def check_dense_widths(ctx: Context) -> str:
    config = gcem.GcemConfig(in_channels=512)
    blocks = gcem.init_gcem(np.random.default_rng(14), config)
    trace: list = []
    gcem.gcem_forward(np.random.default_rng(15).standard_normal((1, 512, 2, 2)), config, blocks, trace=trace)
    widths = [t["compressor_width"] for t in trace]
    _require(widths == [512 + 256 * (i - 1) for i in range(1, 6)], f"widths {widths}")
    _require([b.compress.in_channels for b in blocks] == widths, "parameter widths disagree")
    return f"compressor widths {widths}"


def check_dcn_reduction(ctx: Context) -> str:
    rng = np.random.default_rng(16)
    worst = 0.0
    for d in (1, 2, 3, 4, 5):
        x = rng.standard_normal((1, 6, 9, 8))
        main = T.ConvSpec(rng.standard_normal((4, 6, 3, 3)), rng.standard_normal(4), dilation=d)
        params = gcem.DcnV2Params(
            main, T.ConvSpec(np.zeros((18, 6, 3, 3)), np.zeros(18), dilation=d),
            T.ConvSpec(np.zeros((9, 6, 3, 3)), np.zeros(9), dilation=d))
        out = gcem.dcn_v2(x, params, np.zeros((1, 18, 9, 8)), np.ones((1, 9, 9, 8)))
        worst = max(worst, float(np.abs(out - T.conv2d(x, main)).max()))
    _require(worst <= 1e-10, f"deformable vs plain conv deviation {worst:.2e}")
    return f"dilations 1..5, max deviation {worst:.1e}"


def check_sam_envelope(ctx: Context) -> str:
    rng = np.random.default_rng(17)
    x = rng.standard_normal((2, 5, 9, 9)) * 4
    for bias in (-50.0, -1.0, 0.0, 2.0, 50.0):
        spec = T.ConvSpec(rng.standard_normal((1, 2, 7, 7)), np.array([bias]))
        out = gcem.residual_sam(x, spec)
        _require(np.all(np.abs(out) >= np.abs(x)) and np.all(np.abs(out) <= 2 * np.abs(x)),
                 f"envelope broken at bias {bias}")
        _require(np.all(np.sign(out) == np.sign(x)), "sign flipped")
    zero = gcem.residual_sam(x, T.ConvSpec(np.zeros((1, 2, 7, 7)), np.zeros(1)))
    _require(np.array_equal(zero, 1.5 * x), "zero-initialized gate is not exactly 1.5x")
    return "|x| <= |out| <= 2|x| for 5 gate biases; zero gate gives 1.5x exactly"


def check_gcem_determinism(ctx: Context) -> str:
    runs = []
    for _ in range(2):
        config, blocks = _small_gcem(6, 18)
        x = np.random.default_rng(19).standard_normal((1, 6, 6, 6))
        runs.append(gcem.gcem_forward(x, config, blocks))
    _require(runs[0].tobytes() == runs[1].tobytes(), "two seeded runs differ")
    return "bit-identical"


def check_gcem_fixture(ctx: Context) -> str:
    expected = fixtures.load_verified(fixtures.GCEM_NORMS, ctx.data_dir)
    got = fixtures.gcem_block_norms()
    _require(expected.shape == got.shape, f"fixture {fixtures.GCEM_NORMS} holds {expected.shape} norms")
    rel = float(np.abs(got - expected).max() / np.abs(expected).max())
    _require(rel <= 1e-9, f"fixture {fixtures.GCEM_NORMS}: block norms deviate by {rel:.2e}")
    _require(bool(np.all(np.isfinite(got))), "non-finite block output")
    return f"5 block norms match {fixtures.GCEM_NORMS} to {rel:.1e}"


# -- pyramid ---------------------------------------------------------------------------


def check_channel_law(ctx: Context) -> str:
    config = pyramid.PyramidConfig()
    for h, w in ((64, 64), (32, 32), (128, 64)):
        img = np.random.default_rng(20).standard_normal((1, 3, h, w))
        out = pyramid.ca_fpn_forward(img, ctx.params, config)
        for level, fm in out.items():
            _require(fm.shape[1] == config.fpn_channels, f"P{level} has {fm.shape[1]} channels")
            if level < 6:
                _require(fm.shape[2:] == (h // fm.stride, w // fm.stride), f"P{level} spatial {fm.shape[2:]}")
    return "all levels 256 channels at 64x64, 32x32, 128x64"


def check_degradation_law(ctx: Context) -> str:
    params = dict(ctx.params)
    for level in (2, 3, 4, 5):
        params[f"attn.p{level}.w_v"] = np.zeros_like(params[f"attn.p{level}.w_v"])
    aug = pyramid.ca_fpn_forward(ctx.image, params)
    plain = pyramid.vanilla_fpn_forward(ctx.image, params)
    for level in aug:
        _require(np.array_equal(aug[level].tensor, plain[level].tensor), f"P{level} differs from vanilla FPN")
    return "zeroed value projections reproduce vanilla FPN bit-exactly"


def check_single_gcem(ctx: Context) -> str:
    trace = pyramid.ForwardTrace()
    pyramid.ca_fpn_forward(ctx.image, ctx.params, trace=trace)
    _require(trace.gcem_calls == 1, f"GCEM ran {trace.gcem_calls} times")
    _require(trace.partitions == {2: 1, 3: 1, 4: 2, 5: 2}, f"partitions {trace.partitions}")
    return "GCEM once per pass; S = 1,1,2,2 on P2..P5"


def check_query_locality(ctx: Context) -> str:
    rng = np.random.default_rng(21)
    proj = pyramid.projection_set(ctx.params, 3)
    queried = rng.standard_normal((1, 256, 2, 2))
    p = rng.standard_normal((1, 256, 8, 8))
    for s in (1, 2):
        cfg = A.AttentionConfig(256, partitions=s)
        base = A.cross_attention_block(p, queried, proj, cfg)
        bumped = p.copy()
        bumped[0, :, 3, 5] += rng.standard_normal(256)
        delta = np.abs(A.cross_attention_block(bumped, queried, proj, cfg) - base)
        delta[0, :, 3, 5] = 0
        _require(float(delta.max()) <= 1e-12, f"S={s}: off-position change {delta.max():.2e}")
    return "single-position perturbation stays local for S = 1, 2"


def check_set_semantics(ctx: Context) -> str:
    base = pyramid.ca_fpn_forward(ctx.image, ctx.params)
    perm = np.random.default_rng(22).permutation(4)

    def shuffle(g):
        b, c, h, w = g.shape
        return g.reshape(b, c, h * w)[:, :, perm].reshape(b, c, h, w)

    shuffled = pyramid.ca_fpn_forward(ctx.image, ctx.params, queried_hook=shuffle)
    worst = max(float(np.abs(base[lv].tensor - shuffled[lv].tensor).max()) for lv in base)
    _require(worst <= 1e-10, f"permuting the GCEM map changed outputs by {worst:.2e}")
    return f"GCEM positions permuted, max deviation {worst:.1e}"


# -- bench --------------------------------------------------------------------------------


def check_formula_agreement(ctx: Context) -> str:
    triples = [(8, 4, 4), (1, 1, 1), (2, 3, 5), (4, 4, 4), (3, 7, 2), (16, 2, 8), (5, 5, 5),
               (6, 1, 9), (12, 3, 3), (8, 8, 8), (7, 6, 4)]
    for c, h, w in triples:
        counted = bench.instrumented_sa_block(c, h, w).macs
        formula, _ = bench.flops_formula_sa(c, h, w)
        _require(counted == formula, f"(C,H,W)=({c},{h},{w}): counted {counted}, formula {formula}")
    return f"{len(triples)} triples exact, (8,4,4) -> {bench.flops_formula_sa(8, 4, 4)[0]}"


def check_scaling(ctx: Context) -> str:
    sizes = [128, 256, 512, 1024, 2048]
    sa_rec, sa_fit = bench.scaling_experiment("sa", 8, sizes, trials=5, dtype=np.float32)
    lt_rec, lt_fit = bench.scaling_experiment("lt", 8, sizes, trials=5, dtype=np.float32)
    _require(1.9 <= sa_fit.exponent <= 2.1 and sa_fit.r2 > 0.99, f"softmax fit {sa_fit}")
    _require(0.9 <= lt_fit.exponent <= 1.1 and lt_fit.r2 > 0.99, f"linearized fit {lt_fit}")
    _require(all(r.aux_peak == r.N ** 2 for r in sa_rec), "softmax storage is not N^2")
    _require(all(r.aux_peak <= 8 * 8 + 2 * 8 for r in lt_rec), "linearized storage exceeds C^2 + 2C")
    return f"exponents sa {sa_fit.exponent:.3f}, lt {lt_fit.exponent:.3f}"


def check_csv_determinism(ctx: Context) -> str:
    sizes = [64, 128, 256, 1024]
    with tempfile.TemporaryDirectory() as tmp:
        rows = []
        for i in range(2):
            path = os.path.join(tmp, f"run{i}.csv")
            bench.scaling_experiment("lt", 4, sizes, path)
            lines = Path(path).read_text().splitlines()
            _require(lines[0] == ",".join(bench.CSV_HEADER), f"header {lines[0]!r}")
            rows.append([line.rsplit(",", 1)[0] for line in lines[1:]])
    _require(rows[0] == rows[1], "counter columns differ between runs")
    return "counter columns identical across runs"


@dataclass
class Context:
    data_dir: Path
    params: dict = field(default_factory=dict)
    image: np.ndarray | None = None


SUITES: dict[str, Callable[[Context], str]] = {
    "tensor.tnsr_roundtrip": check_tnsr_roundtrip,
    "tensor.conv_linearity": check_conv_linearity,
    "tensor.softmax_row_sums": check_softmax_sums,
    "tensor.counter_composition": check_counter_composition,
    "tensor.differentiable_contract": check_differentiable_contract,
    "attention.factored_identity": check_lt_identity,
    "attention.key_permutation": check_key_permutation,
    "attention.convex_hull": check_convexity,
    "attention.second_order_taylor": check_taylor_order,
    "attention.gradients": check_gradients,
    "attention.counter_law": check_counter_law,
    "attention.softmax_shift": check_softmax_shift,
    "attention.golden_fixture": check_lt_fixture,
    "gcem.shape_law": check_gcem_shape_law,
    "gcem.dense_widths": check_dense_widths,
    "gcem.dcn_reduction": check_dcn_reduction,
    "gcem.sam_envelope": check_sam_envelope,
    "gcem.determinism": check_gcem_determinism,
    "gcem.golden_fixture": check_gcem_fixture,
    "pyramid.channel_law": check_channel_law,
    "pyramid.degradation_law": check_degradation_law,
    "pyramid.single_gcem_and_partitions": check_single_gcem,
    "pyramid.query_locality": check_query_locality,
    "pyramid.set_semantics": check_set_semantics,
    "bench.formula_agreement": check_formula_agreement,
    "bench.scaling_law": check_scaling,
    "bench.csv_determinism": check_csv_determinism,
}


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def run_selfcheck(data_dir: str | os.PathLike | None = None,
                  only: list[str] | None = None) -> list[SuiteResult]:
    ctx = Context(Path(data_dir) if data_dir is not None else fixtures.DATA_DIR)
    ctx.params = pyramid.init_params(0)
    ctx.image = np.random.default_rng(99).standard_normal((1, 3, 64, 64))
    results = []
    for name, fn in SUITES.items():
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        try:
            detail, ok = fn(ctx), True
        except Exception as exc:  # every failure is reported, none aborts the run
            detail, ok = f"{type(exc).__name__}: {exc}", False
        results.append(SuiteResult(name, ok, detail, time.perf_counter() - t0))
    return results
