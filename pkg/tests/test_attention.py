import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cafpn import autograd as ag
from cafpn.attention import (
    AttentionConfig,
    ProjectionSet,
    SequencedMap,
    cross_attention_block,
    f_theta,
    lt_attention,
    lt_bruteforce,
    multi_head_lt,
    multi_head_sa,
    project_qkv,
    sa_exact,
)
from cafpn.checks import mixing_weight_gap, numeric_grad, rel_error
from cafpn.counter import OpCounter
from cafpn.tensor import ShapeError, finite_diff_jacobian


def softmax_attention_loops(q, k, v):
    """Softmax attention composed one query at a time from exp and sums."""
    out = np.zeros((v.shape[0], q.shape[1]))
    for i in range(q.shape[1]):
        logits = [float(q[:, i] @ k[:, j]) for j in range(k.shape[1])]
        top = max(logits)
        weights = [math.exp(s - top) for s in logits]
        total = sum(weights)
        for j, wj in enumerate(weights):
            out[:, i] += wj / total * v[:, j]
    return out


def qkv(rng, c, nq, nk, cv=None):
    return rng.standard_normal((c, nq)), rng.standard_normal((c, nk)), rng.standard_normal((cv or c, nk))


class TestSequencedMap:
    def test_round_trip(self, rng):
        x = rng.standard_normal((3, 4, 5))
        seq = SequencedMap.from_map(x)
        assert seq.data.shape == (3, 20) and seq.length == 20
        np.testing.assert_array_equal(seq.to_map(), x)
        # row-major scan: position (1, 2) is column 1 * 5 + 2
        np.testing.assert_array_equal(seq.data[:, 7], x[:, 1, 2])


class TestProjectQKV:
    def test_identity(self, rng):
        x = rng.standard_normal((4, 6))
        proj = ProjectionSet(np.eye(4), np.eye(4), np.eye(4))
        q, k, v = project_qkv(x, x, proj)
        for t in (q, k, v):
            np.testing.assert_array_equal(t, x)

    def test_zero_value_projection(self, rng):
        x = rng.standard_normal((4, 6))
        proj = ProjectionSet(np.eye(4), np.eye(4), np.zeros((4, 4)))
        assert np.all(project_qkv(x, x, proj)[2] == 0)

    def test_per_position_oracle(self, rng):
        xq, xk = rng.standard_normal((5, 7)), rng.standard_normal((5, 3))
        proj = ProjectionSet.seeded(rng, 5, 4)
        q, k, v = project_qkv(xq, xk, proj)
        assert q.shape == (4, 7) and k.shape == v.shape == (4, 3)
        for i in range(7):
            np.testing.assert_allclose(q[:, i], proj.w_q @ xq[:, i], atol=1e-12)
        for j in range(3):
            np.testing.assert_allclose(k[:, j], proj.w_k @ xk[:, j], atol=1e-12)
            np.testing.assert_allclose(v[:, j], proj.w_v @ xk[:, j], atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            project_qkv(rng.standard_normal((3, 4)), rng.standard_normal((4, 4)), ProjectionSet.seeded(rng, 4, 4))


class TestSaExact:
    def test_single_key(self, rng):
        q, k, v = qkv(rng, 3, 5, 1)
        np.testing.assert_allclose(sa_exact(q, k, v), np.repeat(v, 5, axis=1), atol=1e-15)

    def test_identical_keys_give_mean(self, rng):
        q = rng.standard_normal((3, 4))
        k = np.repeat(rng.standard_normal((3, 1)), 6, axis=1)
        v = rng.standard_normal((3, 6))
        np.testing.assert_allclose(sa_exact(q, k, v), np.repeat(v.mean(axis=1, keepdims=True), 4, axis=1),
                                   atol=1e-14)

    def test_primitive_composition_oracle(self):
        rng = np.random.default_rng(21)
        q, k, v = qkv(rng, 4, 6, 6)
        np.testing.assert_allclose(sa_exact(q, k, v), softmax_attention_loops(q, k, v), rtol=0, atol=1e-10)

    def test_counter(self, rng):
        q, k, v = qkv(rng, 4, 6, 9)
        counter = OpCounter()
        sa_exact(q, k, v, counter)
        assert counter.macs == 2 * 6 * 9 * 4
        assert counter.aux_peak == 6 * 9

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ShapeError):
            sa_exact(rng.standard_normal((3, 4)), rng.standard_normal((2, 4)), rng.standard_normal((3, 4)))
        with pytest.raises(ShapeError):
            sa_exact(rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.standard_normal((3, 5)))

    def test_shift_invariance(self, rng):
        q, k, v = qkv(rng, 5, 4, 8)
        shifted = k + rng.standard_normal((5, 1)) * 10
        np.testing.assert_allclose(sa_exact(q, shifted, v), sa_exact(q, k, v), rtol=0, atol=1e-10)


class TestFTheta:
    def test_zero_weights(self, rng):
        x = rng.standard_normal((4, 5))
        out = f_theta(x, np.zeros((8, 4)), np.zeros(8), np.zeros((4, 8)), np.zeros(4))
        assert out.shape == x.shape and np.all(out == 0)

    def test_relu_pass_through(self, rng):
        x = np.abs(rng.standard_normal((4, 5))) + 0.1
        out = f_theta(x, np.eye(4), np.zeros(4), np.eye(4), np.zeros(4))
        np.testing.assert_array_equal(out, x)

    def test_per_position_oracle(self, rng):
        x = rng.standard_normal((3, 6))
        w1, b1 = rng.standard_normal((6, 3)), rng.standard_normal(6)
        w2, b2 = rng.standard_normal((3, 6)), rng.standard_normal(3)
        out = f_theta(x, w1, b1, w2, b2)
        for i in range(6):
            ref = w2 @ np.maximum(w1 @ x[:, i] + b1, 0) + b2
            np.testing.assert_allclose(out[:, i], ref, atol=1e-12)

    def test_mismatch(self, rng):
        with pytest.raises(ShapeError):
            f_theta(rng.standard_normal((3, 2)), np.zeros((6, 4)), np.zeros(6), np.zeros((4, 6)), np.zeros(4))


class TestMultiHeadSa:
    def test_one_head_identity_out(self, rng):
        x = rng.standard_normal((4, 7))
        head = ProjectionSet.seeded(rng, 4, 4)
        q, k, v = project_qkv(x, x, head)
        np.testing.assert_allclose(multi_head_sa(x, x, [head], np.eye(4)), sa_exact(q, k, v), atol=1e-15)

    def test_zero_out(self, rng):
        x = rng.standard_normal((4, 7))
        heads = [ProjectionSet.seeded(rng, 4, 4) for _ in range(2)]
        assert np.all(multi_head_sa(x, x, heads, np.zeros((4, 8))) == 0)

    def test_manual_composition(self, rng):
        xq, xk = rng.standard_normal((5, 6)), rng.standard_normal((5, 9))
        heads = [ProjectionSet.seeded(rng, 5, 4) for _ in range(2)]
        w_out = rng.standard_normal((4, 8))
        parts = []
        for h in heads:
            parts.append(softmax_attention_loops(h.w_q @ xq, h.w_k @ xk, h.w_v @ xk))
        expected = w_out @ np.vstack(parts)
        np.testing.assert_allclose(multi_head_sa(xq, xk, heads, w_out), expected, rtol=0, atol=1e-10)

    def test_empty(self, rng):
        with pytest.raises(ShapeError):
            multi_head_sa(np.zeros((2, 2)), np.zeros((2, 2)), [], np.zeros((2, 2)))


class TestLinearized:
    def test_collinear_single_key(self, rng):
        q = rng.standard_normal((4, 1))
        k = 3.0 * q
        v = rng.standard_normal((5, 1))
        for fn in (lt_bruteforce, lt_attention):
            np.testing.assert_allclose(fn(q, k, v), v, atol=1e-6)

    def test_orthogonal_gives_mean(self, rng):
        q = np.array([[1.0], [0.0], [0.0]])
        k = np.vstack([np.zeros((1, 5)), rng.standard_normal((2, 5))])
        v = rng.standard_normal((3, 5))
        for fn in (lt_bruteforce, lt_attention):
            # eps=0 isolates the similarity-1 case
            np.testing.assert_allclose(fn(q, k, v, eps=1e-300), v.mean(axis=1, keepdims=True), atol=1e-12)

    def test_seeded_case_positive_denominator(self):
        rng = np.random.default_rng(4)
        q, k, v = qkv(rng, 4, 5, 5)
        out = lt_bruteforce(q, k, v)
        assert np.all(np.isfinite(out))
        qh = q / np.linalg.norm(q, axis=0)
        kh = k / np.linalg.norm(k, axis=0)
        assert np.all((1 + qh.T @ kh).sum(axis=1) > 0)

    def test_factored_equals_bruteforce(self):
        rng = np.random.default_rng(5)
        q, k, v = qkv(rng, 4, 5, 5)
        assert np.abs(lt_attention(q, k, v) - lt_bruteforce(q, k, v)).max() <= 1e-10

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), c=st.integers(2, 16), nq=st.integers(1, 64), nk=st.integers(1, 64))
    def test_factored_identity_property(self, seed, c, nq, nk):
        q, k, v = qkv(np.random.default_rng(seed), c, nq, nk)
        assert np.abs(lt_attention(q, k, v) - lt_bruteforce(q, k, v)).max() <= 1e-10

    def test_value_width_may_differ(self, rng):
        q, k, v = qkv(rng, 4, 3, 7, cv=6)
        out = lt_attention(q, k, v)
        assert out.shape == (6, 3)
        np.testing.assert_allclose(out, lt_bruteforce(q, k, v), atol=1e-12)

    def test_counter(self):
        rng = np.random.default_rng(6)
        c, n = 8, 4096
        q, k, v = qkv(rng, c, n, n)
        lt, sa = OpCounter(), OpCounter()
        lt_attention(q, k, v, counter=lt)
        assert lt.aux_peak <= 80
        assert lt.macs == 2 * n * c * c + n * c
        sa_exact(q[:, :64], k[:, :64], v[:, :64], sa)
        assert sa.aux_peak == 64 * 64
        # storage formula at N = 4096 without allocating 128 MiB
        assert n * n == 16_777_216

    def test_mismatch(self, rng):
        with pytest.raises(ShapeError):
            lt_attention(rng.standard_normal((3, 4)), rng.standard_normal((2, 4)), rng.standard_normal((3, 4)))


class TestMultiHeadLt:
    def test_one_partition(self, rng):
        q, k, v = qkv(rng, 6, 5, 7)
        np.testing.assert_array_equal(multi_head_lt(q, k, v, 1), lt_attention(q, k, v))

    def test_duplicated_halves(self, rng):
        qh, kh = rng.standard_normal((3, 5)), rng.standard_normal((3, 7))
        v = rng.standard_normal((6, 7))
        out = multi_head_lt(np.vstack([qh, qh]), np.vstack([kh, kh]), v, 2)
        np.testing.assert_allclose(out, lt_attention(qh, kh, v), atol=1e-14)

    def test_per_part_bruteforce(self):
        rng = np.random.default_rng(8)
        q, k, v = qkv(rng, 8, 6, 9)
        expected = 0.5 * (lt_bruteforce(q[:4], k[:4], v) + lt_bruteforce(q[4:], k[4:], v))
        assert np.abs(multi_head_lt(q, k, v, 2) - expected).max() <= 1e-10

    def test_indivisible(self, rng):
        q, k, v = qkv(rng, 6, 2, 2)
        with pytest.raises(ShapeError):
            multi_head_lt(q, k, v, 4)


class TestCrossAttention:
    def test_single_key_broadcast(self, rng):
        proj = ProjectionSet.seeded(rng, 8, 8)
        query, queried = rng.standard_normal((1, 8, 5, 4)), rng.standard_normal((1, 8, 1, 1))
        out = cross_attention_block(query, queried, proj, AttentionConfig(8, partitions=2, denom_eps=1e-300))
        np.testing.assert_allclose(out, np.broadcast_to(out[:, :, :1, :1], out.shape), atol=1e-12)
        # the default eps scales each position by (1 + s) / (1 + s + eps)
        biased = cross_attention_block(query, queried, proj, AttentionConfig(8, partitions=2))
        np.testing.assert_allclose(biased, out, rtol=1e-4)

    @pytest.mark.parametrize("hq,wq,hk,wk", [(5, 4, 2, 2), (1, 1, 3, 7), (8, 8, 1, 1), (3, 2, 6, 5)])
    def test_shape_contract(self, rng, hq, wq, hk, wk):
        proj = ProjectionSet.seeded(rng, 6, 4)
        out = cross_attention_block(rng.standard_normal((2, 6, hq, wq)), rng.standard_normal((2, 6, hk, wk)),
                                    proj, AttentionConfig(4))
        assert out.shape == (2, 4, hq, wq)

    def test_queried_permutation(self, rng):
        proj = ProjectionSet.seeded(rng, 8, 8)
        query, queried = rng.standard_normal((1, 8, 4, 4)), rng.standard_normal((1, 8, 3, 3))
        perm = rng.permutation(9)
        shuffled = queried.reshape(1, 8, 9)[:, :, perm].reshape(1, 8, 3, 3)
        for s in (1, 2):
            cfg = AttentionConfig(8, partitions=s)
            a = cross_attention_block(query, queried, proj, cfg)
            b = cross_attention_block(query, shuffled, proj, cfg)
            assert np.abs(a - b).max() <= 1e-10

    def test_matches_manual_pipeline(self, rng):
        proj = ProjectionSet.seeded(rng, 4, 4)
        query, queried = rng.standard_normal((1, 4, 2, 3)), rng.standard_normal((1, 4, 2, 2))
        out = cross_attention_block(query, queried, proj, AttentionConfig(4, partitions=2))
        xq, xk = query[0].reshape(4, 6), queried[0].reshape(4, 4)
        q, k, v = proj.w_q @ xq, proj.w_k @ xk, proj.w_v @ xk
        expected = 0.5 * (lt_bruteforce(q[:2], k[:2], v) + lt_bruteforce(q[2:], k[2:], v))
        np.testing.assert_allclose(out[0].reshape(4, 6), expected, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            cross_attention_block(np.zeros((1, 5, 2, 2)), np.zeros((1, 6, 2, 2)),
                                  ProjectionSet.seeded(rng, 6, 6), AttentionConfig(6))
        with pytest.raises(ShapeError):
            cross_attention_block(np.zeros((1, 6, 2, 2)), np.zeros((2, 6, 2, 2)),
                                  ProjectionSet.seeded(rng, 6, 6), AttentionConfig(6))


class TestProperties:
    def test_key_permutation_equivariance(self, rng):
        for _ in range(10):
            q, k, v = qkv(rng, 5, 6, 11)
            perm = rng.permutation(11)
            for fn in (sa_exact, lt_attention):
                assert np.abs(fn(q, k, v) - fn(q, k[:, perm], v[:, perm])).max() <= 1e-10

    def test_convex_hull(self, rng):
        for _ in range(20):
            q, k, v = qkv(rng, 4, 7, 9)
            q *= 4
            lo, hi = v.min(axis=1, keepdims=True), v.max(axis=1, keepdims=True)
            for fn in (sa_exact, lt_attention):
                out = fn(q, k, v)
                assert np.all(out >= lo - 1e-9) and np.all(out <= hi + 1e-9)

    def test_second_order_gap(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            q, k = rng.standard_normal((8, 5)), rng.standard_normal((8, 10))
            ratio = mixing_weight_gap(q, k, 0.1) / mixing_weight_gap(q, k, 0.01)
            assert 30 <= ratio <= 300

    def test_mac_growth(self):
        rng = np.random.default_rng(10)
        c = 4
        prev = None
        for n in (8, 16, 32, 64):
            q, k, v = qkv(rng, c, n, n)
            sa, lt = OpCounter(), OpCounter()
            sa_exact(q, k, v, sa)
            lt_attention(q, k, v, counter=lt)
            if prev is not None:
                assert sa.macs == 4 * prev[0]
                assert lt.macs == 2 * prev[1]
            prev = (sa.macs, lt.macs)


class TestGradients:
    def _check(self, f, args, tol=1e-4):
        grads = ag.grad_of(f, *args)
        for i, g in enumerate(grads):
            def scalar(z, i=i):
                vals = list(args)
                vals[i] = z
                return float(f(*vals).value)

            assert rel_error(g, numeric_grad(scalar, args[i], 1e-5)) < tol

    @pytest.mark.parametrize("attend", [sa_exact, lt_attention])
    def test_wrt_qkv(self, attend):
        rng = np.random.default_rng(13)
        self._check(lambda q, k, v: ag.sum(attend(q, k, v)), qkv(rng, 4, 5, 5))

    @pytest.mark.parametrize("attend", [sa_exact, lt_attention])
    def test_wrt_projections(self, attend):
        rng = np.random.default_rng(14)
        xq, xk = rng.standard_normal((4, 5)), rng.standard_normal((4, 6))
        proj = ProjectionSet.seeded(rng, 4, 4)

        def loss(wq, wk, wv):
            return ag.sum(attend(*project_qkv(xq, xk, ProjectionSet(wq, wk, wv))))

        self._check(loss, (proj.w_q, proj.w_k, proj.w_v))

    def test_multi_head_lt_gradients(self):
        rng = np.random.default_rng(15)
        self._check(lambda q, k, v: ag.sum(multi_head_lt(q, k, v, 2)), qkv(rng, 4, 3, 6))

    def test_constant_v_closed_form(self, rng):
        q, k, _ = qkv(rng, 4, 5, 6)
        v = np.full((4, 6), 2.0)
        gv = ag.grad_of(lambda vv: ag.sum(sa_exact(q, k, vv)), v)[0]
        logits = q.T @ k
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        # each channel receives the column mass of the attention weights
        np.testing.assert_allclose(gv, np.broadcast_to(w.sum(axis=0), (4, 6)), atol=1e-12)

    def test_zero_query_gradient_finite(self, rng):
        _, k, v = qkv(rng, 4, 5, 6)
        gq = ag.grad_of(lambda qq: ag.sum(lt_attention(qq, k, v)), np.zeros((4, 5)))[0]
        assert np.all(np.isfinite(gq))

    def test_differentiated_value_matches_plain(self, rng):
        q, k, v = qkv(rng, 4, 5, 6)
        var = lt_attention(ag.Var(q, requires_grad=True), k, v)
        np.testing.assert_array_equal(var.value, lt_attention(q, k, v))

    def test_l2_normalize_jacobian(self, rng):
        x = rng.standard_normal((3, 4))
        for r in range(3):
            for c in range(4):
                seed = np.zeros((3, 4))
                seed[r, c] = 1.0
                leaf = ag.Var(x, requires_grad=True)
                ag.l2_normalize_rows(leaf).backward(seed)
                jac = finite_diff_jacobian(lambda z: ag.l2_normalize_rows(z).value, x)
                np.testing.assert_allclose(leaf.grad.reshape(-1), jac[r * 4 + c], atol=1e-8)
