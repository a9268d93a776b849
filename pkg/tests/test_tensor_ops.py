"""Forward semantics of the tensor primitives."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zestdiff import tensor as tz
from zestdiff.tensor import ShapeError, Tensor


def t64(data):
    return Tensor(np.asarray(data, dtype=np.float64))


class TestApply:
    def test_softmax_symmetry(self):
        out = tz.apply("softmax", [t64([[0.0, 0.0], [0.0, 0.0]])], axis=1)
        np.testing.assert_allclose(out.data, [[0.5, 0.5], [0.5, 0.5]])

    def test_matmul_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 5))
        out = tz.apply("matmul", [t64(np.eye(3)), t64(x)])
        np.testing.assert_allclose(out.data, x)

    def test_softmax_scalar_evaluation(self):
        # independent exp-normalize of [1,2,3]
        e = np.exp([1.0, 2.0, 3.0])
        expected = e / e.sum()
        out = tz.apply("softmax", [t64([[1.0, 2.0, 3.0]])], axis=1)
        np.testing.assert_allclose(out.data[0], expected, atol=5e-6)
        np.testing.assert_allclose(out.data[0], [0.09003, 0.24473, 0.66524],
                                   atol=1e-5)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown op"):
            tz.apply("fused_flux_capacitor", [t64([1.0])])

    def test_shape_mismatch_names_operation(self):
        with pytest.raises(ShapeError, match="matmul"):
            tz.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))
        with pytest.raises(ShapeError, match="conv2d"):
            tz.conv2d(t64(np.ones((1, 2, 4, 4))), t64(np.ones((3, 5, 3, 3))))
        with pytest.raises(ShapeError, match="add"):
            tz.add(t64(np.ones((2, 3))), t64(np.ones((4,))))

    def test_records_node_only_when_grad_needed(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(3))
        assert tz.add(a, b).node is not None
        assert tz.add(b, b).node is None
        with tz.no_grad():
            assert tz.add(a, b).node is None


class TestInvariants:
    def test_product_shape_equals_size(self):
        t = Tensor(np.zeros((3, 4, 5)))
        assert int(np.prod(t.shape)) == t.data.size

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 10_000))
    def test_softmax_rows_stochastic_f32(self, rows, cols, seed):
        x = np.random.default_rng(seed).normal(scale=5, size=(rows, cols))
        out = tz.softmax(Tensor(x.astype(np.float32)), axis=1)
        assert (out.data >= 0).all()
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-5)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 10_000))
    def test_softmax_rows_stochastic_f64(self, rows, cols, seed):
        x = np.random.default_rng(seed).normal(scale=5, size=(rows, cols))
        out = tz.softmax(t64(x), axis=1)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_clamp_and_bce_ranges(self, seed):
        rng = np.random.default_rng(seed)
        p = Tensor(rng.uniform(-0.5, 1.5, size=8))
        c = tz.clamp(p, 0.0, 1.0)
        assert (c.data >= 0).all() and (c.data <= 1).all()
        target = Tensor((rng.uniform(size=8) > 0.5).astype(np.float64))
        out = tz.bce(c, target)
        assert (out.data >= 0).all() and np.isfinite(out.data).all()


class TestOps:
    def test_bilinear_corner_aligned_upsample(self):
        # 2-wide columns [0,1] upsampled x2 -> [0, 1/3, 2/3, 1]
        x = t64(np.array([[[0.0, 1.0], [0.0, 1.0]]]))
        out = tz.bilinear_resize(x, 4, 4)
        expected_row = [0.0, 1 / 3, 2 / 3, 1.0]
        for r in range(4):
            np.testing.assert_allclose(out.data[0, r], expected_row, atol=1e-12)

    def test_bilinear_constant_stays_constant(self):
        x = t64(np.full((2, 3, 3), 0.7))
        out = tz.bilinear_resize(x, 9, 5)
        np.testing.assert_allclose(out.data, 0.7, atol=1e-12)

    def test_bilinear_identity_at_same_resolution(self):
        x = np.random.default_rng(3).normal(size=(2, 4, 4))
        out = tz.bilinear_resize(t64(x), 4, 4)
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_conv2d_matches_direct_convolution(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        out = tz.conv2d(t64(x), t64(w), stride=1, pad=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 4, 6, 6))
        for b in range(2):
            for o in range(4):
                for i in range(6):
                    for j in range(6):
                        ref[b, o, i, j] = (xp[b, :, i:i + 3, j:j + 3] * w[o]).sum()
        np.testing.assert_allclose(out, ref, atol=1e-10)

    def test_conv2d_stride2_shape(self):
        out = tz.conv2d(t64(np.zeros((1, 2, 8, 8))), t64(np.zeros((5, 2, 3, 3))),
                        stride=2, pad=1)
        assert out.shape == (1, 5, 4, 4)

    def test_upsample_nearest(self):
        x = t64(np.arange(4.0).reshape(1, 1, 2, 2))
        out = tz.upsample_nearest2(x)
        np.testing.assert_array_equal(
            out.data[0, 0],
            [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])

    def test_embedding_rejects_bad_ids(self):
        with pytest.raises(ShapeError, match="embedding"):
            tz.embedding(t64(np.zeros((4, 2))), np.array([0, 4]))

    def test_select_and_concat_roundtrip(self):
        x = np.random.default_rng(5).normal(size=(3, 4))
        t = t64(x)
        parts = [tz.reshape(tz.select(t, 0, i), (1, 4)) for i in range(3)]
        back = tz.concat(parts, axis=0)
        np.testing.assert_allclose(back.data, x)

    def test_mixed_dtypes_rejected(self):
        with pytest.raises(ShapeError, match="mixed dtypes"):
            tz.add(Tensor(np.ones(2, dtype=np.float32)), t64(np.ones(2)))

    def test_group_norm_normalizes(self):
        rng = np.random.default_rng(7)
        x = rng.normal(loc=3.0, scale=2.0, size=(2, 8, 4, 4))
        out = tz.group_norm(t64(x), t64(np.ones(8)), t64(np.zeros(8)), groups=4)
        g = out.data.reshape(2, 4, -1)
        np.testing.assert_allclose(g.mean(axis=2), 0.0, atol=1e-10)
        np.testing.assert_allclose(g.std(axis=2), 1.0, atol=1e-3)

    def test_amax_and_reductions(self):
        x = t64([[1.0, 5.0], [2.0, -3.0]])
        assert tz.amax(x).item() == 5.0
        assert tz.tsum(x).item() == 5.0
        assert tz.mean(x).item() == 1.25
        np.testing.assert_allclose(tz.amax(x, axis=1).data, [5.0, 2.0])
