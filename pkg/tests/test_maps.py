import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mctloc import maps as M
from mctloc.errors import ConfigError, ShapeError
from mctloc.maps import LocalizationMaps, MapKind

unit = st.floats(0, 1, allow_nan=False)


def marked(c, m):
    """(C+M)^2 tensor whose entry (i, j) encodes its own index."""
    t = c + m
    return np.arange(t * t, dtype=np.float64).reshape(t, t)


class TestFuseAttention:
    def test_k1_is_last_layer_head_mean(self):
        stack = np.random.default_rng(0).random((4, 3, 6, 6))
        np.testing.assert_allclose(M.fuse_attention(stack, 1), stack[-1].mean(0))

    def test_identical_layers(self):
        layer = np.random.default_rng(1).random((2, 5, 5))
        stack = np.stack([layer] * 4)
        np.testing.assert_allclose(M.fuse_attention(stack, 3), layer.mean(0), atol=1e-15)

    def test_hand_mean(self):
        stack = np.zeros((3, 2, 1, 1))
        stack[:, :, 0, 0] = [[1, 3], [5, 7], [10, 20]]
        # heads -> [2, 6, 15]; last two layers -> 10.5
        assert M.fuse_attention(stack, 2)[0, 0] == 10.5

    @pytest.mark.parametrize("k", [0, 5])
    def test_k_out_of_range(self, k):
        with pytest.raises(ConfigError):
            M.fuse_attention(np.zeros((4, 1, 3, 3)), k)


class TestExtraction:
    def test_class_to_patch_marked_block(self):
        c, n = 3, 2
        fused = marked(c, n * n)
        out = M.extract_class_to_patch(fused, c, normalize=False)
        assert out.maps.shape == (c, n, n)
        for cls in range(c):
            for i in range(n):
                for j in range(n):
                    assert out.maps[cls, i, j] == fused[cls, c + i * n + j]

    def test_affinity_marked_block(self):
        c, m = 2, 9
        fused = marked(c, m)
        aff = M.extract_affinity(fused, c, raw=True)
        for i in range(m):
            for k in range(m):
                assert aff[i, k] == fused[c + i, c + k]

    def test_uniform_attention(self):
        c, m = 3, 16
        fused = np.full((c + m, c + m), 1.0 / (c + m))
        np.testing.assert_array_equal(M.extract_class_to_patch(fused, c).maps, 0.0)
        np.testing.assert_allclose(M.extract_affinity(fused, c), 1.0 / m, atol=1e-15)

    def test_affinity_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        a = rng.random((5, 21, 21))
        a /= a.sum(-1, keepdims=True)
        np.testing.assert_allclose(M.extract_affinity(a, 5).sum(-1), 1.0, atol=1e-6)

    def test_non_square_patch_count(self):
        with pytest.raises(ShapeError):
            M.extract_class_to_patch(np.zeros((8, 8)), 3)


class TestMinMax:
    def test_constant_map_becomes_zero(self):
        np.testing.assert_array_equal(M.minmax_normalize(np.full((2, 3, 3), 0.7)), 0.0)

    def test_range(self):
        x = np.random.default_rng(0).standard_normal((4, 5, 5))
        y = M.minmax_normalize(x)
        np.testing.assert_allclose(y.min(axis=(-2, -1)), 0.0)
        np.testing.assert_allclose(y.max(axis=(-2, -1)), 1.0)


def as_maps(x, kind=MapKind.ATTENTION):
    return LocalizationMaps(np.asarray(x, dtype=np.float64), kind)


class TestRefine:
    def test_identity_affinity_exact(self):
        x = np.random.default_rng(0).random((3, 4, 4))
        np.testing.assert_array_equal(M.refine(as_maps(x), np.eye(16)).maps, x)

    def test_uniform_affinity_gives_spatial_mean(self):
        x = np.random.default_rng(1).random((2, 3, 3))
        out = M.refine(as_maps(x), np.full((9, 9), 1 / 9)).maps
        np.testing.assert_allclose(out, np.broadcast_to(x.mean(axis=(1, 2))[:, None, None], x.shape))

    def test_double_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.random((2, 2, 2))
        aff4 = rng.random((2, 2, 2, 2))
        expected = np.zeros_like(x)
        for c in range(2):
            for i in range(2):
                for j in range(2):
                    expected[c, i, j] = sum(aff4[i, j, k, l] * x[c, k, l] for k in range(2) for l in range(2))
        out = M.refine(as_maps(x), aff4.reshape(4, 4)).maps
        np.testing.assert_allclose(out, expected, rtol=1e-14)

    def test_iterations_compose(self):
        rng = np.random.default_rng(3)
        x, a = rng.random((1, 3, 3)), rng.random((9, 9))
        twice = M.refine(M.refine(as_maps(x), a), a).maps
        np.testing.assert_allclose(M.refine(as_maps(x), a, 2).maps, twice)

    def test_kind_and_filter(self):
        src = LocalizationMaps(np.zeros((2, 2, 2)), MapKind.FUSED, np.array([1, 0]))
        out = M.refine(src, np.eye(4))
        assert out.kind is MapKind.REFINED
        np.testing.assert_array_equal(out.class_filter, [1, 0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            M.refine(as_maps(np.zeros((1, 3, 3))), np.eye(4))

    @settings(max_examples=100)
    @given(arrays(np.float64, (2, 3, 3), elements=unit), arrays(np.float64, (9, 9), elements=st.floats(0.01, 1)))
    def test_stochastic_affinity_is_convex(self, x, a):
        a = a / a.sum(-1, keepdims=True)
        out = M.refine(as_maps(x), a).maps
        lo = x.min(axis=(1, 2))[:, None, None]
        hi = x.max(axis=(1, 2))[:, None, None]
        assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


class TestPatchCamAndFusion:
    def test_hand_example(self):
        out = M.patch_cam(np.array([[[-1.0, 2.0], [0.0, 1.0]]])).maps
        np.testing.assert_array_equal(out, [[[0.0, 1.0], [0.0, 0.5]]])

    def test_all_negative(self):
        np.testing.assert_array_equal(M.patch_cam(-np.ones((2, 3, 3))).maps, 0.0)

    def test_unit_range_unchanged(self):
        x = np.array([[[0.0, 0.25], [1.0, 0.5]]])
        np.testing.assert_array_equal(M.patch_cam(x).maps, x)

    def test_fuse_with_ones_keeps_attention(self):
        mct = as_maps(np.array([[[0.0, 0.5], [1.0, 0.25]]]))
        out = M.fuse_maps(mct, as_maps(np.ones((1, 2, 2)), MapKind.PATCHCAM))
        np.testing.assert_array_equal(out.maps, mct.maps)
        assert out.kind is MapKind.FUSED

    def test_fuse_product_before_normalization(self):
        mct = as_maps(np.array([[[0.5, 1.0], [0.0, 1.0]]]))
        pcam = as_maps(np.array([[[0.5, 1.0], [1.0, 0.0]]]), MapKind.PATCHCAM)
        # product [[0.25, 1], [0, 0]] rescaled by its max of 1
        np.testing.assert_array_equal(M.fuse_maps(mct, pcam).maps, [[[0.25, 1.0], [0.0, 0.0]]])

    def test_fuse_kind_check(self):
        x = as_maps(np.zeros((1, 2, 2)))
        with pytest.raises(ConfigError):
            M.fuse_maps(x, x)

    @given(arrays(np.float64, (2, 3, 3), elements=unit), arrays(np.float64, (2, 3, 3), elements=unit))
    def test_product_bounded_by_inputs(self, a, b):
        prod = a * b
        assert np.all(prod <= np.minimum(a, b) + 1e-15)
        fused = M.fuse_maps(as_maps(a), as_maps(b, MapKind.PATCHCAM)).maps
        assert np.all((fused >= 0) & (fused <= 1))

    def test_filtered_zeroes_absent_classes(self):
        m = LocalizationMaps(np.ones((2, 3, 2, 2)), MapKind.FUSED, np.array([[1, 0, 1], [0, 1, 0]]))
        out = m.filtered()
        np.testing.assert_array_equal(out[:, :, 0, 0], [[1, 0, 1], [0, 1, 0]])


class TestUpsample:
    def test_scale_one_identity(self):
        x = np.random.default_rng(0).random((2, 5, 5))
        np.testing.assert_allclose(M.upsample_maps(x, (5, 5)), x, atol=1e-15)

    def test_constant_stays_constant(self):
        np.testing.assert_allclose(M.upsample_maps(np.full((1, 3, 3), 0.4), (7, 11)), 0.4)

    def test_two_to_four_hand_weights(self):
        # half-pixel centres: output rows sample source coordinates -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
        w = np.array([[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]])
        x = np.array([[0.0, 1.0], [0.5, 0.25]])
        np.testing.assert_allclose(M.upsample_maps(x, (4, 4)), w @ x @ w.T, atol=1e-15)
        np.testing.assert_allclose(M._bilinear_matrix(2, 4), w)

    @given(arrays(np.float64, (3, 3), elements=unit), st.integers(1, 20), st.integers(1, 20))
    def test_range_preserved(self, x, h, w):
        out = M.upsample_maps(x, (h, w))
        assert out.shape == (h, w)
        assert np.all((out >= 0) & (out <= 1))
