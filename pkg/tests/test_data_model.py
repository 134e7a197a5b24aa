import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cnngp.data_model import (
    ArchConfig,
    ClassKernel,
    CovDiag,
    CovFull,
    InputSet,
    LinearPostOp,
    ReadoutSpec,
    ShapeError,
    SpatialCollapseError,
    diag_of,
    expand_diag,
    flatten_cov,
    input_cov,
    input_cov_diag,
    is_psd,
    min_eig_ratio,
    unflatten_cov,
)


def random_psd_full(rng, n, d):
    G = rng.standard_normal((n * d, n * d + 2))
    return unflatten_cov(G @ G.T / G.shape[1], (d,))


class TestInputSet:
    def test_shapes(self):
        X = InputSet(np.ones((3, 2, 4, 5)))
        assert X.n_samples == 3 and X.channels == 2
        assert X.spatial_shape == (4, 5) and X.spatial_rank == 2 and X.n_pixels == 20

    def test_default_ids(self):
        assert InputSet(np.ones((2, 1, 3))).ids == (0, 1)

    def test_rejects_zero_image(self):
        x = np.ones((2, 1, 3))
        x[1] = 0
        with pytest.raises(ValueError, match="all-zero"):
            InputSet(x)

    @pytest.mark.parametrize("shape", [(3, 4), (1, 1, 1, 1, 1)])
    def test_rejects_bad_rank(self, shape):
        with pytest.raises(ShapeError):
            InputSet(np.ones(shape))

    def test_rejects_nonfinite(self):
        x = np.ones((1, 1, 3))
        x[0, 0, 1] = np.nan
        with pytest.raises(ValueError):
            InputSet(x)

    def test_as_fcn_keeps_values(self, rng):
        X = InputSet(rng.standard_normal((2, 3, 4)))
        F = X.as_fcn()
        assert F.spatial_shape == (1,) and F.channels == 12
        np.testing.assert_array_equal(F.samples.ravel(), X.samples.ravel())


class TestArchConfig:
    def test_fcn_needs_k0(self):
        with pytest.raises(ValueError):
            ArchConfig(connectivity="fcn", filter_half_width=1)

    def test_v_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum"):
            ArchConfig(filter_half_width=1, v=(0.5, 0.5, 0.5))
        ArchConfig(filter_half_width=1, v=(0.25, 0.5, 0.25))

    def test_default_2d_weights_span_hypercube(self):
        w = ArchConfig(filter_half_width=1).filter_weights(2)
        assert w.shape == (3, 3)
        np.testing.assert_allclose(w, 1 / 9)

    def test_offsets_are_ascending(self):
        betas = [b for b, _ in ArchConfig(filter_half_width=1).offsets(2)]
        assert betas == sorted(betas) and len(betas) == 9

    def test_valid_layer_shapes_shrink_by_2k(self):
        cfg = ArchConfig(depth=2, padding="valid", filter_half_width=1)
        assert cfg.layer_shapes((8, 8)) == [(8, 8), (6, 6), (4, 4)]

    def test_valid_collapse_raises(self):
        with pytest.raises(SpatialCollapseError):
            ArchConfig(depth=2, padding="valid", filter_half_width=1).layer_shapes((4,))

    def test_round_trip_and_digest(self):
        cfg = ArchConfig(depth=2, filter_half_width=1, sigma_w2=1.5, sigma_b2=0.1,
                         nonlinearity="erf", v=(0.25, 0.5, 0.25),
                         post_ops=((0, LinearPostOp("stride", stride=2)),),
                         readout=ReadoutSpec("projection", h=(0.5, 0.5)))
        again = ArchConfig.from_dict(cfg.to_dict())
        assert again == cfg and again.digest() == cfg.digest()
        assert ArchConfig(depth=3).digest() != ArchConfig(depth=2).digest()

    def test_post_op_layer_range(self):
        with pytest.raises(ValueError):
            ArchConfig(depth=1, post_ops=((1, LinearPostOp("stride", stride=2)),))


class TestLinearPostOp:
    def test_avg_pool_rows_sum_to_one(self):
        B = LinearPostOp("avg_pool", stride=2, window=3).matrix(9)
        np.testing.assert_allclose(B.sum(axis=1), 1.0)

    @pytest.mark.parametrize("op", [LinearPostOp("stride", stride=2),
                                    LinearPostOp("subsample_slice", window=3, start=1)])
    def test_selection_rows_are_one_hot(self, op):
        B = op.matrix(6)
        assert np.all((B == 0) | (B == 1)) and np.all(B.sum(axis=1) == 1)

    def test_stride_matrix(self):
        B = LinearPostOp("stride", stride=2).matrix(4)
        np.testing.assert_array_equal(B, [[1, 0, 0, 0], [0, 0, 1, 0]])


class TestReadoutSpec:
    def test_pool_is_uniform_projection(self):
        np.testing.assert_array_equal(ReadoutSpec("pool").projection(4), np.full(4, 0.25))

    def test_subsample_is_basis_vector(self):
        np.testing.assert_array_equal(ReadoutSpec("subsample_pixel", pixel_index=2).projection(4),
                                      [0, 0, 1, 0])

    def test_rejects_nonfinite_h(self):
        with pytest.raises(ValueError):
            ReadoutSpec("projection", h=(1.0, np.inf))

    def test_wrong_length_h(self):
        with pytest.raises(ShapeError):
            ReadoutSpec("projection", h=(1.0, 2.0)).projection(3)


class TestFlatten:
    def test_single_entry(self):
        K = CovFull(np.array([[[[2.0]]]]), (1,))
        np.testing.assert_array_equal(flatten_cov(K), [[2.0]])

    def test_one_pixel_is_sample_slice(self, rng):
        v = rng.standard_normal((2, 2, 1, 1))
        np.testing.assert_array_equal(flatten_cov(CovFull(v, (1,))), v[:, :, 0, 0])

    def test_row_index_is_sample_major(self, rng):
        K = CovFull(rng.standard_normal((2, 2, 3, 3)), (3,))
        M = flatten_cov(K)
        for x in range(2):
            for y in range(2):
                for a in range(3):
                    for b in range(3):
                        assert M[x * 3 + a, y * 3 + b] == K.values[x, y, a, b]

    def test_random_psd_flatten_is_symmetric_psd(self, rng):
        K = random_psd_full(rng, 2, 3)
        M = flatten_cov(K)
        np.testing.assert_array_equal(M, M.T)
        assert min_eig_ratio(M) >= -1e-8

    @given(arrays(np.float64, (2, 2, 2, 3, 2, 3), elements=st.floats(-10, 10)))
    def test_unflatten_inverts_flatten(self, values):
        K = CovFull(values, (2, 3))
        back = unflatten_cov(flatten_cov(K), (2, 3))
        np.testing.assert_array_equal(back.values, K.values)


class TestDiag:
    def test_constant(self):
        d = diag_of(CovFull(np.full((2, 2, 3, 3), 1.5), (3,)))
        np.testing.assert_array_equal(d.values, np.full((2, 2, 3), 1.5))

    def test_one_pixel_unchanged(self, rng):
        X = InputSet(rng.standard_normal((3, 2, 1)))
        K = input_cov(X)
        np.testing.assert_array_equal(diag_of(K).values[..., 0], K.values[..., 0, 0])

    def test_exact_extraction(self, rng):
        K = random_psd_full(rng, 3, 4)
        d = diag_of(K)
        for a in range(4):
            assert np.array_equal(d.values[:, :, a], K.values[:, :, a, a])

    def test_expand_round_trip(self, rng):
        Kd = CovDiag(rng.standard_normal((2, 2, 3)), (3,))
        np.testing.assert_array_equal(diag_of(expand_diag(Kd, 7.0)).values, Kd.values)


class TestInputCov:
    def test_scalar(self):
        K = input_cov(InputSet(np.array([[[2.0]]])))
        np.testing.assert_array_equal(K.values[..., 0, 0], [[4.0]])

    def test_sign_pair(self):
        K = input_cov(InputSet(np.array([[[1.0]], [[-1.0]]])))
        np.testing.assert_array_equal(K.values[..., 0, 0], [[1, -1], [-1, 1]])

    def test_normalized_inputs_average_one(self, rng):
        x = rng.standard_normal((4, 3, 5, 5))
        flat = x.reshape(4, -1)
        flat = (flat - flat.mean(1, keepdims=True)) / flat.std(1, keepdims=True)
        K = diag_of(input_cov(InputSet(flat.reshape(x.shape))))
        for i in range(4):
            assert abs(K.values[i, i].mean() - 1.0) < 1e-10

    def test_definition(self, rng):
        x = rng.standard_normal((3, 4, 5))
        K = input_cov(InputSet(x)).values
        ref = np.einsum("xia,yib->xyab", x, x) / 4
        np.testing.assert_allclose(K, ref, rtol=1e-13, atol=1e-14)

    def test_diag_track_matches_bitwise(self, rng):
        X = InputSet(rng.standard_normal((3, 2, 3, 4)))
        assert np.array_equal(diag_of(input_cov(X)).values, input_cov_diag(X).values)

    @given(arrays(np.float64, (4, 2, 3), elements=st.floats(-5, 5)).filter(
        lambda a: np.all(np.abs(a).reshape(4, -1).max(1) > 1e-3)))
    def test_always_psd(self, x):
        assert is_psd(flatten_cov(input_cov(InputSet(x))))

    def test_fcn_tracks_coincide(self, rng):
        X = InputSet(rng.standard_normal((3, 5, 1)))
        np.testing.assert_array_equal(input_cov(X).values[..., 0, 0], input_cov_diag(X).values[..., 0])


def test_class_kernel_requires_matrix():
    with pytest.raises(ShapeError):
        ClassKernel(np.ones(3))
