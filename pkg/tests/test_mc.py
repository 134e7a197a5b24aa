import numpy as np
import pytest

from cnngp.data_model import ArchConfig, ClassKernel, InputSet, ReadoutSpec, input_cov, input_cov_diag
from cnngp.mc import (
    LayerParams,
    _PairwiseSum,
    draw_params,
    draw_stream,
    empirical_cov,
    forward,
    forward_sample,
    kernel_distance,
    mc_estimate,
    mc_readout,
)
from cnngp.propagation import TrackError, kernel_matrix, propagate, readout


def arch(**kw):
    base = dict(depth=2, filter_half_width=1, sigma_w2=1.7562, sigma_b2=0.1841, nonlinearity="erf")
    base.update(kw)
    return ArchConfig(**base)


def normalized(rng, n, c, d):
    x = rng.standard_normal((n, c, d))
    flat = x.reshape(n, -1)
    flat = (flat - flat.mean(1, keepdims=True)) / flat.std(1, keepdims=True)
    return InputSet(flat.reshape(x.shape))


class TestForward:
    def test_zero_draw_gives_zero(self, rng):
        X = normalized(rng, 3, 2, 5)
        cfg = arch()
        params = draw_params(cfg, 2, (5,), 4, rng)
        zero = [LayerParams(np.zeros_like(p.weights), np.zeros_like(p.bias)) for p in params]
        for y in forward(X, cfg, zero)[1:]:
            np.testing.assert_array_equal(y, 0.0)

    def test_linear_single_unit(self):
        X = InputSet(np.array([[[1.5]]]))
        cfg = ArchConfig(depth=1, filter_half_width=0, nonlinearity="relu")
        p = [LayerParams(np.array([[[2.0]]]), np.array([0.5]))]
        assert forward(X, cfg, p)[1].item() == 2.0 * 1.5 + 0.5

    @pytest.mark.parametrize("padding", ["circular", "same", "valid"])
    def test_cross_correlation_loops(self, rng, padding):
        X = normalized(rng, 2, 3, 6)
        cfg = arch(depth=1, padding=padding, nonlinearity="relu")
        p = draw_params(cfg, 3, (6,), 4, rng)[0]
        y = forward(X, cfg, [p])[1]
        x = X.samples
        out_pix = range(1, 5) if padding == "valid" else range(6)
        for s in range(2):
            for i in range(4):
                for o, a in enumerate(out_pix):
                    z = p.bias[i]
                    for j in range(3):
                        for bi, beta in enumerate((-1, 0, 1)):
                            src = a + beta
                            if padding == "circular":
                                src %= 6
                            elif not 0 <= src < 6:
                                continue
                            z += p.weights[i, j, bi] * x[s, j, src]
                    assert abs(y[s, i, o] - max(z, 0.0)) < 1e-12

    def test_lcn_weights_per_output_pixel(self, rng):
        cfg = arch(connectivity="lcn", depth=1)
        p = draw_params(cfg, 3, (6,), 4, rng)[0]
        assert p.weights.shape == (4, 3, 3, 6)

    def test_deterministic(self, rng):
        X = normalized(rng, 3, 2, 5)
        a = forward_sample(X, arch(), 8, draw_stream(7, 3))
        b = forward_sample(X, arch(), 8, draw_stream(7, 3))
        for ya, yb in zip(a, b):
            assert np.array_equal(ya, yb)

    def test_weight_variance(self):
        cfg = arch(depth=1, v=(0.2, 0.5, 0.3), sigma_w2=2.0)
        w = draw_params(cfg, 4, (5,), 4000, draw_stream(0, 0))[0].weights
        np.testing.assert_allclose(w.var(axis=(0, 1)), np.array([0.2, 0.5, 0.3]) * 2.0 / 4, rtol=0.03)


class TestEstimate:
    def test_depth_zero_exact(self, rng):
        X = normalized(rng, 3, 2, 5)
        est = mc_estimate(X, arch(depth=0), 3, 2, seed=0, track="full")
        np.testing.assert_array_equal(est.kernel.values, input_cov(X).values)
        est = mc_estimate(X, arch(depth=0), 3, 2, seed=0)
        np.testing.assert_array_equal(est.kernel.values, input_cov_diag(X).values)

    def test_relu_diagonal_entry(self):
        X = InputSet(np.ones((1, 1, 1)))
        cfg = ArchConfig(depth=1, filter_half_width=0, sigma_w2=1.0, sigma_b2=0.0)
        n, M = 2**14, 2**6
        est = mc_estimate(X, cfg, n, M, seed=11)
        assert abs(est.kernel.values.item() - 0.5) < 3 * np.sqrt(2 / (n * M))

    def test_same_seed_bitwise(self, rng):
        X = normalized(rng, 4, 2, 6)
        a = mc_estimate(X, arch(), 6, 5, seed=3).kernel.values
        b = mc_estimate(X, arch(), 6, 5, seed=3).kernel.values
        c = mc_estimate(X, arch(), 6, 5, seed=3, threads=3).kernel.values
        assert np.array_equal(a, b) and np.array_equal(a, c)
        assert not np.array_equal(a, mc_estimate(X, arch(), 6, 5, seed=4).kernel.values)

    def test_symmetric(self, rng):
        X = normalized(rng, 4, 2, 6)
        v = mc_estimate(X, arch(), 6, 3, seed=1, track="full").kernel.values
        np.testing.assert_array_equal(v, v.transpose(1, 0, 3, 2))

    def test_rejects_zero_draws(self, rng):
        with pytest.raises(ValueError):
            mc_estimate(normalized(rng, 2, 1, 3), arch(), 4, 0, seed=0)

    def test_empirical_cov(self, rng):
        y = rng.standard_normal((3, 5, 4))
        full = empirical_cov(y, True)
        np.testing.assert_allclose(full, np.einsum("xca,ycb->xyab", y, y) / 5, rtol=1e-13)
        np.testing.assert_allclose(empirical_cov(y, False), np.einsum("xca,yca->xya", y, y) / 5,
                                   rtol=1e-13)

    def test_pairwise_sum(self, rng):
        terms = [rng.standard_normal(3) for _ in range(11)]
        acc = _PairwiseSum()
        for t in terms:
            acc.add(t)
        np.testing.assert_allclose(acc.total(), np.sum(terms, axis=0), rtol=1e-14)


class TestDistance:
    def test_identical(self, rng):
        K = rng.standard_normal((4, 4))
        assert kernel_distance(K, K) == 0.0

    def test_double(self, rng):
        K = rng.standard_normal((4, 4))
        assert abs(kernel_distance(2 * K, K) - 1.0) < 1e-15

    def test_direct(self, rng):
        a, b = rng.standard_normal((5, 5)), rng.standard_normal((5, 5))
        ref = sum((a[i, j] - b[i, j]) ** 2 for i in range(5) for j in range(5)) / \
            sum(b[i, j] ** 2 for i in range(5) for j in range(5))
        assert abs(kernel_distance(a, b) - ref) < 1e-13

    def test_zero_reference(self):
        with pytest.raises(ValueError):
            kernel_distance(np.ones((2, 2)), np.zeros((2, 2)))

    def test_class_kernels(self):
        assert kernel_distance(ClassKernel(np.eye(2)), ClassKernel(np.eye(2))) == 0.0


class TestReadout:
    def test_pool_single_pixel_is_vectorize(self, rng):
        X = normalized(rng, 3, 4, 1)
        cfg = arch(filter_half_width=0)
        est = mc_estimate(X, cfg, 8, 2, seed=0, track="full")
        a = mc_readout(est, cfg, ReadoutSpec("pool")).matrix
        b = mc_readout(est, cfg, ReadoutSpec("vectorize")).matrix
        np.testing.assert_allclose(a, b, rtol=1e-15)

    def test_analytic_injection(self, rng):
        X = normalized(rng, 3, 2, 5)
        cfg = arch(readout=ReadoutSpec("pool"))
        est = mc_estimate(X, cfg, 2, 1, seed=0)
        tr = propagate(X, cfg)
        from dataclasses import replace
        est = replace(est, kernel=tr.final)
        np.testing.assert_array_equal(mc_readout(est, cfg).matrix, readout(tr).matrix)

    def test_pool_needs_full(self, rng):
        X = normalized(rng, 3, 2, 5)
        est = mc_estimate(X, arch(), 2, 1, seed=0, track="diag")
        with pytest.raises(TrackError):
            mc_readout(est, arch(), ReadoutSpec("pool"))


class TestConvergence:
    X_SEED = 5

    def _setup(self, readout_kind="pool", **kw):
        X = normalized(np.random.default_rng(self.X_SEED), 16, 3, 8)
        cfg = arch(depth=3, readout=ReadoutSpec(readout_kind), **kw)
        return X, cfg

    def test_pool_distance_decreases_with_budget(self):
        X, cfg = self._setup()
        ref = kernel_matrix(X, cfg)
        dists = [np.mean([kernel_distance(mc_readout(mc_estimate(X, cfg, n, n, seed=s), cfg), ref)
                          for s in range(3)]) for n in (4, 16, 64)]
        assert dists[0] > dists[1] > dists[2]

    def test_iso_lines_for_wide_networks(self):
        X, cfg = self._setup()
        ref = kernel_matrix(X, cfg)

        def mean_dist(n, M):
            return np.mean([kernel_distance(mc_readout(mc_estimate(X, cfg, n, M, seed=100 * r), cfg), ref)
                            for r in range(4)])

        dists = [mean_dist(n, 2**10 // n) for n in (16, 64, 256)]
        assert max(dists) / min(dists) < 3

    def test_lcn_estimates_approach_cnn_kernel(self):
        X, cfg = self._setup("vectorize", connectivity="lcn")
        ref = kernel_matrix(X, arch(depth=3))
        dists = [kernel_distance(mc_readout(mc_estimate(X, cfg, n, 4, seed=2), cfg), ref)
                 for n in (4, 32, 256)]
        assert dists[0] > dists[1] > dists[2] and dists[2] < 0.01
