import numpy as np
import pytest

import naive_reference as ref
from sparsedepth import layers
from sparsedepth.errors import ShapeMismatchError
from sparsedepth.layers import (
    ConvParams,
    SparseConvConfig,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    mask_maxpool,
    normalized_skip_sum,
    normalized_skip_sum_backward,
    relu_backward,
    relu_forward,
    sparse_conv2d_backward,
    sparse_conv2d_forward,
    split_channels,
    window_count,
)

BOTH_METHODS = ("direct", "fft")


def random_params(rng, co, ci, ks, bias_scale=1.0):
    return ConvParams(
        weights=rng.standard_normal((co, ci, ks, ks)),
        bias=bias_scale * rng.standard_normal(co),
    )


def random_mask(rng, n, h, w, density):
    return (rng.random((n, 1, h, w)) < density).astype(np.float64)


class TestConv2dForward:
    def test_averaging_kernel_on_constant_input(self):
        p = ConvParams(weights=np.full((1, 1, 3, 3), 1.0 / 9.0), bias=np.zeros(1))
        out = conv2d_forward(np.ones((1, 1, 3, 3)), p)
        assert out[0, 0, 1, 1] == pytest.approx(1.0, abs=1e-15)

    def test_zero_weights_give_constant_bias(self):
        rng = np.random.default_rng(0)
        p = ConvParams(weights=np.zeros((2, 3, 5, 5)), bias=np.array([2.5, -1.0]))
        out = conv2d_forward(rng.standard_normal((2, 3, 6, 7)), p)
        np.testing.assert_array_equal(out[:, 0], np.full((2, 6, 7), 2.5))
        np.testing.assert_array_equal(out[:, 1], np.full((2, 6, 7), -1.0))

    def test_center_pixel_is_direct_dot_product(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 1, 5, 5))
        p = random_params(rng, 1, 1, 3)
        out = conv2d_forward(x, p)
        expect = np.sum(x[0, 0, 1:4, 1:4] * p.weights[0, 0]) + p.bias[0]
        assert out[0, 0, 2, 2] == pytest.approx(expect, rel=1e-14)

    @pytest.mark.parametrize("method", BOTH_METHODS)
    def test_matches_naive_oracle(self, method):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 9, 8))
        p = random_params(rng, 4, 3, 5)
        out = conv2d_forward(x, p, method=method)
        expect = ref.naive_conv2d(x, p.weights, p.bias)
        np.testing.assert_allclose(out, expect, rtol=1e-12, atol=1e-12)

    def test_channel_mismatch_rejected(self):
        p = random_params(np.random.default_rng(3), 1, 2, 3)
        with pytest.raises(ShapeMismatchError):
            conv2d_forward(np.ones((1, 3, 4, 4)), p)

    def test_fft_and_direct_agree(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 2, 16, 16))
        p = random_params(rng, 3, 2, 7)
        a = conv2d_forward(x, p, method="direct")
        b = conv2d_forward(x, p, method="fft")
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


class TestConv2dBackward:
    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 2, 6, 6))
        p = random_params(rng, 2, 2, 3)
        g = conv2d_backward(x, p, np.zeros((1, 2, 6, 6)))
        assert not g.d_weights.any() and not g.d_bias.any() and not g.d_input.any()

    def test_single_pixel_upstream_reads_input_window(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 1, 5, 5))
        p = random_params(rng, 1, 1, 3)
        up = np.zeros((1, 1, 5, 5))
        up[0, 0, 2, 2] = 1.0
        g = conv2d_backward(x, p, up)
        np.testing.assert_allclose(g.d_weights[0, 0], x[0, 0, 1:4, 2 - 1 : 2 + 2], rtol=1e-12)

    @pytest.mark.parametrize("method", BOTH_METHODS)
    def test_matches_finite_differences(self, method):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 2, 6, 6))
        p = random_params(rng, 2, 2, 3)
        up = rng.standard_normal((1, 2, 6, 6))
        g = conv2d_backward(x, p, up, method=method)

        def loss_of_w(w):
            return float(np.sum(conv2d_forward(x, ConvParams(w, p.bias), method=method) * up))

        def loss_of_x(xx):
            return float(np.sum(conv2d_forward(xx, p, method=method) * up))

        fd_w = ref.fd_gradient(loss_of_w, p.weights.copy())
        fd_x = ref.fd_gradient(loss_of_x, x.copy())
        assert ref.rel_errors(g.d_weights, fd_w).max() < 1e-5
        assert ref.rel_errors(g.d_input, fd_x).max() < 1e-5

    def test_cache_reuse_is_bitwise_identical(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 2, 10, 10))
        p = random_params(rng, 3, 2, 5)
        up = rng.standard_normal((2, 3, 10, 10))
        out, cache = layers._conv2d_forward_cached(x, p, method="fft")
        with_cache = conv2d_backward(x, p, up, cache=cache)
        fresh = conv2d_backward(x, p, up, method="fft")
        np.testing.assert_array_equal(with_cache.d_weights, fresh.d_weights)
        np.testing.assert_array_equal(with_cache.d_input, fresh.d_input)


class TestSparseConvForward:
    def test_dense_mask_interior_is_scaled_average(self):
        eps = 1e-8
        x0, w0 = 3.0, 0.25
        cfg = SparseConvConfig(
            ConvParams(np.full((1, 1, 3, 3), w0), np.zeros(1)), epsilon=eps
        )
        out, mask = sparse_conv2d_forward(
            np.full((1, 1, 5, 5), x0), np.ones((1, 1, 5, 5)), cfg
        )
        assert out[0, 0, 2, 2] == pytest.approx(9 * x0 * w0 / (9 + eps), rel=1e-15)
        assert mask.all()

    def test_single_observed_pixel(self):
        eps = 1e-8
        v, wv, b = 4.0, 0.5, 1.5
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = v
        o = np.zeros((1, 1, 3, 3))
        o[0, 0, 1, 1] = 1.0
        cfg = SparseConvConfig(ConvParams(np.full((1, 1, 3, 3), wv), np.array([b])), epsilon=eps)
        out, mask = sparse_conv2d_forward(x, o, cfg)
        assert out[0, 0, 1, 1] == pytest.approx(v * wv / (1 + eps) + b, rel=1e-15)
        assert mask[0, 0, 1, 1] == 1.0

    @pytest.mark.parametrize("method", BOTH_METHODS)
    def test_matches_naive_oracle(self, method):
        rng = np.random.default_rng(9)
        x = rng.uniform(2.0, 80.0, (1, 1, 8, 8))
        o = random_mask(rng, 1, 8, 8, 0.3)
        cfg = SparseConvConfig(random_params(rng, 2, 1, 5))
        out, mask = sparse_conv2d_forward(x, o, cfg, method=method)
        eout, emask = ref.naive_sparse_conv2d(x, o, cfg.params.weights, cfg.params.bias, cfg.epsilon)
        np.testing.assert_allclose(out, eout, rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(mask, emask)

    def test_large_image_fft_path_matches_oracle(self):
        rng = np.random.default_rng(10)
        x = rng.uniform(2.0, 80.0, (1, 1, 64, 64))
        o = random_mask(rng, 1, 64, 64, 0.1)
        cfg = SparseConvConfig(random_params(rng, 2, 1, 7))
        out, mask = sparse_conv2d_forward(x, o, cfg)  # auto-picks fft at this size
        eout, emask = ref.naive_sparse_conv2d(x, o, cfg.params.weights, cfg.params.bias, cfg.epsilon)
        np.testing.assert_allclose(out, eout, rtol=1e-12, atol=1e-10)
        np.testing.assert_array_equal(mask, emask)

    @pytest.mark.parametrize("method", BOTH_METHODS)
    def test_empty_window_emits_exact_bias_and_zero_mask(self, method):
        rng = np.random.default_rng(11)
        x = rng.uniform(2.0, 80.0, (1, 1, 12, 12))
        o = np.zeros((1, 1, 12, 12))
        o[0, 0, 0, 0] = 1.0  # far corner: windows at the opposite corner stay empty
        cfg = SparseConvConfig(random_params(rng, 3, 1, 3))
        out, mask = sparse_conv2d_forward(x, o, cfg, method=method)
        assert mask[0, 0, 11, 11] == 0.0
        np.testing.assert_array_equal(out[0, :, 11, 11], cfg.params.bias)

    def test_epsilon_must_be_positive(self):
        p = ConvParams(np.zeros((1, 1, 3, 3)), np.zeros(1))
        with pytest.raises(ValueError):
            SparseConvConfig(p, epsilon=0.0)

    @pytest.mark.parametrize("method", BOTH_METHODS)
    def test_unobserved_values_never_matter(self, method):
        rng = np.random.default_rng(12)
        size = 64 if method == "fft" else 10
        x = rng.uniform(2.0, 80.0, (1, 1, size, size))
        o = random_mask(rng, 1, size, size, 0.2)
        cfg = SparseConvConfig(random_params(rng, 2, 1, 5))
        out1, mask1 = sparse_conv2d_forward(x, o, cfg, method=method)
        garbage = np.where(o > 0, x, rng.uniform(-1e6, 1e6, x.shape))
        out2, mask2 = sparse_conv2d_forward(garbage, o, cfg, method=method)
        np.testing.assert_array_equal(out1, out2)
        np.testing.assert_array_equal(mask1, mask2)

    def test_dense_equivalence_with_scaled_standard_conv(self):
        # with a fully observed input the normalized conv is a standard conv
        # whose weights carry the 1/((2k+1)^2 + eps) factor, on the interior
        rng = np.random.default_rng(13)
        for method, size in (("direct", 12), ("fft", 64)):
            x = rng.standard_normal((1, 2, size, size))
            p = random_params(rng, 3, 2, 5)
            eps = 1e-8
            cfg = SparseConvConfig(p, epsilon=eps)
            sparse_out, _ = sparse_conv2d_forward(x, np.ones((1, 1, size, size)), cfg, method=method)
            scaled = ConvParams(p.weights / (25 + eps), p.bias)
            dense_out = conv2d_forward(x, scaled, method=method)
            interior = np.s_[:, :, 2:-2, 2:-2]
            np.testing.assert_allclose(sparse_out[interior], dense_out[interior], rtol=1e-12)

    def test_translation_equivariance(self):
        rng = np.random.default_rng(14)
        x = rng.uniform(2.0, 80.0, (1, 1, 16, 16))
        o = random_mask(rng, 1, 16, 16, 0.4)
        cfg = SparseConvConfig(random_params(rng, 1, 1, 3))
        out, _ = sparse_conv2d_forward(x, o, cfg)
        dy, dx = 2, 3
        xs = np.roll(np.roll(x, dy, axis=2), dx, axis=3)
        os_ = np.roll(np.roll(o, dy, axis=2), dx, axis=3)
        outs, _ = sparse_conv2d_forward(xs, os_, cfg)
        # interior away from both borders and the wrap line
        np.testing.assert_allclose(
            outs[0, 0, dy + 2 : -2, dx + 2 : -2], out[0, 0, 2 : -2 - dy, 2 : -2 - dx], rtol=1e-10
        )

    def test_mask_monotone_under_added_observations(self):
        rng = np.random.default_rng(15)
        o = random_mask(rng, 1, 10, 10, 0.1)
        more = np.maximum(o, random_mask(rng, 1, 10, 10, 0.2))
        m1 = mask_maxpool(o, 2)
        m2 = mask_maxpool(more, 2)
        assert np.all(m2 >= m1)


class TestSparseConvBackward:
    def test_zero_upstream(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((1, 1, 6, 6))
        o = random_mask(rng, 1, 6, 6, 0.5)
        cfg = SparseConvConfig(random_params(rng, 2, 1, 3))
        g = sparse_conv2d_backward(x, o, cfg, np.zeros((1, 2, 6, 6)))
        assert not g.d_weights.any() and not g.d_bias.any() and not g.d_input.any()

    def test_bias_gradient_is_upstream_sum(self):
        rng = np.random.default_rng(17)
        x = np.full((2, 1, 5, 5), 3.0)
        o = np.ones((2, 1, 5, 5))
        cfg = SparseConvConfig(random_params(rng, 2, 1, 3))
        up = rng.standard_normal((2, 2, 5, 5))
        g = sparse_conv2d_backward(x, o, cfg, up)
        np.testing.assert_allclose(g.d_bias, up.sum(axis=(0, 2, 3)), rtol=1e-14)

    @pytest.mark.parametrize("method", BOTH_METHODS)
    def test_matches_finite_differences(self, method):
        rng = np.random.default_rng(18)
        x = rng.standard_normal((1, 2, 6, 6))
        o = random_mask(rng, 1, 6, 6, 0.5)
        p = random_params(rng, 2, 2, 3)
        cfg = SparseConvConfig(p)
        up = rng.standard_normal((1, 2, 6, 6))
        g = sparse_conv2d_backward(x, o, cfg, up, method=method)

        def loss_of_w(w):
            out, _ = sparse_conv2d_forward(x, o, SparseConvConfig(ConvParams(w, p.bias)), method=method)
            return float(np.sum(out * up))

        def loss_of_b(b):
            out, _ = sparse_conv2d_forward(x, o, SparseConvConfig(ConvParams(p.weights, b)), method=method)
            return float(np.sum(out * up))

        def loss_of_x(xx):
            out, _ = sparse_conv2d_forward(xx, o, cfg, method=method)
            return float(np.sum(out * up))

        assert ref.rel_errors(g.d_weights, ref.fd_gradient(loss_of_w, p.weights.copy())).max() < 1e-5
        assert ref.rel_errors(g.d_bias, ref.fd_gradient(loss_of_b, p.bias.copy())).max() < 1e-5
        assert ref.rel_errors(g.d_input, ref.fd_gradient(loss_of_x, x.copy())).max() < 1e-5

    def test_no_gradient_at_unobserved_inputs(self):
        rng = np.random.default_rng(19)
        x = rng.standard_normal((1, 1, 8, 8))
        o = random_mask(rng, 1, 8, 8, 0.4)
        cfg = SparseConvConfig(random_params(rng, 1, 1, 3))
        g = sparse_conv2d_backward(x, o, cfg, rng.standard_normal((1, 1, 8, 8)))
        np.testing.assert_array_equal(g.d_input[o == 0], 0.0)

    def test_cache_reuse_is_bitwise_identical(self):
        rng = np.random.default_rng(20)
        x = rng.uniform(2.0, 80.0, (2, 1, 64, 64))
        o = random_mask(rng, 2, 64, 64, 0.1)
        cfg = SparseConvConfig(random_params(rng, 4, 1, 5))
        up = rng.standard_normal((2, 4, 64, 64))
        out, mask, cache = layers._sparse_conv2d_forward_cached(x, o, cfg)
        with_cache = sparse_conv2d_backward(x, o, cfg, up, cache=cache)
        fresh = sparse_conv2d_backward(x, o, cfg, up)
        np.testing.assert_array_equal(with_cache.d_weights, fresh.d_weights)
        np.testing.assert_array_equal(with_cache.d_bias, fresh.d_bias)
        np.testing.assert_array_equal(with_cache.d_input, fresh.d_input)


class TestMaskMaxpool:
    def test_all_zero_stays_zero(self):
        np.testing.assert_array_equal(mask_maxpool(np.zeros((1, 1, 5, 5)), 1), np.zeros((1, 1, 5, 5)))

    def test_point_dilates_to_block(self):
        o = np.zeros((1, 1, 7, 7))
        o[0, 0, 3, 4] = 1.0
        m = mask_maxpool(o, 1)
        expect = np.zeros((1, 1, 7, 7))
        expect[0, 0, 2:5, 3:6] = 1.0
        np.testing.assert_array_equal(m, expect)

    def test_matches_naive_window_max(self):
        rng = np.random.default_rng(21)
        o = random_mask(rng, 2, 11, 9, 0.2)
        for k in (0, 1, 3):
            np.testing.assert_array_equal(mask_maxpool(o, k), ref.naive_window_max(o, k))

    def test_agrees_with_sparse_conv_mask(self):
        rng = np.random.default_rng(22)
        o = random_mask(rng, 1, 10, 10, 0.15)
        x = rng.uniform(2.0, 80.0, (1, 1, 10, 10))
        cfg = SparseConvConfig(random_params(rng, 1, 1, 5))
        _, mask = sparse_conv2d_forward(x, o, cfg)
        np.testing.assert_array_equal(mask, mask_maxpool(o, 2))

    def test_window_count_integer_valued(self):
        rng = np.random.default_rng(23)
        o = random_mask(rng, 1, 20, 20, 0.5)
        cnt = window_count(o, 2)
        np.testing.assert_array_equal(cnt, np.rint(cnt))
        assert cnt.max() <= 25


class TestRelu:
    def test_forward(self):
        x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
        np.testing.assert_array_equal(relu_forward(x), [[[[0.0, 0.0, 2.0]]]])

    def test_backward(self):
        x = np.array([-1.0, 2.0]).reshape(1, 1, 1, 2)
        up = np.array([5.0, 5.0]).reshape(1, 1, 1, 2)
        np.testing.assert_array_equal(relu_backward(x, up), [[[[0.0, 5.0]]]])

    def test_finite_differences_away_from_zero(self):
        rng = np.random.default_rng(24)
        x = rng.standard_normal((1, 1, 4, 4))
        x[np.abs(x) < 0.1] = 0.5  # keep clear of the kink
        up = rng.standard_normal(x.shape)
        g = relu_backward(x, up)
        fd = ref.fd_gradient(lambda xx: float(np.sum(relu_forward(xx) * up)), x.copy())
        assert ref.rel_errors(g, fd).max() < 1e-6


class TestConcat:
    def test_shapes(self):
        out = concat_channels(np.ones((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)))
        assert out.shape == (1, 2, 2, 2)

    def test_zero_channel_identity(self):
        a = np.arange(8.0).reshape(1, 2, 2, 2)
        np.testing.assert_array_equal(concat_channels(a, np.zeros((1, 0, 2, 2))), a)

    def test_split_roundtrip(self):
        rng = np.random.default_rng(25)
        a = rng.standard_normal((2, 3, 4, 4))
        b = rng.standard_normal((2, 2, 4, 4))
        left, right = split_channels(concat_channels(a, b), 3)
        np.testing.assert_array_equal(left, a)
        np.testing.assert_array_equal(right, b)

    def test_spatial_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            concat_channels(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)))


class TestNormalizedSkipSum:
    def test_mean_of_observed(self):
        x1 = np.full((1, 1, 1, 1), 2.0)
        x2 = np.full((1, 1, 1, 1), 4.0)
        o = np.ones((1, 1, 1, 1))
        out, mask = normalized_skip_sum([(x1, o), (x2, o)])
        assert out[0, 0, 0, 0] == 3.0
        assert mask[0, 0, 0, 0] == 1.0

    def test_unobserved_stream_excluded(self):
        x1 = np.full((1, 1, 1, 1), 7.0)
        x2 = np.full((1, 1, 1, 1), 123.0)
        out, mask = normalized_skip_sum([(x1, np.ones((1, 1, 1, 1))), (x2, np.zeros((1, 1, 1, 1)))])
        assert out[0, 0, 0, 0] == 7.0
        assert mask[0, 0, 0, 0] == 1.0

    def test_nothing_observed(self):
        z = np.zeros((1, 1, 1, 1))
        out, mask = normalized_skip_sum([(np.full((1, 1, 1, 1), 5.0), z), (np.full((1, 1, 1, 1), 9.0), z)])
        assert out[0, 0, 0, 0] == 0.0
        assert mask[0, 0, 0, 0] == 0.0

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            normalized_skip_sum([])

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(26)
        shape = (1, 2, 4, 4)
        xs = [rng.standard_normal(shape) for _ in range(3)]
        os_ = [random_mask(rng, 1, 4, 4, 0.6) for _ in range(3)]
        up = rng.standard_normal(shape)
        grads = normalized_skip_sum_backward(list(zip(xs, os_)), up)
        for i in range(3):
            def loss(v, i=i):
                streams = [(v if j == i else xs[j], os_[j]) for j in range(3)]
                return float(np.sum(normalized_skip_sum(streams)[0] * up))

            fd = ref.fd_gradient(loss, xs[i].copy())
            assert ref.rel_errors(grads[i], fd).max() < 1e-5
