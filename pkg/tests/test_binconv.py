"""Binary convolution layers: kernel exactness, STE behaviour, gradients."""

import numpy as np
import pytest

from bicd.binconv import (
    BinConvLayer,
    ConvSpec,
    GradTape,
    binary_conv_backward,
    binary_conv_forward,
    change_generator_backward,
    change_generator_forward,
    im2row_packed,
    make_binconv,
)
from bicd.bitpack import pack_bit_rows, packed_dot_matrix, sign_pack, unpack


def naive_binary_conv(a, layer):
    """Dense float oracle: binarize both operands elementwise, convolve with
    explicit loops (padding contributes -1), apply the per-channel affine and
    activation.  Independent of the packed kernel."""
    spec = layer.spec
    n, c, h, w = a.shape
    oh, ow = spec.out_hw(h, w)
    shift = layer.act_shift
    if shift is None:
        sa = np.where(a >= 0, 1.0, -1.0)
    else:
        sa = np.where(a - shift[None, :, None, None] >= 0, 1.0, -1.0)
    p = spec.padding
    sa = np.pad(sa, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-1.0)
    sw = np.where(layer.latent_w >= 0, 1.0, -1.0)
    out = np.zeros((n, spec.out_channels, oh, ow))
    for ni in range(n):
        for o in range(spec.out_channels):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ky in range(spec.kernel_h):
                            for kx in range(spec.kernel_w):
                                y = oy * spec.stride + ky * spec.dilation
                                x = ox * spec.stride + kx * spec.dilation
                                acc += sa[ni, ci, y, x] * sw[o, ci, ky, kx]
                    out[ni, o, oy, ox] = acc
    pre = layer.alpha[None, :, None, None] * out + layer.beta_bias[None, :, None, None]
    if layer.phi == "identity":
        return pre
    if layer.phi == "relu":
        return np.maximum(pre, 0)
    return np.where(pre > 0, pre, layer.prelu_slope[None, :, None, None] * pre)


def identity_layer(spec, rng, dtype=np.float32):
    layer = make_binconv(spec, rng, phi="identity", dtype=dtype)
    layer.alpha = np.ones(spec.out_channels, dtype=dtype)
    layer.beta_bias = np.zeros(spec.out_channels, dtype=dtype)
    return layer


class TestConvSpec:
    def test_output_shape_formula(self):
        spec = ConvSpec(3, 8, 3, 3, stride=2, padding=1, dilation=1)
        assert spec.out_hw(8, 8) == (4, 4)

    def test_empty_output_rejected(self):
        spec = ConvSpec(1, 1, 5, 5)
        with pytest.raises(ValueError):
            spec.out_hw(3, 3)

    def test_invalid_fields_rejected(self):
        with pytest.raises(ValueError):
            ConvSpec(0, 1, 1, 1)
        with pytest.raises(ValueError):
            ConvSpec(1, 1, 1, 1, padding=-1)


class TestIm2RowPacked:
    def test_single_window_equals_input(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 1, 3, 3))
        rows = im2row_packed(sign_pack(x), ConvSpec(1, 1, 3, 3))
        assert rows.dims == (1, 9)
        np.testing.assert_array_equal(
            unpack(rows).reshape(3, 3), np.where(x[0, 0] >= 0, 1.0, -1.0)
        )

    def test_1x1_kernel_gives_one_bit_rows(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 1, 2, 2))
        rows = im2row_packed(sign_pack(x), ConvSpec(1, 1, 1, 1))
        assert rows.dims == (4, 1)
        np.testing.assert_array_equal(
            unpack(rows).ravel(), np.where(x.ravel() >= 0, 1.0, -1.0)
        )

    def test_gather_matches_index_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 8, 8))
        spec = ConvSpec(3, 4, 3, 3, stride=1, padding=1)
        got = unpack(im2row_packed(sign_pack(x), spec))
        sx = np.where(x >= 0, 1.0, -1.0)
        sx = np.pad(sx, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-1.0)
        oh, ow = spec.out_hw(8, 8)
        expected = np.zeros((2 * oh * ow, spec.n_bits))
        r = 0
        for n in range(2):
            for oy in range(oh):
                for ox in range(ow):
                    k = 0
                    for ky in range(3):  # row layout: (ky, kx, c)
                        for kx in range(3):
                            for c in range(3):
                                expected[r, k] = sx[n, c, oy + ky, ox + kx]
                                k += 1
                    r += 1
        np.testing.assert_array_equal(got, expected)

    def test_shape_mismatch_rejected(self):
        x = sign_pack(np.ones((1, 2, 4, 4)))
        with pytest.raises(ValueError, match="channels"):
            im2row_packed(x, ConvSpec(3, 1, 1, 1))


class TestBinaryConvForward:
    def test_all_ones_valid_conv(self):
        rng = np.random.default_rng(3)
        spec = ConvSpec(1, 1, 3, 3)
        layer = identity_layer(spec, rng)
        layer.latent_w = np.ones((1, 1, 3, 3), dtype=np.float32)
        out = binary_conv_forward(np.ones((1, 1, 3, 3), dtype=np.float32), layer, None)
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    def test_affine_scaling(self):
        rng = np.random.default_rng(3)
        spec = ConvSpec(1, 1, 3, 3)
        layer = identity_layer(spec, rng)
        layer.latent_w = np.ones((1, 1, 3, 3), dtype=np.float32)
        layer.alpha = np.array([0.5], dtype=np.float32)
        layer.beta_bias = np.array([1.0], dtype=np.float32)
        out = binary_conv_forward(np.ones((1, 1, 3, 3), dtype=np.float32), layer, None)
        assert out[0, 0, 0, 0] == 5.5

    @pytest.mark.parametrize(
        "spec",
        [
            ConvSpec(3, 5, 3, 3, stride=1, padding=1),
            ConvSpec(2, 3, 1, 1),
            ConvSpec(4, 2, 3, 2, stride=2, padding=2, dilation=2),
            ConvSpec(65, 3, 2, 2, padding=1),  # channel count crosses a word
        ],
    )
    def test_matches_dense_float_oracle(self, spec):
        rng = np.random.default_rng(spec.n_bits)
        a = rng.standard_normal((2, spec.in_channels, 7, 6)).astype(np.float32)
        layer = make_binconv(spec, rng, phi="prelu")
        layer.beta_bias = rng.standard_normal(spec.out_channels).astype(np.float32)
        got = binary_conv_forward(a, layer, None)
        np.testing.assert_allclose(got, naive_binary_conv(a, layer), rtol=0, atol=1e-5)

    def test_act_shift_thresholds_binarization(self):
        rng = np.random.default_rng(9)
        spec = ConvSpec(2, 3, 3, 3, padding=1)
        layer = make_binconv(spec, rng, phi="identity", act_shift_init=0.3)
        a = np.abs(rng.standard_normal((1, 2, 5, 5))).astype(np.float32)
        np.testing.assert_allclose(
            binary_conv_forward(a, layer, None), naive_binary_conv(a, layer), atol=1e-5
        )

    def test_fast_path_agrees_with_public_lowering(self):
        rng = np.random.default_rng(13)
        spec = ConvSpec(5, 4, 3, 3, stride=2, padding=1)
        a = rng.standard_normal((2, 5, 9, 8)).astype(np.float32)
        layer = identity_layer(spec, rng)
        got = binary_conv_forward(a, layer, None)
        rows = im2row_packed(sign_pack(a), spec)
        wbits = (layer.latent_w >= 0).transpose(0, 2, 3, 1).reshape(
            spec.out_channels, spec.n_bits
        )
        dots = packed_dot_matrix(rows.words, pack_bit_rows(wbits), spec.n_bits)
        oh, ow = spec.out_hw(9, 8)
        expected = dots.reshape(2, oh, ow, spec.out_channels).transpose(0, 3, 1, 2)
        np.testing.assert_array_equal(got, expected.astype(np.float32))

    def test_non_finite_input_rejected(self):
        rng = np.random.default_rng(0)
        layer = identity_layer(ConvSpec(1, 1, 1, 1), rng)
        bad = np.full((1, 1, 2, 2), np.nan, dtype=np.float32)
        with pytest.raises(ValueError, match="non-finite"):
            binary_conv_forward(bad, layer, None)


class TestBinaryConvBackward:
    def _run(self, latent_value, rng_seed=0):
        rng = np.random.default_rng(rng_seed)
        spec = ConvSpec(1, 1, 1, 1)
        layer = identity_layer(spec, rng, dtype=np.float64)
        layer.latent_w = np.full((1, 1, 1, 1), latent_value)
        tape = GradTape()
        a = np.full((1, 1, 2, 2), 0.4)
        binary_conv_forward(a, layer, tape)
        g = np.ones((1, 1, 2, 2))
        _, grads = binary_conv_backward(g, layer, tape)
        return grads

    def test_ste_passthrough_inside_clip(self):
        grads = self._run(0.5)
        # 4 spatial positions, activations sign +1, alpha 1
        assert grads["latent_w"][0, 0, 0, 0] == 4.0

    def test_ste_zero_outside_clip(self):
        grads = self._run(1.5)
        assert grads["latent_w"][0, 0, 0, 0] == 0.0

    def test_forward_invariant_to_subthreshold_latent_moves(self):
        rng = np.random.default_rng(21)
        spec = ConvSpec(3, 4, 3, 3, padding=1)
        layer = make_binconv(spec, rng, phi="identity", dtype=np.float64)
        a = rng.standard_normal((1, 3, 6, 6))
        base = binary_conv_forward(a, layer, None)
        # nudge a latent weight without crossing zero or leaving (-1, 1)
        idx = (0, 0, 0, 0)
        w0 = layer.latent_w[idx]
        layer.latent_w[idx] = w0 + (0.05 if w0 >= 0 else -0.05)
        np.testing.assert_array_equal(binary_conv_forward(a, layer, None), base)
        # yet the gradient through that weight is generally nonzero
        tape = GradTape()
        out = binary_conv_forward(a, layer, tape)
        _, grads = binary_conv_backward(np.ones_like(out), layer, tape)
        assert np.abs(grads["latent_w"]).sum() > 0

    def test_missing_tape_entry_rejected(self):
        rng = np.random.default_rng(0)
        layer = identity_layer(ConvSpec(1, 1, 1, 1), rng)
        with pytest.raises(ValueError, match="empty"):
            binary_conv_backward(np.ones((1, 1, 1, 1)), layer, GradTape())

    @pytest.mark.parametrize("phi", ["identity", "prelu"])
    def test_affine_gradients_match_finite_differences(self, phi):
        rng = np.random.default_rng(57)
        spec = ConvSpec(3, 4, 3, 3, stride=1, padding=1)
        layer = make_binconv(spec, rng, phi=phi, dtype=np.float64)
        layer.beta_bias = rng.standard_normal(4) * 0.1
        a = rng.standard_normal((2, 3, 6, 6))
        proj = rng.standard_normal((2, 4, 6, 6))

        def loss():
            return float((binary_conv_forward(a, layer, None) * proj).sum())

        tape = GradTape()
        binary_conv_forward(a, layer, tape)
        _, grads = binary_conv_backward(proj, layer, tape)

        h = 1e-6
        for pname in ["alpha", "beta_bias"] + (["prelu_slope"] if phi == "prelu" else []):
            param = getattr(layer, pname)
            for idx in [(0,), (3,)]:
                orig = param[idx]
                param[idx] = orig + h
                up = loss()
                param[idx] = orig - h
                down = loss()
                param[idx] = orig
                fd = (up - down) / (2 * h)
                assert abs(fd - grads[pname][idx]) <= 1e-4 * max(1.0, abs(fd)), (
                    pname,
                    idx,
                )

    def test_act_shift_gradient_accumulates_ste_pass(self):
        rng = np.random.default_rng(3)
        spec = ConvSpec(2, 2, 1, 1)
        layer = make_binconv(spec, rng, phi="identity", dtype=np.float64, act_shift_init=0.2)
        tape = GradTape()
        a = rng.uniform(0.0, 1.0, size=(1, 2, 3, 3))
        out = binary_conv_forward(a, layer, tape)
        grad_a, grads = binary_conv_backward(np.ones_like(out), layer, tape)
        np.testing.assert_allclose(grads["act_shift"], -grad_a.sum(axis=(0, 2, 3)))


class TestChangeGenerator:
    def test_equal_inputs_give_all_plus_one_bits(self):
        rng = np.random.default_rng(4)
        spec = ConvSpec(2, 3, 3, 3, padding=1)
        layer = identity_layer(spec, rng)
        f = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        got = change_generator_forward(f, f.copy(), layer, None)
        expected = binary_conv_forward(np.zeros_like(f), layer, None)
        np.testing.assert_array_equal(got, expected)

    def test_difference_is_max_minus_min(self):
        f0 = np.full((1, 1, 1, 1), 2.0, dtype=np.float32)
        f1 = np.full((1, 1, 1, 1), -1.0, dtype=np.float32)
        d = np.abs(f0 - f1)
        assert d[0, 0, 0, 0] == 3.0
        assert np.array_equal(np.maximum(f0, f1) - np.minimum(f0, f1), d)

    def test_matches_absolute_difference_oracle(self):
        rng = np.random.default_rng(5)
        spec = ConvSpec(3, 2, 3, 3, padding=1)
        layer = make_binconv(spec, rng, phi="relu", act_shift_init=0.5)
        f0 = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        f1 = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        got = change_generator_forward(f0, f1, layer, None)
        expected = binary_conv_forward(np.abs(f0 - f1), layer, None)
        np.testing.assert_array_equal(got, expected)

    def test_forward_symmetry(self):
        rng = np.random.default_rng(6)
        spec = ConvSpec(2, 2, 1, 1)
        layer = make_binconv(spec, rng, phi="identity", act_shift_init=0.1)
        f0 = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        f1 = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        a = change_generator_forward(f0, f1, layer, None)
        b = change_generator_forward(f1, f0, layer, None)
        np.testing.assert_array_equal(a, b)

    def test_tie_gradient_routes_to_first_operand(self):
        rng = np.random.default_rng(7)
        spec = ConvSpec(1, 1, 1, 1)
        layer = make_binconv(spec, rng, phi="identity", dtype=np.float64, act_shift_init=0.1)
        tape = GradTape()
        f0 = np.zeros((1, 1, 2, 2))
        f1 = np.zeros((1, 1, 2, 2))
        out = change_generator_forward(f0, f1, layer, tape)
        g0, g1, _ = change_generator_backward(np.ones_like(out), layer, tape)
        np.testing.assert_array_equal(g0, -g1)
        # at ties d = f0 - f1, so f0 receives the positive route
        inner = np.ones((1, 1, 2, 2)) * layer.alpha[0]
        mask = (np.abs(-layer.act_shift[0]) <= 1.0) * 1.0
        sgn_w = 1.0 if layer.latent_w[0, 0, 0, 0] >= 0 else -1.0
        np.testing.assert_allclose(g0, inner * mask * sgn_w)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(8)
        layer = identity_layer(ConvSpec(1, 1, 1, 1), rng)
        with pytest.raises(ValueError, match="mismatch"):
            change_generator_forward(
                np.zeros((1, 1, 2, 2), dtype=np.float32),
                np.zeros((1, 1, 3, 2), dtype=np.float32),
                layer,
                None,
            )
