"""Bit packing, canonical form, and the XNOR-popcount dot product."""

import numpy as np
import pytest

from bicd.bitpack import (
    BitTensor,
    pack_bit_rows,
    packed_dot_matrix,
    popcount_hw,
    popcount_table,
    sign_pack,
    unpack,
    unpack_bit_rows,
    xnor_popcount_dot,
)


def naive_pm1_dot(a, w):
    """Independent oracle: elementwise sign then integer sum of products."""
    sa = np.where(np.asarray(a) >= 0, 1, -1).astype(np.int64)
    sw = np.where(np.asarray(w) >= 0, 1, -1).astype(np.int64)
    return int((sa * sw).sum())


class TestSignPack:
    def test_basic_sign_convention(self):
        b = sign_pack(np.array([-0.5, 2.0, 0.0]))
        np.testing.assert_array_equal(unpack(b), [-1.0, 1.0, 1.0])

    def test_all_zeros_maps_to_plus_one(self):
        b = sign_pack(np.zeros((3, 5)))
        np.testing.assert_array_equal(unpack(b), np.ones((3, 5)))

    def test_matches_elementwise_sign_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 7)).astype(np.float32)
        x[0, 0] = 0.0
        expected = np.where(x >= 0, 1.0, -1.0)
        np.testing.assert_array_equal(unpack(sign_pack(x)), expected)

    def test_idempotent_under_roundtrip(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((5, 130))
        b = sign_pack(x)
        assert sign_pack(unpack(b)) == b

    def test_tail_bits_are_zero(self):
        x = np.ones((2, 70))  # 70 bits -> 2 words, 6 tail bits in word 2
        b = sign_pack(x)
        tail_mask = ~np.uint64((1 << 6) - 1)
        assert np.all(b.words[:, 1] & tail_mask == 0)

    def test_canonical_packing_is_deterministic(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((3, 65))
        assert sign_pack(x) == sign_pack(x.copy())


class TestUnpack:
    def test_explicit_bits(self):
        b = BitTensor(dims=(3,), words=np.array([0b101], dtype=np.uint64))
        np.testing.assert_array_equal(unpack(b), [1.0, -1.0, 1.0])

    def test_empty_tensor(self):
        b = sign_pack(np.zeros((4, 0)))
        assert unpack(b).shape == (4, 0)

    def test_roundtrip_across_word_boundary(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 65))
        b = sign_pack(x)
        assert sign_pack(unpack(b)) == b


class TestXnorPopcountDot:
    def test_identical_vectors(self):
        a = sign_pack(np.ones(8))
        assert xnor_popcount_dot(a, a) == 8

    def test_negated_vectors(self):
        a = sign_pack(np.ones(8))
        w = sign_pack(-np.ones(8))
        assert xnor_popcount_dot(a, w) == -8

    def test_random_64_matches_naive(self):
        rng = np.random.default_rng(17)
        x, y = rng.standard_normal(64), rng.standard_normal(64)
        assert xnor_popcount_dot(sign_pack(x), sign_pack(y)) == naive_pm1_dot(x, y)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length mismatch"):
            xnor_popcount_dot(sign_pack(np.ones(8)), sign_pack(np.ones(9)))

    @pytest.mark.parametrize("n", [1, 7, 63, 64, 65, 100, 128, 129, 200])
    def test_exact_equality_and_parity_properties(self, n):
        rng = np.random.default_rng(n)
        for _ in range(5):
            x, y = rng.standard_normal(n), rng.standard_normal(n)
            d = xnor_popcount_dot(sign_pack(x), sign_pack(y))
            assert d == naive_pm1_dot(x, y)
            assert abs(d) <= n
            assert (d - n) % 2 == 0


class TestPopcountImplementations:
    def test_hw_and_table_agree_bit_exactly(self):
        rng = np.random.default_rng(23)
        words = rng.integers(0, 2**64, size=257, dtype=np.uint64)
        words[0] = 0
        words[1] = np.uint64(2**64 - 1)
        np.testing.assert_array_equal(popcount_hw(words), popcount_table(words))


class TestPackedDotMatrix:
    def test_matches_pairwise_dots(self):
        rng = np.random.default_rng(31)
        n = 130
        a = rng.standard_normal((6, n))
        w = rng.standard_normal((4, n))
        aw = pack_bit_rows(a >= 0)
        ww = pack_bit_rows(w >= 0)
        got = packed_dot_matrix(aw, ww, n)
        for i in range(6):
            for j in range(4):
                assert got[i, j] == naive_pm1_dot(a[i], w[j])

    def test_word_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            packed_dot_matrix(
                np.zeros((2, 2), dtype=np.uint64), np.zeros((2, 3), dtype=np.uint64), 100
            )


class TestBitRowHelpers:
    def test_pack_unpack_roundtrip(self):
        rng = np.random.default_rng(41)
        bits = rng.integers(0, 2, size=(5, 97)).astype(np.uint8)
        words = pack_bit_rows(bits)
        np.testing.assert_array_equal(unpack_bit_rows(words, 97), bits)

    def test_bittensor_shape_validation(self):
        with pytest.raises(ValueError, match="does not match dims"):
            BitTensor(dims=(3, 200), words=np.zeros((3, 1), dtype=np.uint64))
