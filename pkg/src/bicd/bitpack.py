"""Bit-packed {-1,+1} tensors and the XNOR-popcount dot-product kernel.

Values are stored one bit per element in 64-bit words: bit 1 encodes +1,
bit 0 encodes -1.  The innermost axis is packed into word lanes,
little-endian within each word (logical element ``64*w + j`` is bit ``j``
of word ``w``).  Tail bits past the logical length are always zero, so the
same logical data always packs to identical words.

Because padding bits are zero in *both* operands, an XOR never sets them,
and the +-1 dot product of two rows of length n reduces to

    dot = n - 2 * popcount(a XOR w)

with no masking in the hot loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORD_BITS = 64

_BYTE_POPCOUNT = np.array(
    [bin(i).count("1") for i in range(256)], dtype=np.uint8
)


def popcount_hw(words: np.ndarray) -> np.ndarray:
    """Per-word population count using the native ufunc (numpy >= 2.0)."""
    return np.bitwise_count(words)


def popcount_table(words: np.ndarray) -> np.ndarray:
    """Portable per-word population count via a 256-entry byte table."""
    words = np.ascontiguousarray(words, dtype=np.uint64)
    per_byte = _BYTE_POPCOUNT[words.view(np.uint8)]
    return per_byte.reshape(words.shape + (8,)).sum(axis=-1, dtype=np.uint8)


# Selected once at import; both implementations must agree bit-exactly and
# the test suite checks that they do.
if hasattr(np, "bitwise_count"):
    popcount = popcount_hw
else:  # pragma: no cover - numpy < 2.0 fallback
    popcount = popcount_table


def _words_per_row(n_bits: int) -> int:
    return (n_bits + WORD_BITS - 1) // WORD_BITS


def pack_bit_rows(bits: np.ndarray) -> np.ndarray:
    """Pack a (..., n) array of 0/1 values into (..., ceil(n/64)) uint64 words.

    Tail bits are zero.  Word values are platform independent: byte k of a
    word holds logical elements 8k..8k+7, LSB first.
    """
    bits = np.asarray(bits, dtype=bool)
    n = bits.shape[-1]
    nw = _words_per_row(n)
    if n == 0:
        return np.zeros(bits.shape[:-1] + (0,), dtype=np.uint64)
    lead = bits.shape[:-1]
    packed = np.packbits(bits.reshape(-1, n), axis=-1, bitorder="little")
    if packed.shape[-1] < nw * 8:
        packed = np.pad(packed, ((0, 0), (0, nw * 8 - packed.shape[-1])))
    return packed.view("<u8").reshape(lead + (nw,)).astype(np.uint64, copy=False)


def unpack_bit_rows(words: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`pack_bit_rows`; returns a (..., n) uint8 0/1 array."""
    words = np.asarray(words, dtype=np.uint64)
    if n == 0:
        return np.zeros(words.shape[:-1] + (0,), dtype=np.uint8)
    shifts = np.arange(WORD_BITS, dtype=np.uint64)
    bits = (words[..., :, None] >> shifts) & np.uint64(1)
    bits = bits.reshape(words.shape[:-1] + (words.shape[-1] * WORD_BITS,))
    return bits[..., :n].astype(np.uint8)


@dataclass
class BitTensor:
    """Bit-packed +-1 tensor: ``dims`` logical extents, innermost axis packed.

    ``words`` has shape ``dims[:-1] + (ceil(dims[-1]/64),)``.
    """

    dims: tuple
    words: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        expect = self.dims[:-1] + (_words_per_row(self.dims[-1]),)
        if self.words.shape != expect:
            raise ValueError(
                f"word array shape {self.words.shape} does not match dims "
                f"{self.dims} (expected {expect})"
            )

    @property
    def n_inner(self) -> int:
        return self.dims[-1]

    @property
    def valid_bits_last_word(self) -> int:
        r = self.n_inner % WORD_BITS
        return r if r or self.n_inner == 0 else WORD_BITS

    @property
    def size(self) -> int:
        return int(np.prod(self.dims)) if self.dims else 1

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, BitTensor)
            and self.dims == other.dims
            and np.array_equal(self.words, other.words)
        )


def sign_pack(x: np.ndarray) -> BitTensor:
    """Binarize a real tensor: x >= 0 maps to +1 (bit 1), x < 0 to -1 (bit 0).

    Zero maps to +1 so the function is total and deterministic.
    """
    x = np.asarray(x)
    if x.ndim == 0:
        x = x.reshape(1)
    return BitTensor(dims=x.shape, words=pack_bit_rows(x >= 0))


def unpack(b: BitTensor) -> np.ndarray:
    """Expand a BitTensor to a float32 array of -1.0 / +1.0 values."""
    bits = unpack_bit_rows(b.words, b.n_inner)
    return (bits.astype(np.float32) * 2.0 - 1.0).reshape(b.dims)


def xnor_popcount_dot(a: BitTensor, w: BitTensor) -> int:
    """Exact +-1 dot product of two 1-D bit rows via XNOR + popcount.

    Computed as ``2p - n`` where p counts matching bit positions; since both
    rows pack their tails with zeros this equals ``n - 2*popcount(a ^ w)``.
    """
    if len(a.dims) != 1 or len(w.dims) != 1:
        raise ValueError("xnor_popcount_dot expects 1-D bit rows")
    if a.dims != w.dims:
        raise ValueError(f"length mismatch: {a.dims[0]} vs {w.dims[0]}")
    n = a.n_inner
    if n == 0:
        return 0
    diff = int(popcount(a.words ^ w.words).sum())
    return n - 2 * diff


def packed_dot_matrix(a_words: np.ndarray, w_words: np.ndarray, n_bits: int) -> np.ndarray:
    """All-pairs +-1 dot products between packed rows.

    a_words: (R, nw) uint64, w_words: (M, nw) uint64, both canonical
    (zero tail/padding bits).  Returns an (R, M) int32 matrix whose entries
    are the exact integer dot products of the corresponding +-1 rows of
    logical length ``n_bits``.

    Iterates over words (columns) rather than rows so each step is one
    vectorized XOR + popcount over an (M, R) block; the accumulator update
    is the only pass over the output.
    """
    r, nw = a_words.shape
    m = w_words.shape[0]
    if w_words.shape[1] != nw:
        raise ValueError("word-count mismatch between operand matrices")
    if nw == 0 or r == 0 or m == 0:
        return np.full((r, m), n_bits, dtype=np.int32)
    at = np.ascontiguousarray(a_words.T)  # (nw, R)
    acc = np.zeros((m, r), dtype=np.int32)
    for t in range(nw):
        acc += popcount(w_words[:, t : t + 1] ^ at[t][None, :])
    return (n_bits - 2 * acc).T
