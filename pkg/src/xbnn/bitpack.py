"""Sign vectors packed into 64-bit words, and the XNOR-popcount dot product.

Layout (normative for the model file format): bit = 1 means +1, bit = 0 means
-1; bits are LSB-first within each little-endian word, so element i lives at
bit (i mod 64) of word (i // 64). Pad bits past the logical length are always
zero; ``xnor_dot`` corrects for them with a single subtraction instead of
masking in the hot loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORD_BITS = 64


@dataclass(frozen=True)
class PackedBits:
    """Immutable packed sign pattern of logical length ``n``."""

    n: int
    words: np.ndarray  # uint64, ceil(n / 64) entries, canonical zero pad bits

    def __post_init__(self):
        self.words.setflags(write=False)

    @property
    def n_words(self) -> int:
        return self.words.size

    @property
    def n_pad(self) -> int:
        return self.n_words * WORD_BITS - self.n


def _words_from_bits(bits: np.ndarray) -> np.ndarray:
    """bits: uint8 0/1 array, one row per vector -> little-endian uint64 words."""
    n = bits.shape[-1]
    n_words = (n + WORD_BITS - 1) // WORD_BITS
    if n_words * WORD_BITS != n:
        pad_cols = n_words * WORD_BITS - n
        pad_width = [(0, 0)] * (bits.ndim - 1) + [(0, pad_cols)]
        bits = np.pad(bits, pad_width)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return packed.view("<u8").astype(np.uint64, copy=False)


def pack(v) -> PackedBits:
    """Pack a +-1 sign vector; any other value is rejected."""
    v = np.asarray(v)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D sign vector, got shape {v.shape}")
    if v.size == 0 or not np.all(np.abs(v) == 1):
        raise ValueError("sign vector must be nonempty with every element exactly +1 or -1")
    bits = (v > 0).astype(np.uint8)
    return PackedBits(n=v.size, words=_words_from_bits(bits))


def unpack(pb: PackedBits) -> np.ndarray:
    """Inverse of pack: float32 +-1 vector of length pb.n."""
    as_bytes = pb.words.astype("<u8").view(np.uint8)
    bits = np.unpackbits(as_bytes, bitorder="little")[: pb.n]
    return np.where(bits == 1, 1.0, -1.0).astype(np.float32)


def pack_rows(matrix) -> list[PackedBits]:
    """Row-wise pack of a matrix of sign vectors; empty input -> empty list."""
    rows = [np.asarray(r) for r in matrix]
    if not rows:
        return []
    n = rows[0].size
    if any(r.size != n for r in rows):
        raise ValueError("ragged rows: all sign vectors must have equal length")
    return [pack(r) for r in rows]


def xnor_dot(a: PackedBits, b: PackedBits) -> int:
    """Exact +-1 dot product via XNOR + popcount.

    With canonical zero pad bits on both sides, XNOR turns every pad bit into
    a 1, so matches = popcount_total - n_pad and the dot is 2*matches - n.
    """
    if a.n != b.n:
        raise ValueError(f"length mismatch: {a.n} vs {b.n}")
    xnor = ~(a.words ^ b.words)
    matches = int(np.bitwise_count(xnor).sum()) - a.n_pad
    return 2 * matches - a.n


def xnor_dot_words(a_words: np.ndarray, b_words: np.ndarray, n: int) -> np.ndarray:
    """Vectorized xnor_dot over word arrays whose last axis is the word axis.

    Both operands must be canonical (zero pad bits). Broadcasts like numpy,
    so a (P, W) patch matrix against a (W,) filter yields P dots at once.
    """
    xnor = ~(a_words ^ b_words)
    n_pad = xnor.shape[-1] * WORD_BITS - n
    matches = np.bitwise_count(xnor).sum(axis=-1, dtype=np.int64) - n_pad
    return 2 * matches - n
