"""The three convolution paths: full-precision reference (re-exported from
tensor), binary-weight convolution (adds/subs plus one scale multiply per
output), and XNOR convolution (packed XNOR + popcount inner loop).

Both binary paths are im2col-style: receptive fields are flattened to rows
once per layer invocation, so packing cost and the beta map are amortized
over all filters of the layer. The per-window sliding variant is kept as a
debug path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binarize import BetaMap, BinarizedFilter, compute_beta_map
from .bitpack import PackedBits, _words_from_bits, pack, unpack, xnor_dot, xnor_dot_words
from .tensor import ConvGeometry, ShapeError, conv2d_reference, pad_chw, sign

__all__ = [
    "OpCounters",
    "PackedPatchMatrix",
    "conv2d_reference",
    "conv_binary_weight",
    "conv_binary_weight_layer",
    "conv_xnor",
    "conv_xnor_direct",
    "conv_xnor_layer",
    "count_ops",
    "im2col",
    "sign_patch_matrix",
]


@dataclass
class OpCounters:
    """Per-invocation operation counts, by class."""

    real_mul: int = 0
    real_add: int = 0
    xnor_word: int = 0
    popcount_word: int = 0

    def merge(self, other: "OpCounters") -> None:
        self.real_mul += other.real_mul
        self.real_add += other.real_add
        self.xnor_word += other.xnor_word
        self.popcount_word += other.popcount_word


@dataclass(frozen=True)
class PackedPatchMatrix:
    """One packed sign row per output location, each of length n = c*fh*fw."""

    words: np.ndarray  # (rows, n_words) uint64, canonical pad bits
    n: int
    out_hw: tuple[int, int]
    geom: ConvGeometry

    @property
    def n_rows(self) -> int:
        return self.words.shape[0]

    @property
    def n_words(self) -> int:
        return self.words.shape[1]

    def row(self, i: int) -> PackedBits:
        return PackedBits(n=self.n, words=self.words[i].copy())


def _check_filter(I: np.ndarray, f: BinarizedFilter, geom: ConvGeometry) -> None:
    c, fh, fw = f.original_shape
    if I.ndim != 3 or I.shape[0] != c:
        raise ShapeError(f"input {I.shape} does not match filter channels {c}")
    if (fh, fw) != tuple(geom.filt_hw):
        raise ShapeError(f"filter extent {(fh, fw)} does not match geometry {geom.filt_hw}")


def im2col(inp: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Flatten every zero-padded receptive field into a row: (P, c*fh*fw)."""
    fh, fw = geom.filt_hw
    oh, ow = geom.out_hw(inp.shape[1:])
    padded = pad_chw(np.asarray(inp), geom.pad)
    win = np.lib.stride_tricks.sliding_window_view(padded, (fh, fw), axis=(1, 2))
    win = win[:, :: geom.stride, :: geom.stride]  # (c, oh, ow, fh, fw)
    cols = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, -1)
    return np.ascontiguousarray(cols)


def sign_patch_matrix(I, geom: ConvGeometry) -> PackedPatchMatrix:
    """Packed sign patterns of all receptive fields of sign(I).

    Zero-padded border positions binarize to +1 (the sign(0) tie rule); the
    beta map's attenuated border entries partially compensate.
    """
    I = np.asarray(I)
    oh, ow = geom.out_hw(I.shape[1:])
    bits = (pad_chw(I, geom.pad) >= 0).astype(np.uint8)
    fh, fw = geom.filt_hw
    win = np.lib.stride_tricks.sliding_window_view(bits, (fh, fw), axis=(1, 2))
    win = win[:, :: geom.stride, :: geom.stride]
    rows = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, -1))
    return PackedPatchMatrix(
        words=_words_from_bits(rows), n=rows.shape[1], out_hw=(oh, ow), geom=geom
    )


def conv_binary_weight(
    I,
    f: BinarizedFilter,
    geom: ConvGeometry,
    counters: OpCounters | None = None,
    *,
    cols: np.ndarray | None = None,
) -> np.ndarray:
    """Binary-weight convolution: out(y,x) = alpha * sum of +-input values.

    The inner loop is additions and subtractions of input values only; the
    single multiplication per output element applies the filter scale.
    """
    I = np.asarray(I)
    _check_filter(I, f, geom)
    oh, ow = geom.out_hw(I.shape[1:])
    if f.degenerate:
        return np.zeros((oh, ow), dtype=np.float32)
    if cols is None:
        cols = im2col(I, geom)
    mask = unpack(f.bits) > 0
    pos = cols[:, mask].sum(axis=1)
    neg = cols[:, ~mask].sum(axis=1)
    out = (f.alpha * (pos - neg)).astype(np.float32).reshape(oh, ow)
    if counters is not None:
        counters.real_add += cols.shape[0] * (f.n - 1)
        counters.real_mul += cols.shape[0]
    return out


def conv_binary_weight_layer(
    I, filters: list[BinarizedFilter], geom: ConvGeometry, counters: OpCounters | None = None
) -> np.ndarray:
    """All filters of one layer against a shared column matrix: (K, oh, ow)."""
    I = np.asarray(I)
    cols = im2col(I, geom)
    return np.stack([conv_binary_weight(I, f, geom, counters, cols=cols) for f in filters])


def _beta_map_cost(I_shape, geom: ConvGeometry, counters: OpCounters) -> None:
    # channel abs-mean: one divide per pixel; window sums: integral-image adds;
    # final 1/(fh*fw): one divide per output entry.
    c, h, w = I_shape
    ph, pw = h + 2 * geom.pad, w + 2 * geom.pad
    oh, ow = geom.out_hw((h, w))
    counters.real_mul += h * w + oh * ow
    counters.real_add += c * h * w + 2 * ph * pw + 3 * oh * ow


def conv_xnor(
    I,
    f: BinarizedFilter,
    geom: ConvGeometry,
    counters: OpCounters | None = None,
    *,
    beta_map: BetaMap | None = None,
    patches: PackedPatchMatrix | None = None,
) -> np.ndarray:
    """XNOR convolution: (sign(I) xnor-conv sign(W)) * K * alpha.

    The inner loop is word-level XNOR + popcount; real multiplications are
    limited to scaling each output element by its beta and by alpha.
    """
    I = np.asarray(I)
    _check_filter(I, f, geom)
    oh, ow = geom.out_hw(I.shape[1:])
    if f.degenerate:
        return np.zeros((oh, ow), dtype=np.float32)
    if patches is None:
        patches = sign_patch_matrix(I, geom)
    if beta_map is None:
        beta_map = compute_beta_map(I, geom)
        if counters is not None:
            _beta_map_cost(I.shape, geom, counters)
    dots = xnor_dot_words(patches.words, f.bits.words, f.n)
    out = dots.reshape(oh, ow).astype(np.float32) * (beta_map.K * np.float32(f.alpha))
    if counters is not None:
        counters.xnor_word += patches.n_rows * patches.n_words
        counters.popcount_word += patches.n_rows * patches.n_words
        counters.real_mul += 2 * patches.n_rows
    return out


_CHUNK_WORD_BUDGET = 4_000_000  # cap the (rows, filters, words) XOR temporary


def conv_xnor_layer(
    I, filters: list[BinarizedFilter], geom: ConvGeometry, counters: OpCounters | None = None
) -> np.ndarray:
    """All filters of one layer sharing one patch matrix and one beta map.

    Filters are pre-complemented so the inner loop is one XOR (equal to the
    XNOR against the original words) plus popcount, batched over filters.
    """
    I = np.asarray(I)
    patches = sign_patch_matrix(I, geom)
    beta_map = compute_beta_map(I, geom)
    if counters is not None:
        _beta_map_cost(I.shape, geom, counters)
    n = patches.n
    if any(f.n != n for f in filters):
        raise ShapeError("filter length does not match patch rows")
    oh, ow = patches.out_hw
    n_pad = patches.n_words * 64 - n
    nfilt_words = ~np.stack([f.bits.words for f in filters])  # (K, W)
    alphas = np.array([0.0 if f.degenerate else f.alpha for f in filters], dtype=np.float32)

    rows = patches.words.shape[0]
    dots = np.empty((len(filters), rows), dtype=np.int32)
    chunk = max(1, _CHUNK_WORD_BUDGET // max(rows * patches.n_words, 1))
    for k0 in range(0, len(filters), chunk):
        xnor = patches.words[:, None, :] ^ nfilt_words[None, k0:k0 + chunk, :]
        total = np.bitwise_count(xnor).sum(axis=-1, dtype=np.int32)
        dots[k0:k0 + chunk] = (2 * total - (n + 2 * n_pad)).T
    if counters is not None:
        counters.xnor_word += len(filters) * rows * patches.n_words
        counters.popcount_word += len(filters) * rows * patches.n_words
        counters.real_mul += 2 * len(filters) * rows
    scale = beta_map.K[None, :, :] * alphas[:, None, None]
    return dots.reshape(len(filters), oh, ow).astype(np.float32) * scale


def conv_xnor_direct(I, f: BinarizedFilter, geom: ConvGeometry) -> np.ndarray:
    """Sliding-window debug variant: packs and dots one window at a time."""
    I = np.asarray(I)
    _check_filter(I, f, geom)
    oh, ow = geom.out_hw(I.shape[1:])
    if f.degenerate:
        return np.zeros((oh, ow), dtype=np.float32)
    fh, fw = geom.filt_hw
    padded = pad_chw(I, geom.pad)
    K = compute_beta_map(I, geom).K
    out = np.empty((oh, ow), dtype=np.float32)
    for y in range(oh):
        for x in range(ow):
            window = padded[:, y * geom.stride:y * geom.stride + fh,
                            x * geom.stride:x * geom.stride + fw]
            d = xnor_dot(pack(sign(window).reshape(-1)), f.bits)
            out[y, x] = d * K[y, x] * f.alpha
    return out


def count_ops(c: int, n_w: int, n_i: int, mode: str = "xnor") -> tuple[int, int]:
    """Abstract op counts for one filter: (binary_ops, real_ops).

    The XNOR path does c*N_W bit-ops per output location and one real op per
    location; the full-precision path does everything in real arithmetic.
    Word-level counters relate by ceil(c*N_W / 64) words per location.
    """
    if min(c, n_w, n_i) < 1:
        raise ValueError("c, n_w, n_i must all be positive")
    total = c * n_w * n_i
    if mode == "xnor":
        return total, n_i
    if mode == "full":
        return 0, total
    raise ValueError(f"unknown mode {mode!r}")
