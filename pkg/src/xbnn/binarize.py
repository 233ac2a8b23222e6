"""Binarization math: optimal sign/scale factorizations, the per-window input
scale map, the k-bit quantizer, and gradient binarization.

The weight factorization W ~ alpha*B with B = sign(W) and alpha = mean(|W|)
is the exact minimizer of ||W - alpha*B||^2 over B in {+-1}^n, alpha > 0; the
brute-force check in the test suite enumerates all sign patterns to confirm.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .bitpack import PackedBits, pack, unpack
from .tensor import ConvGeometry, ShapeError, channel_abs_mean, sign


@dataclass(frozen=True)
class BinarizedFilter:
    """Packed sign pattern plus positive scale for one weight filter.

    ``degenerate`` marks the all-zero filter, whose optimal scale would be 0
    and therefore falls outside alpha > 0; kernels treat it as an all-zero
    filter instead of inventing a floor constant.
    """

    bits: PackedBits
    alpha: float
    original_shape: tuple
    degenerate: bool = False

    @property
    def n(self) -> int:
        return self.bits.n

    def dense(self) -> np.ndarray:
        """Reconstruct alpha * sign(W) as a float32 tensor."""
        return (self.alpha * unpack(self.bits)).reshape(self.original_shape)


@dataclass(frozen=True)
class BetaMap:
    """Per-output-location input scale factors, one beta per window."""

    K: np.ndarray  # (oh, ow), entries >= 0


@dataclass(frozen=True)
class BinaryDotFactors:
    beta: float
    H: PackedBits
    alpha: float
    B: PackedBits
    gamma: float
    gamma_exact: float  # mean(|X_i * W_i|); gamma = beta*alpha only approximates it


def binarize_weights(W) -> BinarizedFilter:
    """Optimal (B, alpha) for one filter: B = sign(W), alpha = mean(|W|)."""
    W = np.asarray(W)
    if W.size == 0:
        raise ShapeError("cannot binarize an empty filter")
    flat = W.reshape(-1)
    alpha = float(np.abs(flat).mean())
    return BinarizedFilter(
        bits=pack(sign(flat)),
        alpha=alpha,
        original_shape=W.shape,
        degenerate=(alpha == 0.0),
    )


def binary_dot_factors(X, W) -> BinaryDotFactors:
    """Factor a real dot product into sign vectors and scalar scales."""
    X = np.asarray(X, dtype=np.float64).reshape(-1)
    W = np.asarray(W, dtype=np.float64).reshape(-1)
    if X.size != W.size:
        raise ShapeError(f"length mismatch: {X.size} vs {W.size}")
    if X.size == 0:
        raise ShapeError("need n >= 1")
    beta = float(np.abs(X).mean())
    alpha = float(np.abs(W).mean())
    return BinaryDotFactors(
        beta=beta,
        H=pack(sign(X)),
        alpha=alpha,
        B=pack(sign(W)),
        gamma=beta * alpha,
        gamma_exact=float(np.abs(X * W).mean()),
    )


def window_sums(plane: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Sliding-window sums of a 2-D plane via an integral image.

    Accumulates in float64 so the fast path stays within tolerance of the
    per-window oracle even for large windows.
    """
    fh, fw = geom.filt_hw
    oh, ow = geom.out_hw(plane.shape)
    padded = plane
    if geom.pad:
        padded = np.pad(plane, geom.pad)
    ii = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(padded, axis=0), axis=1, out=ii[1:, 1:])
    ys = np.arange(oh) * geom.stride
    xs = np.arange(ow) * geom.stride
    y0, y1 = ys[:, None], (ys + fh)[:, None]
    x0, x1 = xs[None, :], (xs + fw)[None, :]
    return ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0]


def compute_beta_map(I, geom: ConvGeometry) -> BetaMap:
    """Scale factor beta for every window: K = abs-channel-mean convolved with
    the uniform 1/(fh*fw) filter. With pad = 0 each entry equals the l1-mean
    of the corresponding input sub-tensor; padded positions contribute zeros,
    which attenuates border entries.
    """
    A = channel_abs_mean(I)
    fh, fw = geom.filt_hw
    sums = window_sums(A, geom)
    K = np.maximum(sums / float(fh * fw), 0.0)  # integral diffs can round below 0
    return BetaMap(K=K.astype(np.float32))


def quantize_kbit(x, k: int):
    """Uniform 2**k-level quantizer on [-1, 1]; k = 1 reduces to sign away
    from ties. Rounding is half-away-from-zero; out-of-range inputs are
    clamped first (with a warning)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    arr = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(arr) > 1):
        warnings.warn("quantize_kbit input outside [-1, 1]; clamping", stacklevel=2)
        arr = np.clip(arr, -1.0, 1.0)
    levels = float(2**k - 1)
    scaled = levels * (arr + 1.0) / 2.0  # in [0, levels]
    rounded = np.floor(scaled + 0.5)  # half away from zero (operand is >= 0)
    q = 2.0 * (rounded / levels - 0.5)
    if np.isscalar(x) or np.asarray(x).ndim == 0:
        return float(q)
    return q.astype(np.asarray(x).dtype if np.asarray(x).dtype.kind == "f" else np.float64)


def binarize_gradient(g):
    """Max-magnitude scaling for gradients: returns (sign pattern, max|g|).

    Using the l1-mean here would shrink the largest coordinate, so the max is
    used to preserve the direction of maximum change.
    """
    g = np.asarray(g)
    if g.size == 0:
        raise ShapeError("cannot binarize an empty gradient")
    return sign(g), float(np.abs(g).max())
