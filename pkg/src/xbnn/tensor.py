"""Dense tensors, convolution geometry, and the naive reference convolution.

Feature maps are float arrays of shape (channels, height, width) and filter
banks are (filters, channels, fh, fw), both row-major with channels outermost
so a receptive field flattens to one contiguous vector of length c*fh*fw.
``conv2d_reference`` is deliberately written as a plain sliding-window loop:
it is the correctness oracle every binary kernel is measured against, so it
stays simple and independent of the fast paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes or geometry do not line up."""


@dataclass(frozen=True)
class ConvGeometry:
    """Filter extent, stride, and symmetric zero padding of a 2-D convolution."""

    filt_hw: tuple[int, int]
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        fh, fw = self.filt_hw
        if fh < 1 or fw < 1:
            raise ShapeError(f"filter extent must be >= 1, got {self.filt_hw}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.pad < 0:
            raise ShapeError(f"pad must be >= 0, got {self.pad}")

    def out_extent(self, in_extent: int, filt_extent: int) -> int:
        return (in_extent + 2 * self.pad - filt_extent) // self.stride + 1

    def out_hw(self, in_hw) -> tuple[int, int]:
        """Output (height, width); raises if any extent would be empty."""
        oh = self.out_extent(in_hw[0], self.filt_hw[0])
        ow = self.out_extent(in_hw[1], self.filt_hw[1])
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"empty output: input {tuple(in_hw)}, filter {self.filt_hw}, "
                f"stride {self.stride}, pad {self.pad}"
            )
        return oh, ow


def as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def sign(x) -> np.ndarray:
    """Sign with the tie rule sign(0) = +1, so outputs are exactly +-1."""
    x = np.asarray(x)
    out_dtype = x.dtype if x.dtype.kind == "f" else np.float32
    return np.where(x >= 0, 1.0, -1.0).astype(out_dtype)


def elementwise(op: str, a, b=None) -> np.ndarray:
    """Pointwise op dispatcher: add/sub/mul take two tensors, scale takes a
    scalar, abs/sign take one tensor. Shapes of two-tensor ops must match."""
    a = np.asarray(a)
    if op in ("add", "sub", "mul"):
        b = np.asarray(b)
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        return {"add": np.add, "sub": np.subtract, "mul": np.multiply}[op](a, b)
    if op == "scale":
        return a * float(b)
    if op == "abs":
        return np.abs(a)
    if op == "sign":
        return sign(a)
    raise ValueError(f"unknown elementwise op: {op!r}")


def channel_abs_mean(inp) -> np.ndarray:
    """Per-pixel mean of |values| across channels: (c, h, w) -> (h, w)."""
    inp = np.asarray(inp)
    if inp.ndim != 3 or inp.shape[0] < 1:
        raise ShapeError(f"expected (c, h, w) with c >= 1, got {inp.shape}")
    return np.abs(inp).mean(axis=0)


def pad_chw(inp: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return inp
    return np.pad(inp, ((0, 0), (pad, pad), (pad, pad)))


def conv2d_reference(inp, filters, geom: ConvGeometry) -> np.ndarray:
    """Naive full-precision correlation (no kernel flip, no bias).

    inp: (c, h, w); filters: (K, c, fh, fw). Returns (K, oh, ow) where each
    output value is the dot product of a filter with the zero-padded window.
    """
    inp = np.asarray(inp)
    filters = np.asarray(filters)
    if inp.ndim != 3:
        raise ShapeError(f"input must be (c, h, w), got {inp.shape}")
    if filters.ndim != 4:
        raise ShapeError(f"filters must be (K, c, fh, fw), got {filters.shape}")
    if inp.shape[0] != filters.shape[1]:
        raise ShapeError(
            f"channel mismatch: input has {inp.shape[0]}, filters expect {filters.shape[1]}"
        )
    if tuple(filters.shape[2:]) != tuple(geom.filt_hw):
        raise ShapeError(
            f"filter extent {filters.shape[2:]} does not match geometry {geom.filt_hw}"
        )
    nfilt, _, fh, fw = filters.shape
    oh, ow = geom.out_hw(inp.shape[1:])

    padded = pad_chw(inp, geom.pad)
    out = np.empty((nfilt, oh, ow), dtype=np.result_type(inp, filters))
    for y in range(oh):
        ys = y * geom.stride
        for x in range(ow):
            xs = x * geom.stride
            window = padded[:, ys:ys + fh, xs:xs + fw]
            # plain multiply-accumulate per window; deliberately no BLAS so
            # benchmark comparisons are against self-contained float math
            out[:, y, x] = (filters * window).sum(axis=(1, 2, 3))
    return out
