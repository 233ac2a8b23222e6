"""Bit-exact model serialization and the memory footprint calculator.

File layout (all little-endian):

    magic "XBN1" | version u16 | layer_count u16 | input shape 3*u32
    then per layer: kind u8 | flags u8 | kind-specific header | payload

Conv payloads are either raw float32 weights (training checkpoints) or the
packed form: per filter ceil(n/64) uint64 sign words (bitpack layout) followed
by one float32 scale per filter. Loading a packed convolution reconstructs
exactly the effective weights the in-memory network would compute, so an
exported model evaluates bit-identically without the real-valued weights.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .bitpack import WORD_BITS, PackedBits, _words_from_bits, unpack
from .nn import (
    AvgPool2d,
    BatchNorm2d,
    BinaryActivation,
    Conv2d,
    Layer,
    MaxPool2d,
    Network,
    ReLU,
)

MAGIC = b"XBN1"
VERSION = 1

_KIND_CONV = 1
_KIND_BATCHNORM = 2
_KIND_RELU = 3
_KIND_BINACTIV = 4
_KIND_MAXPOOL = 5
_KIND_AVGPOOL = 6

_FLAG_BIN_WEIGHTS = 1
_FLAG_BIN_INPUT = 2
_FLAG_LEARNED_SCALE = 4
_FLAG_PACKED = 8


class ModelIOError(Exception):
    pass


class BadMagicError(ModelIOError):
    pass


class UnsupportedVersionError(ModelIOError):
    pass


class TruncatedFileError(ModelIOError):
    pass


class SizeMismatchError(ModelIOError):
    pass


def _read(fh, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise TruncatedFileError(f"truncated {what}: wanted {count} bytes, got {len(buf)}")
    return buf


def _pack_filter_words(W: np.ndarray) -> np.ndarray:
    """(K, n) sign source -> (K, ceil(n/64)) uint64 canonical words."""
    bits = (W >= 0).astype(np.uint8)
    return _words_from_bits(bits)


def _write_conv(fh, layer: Conv2d, pack_binarized: bool) -> None:
    flags = 0
    if layer.binarize_weights:
        flags |= _FLAG_BIN_WEIGHTS
    if layer.binarize_input:
        flags |= _FLAG_BIN_INPUT
    if layer.learned_scale:
        flags |= _FLAG_LEARNED_SCALE
    packed = pack_binarized and (layer.binarize_weights or getattr(layer, "frozen_alphas", None) is not None)
    if packed:
        flags |= _FLAG_PACKED
    fh.write(struct.pack("<BB", _KIND_CONV, flags))
    fh.write(struct.pack("<6H", layer.out_ch, layer.in_ch, *layer.geom.filt_hw,
                         layer.geom.stride, layer.geom.pad))
    W = layer.weight.value.astype(np.float32)
    if packed:
        flat = W.reshape(layer.out_ch, -1)
        fh.write(_pack_filter_words(flat).astype("<u8").tobytes())
        if layer.learned_scale:
            alphas = layer.alpha.value.astype(np.float32)
        elif getattr(layer, "frozen_alphas", None) is not None:
            alphas = layer.frozen_alphas
        else:
            alphas = np.abs(W).mean(axis=(1, 2, 3)).astype(np.float32)
        fh.write(alphas.astype("<f4").tobytes())
    else:
        fh.write(W.astype("<f4").tobytes())
        if layer.learned_scale:
            fh.write(layer.alpha.value.astype("<f4").tobytes())


def _read_conv(fh, flags: int) -> Conv2d:
    out_ch, in_ch, fh_, fw_, stride, pad = struct.unpack("<6H", _read(fh, 12, "conv header"))
    n = in_ch * fh_ * fw_
    packed = bool(flags & _FLAG_PACKED)
    learned = bool(flags & _FLAG_LEARNED_SCALE)
    layer = Conv2d(in_ch, out_ch, (fh_, fw_), stride=stride, pad=pad,
                   binarize_weights=bool(flags & _FLAG_BIN_WEIGHTS) and (not packed or learned),
                   binarize_input=bool(flags & _FLAG_BIN_INPUT),
                   learned_scale=learned, rng=np.random.default_rng(0))
    if packed:
        n_words = (n + WORD_BITS - 1) // WORD_BITS
        raw = _read(fh, out_ch * n_words * 8, "packed filter words")
        words = np.frombuffer(raw, dtype="<u8").reshape(out_ch, n_words)
        alphas = np.frombuffer(_read(fh, out_ch * 4, "filter scales"), dtype="<f4").copy()
        signs = np.stack(
            [unpack(PackedBits(n=n, words=words[k].copy())) for k in range(out_ch)]
        ).reshape(out_ch, in_ch, fh_, fw_)
        if learned:
            # keep the sign weights and the learned scale as separate pieces
            layer.weight.value = signs.astype(np.float32)
            layer.alpha.value = alphas.astype(np.float32)
        else:
            layer.weight.value = (alphas[:, None, None, None] * signs).astype(np.float32)
            layer.frozen_alphas = alphas.astype(np.float32)
    else:
        raw = _read(fh, out_ch * n * 4, "conv weights")
        layer.weight.value = np.frombuffer(raw, dtype="<f4").reshape(
            out_ch, in_ch, fh_, fw_).copy()
        if learned:
            layer.alpha.value = np.frombuffer(
                _read(fh, out_ch * 4, "learned scales"), dtype="<f4").copy()
    return layer


def _write_batchnorm(fh, layer: BatchNorm2d) -> None:
    fh.write(struct.pack("<BB", _KIND_BATCHNORM, 0))
    fh.write(struct.pack("<Hf", layer.channels, layer.eps))
    for arr in (layer.gamma.value, layer.beta.value, layer.running_mean, layer.running_var):
        fh.write(np.asarray(arr, dtype="<f4").tobytes())


def _read_batchnorm(fh) -> BatchNorm2d:
    channels, eps = struct.unpack("<Hf", _read(fh, 6, "batchnorm header"))
    layer = BatchNorm2d(channels, eps=float(eps))
    arrays = []
    for what in ("gamma", "beta", "running mean", "running var"):
        raw = _read(fh, channels * 4, f"batchnorm {what}")
        arrays.append(np.frombuffer(raw, dtype="<f4").copy())
    layer.gamma.value, layer.beta.value, layer.running_mean, layer.running_var = arrays
    return layer


def save(net: Network, path, *, pack_binarized: bool = False) -> None:
    """Serialize a network; ``pack_binarized=True`` stores binarized-weight
    convolutions as 1-bit sign words plus per-filter scales."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HH", VERSION, len(net.layers)))
        fh.write(struct.pack("<3I", *net.input_shape))
        for layer in net.layers:
            if isinstance(layer, Conv2d):
                _write_conv(fh, layer, pack_binarized)
            elif isinstance(layer, BatchNorm2d):
                _write_batchnorm(fh, layer)
            elif isinstance(layer, ReLU):
                fh.write(struct.pack("<BB", _KIND_RELU, 0))
            elif isinstance(layer, BinaryActivation):
                fh.write(struct.pack("<BB", _KIND_BINACTIV, 0))
                fh.write(struct.pack("<B", layer.k_bits))
            elif isinstance(layer, MaxPool2d):
                fh.write(struct.pack("<BB", _KIND_MAXPOOL, 0))
                fh.write(struct.pack("<HH", layer.size, layer.stride))
            elif isinstance(layer, AvgPool2d):
                fh.write(struct.pack("<BB", _KIND_AVGPOOL, 0))
                fh.write(struct.pack("<HH", layer.size, layer.stride))
            else:
                raise ModelIOError(f"cannot serialize layer {type(layer).__name__}")


def load(path) -> Network:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read(fh, 4, "magic")
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, layer_count = struct.unpack("<HH", _read(fh, 4, "version header"))
        if version != VERSION:
            raise UnsupportedVersionError(f"unsupported version {version}, expected {VERSION}")
        input_shape = struct.unpack("<3I", _read(fh, 12, "input shape"))
        layers: list[Layer] = []
        for i in range(layer_count):
            kind, flags = struct.unpack("<BB", _read(fh, 2, f"layer {i} tag"))
            if kind == _KIND_CONV:
                layers.append(_read_conv(fh, flags))
            elif kind == _KIND_BATCHNORM:
                layers.append(_read_batchnorm(fh))
            elif kind == _KIND_RELU:
                layers.append(ReLU())
            elif kind == _KIND_BINACTIV:
                k_bits, = struct.unpack("<B", _read(fh, 1, "binactiv header"))
                layers.append(BinaryActivation(k_bits=k_bits))
            elif kind in (_KIND_MAXPOOL, _KIND_AVGPOOL):
                size, stride = struct.unpack("<HH", _read(fh, 4, "pool header"))
                cls = MaxPool2d if kind == _KIND_MAXPOOL else AvgPool2d
                layers.append(cls(size, stride))
            else:
                raise ModelIOError(f"unknown layer kind tag {kind}")
        trailing = fh.read(1)
        if trailing:
            raise SizeMismatchError("trailing bytes after final layer record")
    return Network(layers, input_shape)


# ---------------------------------------------------------------------------
# memory accounting


def filter_bytes(n: int, binarized: bool) -> int:
    """Storage for one filter of n weights: 4n bytes at full precision, or
    ceil(n/64) words plus one float32 scale when binarized."""
    if binarized:
        return ((n + WORD_BITS - 1) // WORD_BITS) * 8 + 4
    return 4 * n


def memory_footprint(arch, mode: str = "binary") -> int:
    """Total weight bytes for an architecture description.

    ``arch`` entries are either plain ints (full-precision parameter blobs:
    batchnorm params, biases, embeddings) or (filters, n, binarized) tuples
    for convolution banks. mode="float32" prices everything at 4 bytes per
    parameter; mode="binary" packs the banks marked binarized.
    """
    if mode not in ("float32", "binary"):
        raise ValueError(f"unknown mode {mode!r}")
    total = 0
    for entry in arch:
        if isinstance(entry, (int, np.integer)):
            total += 4 * int(entry)
            continue
        filters, n, binarized = entry
        if mode == "float32":
            total += 4 * filters * n
        else:
            total += filters * filter_bytes(n, binarized)
    return total


def network_arch(net: Network) -> list:
    """Describe a network in memory_footprint terms."""
    arch = []
    for layer in net.layers:
        if isinstance(layer, Conv2d):
            n = layer.in_ch * layer.geom.filt_hw[0] * layer.geom.filt_hw[1]
            binarized = layer.binarize_weights or getattr(layer, "frozen_alphas", None) is not None
            arch.append((layer.out_ch, n, binarized))
            if layer.learned_scale:
                arch.append(layer.out_ch)
        elif isinstance(layer, BatchNorm2d):
            arch.append(4 * layer.channels)
    return arch


def describe(net: Network) -> str:
    """Human-readable layer table with per-layer storage at both precisions."""
    lines = [f"{'idx':>3} {'layer':<14} {'detail':<34} {'float B':>10} {'binary B':>10}"]
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Conv2d):
            fh_, fw_ = layer.geom.filt_hw
            n = layer.in_ch * fh_ * fw_
            binarized = layer.binarize_weights or getattr(layer, "frozen_alphas", None) is not None
            detail = (f"{layer.in_ch}->{layer.out_ch} {fh_}x{fw_} s{layer.geom.stride} "
                      f"p{layer.geom.pad}"
                      + (" Wbin" if binarized else "")
                      + (" Ibin" if layer.binarize_input else ""))
            fbytes = 4 * layer.out_ch * n
            bbytes = layer.out_ch * filter_bytes(n, binarized)
            lines.append(f"{i:>3} {'conv':<14} {detail:<34} {fbytes:>10} {bbytes:>10}")
        elif isinstance(layer, BatchNorm2d):
            b = 4 * 4 * layer.channels
            lines.append(f"{i:>3} {'batchnorm':<14} {f'channels={layer.channels}':<34} "
                         f"{b:>10} {b:>10}")
        else:
            name = type(layer).__name__.lower()
            detail = ""
            if isinstance(layer, (MaxPool2d, AvgPool2d)):
                detail = f"{layer.size}x{layer.size} s{layer.stride}"
            lines.append(f"{i:>3} {name:<14} {detail:<34} {0:>10} {0:>10}")
    arch = network_arch(net)
    lines.append(f"total float32: {memory_footprint(arch, 'float32')} B; "
                 f"binary: {memory_footprint(arch, 'binary')} B")
    return "\n".join(lines)
