"""Layer graph with forward/backward for training binarized CNNs.

Layers operate on batched arrays of shape (N, C, H, W). Convolutions run on
an im2col + matmul fast path (validated against the naive reference in the
test suite); binarized layers recompute their sign/scale factorization from
the real-valued weights on every forward, so the optimizer only ever touches
real parameters. Gradients flow through the binarized weights, with the
straight-through estimator standing in for the sign function's derivative.

Two block orderings are constructible: the conventional conv -> batchnorm ->
binary activation -> pool, and the reordering batchnorm -> binary activation
-> binary conv -> pool that binarizes freshly normalized inputs and pools
real-valued conv outputs instead of sign patterns.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .binarize import quantize_kbit
from .tensor import ConvGeometry, ShapeError, sign

BLOCK_ORDERS = ("C-B-A-P", "B-A-C-P")


class Param:
    """A trainable array and its gradient slot."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = None


# ---------------------------------------------------------------------------
# gradient building blocks


def ste_backward_sign(upstream, pre_activation, variant: str = "indicator"):
    """Straight-through estimator for sign: pass gradient where |r| <= 1.

    variant="scaled" multiplies by r as well (the alternative reading of the
    estimator); "indicator" is the default.
    """
    upstream = np.asarray(upstream)
    pre = np.asarray(pre_activation)
    if upstream.shape != pre.shape:
        raise ShapeError(f"shape mismatch {upstream.shape} vs {pre.shape}")
    gate = (np.abs(pre) <= 1.0).astype(upstream.dtype)
    if variant == "scaled":
        gate = gate * pre
    elif variant != "indicator":
        raise ValueError(f"unknown STE variant {variant!r}")
    return upstream * gate


def weight_gradient(upstream_wrt_wtilde, W, alpha: float, variant: str = "indicator"):
    """Map the gradient w.r.t. the binarized weights back onto the real ones:
    per element, g_i * (1/n + d_sign(W_i) * alpha) with n = W.size."""
    g = np.asarray(upstream_wrt_wtilde)
    W = np.asarray(W)
    if g.shape != W.shape:
        raise ShapeError(f"shape mismatch {g.shape} vs {W.shape}")
    gate = (np.abs(W) <= 1.0).astype(g.dtype)
    if variant == "scaled":
        gate = gate * W
    elif variant != "indicator":
        raise ValueError(f"unknown STE variant {variant!r}")
    return g * (1.0 / W.size + gate * alpha)


def weight_gradient_full(upstream_wrt_wtilde, W, alpha: float, variant: str = "indicator"):
    """Full-Jacobian variant: includes the off-diagonal coupling of every
    weight to the shared scale (the per-element form keeps only the
    diagonal).  Available for experimentation; not the default."""
    g = np.asarray(upstream_wrt_wtilde)
    W = np.asarray(W)
    s = sign(W)
    gate = (np.abs(W) <= 1.0).astype(g.dtype)
    if variant == "scaled":
        gate = gate * W
    return s * (np.sum(g * s) / W.size) + alpha * gate * g


def loss_softmax_nll(logits, labels):
    """Mean negative log likelihood over the softmax; returns (loss, grad).

    Accepts (N, C) or (N, C, 1, 1) logits; the gradient matches the input
    shape and is already divided by the batch size.
    """
    raw_shape = np.asarray(logits).shape
    z = np.asarray(logits, dtype=np.float64).reshape(raw_shape[0], -1)
    labels = np.asarray(labels).astype(np.int64)
    n, c = z.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must be ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.reshape(raw_shape).astype(np.asarray(logits).dtype)


# ---------------------------------------------------------------------------
# batched im2col machinery


def _batch_im2col(x, geom: ConvGeometry, pad_value: float = 0.0):
    n, c, h, w = x.shape
    fh, fw = geom.filt_hw
    oh, ow = geom.out_hw((h, w))
    if geom.pad:
        x = np.pad(x, ((0, 0), (0, 0), (geom.pad, geom.pad), (geom.pad, geom.pad)),
                   constant_values=pad_value)
    win = np.lib.stride_tricks.sliding_window_view(x, (fh, fw), axis=(2, 3))
    win = win[:, :, :: geom.stride, :: geom.stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * fh * fw)
    return np.ascontiguousarray(cols), (oh, ow)


def _batch_col2im(gcols, x_shape, geom: ConvGeometry, out_hw):
    n, c, h, w = x_shape
    fh, fw = geom.filt_hw
    oh, ow = out_hw
    s, p = geom.stride, geom.pad
    g6 = gcols.reshape(n, oh, ow, c, fh, fw).transpose(0, 3, 4, 5, 1, 2)
    gpad = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=gcols.dtype)
    for ky in range(fh):
        for kx in range(fw):
            gpad[:, :, ky:ky + s * oh:s, kx:kx + s * ow:s] += g6[:, :, ky, kx]
    if p:
        return gpad[:, :, p:h + p, p:w + p]
    return gpad


def _batch_window_mean(a, geom: ConvGeometry):
    """Per-sample beta map: sliding-window mean of (N, H, W) planes."""
    n, h, w = a.shape
    fh, fw = geom.filt_hw
    oh, ow = geom.out_hw((h, w))
    if geom.pad:
        a = np.pad(a, ((0, 0), (geom.pad, geom.pad), (geom.pad, geom.pad)))
    ii = np.zeros((n, a.shape[1] + 1, a.shape[2] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(a, axis=1), axis=2, out=ii[:, 1:, 1:])
    ys = np.arange(oh) * geom.stride
    xs = np.arange(ow) * geom.stride
    y0, y1 = ys[:, None], (ys + fh)[:, None]
    x0, x1 = xs[None, :], (xs + fw)[None, :]
    sums = ii[:, y1, x1] - ii[:, y0, x1] - ii[:, y1, x0] + ii[:, y0, x0]
    return np.maximum(sums / float(fh * fw), 0.0)


# ---------------------------------------------------------------------------
# layers


class Layer:
    def forward(self, x, train: bool):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def params(self) -> list[Param]:
        return []


class Conv2d(Layer):
    """Convolution without bias; optionally binarizes weights and/or input.

    With binarized weights the forward pass recomputes per-filter (alpha, B)
    from the real weights every call (Algorithm-1 ordering; ``binarize_count``
    exposes this for instrumentation). With binarized input it quantizes the
    incoming tensor, computes the per-window scale map from the real input,
    and multiplies it back into the conv output; the scale map is treated as
    a constant in backward.
    """

    def __init__(self, in_ch, out_ch, filt_hw, stride=1, pad=0, *,
                 binarize_weights=False, binarize_input=False, learned_scale=False,
                 k_bits=1, ste_variant="indicator", full_jacobian=False,
                 binary_gradient=False, rng=None):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.geom = ConvGeometry(filt_hw=tuple(filt_hw), stride=stride, pad=pad)
        self.binarize_weights = binarize_weights
        self.binarize_input = binarize_input
        self.learned_scale = learned_scale
        self.k_bits = k_bits
        self.ste_variant = ste_variant
        self.full_jacobian = full_jacobian
        self.binary_gradient = binary_gradient
        rng = rng or np.random.default_rng()
        fan_in = in_ch * filt_hw[0] * filt_hw[1]
        limit = 1.0 / np.sqrt(fan_in)
        self.weight = Param("weight", rng.uniform(-limit, limit,
                                                  size=(out_ch, in_ch, *filt_hw)).astype(np.float32))
        self.alpha = None
        if learned_scale:
            self.alpha = Param("alpha", np.ones(out_ch, dtype=np.float32))
        self.binarize_count = 0
        self.last_wtilde = None
        self._tape = None

    def params(self):
        ps = [self.weight]
        if self.alpha is not None:
            ps.append(self.alpha)
        return ps

    def effective_weights(self):
        """The tensor the convolution actually uses this step."""
        W = self.weight.value
        if not self.binarize_weights:
            return W, None
        self.binarize_count += 1
        sgn = sign(W)
        if self.learned_scale:
            return sgn, None
        alphas = np.abs(W).mean(axis=(1, 2, 3))
        return alphas[:, None, None, None] * sgn, alphas

    def forward(self, x, train: bool):
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"expected (N, {self.in_ch}, H, W), got {x.shape}")
        wtilde, alphas = self.effective_weights()
        self.last_wtilde = wtilde

        K = None
        conv_in = x
        pad_value = 0.0
        if self.binarize_input:
            K = _batch_window_mean(np.abs(x).mean(axis=1), self.geom).astype(x.dtype)
            if self.k_bits == 1:
                conv_in = sign(x)
            else:
                conv_in = quantize_kbit(np.clip(x, -1.0, 1.0), self.k_bits).astype(x.dtype)
            # zero padding is quantized like any other input value: sign(0) = +1
            pad_value = float(quantize_kbit(0.0, self.k_bits))

        cols, out_hw = _batch_im2col(conv_in, self.geom, pad_value)
        flat = cols @ wtilde.reshape(self.out_ch, -1).T
        out = flat.reshape(x.shape[0], *out_hw, self.out_ch).transpose(0, 3, 1, 2)
        pre_scale = None
        if self.binarize_input:
            out = out * K[:, None]
        if self.learned_scale and self.binarize_weights:
            pre_scale = out
            out = out * self.alpha.value[None, :, None, None]
        if train:
            self._tape = (x.shape, cols, wtilde, alphas, K, out_hw, x if self.binarize_input else None, pre_scale)
        return np.ascontiguousarray(out)

    def backward(self, g):
        if self._tape is None:
            raise RuntimeError("backward called without a train-mode forward")
        x_shape, cols, wtilde, alphas, K, out_hw, x_pre, pre_scale = self._tape
        self._tape = None
        g = np.asarray(g)

        if self.learned_scale and self.binarize_weights:
            self.alpha.grad = (g * pre_scale).sum(axis=(0, 2, 3)).astype(self.alpha.value.dtype)
            g = g * self.alpha.value[None, :, None, None]
        if self.binarize_input:
            g = g * K[:, None]

        gflat = g.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        gwtilde = (gflat.T @ cols).reshape(wtilde.shape)

        g_for_input = gflat
        if self.binary_gradient:
            gb = g.reshape(g.shape[0], -1)
            scale = np.abs(gb).max(axis=1).reshape(-1, 1, 1, 1)
            g_for_input = (scale * sign(g)).transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        gcols = g_for_input @ wtilde.reshape(self.out_ch, -1)
        gx = _batch_col2im(gcols, x_shape, self.geom, out_hw)

        if self.binarize_input:
            gx = ste_backward_sign(gx, x_pre, self.ste_variant)

        if self.binarize_weights and not self.learned_scale:
            gw = np.empty_like(self.weight.value)
            fn = weight_gradient_full if self.full_jacobian else weight_gradient
            for k in range(self.out_ch):
                gw[k] = fn(gwtilde[k], self.weight.value[k], float(alphas[k]), self.ste_variant)
        elif self.binarize_weights and self.learned_scale:
            gate = (np.abs(self.weight.value) <= 1.0).astype(gwtilde.dtype)
            gw = gwtilde * gate * self.alpha.value[:, None, None, None]
        else:
            gw = gwtilde
        self.weight.grad = gw.astype(self.weight.value.dtype)
        return gx


class BatchNorm2d(Layer):
    """Per-channel batch normalization with affine parameters.

    Training uses biased batch statistics and updates running stats with
    momentum 0.1; eval normalizes with the running stats.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Param("gamma", np.ones(channels, dtype=np.float32))
        self.beta = Param("beta", np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self._tape = None

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x, train: bool):
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"expected (N, {self.channels}, H, W), got {x.shape}")
        if train:
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * var).astype(self.running_var.dtype)
        else:
            mu = self.running_mean.astype(x.dtype)
            var = self.running_var.astype(x.dtype)
        ivar = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu[None, :, None, None]) * ivar[None, :, None, None]
        out = self.gamma.value[None, :, None, None] * xhat + self.beta.value[None, :, None, None]
        if train:
            self._tape = (xhat, ivar)
        return out

    def backward(self, g):
        if self._tape is None:
            raise RuntimeError("backward called without a train-mode forward")
        xhat, ivar = self._tape
        self._tape = None
        g = np.asarray(g)
        m = g.shape[0] * g.shape[2] * g.shape[3]
        self.gamma.grad = (g * xhat).sum(axis=(0, 2, 3)).astype(self.gamma.value.dtype)
        self.beta.grad = g.sum(axis=(0, 2, 3)).astype(self.beta.value.dtype)
        gxhat = g * self.gamma.value[None, :, None, None]
        sum_g = gxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        ivar_b = ivar[None, :, None, None]
        return ivar_b * (gxhat - sum_g / m - xhat * sum_gx / m)


class ReLU(Layer):
    def forward(self, x, train: bool):
        mask = np.asarray(x) > 0
        if train:
            self._mask = mask
        return np.where(mask, x, 0.0).astype(np.asarray(x).dtype)

    def backward(self, g):
        return np.where(self._mask, g, 0.0).astype(np.asarray(g).dtype)


class BinaryActivation(Layer):
    """Standalone sign (or k-bit) activation with STE backward."""

    def __init__(self, k_bits=1, ste_variant="indicator"):
        self.k_bits = k_bits
        self.ste_variant = ste_variant
        self._pre = None

    def forward(self, x, train: bool):
        x = np.asarray(x)
        if train:
            self._pre = x
        if self.k_bits == 1:
            return sign(x)
        return quantize_kbit(np.clip(x, -1.0, 1.0), self.k_bits).astype(x.dtype)

    def backward(self, g):
        return ste_backward_sign(g, self._pre, self.ste_variant)


class _Pool(Layer):
    def __init__(self, size=2, stride=None):
        self.size = size
        self.stride = stride if stride is not None else size
        if self.stride != self.size:
            raise ShapeError("pooling currently supports stride == window size")

    def _blocks(self, x):
        n, c, h, w = x.shape
        s = self.size
        oh, ow = h // s, w // s
        if oh < 1 or ow < 1:
            raise ShapeError(f"pool window {s} too large for input {x.shape}")
        x = x[:, :, :oh * s, :ow * s]
        return x.reshape(n, c, oh, s, ow, s).transpose(0, 1, 2, 4, 3, 5), (oh, ow)


class MaxPool2d(_Pool):
    def forward(self, x, train: bool):
        x = np.asarray(x)
        blocks, (oh, ow) = self._blocks(x)
        flat = blocks.reshape(*blocks.shape[:4], -1)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if train:
            self._tape = (x.shape, idx, (oh, ow))
        return out

    def backward(self, g):
        x_shape, idx, (oh, ow) = self._tape
        s = self.size
        gflat = np.zeros((*idx.shape, s * s), dtype=np.asarray(g).dtype)
        np.put_along_axis(gflat, idx[..., None], np.asarray(g)[..., None], axis=-1)
        gx = np.zeros(x_shape, dtype=gflat.dtype)
        blocks = gflat.reshape(*idx.shape, s, s).transpose(0, 1, 2, 4, 3, 5)
        gx[:, :, :oh * s, :ow * s] = blocks.reshape(x_shape[0], x_shape[1], oh * s, ow * s)
        return gx


class AvgPool2d(_Pool):
    def forward(self, x, train: bool):
        x = np.asarray(x)
        blocks, (oh, ow) = self._blocks(x)
        if train:
            self._tape = (x.shape, (oh, ow))
        return blocks.mean(axis=(-2, -1))

    def backward(self, g):
        x_shape, (oh, ow) = self._tape
        s = self.size
        g = np.asarray(g) / (s * s)
        gx = np.zeros(x_shape, dtype=g.dtype)
        up = np.repeat(np.repeat(g, s, axis=2), s, axis=3)
        gx[:, :, :oh * s, :ow * s] = up
        return gx


# ---------------------------------------------------------------------------
# layer specs and network assembly

LAYER_KINDS = ("conv", "binconv", "binactiv", "batchnorm", "relu",
               "maxpool", "avgpool", "softmax-nll")


@dataclass
class LayerSpec:
    """One line of an architecture description."""

    kind: str
    out_ch: int = 0
    k: int = 0              # square filter extent; 0 means full input extent (fc)
    stride: int = 1
    pad: int = 0
    binarize_input: bool = False
    binarize_weights: bool = False
    learned_scale: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


def apply_mode(specs: list[LayerSpec], mode: str) -> list[LayerSpec]:
    """Set binarization flags for a run mode: full, bwn, or xnor.

    The first and last trainable layers always stay full precision (small
    channel count / 1x1 filters make binarizing them a bad trade).
    """
    if mode not in ("full", "bwn", "xnor"):
        raise ValueError(f"unknown mode {mode!r}")
    out = [replace(s) for s in specs]
    conv_idx = [i for i, s in enumerate(out) if s.kind in ("conv", "binconv")]
    for pos, i in enumerate(conv_idx):
        s = out[i]
        eligible = pos not in (0, len(conv_idx) - 1)
        if mode == "full" or not eligible:
            s.kind = "conv"
            s.binarize_weights = False
            s.binarize_input = False
        elif mode == "bwn":
            s.kind = "binconv"
            s.binarize_weights = True
            s.binarize_input = False
        else:  # xnor
            s.kind = "binconv"
            s.binarize_weights = True
            s.binarize_input = True
    return out


def conv_block(order: str, out_ch: int, k: int = 3, pad: int = 1, pool: int = 2) -> list[LayerSpec]:
    """One convolution block in either ordering (the conv picks up its
    binarization flags from apply_mode)."""
    if order not in BLOCK_ORDERS:
        raise ValueError(f"block order must be one of {BLOCK_ORDERS}")
    conv = LayerSpec(kind="binconv", out_ch=out_ch, k=k, pad=pad)
    if order == "B-A-C-P":
        return [LayerSpec(kind="batchnorm"), conv, LayerSpec(kind="maxpool", k=pool)]
    return [conv, LayerSpec(kind="batchnorm"), LayerSpec(kind="binactiv"),
            LayerSpec(kind="maxpool", k=pool)]


class Network:
    """A straight chain of layers plus the input shape it was built for."""

    def __init__(self, layers: list[Layer], input_shape, specs=None):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.specs = specs
        self._forward_ran = False

    def params(self) -> list[Param]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, x, train: bool = False):
        for layer in self.layers:
            x = layer.forward(x, train)
        self._forward_ran = train
        return x

    def logits(self, x, train: bool = False):
        out = self.forward(x, train)
        return out.reshape(out.shape[0], -1)

    def backward(self, g):
        if not self._forward_ran:
            raise RuntimeError("backward requires a preceding train-mode forward")
        self._forward_ran = False
        g = np.asarray(g)
        if g.ndim == 2:
            g = g.reshape(*g.shape, 1, 1)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def astype(self, dtype):
        for p in self.params():
            p.value = p.value.astype(dtype)
        for layer in self.layers:
            if isinstance(layer, BatchNorm2d):
                layer.running_mean = layer.running_mean.astype(dtype)
                layer.running_var = layer.running_var.astype(dtype)
        return self

    def conv_layers(self) -> list[Conv2d]:
        return [l for l in self.layers if isinstance(l, Conv2d)]


def build_network(specs: list[LayerSpec], input_shape, seed: int = 0, *,
                  ste_variant: str = "indicator", k_bits: int = 1,
                  full_jacobian: bool = False, binary_gradient: bool = False) -> Network:
    """Assemble a Network from LayerSpecs, inferring channel counts and
    spatial extents along the chain.

    The first and last trainable layers are forced to full precision even if
    their specs carry binarization flags.
    """
    specs = [replace(s) for s in specs]
    if any(s.kind == "softmax-nll" for s in specs[:-1]):
        raise ShapeError("softmax-nll must be the final layer entry")
    if specs and specs[-1].kind == "softmax-nll":
        specs = specs[:-1]

    conv_positions = [i for i, s in enumerate(specs) if s.kind in ("conv", "binconv")]
    for i in (conv_positions[:1] + conv_positions[-1:]):
        specs[i].binarize_weights = False
        specs[i].binarize_input = False
        specs[i].kind = "conv"

    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    layers: list[Layer] = []
    for s in specs:
        if s.kind in ("conv", "binconv"):
            k = s.k if s.k > 0 else 0
            filt_hw = (k, k) if k else (h, w)
            layer = Conv2d(c, s.out_ch, filt_hw, stride=s.stride, pad=s.pad,
                           binarize_weights=s.binarize_weights,
                           binarize_input=s.binarize_input,
                           learned_scale=s.learned_scale,
                           k_bits=k_bits, ste_variant=ste_variant,
                           full_jacobian=full_jacobian,
                           binary_gradient=binary_gradient, rng=rng)
            h, w = layer.geom.out_hw((h, w))
            c = s.out_ch
            layers.append(layer)
        elif s.kind == "batchnorm":
            layers.append(BatchNorm2d(c))
        elif s.kind == "relu":
            layers.append(ReLU())
        elif s.kind == "binactiv":
            layers.append(BinaryActivation(k_bits=k_bits, ste_variant=ste_variant))
        elif s.kind in ("maxpool", "avgpool"):
            size = s.k if s.k > 0 else 2
            stride = s.stride if s.stride > 1 else size
            cls = MaxPool2d if s.kind == "maxpool" else AvgPool2d
            layers.append(cls(size, stride))
            h, w = h // size, w // size
            if h < 1 or w < 1:
                raise ShapeError(f"pooling exhausted spatial extent at {s}")
        else:  # pragma: no cover - guarded by LayerSpec.__post_init__
            raise ValueError(f"unhandled kind {s.kind}")
    return Network(layers, input_shape, specs=specs)
