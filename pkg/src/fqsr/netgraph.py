"""Super-resolution network description and execution.

A model is an ordered list of layers grouped into feature extraction (E),
non-linear mapping (M) and reconstruction (R). Every convolution owns a
weight quantizer and an input-activation quantizer; every skip addition owns
three skip-precision quantizers (skip input, branch input, sum) so feature
maps crossing a skip connection always live on a quantization lattice.

Three execution modes share one layer loop:

* ``float_ref``  quantizers are ignored;
* ``fake_quant`` values are quantized and dequantized in float64 (training);
* ``integer``    convolutions run on integer codes through the bit-serial
  kernel and are rescaled at quantizer boundaries.

Batch norm is always folded into the preceding convolution before weight
quantization, so all three modes see the same effective weights.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .bitkernel import conv2d_bitserial
from .errors import ConfigError, NumericError, ShapeError
from .quantizer import (
    FULL_PRECISION,
    MIN_INTERVAL,
    QuantParams,
    init_interval_warmup,
    integer_code,
    quantize,
    round_half_away,
)
from .tensor import as_tensor, offset_layout, pack_bitplanes

BN_EPS = 1e-5
ARCHS = ("srresnet", "edsr", "srgan_gen")
MODES = ("float_ref", "fake_quant", "integer")
LAYER_KINDS = ("conv", "bn", "relu", "prelu", "pixel_shuffle", "add")
PRELU_INIT = 0.25


@dataclass(frozen=True)
class BitConfig:
    wt: int = FULL_PRECISION
    fm: int = FULL_PRECISION
    sc: int = FULL_PRECISION

    def __post_init__(self):
        for name in ("wt", "fm", "sc"):
            bits = getattr(self, name)
            if not (1 <= bits <= 8 or bits == FULL_PRECISION):
                raise ConfigError(f"{name} bit width must be in 1..8 or 32, got {bits}")

    @classmethod
    def parse(cls, value):
        if isinstance(value, BitConfig):
            return value
        if isinstance(value, str):
            parts = value.replace(",", "/").split("/")
        else:
            parts = list(value)
        if len(parts) != 3:
            raise ConfigError(f"bit configuration needs three widths (wt/fm/sc), got {value!r}")
        try:
            return cls(*(int(p) for p in parts))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad bit configuration {value!r}: {exc}") from None

    def __str__(self):
        return f"{self.wt}/{self.fm}/{self.sc}"


@dataclass(frozen=True)
class ConvParams:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    pad: int = 0
    has_bias: bool = True


@dataclass(frozen=True)
class QuantSite:
    """Static description of one privatised quantizer."""

    id: int
    layer: int
    role: str  # weight | input | skip | branch | output
    bits: int
    signed: bool


@dataclass(frozen=True)
class LayerSpec:
    id: int
    kind: str
    module: str
    src: int = -1  # -1 is the network input
    conv: ConvParams = None
    channels: int = 0
    factor: int = 1
    weight_q: int = None
    act_q: int = None
    skip_source: int = None
    skip_q: int = None
    branch_q: int = None
    out_q: int = None

    @property
    def quantizer_ids(self):
        ids = (self.weight_q, self.act_q, self.skip_q, self.branch_q, self.out_q)
        return tuple(i for i in ids if i is not None)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    scale: int
    blocks: int
    channels: int
    bitcfg: BitConfig
    layers: tuple
    quantizers: tuple = ()

    def __post_init__(self):
        rank = -1
        for i, layer in enumerate(self.layers):
            if layer.id != i:
                raise ConfigError(f"layer ids must be consecutive; layer {i} has id {layer.id}")
            if layer.kind not in LAYER_KINDS:
                raise ConfigError(f"unknown layer kind {layer.kind!r}")
            if not -1 <= layer.src < i:
                raise ConfigError(f"layer {i} reads from a later layer {layer.src}")
            if layer.module not in ("E", "M", "R"):
                raise ConfigError(f"layer {i} has unknown sub-module tag {layer.module!r}")
            if "EMR".index(layer.module) < rank:
                raise ConfigError("sub-module tags must form contiguous E, M, R groups in that order")
            rank = "EMR".index(layer.module)
            if layer.kind == "conv":
                if layer.conv is None or layer.conv.kernel % 2 != 1:
                    raise ConfigError(f"conv layer {i} needs an odd kernel")
                if self.quantizers and (layer.weight_q is None or layer.act_q is None):
                    raise ConfigError(f"conv layer {i} lacks weight/activation quantizers")
            if layer.kind == "add" and (layer.skip_source is None or not -1 <= layer.skip_source < i):
                raise ConfigError(f"add layer {i} must reference an earlier layer")
            if layer.kind == "bn" and (layer.src < 0 or self.layers[layer.src].kind != "conv"):
                raise ConfigError(f"batch norm layer {i} must directly follow a convolution")
        for q in self.quantizers:
            if not 0 <= q.layer < len(self.layers):
                raise ConfigError(f"quantizer {q.id} attached to unknown layer {q.layer}")

    @cached_property
    def bn_after(self):
        """Map conv layer id -> id of the batch norm folded into it."""
        return {layer.src: layer.id for layer in self.layers if layer.kind == "bn"}

    @property
    def output_id(self):
        return len(self.layers) - 1

    def conv_layers(self):
        return [layer for layer in self.layers if layer.kind == "conv"]

    def module_of(self, layer_id):
        return self.layers[layer_id].module


@dataclass(frozen=True)
class FoldedConv:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class Weights:
    """Trainable state of a model: named latent tensors plus quantizer states."""

    tensors: dict
    quant: list

    def copy(self):
        return Weights(
            {k: v.copy() for k, v in self.tensors.items()},
            [QuantParams(**vars(p)) for p in self.quant],
        )


class _Builder:
    def __init__(self, bitcfg, channels_act):
        self.bitcfg = bitcfg
        self.layers = []
        self.quant = []
        self.module = "E"
        self.act = channels_act

    @property
    def last(self):
        return len(self.layers) - 1

    def _q(self, layer, role, bits, signed):
        self.quant.append(QuantSite(len(self.quant), layer, role, bits, signed))
        return len(self.quant) - 1

    def _add(self, **kw):
        layer = LayerSpec(id=len(self.layers), module=self.module, **kw)
        self.layers.append(layer)
        return layer.id

    def conv(self, cin, cout, k, signed_input=True):
        lid = len(self.layers)
        wq = self._q(lid, "weight", self.bitcfg.wt, True)
        aq = self._q(lid, "input", self.bitcfg.fm, signed_input)
        return self._add(kind="conv", src=self.last, conv=ConvParams(cin, cout, k, 1, k // 2, True),
                         weight_q=wq, act_q=aq)

    def bn(self, channels):
        return self._add(kind="bn", src=self.last, channels=channels)

    def activation(self, kind, channels):
        if kind is None:
            return self.last
        return self._add(kind=kind, src=self.last, channels=channels)

    def shuffle(self, r):
        return self._add(kind="pixel_shuffle", src=self.last, factor=r)

    def add(self, skip):
        lid = len(self.layers)
        sc = self.bitcfg.sc
        return self._add(kind="add", src=self.last, skip_source=skip,
                         skip_q=self._q(lid, "skip", sc, True),
                         branch_q=self._q(lid, "branch", sc, True),
                         out_q=self._q(lid, "output", sc, True))


def build_model(name, scale, bitcfg=(32, 32, 32), blocks=16, channels=64):
    """Build an SRResNet, EDSR-baseline or SRGAN-generator layer list.

    E is a 9x9 conv 3->C; M holds ``blocks`` residual blocks plus a trailing
    conv closed by the long skip from E; R has one (conv C->4C, pixel shuffle)
    stage per factor of two followed by a 9x9 conv C->3. ``blocks=0`` drops M
    entirely, E then feeds R directly.
    """
    if name not in ARCHS:
        raise ConfigError(f"unsupported architecture {name!r}; choose from {', '.join(ARCHS)}")
    if scale not in (2, 4):
        raise ConfigError(f"unsupported scale x{scale}; choose 2 or 4")
    if blocks < 0 or channels < 1:
        raise ConfigError(f"invalid blocks={blocks} / channels={channels}")
    bitcfg = BitConfig.parse(bitcfg)
    use_bn = name != "edsr"
    block_act = "prelu" if use_bn else "relu"
    outer_act = "prelu" if use_bn else None
    c = channels

    b = _Builder(bitcfg, c)
    b.conv(3, c, 9, signed_input=False)
    e_out = b.activation(outer_act, c)

    if blocks:
        b.module = "M"
        for _ in range(blocks):
            start = b.last
            b.conv(c, c, 3)
            if use_bn:
                b.bn(c)
            b.activation(block_act, c)
            b.conv(c, c, 3)
            if use_bn:
                b.bn(c)
            b.add(start)
        b.conv(c, c, 3)
        if use_bn:
            b.bn(c)
        b.add(e_out)

    b.module = "R"
    for _ in range(int(np.log2(scale))):
        b.conv(c, 4 * c, 3)
        b.shuffle(2)
        b.activation(outer_act, c)
    b.conv(c, 3, 9)
    return ModelSpec(name, scale, blocks, c, bitcfg, tuple(b.layers), tuple(b.quant))


def tensor_manifest(spec):
    """Ordered (name, shape) list of every latent tensor the spec needs."""
    out = []
    for layer in spec.layers:
        lid = layer.id
        if layer.kind == "conv":
            cp = layer.conv
            out.append((f"{lid}.weight", (cp.out_ch, cp.in_ch, cp.kernel, cp.kernel)))
            if cp.has_bias:
                out.append((f"{lid}.bias", (cp.out_ch,)))
        elif layer.kind == "bn":
            for suffix in ("gamma", "beta", "running_mean", "running_var"):
                out.append((f"{lid}.{suffix}", (layer.channels,)))
        elif layer.kind == "prelu":
            out.append((f"{lid}.alpha", (layer.channels,)))
    return out


def init_weights(spec, seed=0, warmup_l=20):
    """Fresh weights: uniform(+-1/sqrt(fan_in)) convs, identity BN, PReLU slope 0.25."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in tensor_manifest(spec):
        lid, suffix = name.split(".", 1)
        layer = spec.layers[int(lid)]
        if suffix in ("weight", "bias"):
            cp = layer.conv
            bound = 1.0 / np.sqrt(cp.in_ch * cp.kernel * cp.kernel)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif suffix in ("gamma", "running_var"):
            tensors[name] = np.ones(shape)
        elif suffix == "alpha":
            tensors[name] = np.full(shape, PRELU_INIT)
        else:
            tensors[name] = np.zeros(shape)
    tensors = {k: v.astype(np.float32).astype(np.float64) for k, v in tensors.items()}
    quant = [QuantParams(q.bits, q.signed, warmup_l=warmup_l) for q in spec.quantizers]
    return Weights(tensors, quant)


def check_weights(spec, weights):
    for name, shape in tensor_manifest(spec):
        t = weights.tensors.get(name)
        if t is None:
            raise ConfigError(f"missing weight tensor {name!r}")
        if tuple(t.shape) != tuple(shape):
            raise ConfigError(f"weight {name!r} has shape {tuple(t.shape)}, expected {tuple(shape)}")
    if len(weights.quant) != len(spec.quantizers):
        raise ConfigError(f"{len(weights.quant)} quantizer states for {len(spec.quantizers)} quantizers")
    for site, p in zip(spec.quantizers, weights.quant):
        if p.bits != site.bits or p.signed != site.signed:
            raise ConfigError(f"quantizer {site.id} state does not match its {site.bits}-bit site")


# ---------------------------------------------------------------------------
# primitive ops


def fold_batchnorm(w, b, gamma, beta, mean, var, eps=BN_EPS):
    """Absorb an inference-mode batch norm into the preceding convolution."""
    w = np.asarray(w, dtype=np.float64)
    denom = np.asarray(var, dtype=np.float64) + eps
    if np.any(denom <= 0):
        raise NumericError("batch norm variance + eps must be positive")
    b = np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    scale = np.asarray(gamma, dtype=np.float64) / np.sqrt(denom)
    return FoldedConv(w * scale[:, None, None, None], (b - mean) * scale + beta)


def batchnorm_inference(x, gamma, beta, mean, var, eps=BN_EPS):
    sh = (1, -1, 1, 1)
    return (x - np.reshape(mean, sh)) / np.sqrt(np.reshape(var, sh) + eps) * np.reshape(gamma, sh) + np.reshape(beta, sh)


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw), ho, wo


def conv2d(x, w, bias=None, stride=1, pad=0):
    """Float cross-correlation (no kernel flip)."""
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels but kernel expects {w.shape[1]}")
    cols, ho, wo = _im2col(x, w.shape[2], w.shape[3], stride, pad)
    out = cols @ w.reshape(w.shape[0], -1).T
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, w.shape[0]).transpose(0, 3, 1, 2))


def conv2d_backward(x, w, grad, stride=1, pad=0):
    """Gradients of :func:`conv2d` w.r.t. input, weight and bias."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    g2 = grad.transpose(0, 2, 3, 1).reshape(-1, o)
    gw = (g2.T @ cols).reshape(w.shape)
    gcols = (g2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for di in range(kh):
        for dj in range(kw):
            gxp[:, :, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride] += (
                gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            )
    gx = gxp[:, :, pad:pad + h, pad:pad + wd]
    return gx, gw, g2.sum(axis=0)


def pixel_shuffle(x, r):
    """(N, C*r*r, H, W) -> (N, C, r*H, r*W) with out[c, r*i+di, r*j+dj] = in[c*r*r + di*r + dj, i, j]."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"{c} channels are not divisible by r^2 = {r * r}")
    c_out = c // (r * r)
    return x.reshape(n, c_out, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c_out, h * r, w * r)


def pixel_unshuffle(y, r):
    n, c, hr, wr = y.shape
    h, w = hr // r, wr // r
    return y.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)


def prelu(x, alpha):
    return np.where(x > 0, x, x * np.reshape(alpha, (1, -1, 1, 1)))


def relu(x):
    return np.maximum(x, 0.0)


def residual_add_quantized(x, z, q_x, q_z, q_y):
    """Quantized skip addition ``Q_y(Q_x(x) + ReLU(Q_z(z)))``.

    With full-precision quantizers this is exactly ``x + ReLU(z)``.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise ShapeError(f"skip shape {x.shape} != branch shape {z.shape}")
    return quantize(quantize(x, q_x) + relu(quantize(z, q_z)), q_y)


# ---------------------------------------------------------------------------
# execution


@dataclass
class Trace:
    """Per-layer record of one forward pass, used for backpropagation."""

    mode: str
    outputs: dict = field(default_factory=dict)
    cache: dict = field(default_factory=dict)
    sites: list = field(default_factory=list)  # (quantizer id, pre-quantization value)
    output: np.ndarray = None


def effective_conv(spec, weights, layer):
    """Weights and bias of a conv with any following batch norm folded in."""
    t = weights.tensors
    w = t[f"{layer.id}.weight"]
    b = t.get(f"{layer.id}.bias")
    bn = spec.bn_after.get(layer.id)
    if bn is None:
        return FoldedConv(w, np.zeros(w.shape[0]) if b is None else b)
    return fold_batchnorm(w, b, t[f"{bn}.gamma"], t[f"{bn}.beta"],
                          t[f"{bn}.running_mean"], t[f"{bn}.running_var"])


def _quantized(p):
    return p is not None and not p.is_identity


class _Runner:
    def __init__(self, spec, weights, mode, warmup, keep):
        if mode not in MODES:
            raise ConfigError(f"unknown forward mode {mode!r}; choose from {', '.join(MODES)}")
        self.spec = spec
        self.weights = weights
        self.mode = mode
        self.warmup = warmup
        self.keep = keep
        self.trace = Trace(mode)

    def q(self, qid, v):
        if self.mode == "float_ref":
            return v
        p = self.weights.quant[qid]
        if p.is_identity:
            return v
        if self.warmup and not p.frozen:
            init_interval_warmup(p, v)
            if p.frozen:
                # intervals are stored (and checkpointed) at float32 precision
                p.interval = max(float(np.float32(p.interval)), MIN_INTERVAL)
        if self.keep:
            self.trace.sites.append((qid, v))
        return quantize(v, p)

    def conv(self, layer, x):
        cp = layer.conv
        eff = effective_conv(self.spec, self.weights, layer)
        xq = self.q(layer.act_q, x)
        wq = self.q(layer.weight_q, eff.weight)
        px = self.weights.quant[layer.act_q] if layer.act_q is not None else None
        pw = self.weights.quant[layer.weight_q] if layer.weight_q is not None else None
        integer_path = self.mode != "float_ref" and _quantized(px) and _quantized(pw)
        if integer_path:
            # bias lives in the accumulator domain: one integer code per sx*sw
            s = px.step * pw.step
            b_code = round_half_away(eff.bias / s)
            bias = b_code * s
        else:
            bias = eff.bias
        if integer_path and self.mode == "integer":
            kx = integer_code(x, px)
            kw = integer_code(eff.weight, pw)
            xbits, xoff = offset_layout(px.bits, px.signed)
            wbits, woff = offset_layout(pw.bits, pw.signed)
            acc = conv2d_bitserial(pack_bitplanes(kx, xbits, xoff), pack_bitplanes(kw, wbits, woff),
                                   cp.stride, cp.pad)
            y = (acc + b_code.astype(np.int64)[None, :, None, None]) * s
        else:
            y = conv2d(xq, wq, bias, cp.stride, cp.pad)
        if self.keep:
            self.trace.cache[layer.id] = (x, xq, eff, wq)
        return y

    def add(self, layer, x, z):
        if x.shape != z.shape:
            raise ShapeError(f"add layer {layer.id}: skip shape {x.shape} != branch shape {z.shape}")
        xq = self.q(layer.skip_q, x)
        zq = self.q(layer.branch_q, z)
        s = xq + relu(zq)
        y = self.q(layer.out_q, s)
        if self.mode == "integer":
            p = self.weights.quant[layer.out_q]
            if _quantized(p):
                codes = integer_code(s, p)
                lo, hi = p.code_range
                if codes.min() < lo or codes.max() > hi or not np.array_equal(codes * p.step, y):
                    raise NumericError(f"skip output of layer {layer.id} left the {p.bits}-bit lattice")
        if self.keep:
            self.trace.cache[layer.id] = (x, z, zq, s)
        return y

    def run(self, x):
        outs = self.trace.outputs
        t = self.weights.tensors
        for layer in self.spec.layers:
            inp = x if layer.src < 0 else outs[layer.src]
            kind = layer.kind
            if kind == "conv":
                y = self.conv(layer, inp)
            elif kind == "bn":
                y = inp  # folded into the preceding conv
            elif kind == "prelu":
                y = prelu(inp, t[f"{layer.id}.alpha"])
            elif kind == "relu":
                y = relu(inp)
            elif kind == "pixel_shuffle":
                y = pixel_shuffle(inp, layer.factor)
            else:
                skip = x if layer.skip_source < 0 else outs[layer.skip_source]
                y = self.add(layer, skip, inp)
            outs[layer.id] = y
        self.trace.output = outs[self.spec.output_id]
        return self.trace


def run(spec, weights, lr_image, mode="fake_quant", warmup=False, keep=False):
    """Execute ``spec`` and return the full :class:`Trace`.

    ``warmup`` feeds every not-yet-frozen quantizer its input before
    quantizing (interval initialisation); ``keep`` records what backprop needs.
    """
    check_weights(spec, weights)
    x = as_tensor(lr_image, "real")
    if x.shape[1] != 3:
        raise ShapeError(f"expected a 3-channel image tensor, got {x.shape[1]} channels")
    return _Runner(spec, weights, mode, warmup, keep).run(x)


def forward(spec, weights, lr_image, mode="fake_quant"):
    """Super-resolve ``lr_image`` (N, 3, H, W) -> (N, 3, scale*H, scale*W)."""
    return run(spec, weights, lr_image, mode).output


def calibrate(spec, weights, batches):
    """Run interval warm-up over ``batches`` until every quantizer is frozen."""
    for batch in batches:
        if all(p.frozen for p in weights.quant):
            break
        run(spec, weights, batch, "fake_quant", warmup=True)
    return weights


def freeze_all(weights):
    for p in weights.quant:
        p.frozen = True
    return weights
