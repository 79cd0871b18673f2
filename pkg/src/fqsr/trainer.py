"""Fake-quantized training with interval warm-up and calibration loss.

The objective is ``loss_sr + alpha * loss_sqcl`` where ``loss_sqcl`` averages
the calibration loss of every quantization site (conv inputs, conv weights
and the three quantizers of each skip addition). Gradients flow through the
quantizers by the straight-through estimator; intervals join the Adam update
once their warm-up is over.

Latent weights, Adam moments and intervals are kept float32-representable
after every step so a checkpoint captures the training state exactly.
"""

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .evalmetrics import bicubic_resize, dihedral
from .netgraph import (
    BN_EPS,
    conv2d_backward,
    pixel_unshuffle,
    run,
)
from .quantizer import MIN_INTERVAL, quantize_backward, sqcl_backward, sqcl_loss

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr0: float = 1e-3
    lr_min: float = 0.0
    epochs: int = 300
    iters_per_epoch: int = 0  # 0: one pass over the training images
    warmup_l: int = 20
    alpha: float = 0.3
    sqcl_norm: str = "L1"
    sqcl_reduce: str = "mean"
    sr_loss: str = "L1"
    seed: int = 0
    patch_size: int = 48
    augment: bool = True
    arch: str = "srresnet"
    scale: int = 2
    blocks: int = 16
    channels: int = 64
    wt: int = 32
    fm: int = 32
    sc: int = 32

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.warmup_l < 1:
            raise ConfigError(f"warmup_l must be >= 1, got {self.warmup_l}")
        if self.batch_size < 1 or self.patch_size < 1:
            raise ConfigError("batch_size and patch_size must be positive")
        for key in ("sqcl_norm", "sr_loss"):
            if getattr(self, key) not in ("L1", "L2"):
                raise ConfigError(f"{key} must be L1 or L2, got {getattr(self, key)!r}")
        if self.sqcl_reduce not in ("mean", "sum"):
            raise ConfigError(f"sqcl_reduce must be mean or sum, got {self.sqcl_reduce!r}")

    @property
    def bitcfg(self):
        return (self.wt, self.fm, self.sc)

    def to_text(self):
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_mapping(cls, values):
        """Build a config from string values; unknown keys are an error."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            typ = types[key]
            try:
                if typ in (bool, "bool"):
                    kwargs[key] = str(raw).strip().lower() in ("1", "true", "yes", "on")
                elif typ in (int, "int"):
                    kwargs[key] = int(raw)
                elif typ in (float, "float"):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = str(raw).strip()
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        return cls(**kwargs)


def parse_config_text(text):
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def default_lr(arch):
    return 5e-5 if arch == "edsr" else 1e-3


@dataclass
class StepReport:
    loss_total: float
    loss_sr: float
    loss_sqcl: float
    lr: float = None
    iteration: int = None


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    m_q: np.ndarray = None
    v_q: np.ndarray = None

    @classmethod
    def zeros(cls, weights):
        return cls(
            0,
            {k: np.zeros_like(t) for k, t in weights.tensors.items()},
            {k: np.zeros_like(t) for k, t in weights.tensors.items()},
            np.zeros(len(weights.quant)),
            np.zeros(len(weights.quant)),
        )


def cosine_lr(iteration, total_iters, lr0, lr_min=0.0):
    if total_iters < 1:
        raise ConfigError(f"total_iters must be >= 1, got {total_iters}")
    t = min(max(iteration, 0), total_iters)
    return lr_min + (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total_iters)) / 2.0


def _sr_loss(sr, hr, kind):
    if sr.shape != hr.shape:
        raise ShapeError(f"sr shape {sr.shape} != hr shape {hr.shape}")
    d = sr - hr
    if kind == "L1":
        return float(np.mean(np.abs(d))), np.sign(d) / d.size
    return float(np.mean(d * d)), 2.0 * d / d.size


def _sqcl_weight(n_sites, cfg):
    if n_sites == 0:
        return 0.0
    return 1.0 / n_sites if cfg.sqcl_reduce == "mean" else 1.0


def total_loss(sr, hr, quant_sites, cfg):
    """Loss terms for one batch; ``quant_sites`` is a list of (value, QuantParams)."""
    loss_sr, _ = _sr_loss(np.asarray(sr, dtype=np.float64), np.asarray(hr, dtype=np.float64), cfg.sr_loss)
    active = [(v, p) for v, p in quant_sites if not p.is_identity]
    w = _sqcl_weight(len(active), cfg)
    loss_q = w * sum(sqcl_loss(v, p, cfg.sqcl_norm) for v, p in active)
    return StepReport(loss_sr + cfg.alpha * loss_q, loss_sr, loss_q)


def backward(spec, weights, trace, grad_out, cfg):
    """Backpropagate ``grad_out`` (and the calibration term) through ``trace``.

    Returns (tensor gradients by name, interval gradients by quantizer id).
    """
    quant = weights.quant
    t = weights.tensors
    g_t = {}
    g_q = np.zeros(len(quant))
    sqcl_scale = cfg.alpha * _sqcl_weight(len(trace.sites), cfg)
    grads = {spec.output_id: grad_out}

    def through(qid, v, g):
        p = quant[qid]
        if trace.mode == "float_ref" or p.is_identity:
            return g
        qb = quantize_backward(v, p, g)
        gv = qb.grad_input
        g_q[qid] += qb.grad_interval
        if sqcl_scale:
            sb = sqcl_backward(v, p, cfg.sqcl_norm, sqcl_scale)
            gv = gv + sb.grad_input
            g_q[qid] += sb.grad_interval
        return gv

    def send(dst, g):
        if dst >= 0:
            grads[dst] = g if dst not in grads else grads[dst] + g

    def param(name, g):
        g_t[name] = g if name not in g_t else g_t[name] + g

    for layer in reversed(spec.layers):
        lid = layer.id
        g = grads.pop(lid, None)
        if g is None:
            g = np.zeros_like(trace.outputs[lid])
        kind = layer.kind
        if kind == "conv":
            x, xq, eff, wq = trace.cache[lid]
            cp = layer.conv
            gxq, gwq, gb = conv2d_backward(xq, wq, g, cp.stride, cp.pad)
            send(layer.src, through(layer.act_q, x, gxq))
            gw_eff = through(layer.weight_q, eff.weight, gwq)
            bn = spec.bn_after.get(lid)
            w = t[f"{lid}.weight"]
            if bn is None:
                param(f"{lid}.weight", gw_eff)
                if cp.has_bias:
                    param(f"{lid}.bias", gb)
            else:
                inv_std = 1.0 / np.sqrt(t[f"{bn}.running_var"] + BN_EPS)
                s = t[f"{bn}.gamma"] * inv_std
                b = t[f"{lid}.bias"] if cp.has_bias else 0.0
                gs = (gw_eff * w).sum(axis=(1, 2, 3)) + gb * (b - t[f"{bn}.running_mean"])
                param(f"{lid}.weight", gw_eff * s[:, None, None, None])
                if cp.has_bias:
                    param(f"{lid}.bias", gb * s)
                param(f"{bn}.gamma", gs * inv_std)
                param(f"{bn}.beta", gb)
                param(f"{bn}.running_mean", np.zeros_like(gb))
                param(f"{bn}.running_var", np.zeros_like(gb))
        elif kind == "bn":
            send(layer.src, g)
        elif kind == "prelu":
            x = trace.outputs[layer.src] if layer.src >= 0 else None
            alpha = t[f"{lid}.alpha"]
            send(layer.src, np.where(x > 0, g, g * alpha[None, :, None, None]))
            param(f"{lid}.alpha", (g * np.minimum(x, 0.0)).sum(axis=(0, 2, 3)))
        elif kind == "relu":
            x = trace.outputs[layer.src]
            send(layer.src, np.where(x > 0, g, 0.0))
        elif kind == "pixel_shuffle":
            send(layer.src, pixel_unshuffle(g, layer.factor))
        else:
            x, z, zq, s = trace.cache[lid]
            gs = through(layer.out_q, s, g)
            send(layer.skip_source, through(layer.skip_q, x, gs))
            send(layer.src, through(layer.branch_q, z, np.where(zq > 0, gs, 0.0)))
    for name, tensor in t.items():
        if name not in g_t:
            g_t[name] = np.zeros_like(tensor)
    return g_t, g_q


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def snap_fp32(weights, opt=None):
    """Round all latent state to float32 so checkpoints capture it exactly."""
    for k in weights.tensors:
        weights.tensors[k] = _f32(weights.tensors[k])
    for p in weights.quant:
        if p.frozen and not p.is_identity:
            p.interval = max(float(np.float32(p.interval)), MIN_INTERVAL)
    if opt is not None:
        for d in (opt.m, opt.v):
            for k in d:
                d[k] = _f32(d[k])
        opt.m_q = _f32(opt.m_q)
        opt.v_q = _f32(opt.v_q)
    return weights


def _adam(param, grad, m, v, lr, t):
    m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * grad * grad
    mhat = m / (1 - ADAM_BETA1 ** t)
    vhat = v / (1 - ADAM_BETA2 ** t)
    return param - lr * mhat / (np.sqrt(vhat) + ADAM_EPS), m, v


FROZEN_TENSORS = ("running_mean", "running_var")


def train_step(spec, weights, batch, cfg, opt, total_iters):
    """One Adam step on ``batch = (lr, hr)``; updates ``weights``/``opt`` in place.

    Quantizers still in warm-up absorb this batch's maxima during the forward
    pass and receive no gradient update. Returns ``(weights, StepReport)``.
    """
    lr_img, hr = batch
    trained_intervals = [p.frozen and not p.is_identity for p in weights.quant]
    trace = run(spec, weights, lr_img, "fake_quant", warmup=True, keep=True)
    sites = [(v, weights.quant[qid]) for qid, v in trace.sites]
    report = total_loss(trace.output, hr, sites, cfg)
    if not (math.isfinite(report.loss_total) and math.isfinite(report.loss_sqcl)):
        raise NumericError(f"non-finite loss at iteration {opt.step}: {report.loss_total}")
    _, grad_out = _sr_loss(trace.output, np.asarray(hr, dtype=np.float64), cfg.sr_loss)
    g_t, g_q = backward(spec, weights, trace, grad_out, cfg)
    if not all(np.isfinite(g).all() for g in g_t.values()) or not np.isfinite(g_q).all():
        raise NumericError(f"non-finite gradient at iteration {opt.step}")

    lr = cosine_lr(opt.step, total_iters, cfg.lr0, cfg.lr_min)
    t = opt.step + 1
    for name, tensor in weights.tensors.items():
        if name.endswith(FROZEN_TENSORS):
            continue
        weights.tensors[name], opt.m[name], opt.v[name] = _adam(tensor, g_t[name], opt.m[name], opt.v[name], lr, t)
    for qid, p in enumerate(weights.quant):
        if trained_intervals[qid]:
            new, opt.m_q[qid], opt.v_q[qid] = _adam(p.interval, g_q[qid], opt.m_q[qid], opt.v_q[qid], lr, t)
            p.interval = max(float(new), MIN_INTERVAL)
    snap_fp32(weights, opt)
    report.lr = lr
    report.iteration = opt.step
    opt.step = t
    return weights, report


class Trainer:
    """Stateful wrapper: model, optimizer state and schedule length."""

    def __init__(self, spec, weights, cfg, total_iters, opt=None):
        self.spec = spec
        self.weights = weights
        self.cfg = cfg
        self.total_iters = total_iters
        for p in weights.quant:
            if not p.frozen and p.warmup_count == 0:
                p.warmup_l = cfg.warmup_l
        self.opt = AdamState.zeros(weights) if opt is None else opt
        snap_fp32(weights, self.opt)

    @property
    def iteration(self):
        return self.opt.step

    def step(self, lr_img, hr):
        _, report = train_step(self.spec, self.weights, (lr_img, hr), self.cfg, self.opt, self.total_iters)
        return report


# ---------------------------------------------------------------------------
# data


def prepare_pairs(hr_images, scale):
    """(LR, HR) float pairs in (3, H, W) layout from uint8 HR images.

    HR is cropped to a multiple of ``scale`` and LR is its bicubic downscale.
    """
    pairs = []
    for img in hr_images:
        a = np.asarray(img)
        h, w = (a.shape[0] // scale) * scale, (a.shape[1] // scale) * scale
        hr = a[:h, :w, :3].astype(np.float64).transpose(2, 0, 1) / 255.0
        lr = np.clip(bicubic_resize(hr[None], 1.0 / scale)[0], 0.0, 1.0)
        pairs.append((lr, hr))
    return pairs


def sample_batch(pairs, cfg, iteration):
    """Random aligned patches for one iteration, seeded by (seed, iteration)."""
    rng = np.random.default_rng([cfg.seed, iteration])
    p, s = cfg.patch_size, cfg.scale
    lrs, hrs = [], []
    for _ in range(cfg.batch_size):
        lr, hr = pairs[int(rng.integers(len(pairs)))]
        if lr.shape[1] < p or lr.shape[2] < p:
            raise ShapeError(f"training image {lr.shape[1:]} smaller than patch {p}")
        i = int(rng.integers(lr.shape[1] - p + 1))
        j = int(rng.integers(lr.shape[2] - p + 1))
        lp = lr[None, :, i:i + p, j:j + p]
        hp = hr[None, :, i * s:(i + p) * s, j * s:(j + p) * s]
        if cfg.augment:
            k, flip = int(rng.integers(4)), bool(rng.integers(2))
            lp, hp = dihedral(lp, k, flip), dihedral(hp, k, flip)
        lrs.append(lp)
        hrs.append(hp)
    return np.ascontiguousarray(np.concatenate(lrs)), np.ascontiguousarray(np.concatenate(hrs))


def total_iterations(cfg, n_images):
    per_epoch = cfg.iters_per_epoch or max(1, math.ceil(n_images / cfg.batch_size))
    return cfg.epochs * per_epoch
