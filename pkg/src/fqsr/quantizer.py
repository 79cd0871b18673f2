"""Learned-interval uniform quantizers.

A quantizer maps ``v`` to ``round(clip(v / I, lo, 1) * n) * I / n`` with
``n = 2**M - 1`` levels, ``lo = 0`` for unsigned data and ``lo = -1`` for
signed data. The interval ``I`` is initialised from the mean of per-batch
maxima over a warm-up window and trained afterwards through a
straight-through estimator. A bit width of 32 or more denotes full
precision: such quantizers are the identity.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError, StateError

FULL_PRECISION = 32
MIN_INTERVAL = 1e-8


@dataclass
class QuantParams:
    bits: int
    signed: bool
    interval: float = 1.0
    warmup_l: int = 20
    warmup_sum: float = 0.0
    warmup_count: int = 0
    frozen: bool = False

    def __post_init__(self):
        if self.bits < 1:
            raise ParameterError(f"bit width must be >= 1, got {self.bits}")
        if self.warmup_l < 1:
            raise ParameterError(f"warm-up length must be >= 1, got {self.warmup_l}")
        if self.is_identity:
            self.frozen = True

    @property
    def is_identity(self):
        return self.bits >= FULL_PRECISION

    @property
    def levels(self):
        return (1 << self.bits) - 1

    @property
    def lower(self):
        return -1.0 if self.signed else 0.0

    @property
    def upper(self):
        return 1.0

    @property
    def step(self):
        """Real value of one integer code."""
        return self.interval / self.levels

    @property
    def code_range(self):
        n = self.levels
        return (-n if self.signed else 0), n


@dataclass
class QuantGrad:
    grad_input: np.ndarray
    grad_interval: float


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    whole = np.trunc(x)
    frac = x - whole  # exact for binary floats
    return whole + np.where(np.abs(frac) >= 0.5, np.sign(x), 0.0)


def _check(p):
    if not p.interval > 0:
        raise ParameterError(f"quantization interval must be positive, got {p.interval}")


def integer_code(v, p):
    """Integer lattice index of ``v``; ``quantize(v) == integer_code(v) * p.step``."""
    if p.is_identity:
        raise ParameterError("a full-precision quantizer has no integer codes")
    _check(p)
    u = np.clip(np.asarray(v, dtype=np.float64) / p.interval, p.lower, p.upper)
    return round_half_away(u * p.levels).astype(np.int64)


def quantize(v, p):
    if p.is_identity:
        return np.array(v, dtype=np.float64, copy=True)
    return integer_code(v, p) * p.step


def dequantize(codes, p):
    return np.asarray(codes, dtype=np.int64) * p.step


def init_interval_warmup(p, batch):
    """Fold one batch into the warm-up mean; freezes ``p`` after ``warmup_l`` calls.

    Signed quantizers track ``max(|batch|)``, unsigned ones ``max(batch)``.
    Mutates and returns ``p``.
    """
    if p.frozen:
        raise StateError("interval warm-up already finished for this quantizer")
    batch = np.asarray(batch, dtype=np.float64)
    if batch.size == 0:
        raise ShapeError("warm-up batch is empty")
    peak = float(np.max(np.abs(batch))) if p.signed else float(np.max(batch))
    p.warmup_sum += peak
    p.warmup_count += 1
    p.interval = max(p.warmup_sum / p.warmup_count, MIN_INTERVAL)
    if p.warmup_count >= p.warmup_l:
        p.frozen = True
    return p


def quantize_backward(v, p, upstream):
    """Straight-through gradients of ``quantize`` w.r.t. its input and interval.

    Inside the clip range the rounding is treated as identity, so the input
    gradient passes through and the interval receives the rounding residual
    ``q - u``. In the saturated regions the output is ``I * lo`` or ``I``, whose
    exact derivatives are 0 for the input and ``lo`` / ``1`` for the interval.
    """
    v = np.asarray(v, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if v.shape != upstream.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != input shape {v.shape}")
    if p.is_identity:
        return QuantGrad(upstream.copy(), 0.0)
    _check(p)
    u = v / p.interval
    lo, hi = p.lower, p.upper
    inside = (u > lo) & (u < hi)
    q = round_half_away(np.clip(u, lo, hi) * p.levels) / p.levels
    g = np.where(u >= hi, hi, np.where(u <= lo, lo, q - u))
    grad_input = np.where(inside, upstream, 0.0)
    return QuantGrad(grad_input, float(np.sum(upstream * g)))


def sqcl_loss(v, p, norm="L1"):
    """Calibration loss between a tensor and its quantized image.

    L1 is the mean absolute difference, L2 the root mean squared difference.
    """
    v = np.asarray(v, dtype=np.float64)
    diff = quantize(v, p) - v
    if diff.size == 0:
        return 0.0
    if norm == "L1":
        return float(np.mean(np.abs(diff)))
    if norm == "L2":
        return float(np.sqrt(np.mean(diff * diff)))
    raise ParameterError(f"unknown norm {norm!r}")


def sqcl_backward(v, p, norm="L1", scale=1.0):
    """Gradient of ``scale * sqcl_loss(v, p, norm)`` w.r.t. ``v`` and ``I``."""
    v = np.asarray(v, dtype=np.float64)
    if p.is_identity or v.size == 0:
        return QuantGrad(np.zeros_like(v), 0.0)
    diff = quantize(v, p) - v
    if norm == "L1":
        d = np.sign(diff) * (scale / v.size)
    elif norm == "L2":
        r = np.sqrt(np.mean(diff * diff))
        d = diff * (scale / (v.size * r)) if r > 0 else np.zeros_like(v)
    else:
        raise ParameterError(f"unknown norm {norm!r}")
    through = quantize_backward(v, p, d)
    return QuantGrad(through.grad_input - d, through.grad_interval)
