"""Analytical compute and memory accounting.

FLOPs count convolution multiplies only (``k*k*C_in*C_out*H_out*W_out``);
bias adds, batch norm, activations and additions are free. OPs weight each
quantized layer by ``M / 64`` (64 binary ops per 64-bit word op) and count
full-precision layers at face value. Peak memory counts feature-map buffers
of ``C*H*W`` elements at LR resolution, stored at skip-connection precision.

Reported totals follow the published table's resolution: each layer's GFLOPs
is truncated to 1e-3 G before summing, and each feature-map buffer is rounded
to 1e-3 MB before multiplying by the buffer count. Exact integer counts are
kept in ``per_layer`` and ``exact_flops``.
"""

import math
from dataclasses import dataclass, field

from .errors import ConfigError
from .netgraph import BitConfig
from .quantizer import FULL_PRECISION

GIGA = 1e9
MEGA = 1e6
RESOLUTION = 1000  # reported values carry three decimals
FQSR_BUFFERS = 3


@dataclass(frozen=True)
class LayerCost:
    layer: int
    module: str
    multiplies: int
    gflops: float  # reported (truncated) value
    precision: int = FULL_PRECISION
    gops: float = 0.0


@dataclass
class CostReport:
    per_layer: list = field(default_factory=list)
    total_flops: float = 0.0
    exact_flops: float = 0.0
    total_ops: float = None
    peak_memory_mb: float = None
    input_hw: tuple = (0, 0)
    bitcfg: BitConfig = None
    buffers: int = None

    @property
    def peak_memory_bytes(self):
        return None if self.peak_memory_mb is None else self.peak_memory_mb * MEGA


def _truncate(x):
    return math.floor(x * RESOLUTION + 1e-9) / RESOLUTION


def _round(x):
    return math.floor(x * RESOLUTION + 0.5) / RESOLUTION


def _conv_sizes(spec, input_hw):
    """Spatial size of every layer output, following pixel-shuffle growth."""
    h, w = input_hw
    sizes = {-1: (h, w)}
    for layer in spec.layers:
        sh, sw = sizes[layer.src]
        if layer.kind == "conv":
            cp = layer.conv
            sh = (sh + 2 * cp.pad - cp.kernel) // cp.stride + 1
            sw = (sw + 2 * cp.pad - cp.kernel) // cp.stride + 1
        elif layer.kind == "pixel_shuffle":
            sh, sw = sh * layer.factor, sw * layer.factor
        sizes[layer.id] = (sh, sw)
    return sizes


def count_flops(spec, input_hw):
    sizes = _conv_sizes(spec, input_hw)
    report = CostReport(input_hw=tuple(input_hw), bitcfg=spec.bitcfg)
    for layer in spec.conv_layers():
        cp = layer.conv
        ho, wo = sizes[layer.id]
        mults = cp.kernel * cp.kernel * cp.in_ch * cp.out_ch * ho * wo
        report.per_layer.append(LayerCost(layer.id, layer.module, mults, _truncate(mults / GIGA)))
    report.total_flops = round(sum(c.gflops for c in report.per_layer), 6)
    report.exact_flops = sum(c.multiplies for c in report.per_layer) / GIGA
    return report


def layer_precision(bitcfg, module, quantized_modules="EMR"):
    """Arithmetic precision of a conv in ``module``; 32 means full precision."""
    if module not in quantized_modules:
        return FULL_PRECISION
    wt, fm = bitcfg.wt, bitcfg.fm
    if wt == FULL_PRECISION or fm == FULL_PRECISION:
        return FULL_PRECISION
    if wt != fm:
        raise ConfigError(f"OPs for asymmetric weight/feature precision ({wt} != {fm}) are not defined")
    return wt


def count_ops(spec, bitcfg=None, input_hw=(0, 0), quantized_modules="EMR"):
    """FLOPs plus OPs, where a quantized layer's multiplies cost ``M/64`` each.

    ``quantized_modules`` selects which of E/M/R run at the quantized
    precision; BAM-style accounting quantizes only ``"M"`` (with 1-bit
    weights and features).
    """
    bitcfg = spec.bitcfg if bitcfg is None else BitConfig.parse(bitcfg)
    report = count_flops(spec, input_hw)
    report.bitcfg = bitcfg
    costs = []
    for c in report.per_layer:
        prec = layer_precision(bitcfg, c.module, quantized_modules)
        factor = 1.0 if prec == FULL_PRECISION else prec / 64
        costs.append(LayerCost(c.layer, c.module, c.multiplies, c.gflops, prec, c.gflops * factor))
    report.per_layer = costs
    report.total_ops = round(sum(c.gops for c in costs), 6)
    return report


def default_buffers(spec, style="fqsr"):
    """Live feature-map buffers at peak.

    A skip-bearing network holds three (block input, branch, sum). Without M
    there is no skip and one buffer suffices. BAM-style accounting keeps one
    full-precision buffer per M convolution.
    """
    if style == "bam":
        return sum(1 for layer in spec.conv_layers() if layer.module == "M")
    if style != "fqsr":
        raise ConfigError(f"unknown memory accounting style {style!r}")
    return FQSR_BUFFERS if any(layer.kind == "add" for layer in spec.layers) else 1


def peak_memory(spec, bitcfg=None, input_hw=(0, 0), buffers=None, style="fqsr"):
    bitcfg = spec.bitcfg if bitcfg is None else BitConfig.parse(bitcfg)
    if buffers is None:
        buffers = default_buffers(spec, style)
    store_bits = FULL_PRECISION if style == "bam" else bitcfg.sc
    h, w = input_hw
    buffer_mb = _round(spec.channels * h * w * 4 / MEGA)
    report = CostReport(input_hw=tuple(input_hw), bitcfg=bitcfg, buffers=buffers)
    report.peak_memory_mb = round(buffers * buffer_mb * store_bits / FULL_PRECISION, 6)
    return report


def cost_report(spec, input_hw, bitcfg=None, style="fqsr"):
    """FLOPs, OPs and peak memory in one report."""
    bitcfg = spec.bitcfg if bitcfg is None else BitConfig.parse(bitcfg)
    if style == "bam":
        report = count_ops(spec, BitConfig(1, 1, FULL_PRECISION), input_hw, quantized_modules="M")
    else:
        report = count_ops(spec, bitcfg, input_hw)
    mem = peak_memory(spec, bitcfg, input_hw, style=style)
    report.peak_memory_mb = mem.peak_memory_mb
    report.buffers = mem.buffers
    return report
