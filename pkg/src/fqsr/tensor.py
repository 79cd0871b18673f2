"""Rank-4 tensors and their bit-plane decomposition.

Tensors are plain ``numpy.ndarray`` objects of shape (N, C, H, W) holding
either float64 or int64 elements. A :class:`BitPlaneTensor` splits a
non-negative integer tensor into ``bits`` binary planes, each packed
little-endian into 64-bit words so that inner products reduce to AND plus
popcount over words.
"""

from dataclasses import dataclass

import numpy as np

from .errors import RangeError, ShapeError

WORD_BITS = 64


def as_tensor(x, kind=None):
    """Validate ``x`` as a rank-4 tensor and normalise its element kind.

    ``kind`` may be ``"real"`` (float64), ``"int"`` (int64) or ``None`` to
    infer it from the input dtype.
    """
    arr = np.asarray(x)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 (N, C, H, W) tensor, got shape {arr.shape}")
    if kind is None:
        kind = "int" if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool else "real"
    if kind == "int":
        if not (np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool):
            raise ShapeError(f"integer tensor required, got dtype {arr.dtype}")
        return arr.astype(np.int64, copy=False)
    if kind == "real":
        return arr.astype(np.float64, copy=False)
    raise ValueError(f"unknown element kind {kind!r}")


def n_words(n_bits):
    return (n_bits + WORD_BITS - 1) // WORD_BITS


def pack_bits(bits):
    """Pack a 0/1 array along its last axis into little-endian uint64 words.

    Element ``i`` of the last axis lands in word ``i // 64`` at bit ``i % 64``.
    The last word is zero padded.
    """
    bits = np.asarray(bits, dtype=np.uint8)
    length = bits.shape[-1]
    nbytes = n_words(length) * 8
    packed = np.packbits(bits, axis=-1, bitorder="little")
    if packed.shape[-1] != nbytes:
        pad = [(0, 0)] * (packed.ndim - 1) + [(0, nbytes - packed.shape[-1])]
        packed = np.pad(packed, pad)
    packed = np.ascontiguousarray(packed)
    return packed.view("<u8").astype(np.uint64, copy=False)


def unpack_bits(words, length):
    """Inverse of :func:`pack_bits`; returns a uint8 array of 0/1 values."""
    words = np.ascontiguousarray(np.asarray(words, dtype=np.uint64).astype("<u8", copy=False))
    as_bytes = words.view(np.uint8)
    return np.unpackbits(as_bytes, axis=-1, count=length, bitorder="little")


@dataclass(frozen=True)
class BitPlaneTensor:
    """An integer tensor stored as ``bits`` packed binary planes.

    ``planes[m]`` holds bit ``m`` of every element in row-major (N, C, H, W)
    order. Element values are ``sum_m plane_m * 2**m + signed_offset``.
    """

    shape: tuple
    bits: int
    planes: np.ndarray
    signed_offset: int = 0

    @property
    def size(self):
        return int(np.prod(self.shape))

    def plane_bits(self):
        """Planes unpacked to a uint8 array of shape (bits, N, C, H, W)."""
        flat = unpack_bits(self.planes, self.size)
        return flat.reshape((self.bits,) + tuple(self.shape))

    @property
    def max_value(self):
        return (1 << self.bits) - 1 + self.signed_offset

    @property
    def min_value(self):
        return self.signed_offset


def pack_bitplanes(t, bits, signed_offset=0):
    """Decompose integer tensor ``t`` into ``bits`` binary planes.

    Every element of ``t - signed_offset`` must lie in ``[0, 2**bits - 1]``;
    the first offending element is reported by index otherwise.
    """
    t = as_tensor(t, "int")
    if bits < 1 or bits > 62:
        raise RangeError(f"bit width must be in 1..62, got {bits}")
    u = t - np.int64(signed_offset)
    bad = (u < 0) | (u > (1 << bits) - 1)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise RangeError(
            f"element {idx} = {int(t[idx])} outside [{signed_offset}, "
            f"{(1 << bits) - 1 + signed_offset}] for {bits}-bit planes"
        )
    flat = u.reshape(-1)
    shifts = np.arange(bits, dtype=np.int64)[:, None]
    plane_bits = ((flat[None, :] >> shifts) & 1).astype(np.uint8)
    return BitPlaneTensor(tuple(t.shape), int(bits), pack_bits(plane_bits), int(signed_offset))


def unpack_bitplanes(bp):
    bits = bp.plane_bits().astype(np.int64)
    weights = (np.int64(1) << np.arange(bp.bits, dtype=np.int64)).reshape((-1, 1, 1, 1, 1))
    return (bits * weights).sum(axis=0) + np.int64(bp.signed_offset)


def offset_layout(code_bits, signed):
    """Plane count and offset used to store ``code_bits``-bit quantizer codes.

    Unsigned codes span [0, 2**M - 1] and need no offset. Signed codes span
    [-(2**M - 1), 2**M - 1]; they are shifted by the range midpoint so each
    plane stays non-negative, which costs one extra plane.
    """
    levels = (1 << code_bits) - 1
    if signed:
        return code_bits + 1, -levels
    return code_bits, 0
