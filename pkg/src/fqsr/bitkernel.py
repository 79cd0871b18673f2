"""Bit-serial integer arithmetic.

Inner products between M-bit and P-bit integer vectors are evaluated as

    a . b = sum_m sum_p 2**(m + p) * popcount(a_m & b_p)

over packed binary planes. Convolution lowers each output pixel's receptive
field to a packed row (im2col on bit planes) and runs the same plane-pair
popcount GEMM. Signed operands are stored with a non-negative offset and the
offset terms are restored once per output element from per-operand plane
popcounts.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _accel
from .errors import RangeError, ShapeError
from .tensor import as_tensor, pack_bits

if _accel.HAVE_NUMBA:
    from numba import prange
else:  # pragma: no cover
    prange = range

ACC_LIMIT = 1 << 62

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)
_S1 = np.uint64(1)
_S2 = np.uint64(2)
_S4 = np.uint64(4)
_S56 = np.uint64(56)


@_accel.njit(cache=True, inline="always")
def _popcount64(x):
    x = x - ((x >> _S1) & _M1)
    x = (x & _M2) + ((x >> _S2) & _M2)
    x = (x + (x >> _S4)) & _M4
    return (x * _H01) >> _S56


@_accel.njit(cache=True, parallel=True)
def _plane_gemm_numba(xw, ww):
    n_xp, rows, nw = xw.shape
    n_wp, cols, _ = ww.shape
    out = np.zeros((rows, cols), dtype=np.int64)
    for r in prange(rows):
        for o in range(cols):
            acc = np.int64(0)
            for m in range(n_xp):
                for p in range(n_wp):
                    c = np.int64(0)
                    for k in range(nw):
                        c += np.int64(_popcount64(xw[m, r, k] & ww[p, o, k]))
                    acc += c << np.int64(m + p)
            out[r, o] = acc
    return out


def _plane_gemm_numpy(xw, ww, chunk_elems=1 << 22):
    n_xp, rows, nw = xw.shape
    n_wp, cols, _ = ww.shape
    out = np.zeros((rows, cols), dtype=np.int64)
    step = max(1, chunk_elems // max(1, cols * nw))
    for start in range(0, rows, step):
        stop = min(rows, start + step)
        for m in range(n_xp):
            xa = xw[m, start:stop, None, :]
            for p in range(n_wp):
                cnt = np.bitwise_count(xa & ww[p][None, :, :]).sum(axis=-1, dtype=np.int64)
                out[start:stop] += cnt << np.int64(m + p)
    return out


def plane_gemm(xw, ww):
    """Weighted plane-pair popcount GEMM.

    ``xw`` is (Mx, R, words) and ``ww`` is (Mw, O, words), both uint64. Returns
    the (R, O) int64 matrix ``sum_{m,p} 2**(m+p) popcount(xw[m, r] & ww[p, o])``.
    """
    xw = np.ascontiguousarray(xw, dtype=np.uint64)
    ww = np.ascontiguousarray(ww, dtype=np.uint64)
    if xw.shape[-1] != ww.shape[-1]:
        raise ShapeError(f"word counts differ: {xw.shape[-1]} vs {ww.shape[-1]}")
    if _accel.use_numba():
        return _plane_gemm_numba(xw, ww)
    return _plane_gemm_numpy(xw, ww)


def plane_rowsum(planes):
    """``sum_m 2**m popcount(planes[m, r])`` for packed (M, R, words) planes."""
    counts = np.bitwise_count(planes).sum(axis=-1, dtype=np.int64)
    weights = np.int64(1) << np.arange(planes.shape[0], dtype=np.int64)
    return (counts * weights[:, None]).sum(axis=0)


def binary_dot(a, b):
    """Inner product of two packed binary vectors: popcount(a AND b)."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if a.shape != b.shape:
        raise ShapeError(f"packed vectors differ in length: {a.shape} vs {b.shape}")
    return int(np.bitwise_count(a & b).sum(dtype=np.int64))


def _check_accumulation(k, x_lo, x_hi, w_lo, w_hi, x_planes, w_planes):
    worst_raw = k * ((1 << x_planes) - 1) * ((1 << w_planes) - 1)
    worst = k * max(abs(x_lo), abs(x_hi)) * max(abs(w_lo), abs(w_hi))
    if max(worst_raw, worst) >= ACC_LIMIT:
        raise RangeError(
            f"reduction length {k} with {x_planes}x{w_planes} planes may overflow the 64-bit accumulator"
        )


def _offset_correct(raw, sum_x, sum_w, k, off_x, off_w):
    # sum (ux + ox)(uw + ow) = sum ux uw + ow sum ux + ox sum uw + k ox ow
    return raw + np.int64(off_w) * sum_x[:, None] + np.int64(off_x) * sum_w[None, :] + np.int64(k * off_x * off_w)


def multibit_dot(a, b):
    """Exact integer dot product of two bit-plane tensors (flattened)."""
    if a.size != b.size:
        raise ShapeError(f"element counts differ: {a.size} vs {b.size}")
    k = a.size
    _check_accumulation(k, a.min_value, a.max_value, b.min_value, b.max_value, a.bits, b.bits)
    xw = a.planes[:, None, :]
    ww = b.planes[:, None, :]
    raw = plane_gemm(xw, ww)
    acc = _offset_correct(raw, plane_rowsum(xw), plane_rowsum(ww), k, a.signed_offset, b.signed_offset)
    return int(acc[0, 0])


def _out_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def _check_conv_shapes(xshape, wshape, stride, pad):
    n, c, h, w = xshape
    o, c2, kh, kw = wshape
    if c != c2:
        raise ShapeError(f"input has {c} channels but kernel expects {c2}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride {stride} / pad {pad}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"kernel {kh}x{kw} does not fit padded input {h + 2 * pad}x{w + 2 * pad}")
    return _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)


def conv2d_bitserial(x, w, stride=1, pad=0):
    """Integer cross-correlation of two bit-plane tensors via plane popcounts.

    Padding inserts the value 0 (not the stored plane pattern 0), so signed
    operands pad with their offset-shifted zero. Returns an int64 (N, O, Ho, Wo)
    accumulator tensor.
    """
    ho, wo = _check_conv_shapes(x.shape, w.shape, stride, pad)
    n, c, _, _ = x.shape
    o, _, kh, kw = w.shape
    k = c * kh * kw
    _check_accumulation(k, x.min_value, x.max_value, w.min_value, w.max_value, x.bits, w.bits)

    xb = x.plane_bits()
    if pad:
        zero = -x.signed_offset
        if not 0 <= zero < (1 << x.bits):
            raise RangeError(f"value 0 is not representable by {x.bits} planes with offset {x.signed_offset}")
        fill = ((zero >> np.arange(x.bits)) & 1).astype(np.uint8)
        padded = np.empty(xb.shape[:3] + (xb.shape[3] + 2 * pad, xb.shape[4] + 2 * pad), dtype=np.uint8)
        padded[...] = fill[:, None, None, None, None]
        padded[..., pad:pad + xb.shape[3], pad:pad + xb.shape[4]] = xb
        xb = padded
    win = sliding_window_view(xb, (kh, kw), axis=(3, 4))[:, :, :, ::stride, ::stride][:, :, :, :ho, :wo]
    cols = win.transpose(0, 1, 3, 4, 2, 5, 6).reshape(x.bits, n * ho * wo, k)
    xw = pack_bits(cols)
    ww = pack_bits(w.plane_bits().reshape(w.bits, o, k))

    raw = plane_gemm(xw, ww)
    acc = _offset_correct(raw, plane_rowsum(xw), plane_rowsum(ww), k, x.signed_offset, w.signed_offset)
    return np.ascontiguousarray(acc.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))


def conv2d_int_reference(x, w, stride=1, pad=0):
    """Direct multiply-accumulate integer convolution (testing oracle)."""
    x = as_tensor(x, "int")
    w = as_tensor(w, "int")
    ho, wo = _check_conv_shapes(x.shape, w.shape, stride, pad)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    out = np.zeros((n, o, ho, wo), dtype=np.int64)
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0
                    for ic in range(c):
                        for di in range(kh):
                            yi = i * stride + di - pad
                            if yi < 0 or yi >= h:
                                continue
                            for dj in range(kw):
                                xj = j * stride + dj - pad
                                if 0 <= xj < wd:
                                    acc += int(x[b, ic, yi, xj]) * int(w[oc, ic, di, dj])
                    out[b, oc, i, j] = acc
    return out
