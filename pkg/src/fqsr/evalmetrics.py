"""Image quality metrics, bicubic resampling and self-ensemble inference.

Images are accepted as (H, W), (H, W, C) arrays or (1, C, H, W) tensors.
Floating images are taken to be in [0, 1]; every metric first maps its
inputs to 8-bit integers in [0, 255].
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ParameterError, ShapeError

PSNR_CAP = 100.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WIN = 11
SSIM_SIGMA = 1.5
BICUBIC_A = -0.5


@dataclass(frozen=True)
class MetricResult:
    psnr_db: float
    ssim: float
    shave: int


def to_uint8(img):
    """Convert an image or single-image tensor to an (H, W, C) uint8 array."""
    a = np.asarray(img)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ShapeError(f"expected a single image, got batch of {a.shape[0]}")
        a = a[0].transpose(1, 2, 0)
    elif a.ndim == 2:
        a = a[:, :, None]
    elif a.ndim != 3:
        raise ShapeError(f"unsupported image shape {a.shape}")
    if a.dtype == np.uint8:
        return a
    if np.issubdtype(a.dtype, np.integer):
        return np.clip(a, 0, 255).astype(np.uint8)
    return np.clip(np.floor(a.astype(np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def rgb_to_y(img):
    """BT.601 luma on the [16, 235] studio range, as used by SR benchmarks."""
    x = img.astype(np.float64)
    return 16.0 + (65.481 * x[..., 0] + 128.553 * x[..., 1] + 24.966 * x[..., 2]) / 255.0


def _prepare(sr, hr, shave, y_channel):
    a = to_uint8(sr)
    b = to_uint8(hr)
    if a.shape != b.shape:
        raise ParameterError(f"image sizes differ: {a.shape} vs {b.shape}")
    if shave < 0 or 2 * shave >= min(a.shape[0], a.shape[1]):
        raise ParameterError(f"shave {shave} leaves nothing of a {a.shape[0]}x{a.shape[1]} image")
    if shave:
        a = a[shave:-shave, shave:-shave]
        b = b[shave:-shave, shave:-shave]
    if y_channel:
        if a.shape[2] != 3:
            raise ParameterError("Y-channel metrics need RGB images")
        return rgb_to_y(a)[..., None], rgb_to_y(b)[..., None]
    return a.astype(np.float64), b.astype(np.float64)


def psnr(sr, hr, shave=0, y_channel=False):
    a, b = _prepare(sr, hr, shave, y_channel)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(255.0 ** 2 / mse)))


def _gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x, g):
    half = len(g) // 2
    y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return y[half:-half, half:-half]


def _ssim_channel(a, b, g):
    c1 = (SSIM_K1 * 255) ** 2
    c2 = (SSIM_K2 * 255) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(sr, hr, shave=0, y_channel=False):
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), per channel then averaged."""
    a, b = _prepare(sr, hr, shave, y_channel)
    if min(a.shape[0], a.shape[1]) < SSIM_WIN:
        raise ParameterError(f"SSIM needs at least {SSIM_WIN}x{SSIM_WIN} pixels after shaving")
    g = _gaussian_window()
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], g) for c in range(a.shape[2])]))


def evaluate(sr, hr, shave=0, y_channel=False):
    return MetricResult(psnr(sr, hr, shave, y_channel), ssim(sr, hr, shave, y_channel), shave)


# ---------------------------------------------------------------------------
# bicubic resampling


def cubic_kernel(x, a=BICUBIC_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_matrix(n_in, n_out, scale, antialias=True):
    """(n_out, n_in) interpolation matrix for one axis, edges clamped.

    Output sample ``i`` sits at input coordinate ``(i + 0.5) / scale - 0.5``.
    When shrinking with ``antialias`` the kernel is stretched by ``1/scale``.
    """
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    support = 2.0 * stretch
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    first = np.floor(centers - support).astype(np.int64) + 1
    taps = int(np.ceil(2 * support)) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    wts = cubic_kernel((centers[:, None] - idx) / stretch)
    wts /= wts.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), taps), np.clip(idx, 0, n_in - 1).ravel()), wts.ravel())
    return mat


def bicubic_resize(img, scale, antialias=True):
    """Separable bicubic resize (a = -0.5) of an (H, W[, C]) float image.

    A single (N, C, H, W) tensor is resized over its last two axes.
    """
    if not scale > 0:
        raise ParameterError(f"scale must be positive, got {scale}")
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 4:
        h_ax, w_ax = 2, 3
    elif a.ndim in (2, 3):
        h_ax, w_ax = 0, 1
    else:
        raise ShapeError(f"unsupported image shape {a.shape}")
    h, w = a.shape[h_ax], a.shape[w_ax]
    ho, wo = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    mh = resize_matrix(h, ho, scale, antialias)
    mw = resize_matrix(w, wo, scale, antialias)
    out = np.moveaxis(np.tensordot(mh, a, axes=([1], [h_ax])), 0, h_ax)
    return np.moveaxis(np.tensordot(mw, out, axes=([1], [w_ax])), 0, w_ax)


# ---------------------------------------------------------------------------
# self-ensemble


def dihedral(x, k, flip):
    """Rotate the spatial axes of an (N, C, H, W) tensor by ``k`` quarter turns
    after an optional horizontal flip."""
    if flip:
        x = x[..., ::-1]
    return np.rot90(x, k, axes=(2, 3))


def dihedral_inverse(y, k, flip):
    y = np.rot90(y, -k, axes=(2, 3))
    if flip:
        y = y[..., ::-1]
    return y


TRANSFORMS = tuple((k, flip) for flip in (False, True) for k in range(4))


def self_ensemble(model, lr_image):
    """Uniform mean of ``model`` outputs over the eight dihedral transforms.

    Outputs are summed as a balanced tree in a fixed order so the result is
    deterministic and, for an equivariant model, bit-identical to one pass.
    """
    lr = np.asarray(lr_image, dtype=np.float64)
    outs = [np.ascontiguousarray(dihedral_inverse(np.asarray(model(np.ascontiguousarray(dihedral(lr, k, f)))), k, f))
            for k, f in TRANSFORMS]
    while len(outs) > 1:
        outs = [outs[i] + outs[i + 1] for i in range(0, len(outs), 2)]
    return outs[0] / len(TRANSFORMS)
