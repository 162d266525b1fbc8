"""Fixed (non-learned) image resampling on [..., H, W] arrays."""

from __future__ import annotations

import numpy as np

CUBIC_A = -0.5


def cubic_kernel(x, a: float = CUBIC_A):
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    return np.where(
        x <= 1, (a + 2) * x3 - (a + 3) * x2 + 1,
        np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0),
    )


def _cubic_matrix(n_in: int, factor: float) -> np.ndarray:
    """Resampling matrix [n_out, n_in]; widened kernel when shrinking, border replicate."""
    n_out = int(round(n_in * factor))
    width = 1.0 / factor if factor < 1 else 1.0
    support = 2.0 * width
    centers = (np.arange(n_out) + 0.5) / factor - 0.5
    left = np.floor(centers - support).astype(int) + 1
    taps = int(np.ceil(2 * support)) + 1
    idx = left[:, None] + np.arange(taps)[None, :]
    wts = cubic_kernel((centers[:, None] - idx) / width)
    wts /= wts.sum(axis=1, keepdims=True)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.repeat(np.arange(n_out), taps), np.clip(idx, 0, n_in - 1).ravel()), wts.ravel())
    return m


def _linear_matrix(n_in: int, factor: int) -> np.ndarray:
    n_out = n_in * factor
    src = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def _separable(img, mh, mw):
    img = np.asarray(img, dtype=np.float64)
    out = np.einsum("ph,...hw->...pw", mh, img)
    out = np.einsum("...pw,qw->...pq", out, mw)
    return out.astype(np.float32)


def bicubic_resample(img, factor: float) -> np.ndarray:
    """Separable Catmull-Rom (a=-0.5) resampling of the last two axes.

    Downsampling stretches the kernel by 1/factor (antialiased, imresize-style).
    """
    if factor not in (0.25, 0.5, 1, 2, 4):
        raise ValueError(f"unsupported resampling factor {factor}")
    img = np.asarray(img)
    if factor == 1:
        return img.astype(np.float32, copy=True)
    h, w = img.shape[-2:]
    return _separable(img, _cubic_matrix(h, factor), _cubic_matrix(w, factor))


def bilinear_upsample(img, factor: int) -> np.ndarray:
    """Bilinear upsampling by an integer factor, half-pixel centres, edge clamp."""
    img = np.asarray(img)
    if factor == 1:
        return img.astype(np.float32, copy=True)
    h, w = img.shape[-2:]
    return _separable(img, _linear_matrix(h, factor), _linear_matrix(w, factor))


def avg_pool2(img) -> np.ndarray:
    img = np.asarray(img)
    h, w = img.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even dims, got {h}x{w}")
    v = img.reshape(*img.shape[:-2], h // 2, 2, w // 2, 2)
    return v.mean(axis=(-3, -1)).astype(np.float32)
