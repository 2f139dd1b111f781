"""Low-level image kernels.

Images are plain 2-D ``float64`` numpy arrays (row-major, ``img[row, col]``).
Everything here is a pure function of its arguments.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError, InvalidInputError


@dataclass(frozen=True)
class GradientField:
    dx: np.ndarray
    dy: np.ndarray

    @property
    def magnitude(self):
        """Anisotropic magnitude ``|dx| + |dy|``."""
        return np.abs(self.dx) + np.abs(self.dy)


@dataclass(frozen=True)
class EdgeMask:
    """Binary non-edge mask: 1 where the gradient magnitude is <= ``threshold``."""

    values: np.ndarray
    threshold: float


def as_image(img, name="image"):
    """Validate and convert to a finite 2-D float64 array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise DimensionError(f"{name} must be a non-empty 2-D grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def _same_shape(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def minmax_normalize(img):
    """Rescale to [0, 1]; a constant image maps to all zeros."""
    x = as_image(img)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    out = (x - lo) / (hi - lo)
    # guard the endpoints against rounding
    out[x == lo] = 0.0
    out[x == hi] = 1.0
    return out


def spatial_gradient(img):
    """Forward differences with a zero trailing column (dx) and row (dy)."""
    x = as_image(img)
    if x.shape[0] < 2 or x.shape[1] < 2:
        raise DimensionError(f"gradient needs at least 2x2, got {x.shape}")
    dx = np.zeros_like(x)
    dy = np.zeros_like(x)
    dx[:, :-1] = x[:, 1:] - x[:, :-1]
    dy[:-1, :] = x[1:, :] - x[:-1, :]
    return GradientField(dx, dy)


def spatial_gradient_adjoint(px, py):
    """Adjoint of :func:`spatial_gradient` applied to a dual field (px, py)."""
    g = np.zeros_like(px)
    g[:, :-1] -= px[:, :-1]
    g[:, 1:] += px[:, :-1]
    g[:-1, :] -= py[:-1, :]
    g[1:, :] += py[:-1, :]
    return g


def edge_mask(img, quantile=0.8):
    """Mask out edge pixels of ``img``.

    The threshold is the empirical (``higher``) quantile of ``|dx| + |dy|``;
    pixels at or below it are kept (mask 1), so a flat image keeps everything.
    """
    if not 0.0 < quantile < 1.0:
        raise ConfigError(f"mask quantile must lie in (0, 1), got {quantile}")
    mag = spatial_gradient(img).magnitude
    threshold = float(np.quantile(mag, quantile, method="higher"))
    values = (mag <= threshold).astype(np.float64)
    return EdgeMask(values, threshold)


def ncc(a, b):
    """Normalized cross-correlation over the whole grid."""
    a = as_image(a, "a")
    b = as_image(b, "b")
    _same_shape(a, b)
    u = a - a.mean()
    v = b - b.mean()
    nu = np.sqrt(np.sum(u * u))
    nv = np.sqrt(np.sum(v * v))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("NCC is undefined for a constant image")
    return float(np.sum(u * v) / (nu * nv))


def ncc_gradient(x, ref):
    """Analytic gradient of ``ncc(x, ref)`` with respect to ``x``."""
    x = as_image(x, "x")
    ref = as_image(ref, "ref")
    _same_shape(x, ref)
    u = x - x.mean()
    v = ref - ref.mean()
    uu = np.sum(u * u)
    nv = np.sqrt(np.sum(v * v))
    if uu == 0.0 or nv == 0.0:
        raise DegenerateInputError("NCC gradient is undefined for a constant image")
    grad = (v - (np.sum(u * v) / uu) * u) / (np.sqrt(uu) * nv)
    # chain rule through the mean of x projects out the constant direction
    return grad - grad.mean()


def masked_tv(x, mask):
    """Masked anisotropic total variation ``sum(mask * (|dx| + |dy|))``."""
    x = as_image(x, "x")
    m = mask.values if isinstance(mask, EdgeMask) else np.asarray(mask, dtype=np.float64)
    _same_shape(x, m)
    return float(np.sum(m * spatial_gradient(x).magnitude))


def masked_tv_subgradient(x, mask):
    """Subgradient of :func:`masked_tv` using ``sign(0) = 0``."""
    x = as_image(x, "x")
    m = mask.values if isinstance(mask, EdgeMask) else np.asarray(mask, dtype=np.float64)
    _same_shape(x, m)
    grad = spatial_gradient(x)
    return spatial_gradient_adjoint(m * np.sign(grad.dx), m * np.sign(grad.dy))


def dft2(img):
    return np.fft.fft2(np.asarray(img, dtype=np.float64))


def idft2(spectrum):
    """Inverse DFT; returns the real part."""
    return np.real(np.fft.ifft2(spectrum))


def radial_frequency(shape):
    """Euclidean radius of each DFT coefficient in signed integer frequency units."""
    h, w = shape
    fy = np.fft.fftfreq(h) * h
    fx = np.fft.fftfreq(w) * w
    return np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)


def central_difference(f, x, direction, eps=1e-6):
    """Directional derivative of scalar ``f`` at ``x`` along ``direction``."""
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    return (f(x + eps * d) - f(x - eps * d)) / (2.0 * eps)
