"""Simulated source domains and the two conventional harmonization baselines."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, InvalidInputError
from .numeric import as_image, dft2, idft2, minmax_normalize, radial_frequency

N_BINS = 256
TRANSFORMS = ("exp", "log", "gamma")


@dataclass(frozen=True)
class DomainTransform:
    kind: str
    gamma_power: float = None
    log_epsilon: float = 0.01

    def __post_init__(self):
        if self.kind not in TRANSFORMS:
            raise ConfigError(f"unknown transform {self.kind!r}; expected one of {TRANSFORMS}")
        if self.kind == "gamma":
            if self.gamma_power is None or not self.gamma_power > 0:
                raise ConfigError("gamma transform needs a positive gamma_power")
        elif self.gamma_power is not None:
            raise ConfigError("gamma_power only applies to the gamma transform")
        if not self.log_epsilon > 0:
            raise ConfigError("log_epsilon must be positive")

    @property
    def name(self):
        if self.kind == "gamma":
            return f"Gamma{self.gamma_power:g}"
        return self.kind.capitalize()

    def describe(self):
        if self.kind == "gamma":
            return f"transform=gamma power={self.gamma_power:g}"
        if self.kind == "log":
            return f"transform=log epsilon={self.log_epsilon:g}"
        return "transform=exp"


def simulate_domain(x, t):
    """Apply a monotone intensity transform, then min-max normalize again."""
    x = as_image(x)
    if x.min() < 0.0 or x.max() > 1.0:
        raise InvalidInputError("simulate_domain expects an image in [0, 1]")
    if t.kind == "exp":
        y = np.exp(x)
    elif t.kind == "log":
        y = np.log(x + t.log_epsilon)
    else:
        y = x ** t.gamma_power
    return minmax_normalize(y)


@dataclass(frozen=True)
class ReferenceStats:
    """Pooled target-domain statistics used by HM and SSIMH."""

    histogram: np.ndarray
    mean_image: np.ndarray
    low_freq_reference: np.ndarray

    @classmethod
    def from_images(cls, images):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        hist = np.zeros(N_BINS, dtype=np.int64)
        for img in images:
            hist += np.bincount(bin_index(img).ravel(), minlength=N_BINS)
        mean = images.mean(axis=0)
        return cls(hist, mean, dft2(mean))


def bin_index(img):
    return np.minimum((np.asarray(img) * N_BINS).astype(np.int64), N_BINS - 1).clip(0)


def _midrank_quantiles(x):
    """Empirical CDF at each pixel using mid-ranks, so ties share one value."""
    values, inverse, counts = np.unique(x.ravel(), return_inverse=True, return_counts=True)
    below = np.cumsum(counts) - counts
    q = (below + 0.5 * counts) / x.size
    return q[inverse].reshape(x.shape)


def reference_quantile(hist, q):
    """Inverse of the piecewise-linear CDF of a 256-bin histogram over [0, 1]."""
    total = hist.sum()
    cdf = np.concatenate([[0.0], np.cumsum(hist) / total])
    edges = np.linspace(0.0, 1.0, N_BINS + 1)
    q = np.asarray(q, dtype=np.float64)
    # first edge whose cdf reaches q; empty bins are skipped
    k = np.clip(np.searchsorted(cdf, q, side="left"), 1, N_BINS)
    lo, hi = cdf[k - 1], cdf[k]
    frac = np.where(hi > lo, (q - lo) / np.where(hi > lo, hi - lo, 1.0), 0.0)
    return edges[k - 1] + np.clip(frac, 0.0, 1.0) * (edges[k] - edges[k - 1])


def histogram_match(x, ref):
    """Monotone intensity remapping so ``x`` follows the reference histogram."""
    x = as_image(x)
    if x.min() < 0.0 or x.max() > 1.0:
        raise InvalidInputError("histogram_match expects an image in [0, 1]")
    if ref.histogram.sum() <= 0:
        raise InvalidInputError("reference histogram is empty")
    return np.clip(reference_quantile(ref.histogram, _midrank_quantiles(x)), 0.0, 1.0)


def replace_low_frequencies(spectrum, reference, cutoff_radius):
    """Copy ``reference`` into ``spectrum`` wherever the radial index is below the cutoff."""
    if spectrum.shape != reference.shape:
        raise DimensionError(f"spectrum {spectrum.shape} vs reference {reference.shape}")
    inside = radial_frequency(spectrum.shape) < cutoff_radius
    out = spectrum.copy()
    out[inside] = reference[inside]
    return out, inside


def low_freq_replace(x, ref, cutoff_radius=4.0):
    """SSIMH-style baseline: swap the low-frequency band for the target mean's.

    A plain radial low-pass replacement; the coefficient set is every DFT bin
    whose signed-frequency radius is below ``cutoff_radius``.
    """
    x = as_image(x)
    if x.shape != ref.mean_image.shape:
        raise DimensionError(f"image {x.shape} vs reference {ref.mean_image.shape}")
    if not cutoff_radius > 0:
        raise ConfigError("cutoff_radius must be positive")
    spec, _ = replace_low_frequencies(dft2(x), ref.low_freq_reference, cutoff_radius)
    return np.clip(idft2(spec), 0.0, 1.0)
