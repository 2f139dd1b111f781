"""Blind harmonization by alternating image-domain and latent-domain updates.

Each iteration decodes the current latent, takes one gradient step on the
distance to the source image (ascent on NCC, descent on masked edge
sparsity), re-encodes and shrinks the latent toward the Gaussian center.
The flow is only ever evaluated, never differentiated.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import BlindHarmonyError, ConfigError, DegenerateInputError, DimensionError, NumericalError
from .numeric import as_image, edge_mask, masked_tv, masked_tv_subgradient, ncc, ncc_gradient

log = logging.getLogger(__name__)

INIT_MODES = ("mean_image", "source_image", "custom")
OUTPUT_POLICIES = ("clamp", "minmax")


@dataclass(frozen=True)
class HarmonizeConfig:
    alpha: float = 0.001
    beta1: float = 1000.0
    beta2: float = 0.001
    iterations: int = 10
    mask_quantile: float = 0.8
    init_mode: str = "mean_image"
    init_image: np.ndarray = field(default=None, compare=False, repr=False)
    # how the last iterate is mapped into [0, 1]
    output_policy: str = "clamp"

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ConfigError("beta1 and beta2 must be non-negative")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ConfigError(f"iterations must be a positive integer, got {self.iterations}")
        if not 0.0 < self.mask_quantile < 1.0:
            raise ConfigError(f"mask_quantile must lie in (0, 1), got {self.mask_quantile}")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.init_mode == "custom" and self.init_image is None:
            raise ConfigError("init_mode 'custom' needs init_image")
        if self.output_policy not in OUTPUT_POLICIES:
            raise ConfigError(f"output_policy must be one of {OUTPUT_POLICIES}, got {self.output_policy!r}")


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    ncc_to_source: float
    masked_tv: float
    latent_norm: float
    distance: float


@dataclass
class HarmonizeTrace:
    records: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    initial_latent_norm: float = float("nan")

    def __len__(self):
        return len(self.records)

    def to_tsv(self):
        lines = ["iteration\tncc_to_source\tmasked_tv\tlatent_norm\tdistance_D"]
        for r in self.records:
            lines.append(
                f"{r.iteration}\t{r.ncc_to_source:.10g}\t{r.masked_tv:.10g}\t{r.latent_norm:.10g}\t{r.distance:.10g}"
            )
        return "\n".join(lines) + "\n"


def distance(x, x_s, mask, beta1, beta2):
    """``beta1 * (1 - NCC(x, x_s)) + beta2 * masked_tv(x)``."""
    x_s = as_image(x_s, "x_s")
    if x_s.max() == x_s.min():
        raise DegenerateInputError("source image is constant")
    total = 0.0
    if beta1 != 0:
        total += beta1 * (1.0 - ncc(x, x_s))
    if beta2 != 0:
        total += beta2 * masked_tv(x, mask)
    return total


def _initial_image(cfg, x_s, dataset_mean):
    if cfg.init_mode == "mean_image":
        if dataset_mean is None:
            raise ConfigError("init_mode 'mean_image' needs the dataset mean image")
        return as_image(dataset_mean, "dataset_mean")
    if cfg.init_mode == "source_image":
        return x_s.copy()
    return as_image(cfg.init_image, "init_image")


def _finish(x, policy):
    if policy == "clamp":
        return np.clip(x, 0.0, 1.0)
    lo, hi = x.min(), x.max()
    return np.zeros_like(x) if hi == lo else (x - lo) / (hi - lo)


def harmonize(model, x_s, dataset_mean, cfg=None):
    """Harmonize one source slice toward the domain ``model`` was trained on.

    Returns ``(image, trace)``.  ``image`` is the last image-domain iterate
    mapped into [0, 1] by ``cfg.output_policy``; the trace keeps the raw
    iterates.
    """
    cfg = cfg or HarmonizeConfig()
    if not model.actnorm_initialized:
        raise BlindHarmonyError("model is not initialized")
    x_s = as_image(x_s, "x_s")
    shape = (model.arch.input_height, model.arch.input_width)
    if x_s.shape != shape:
        raise DimensionError(f"source is {x_s.shape}, model expects {shape}")
    if x_s.max() == x_s.min():
        raise DegenerateInputError("source image is constant")
    x0 = _initial_image(cfg, x_s, dataset_mean)
    if x0.shape != shape:
        raise DimensionError(f"initial image is {x0.shape}, model expects {shape}")

    mask = edge_mask(x_s, cfg.mask_quantile)
    z = model.forward(x0).value
    trace = HarmonizeTrace(initial_latent_norm=float(np.linalg.norm(z)))
    x_next = x0
    for n in range(cfg.iterations):
        x = model.inverse(z).value
        step = np.zeros_like(x)
        if cfg.beta1 != 0:
            step += cfg.beta1 * ncc_gradient(x, x_s)
        if cfg.beta2 != 0:
            step -= cfg.beta2 * masked_tv_subgradient(x, mask)
        x_next = x + step
        if not np.all(np.isfinite(x_next)):
            raise NumericalError(f"non-finite image at iteration {n}", step=n, where="image update")
        z = (1.0 - cfg.alpha) * model.forward(x_next).value
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite latent at iteration {n}", step=n, where="latent update")
        trace.iterates.append(x_next)
        trace.records.append(TraceRecord(
            iteration=n,
            ncc_to_source=ncc(x_next, x_s),
            masked_tv=masked_tv(x_next, mask),
            latent_norm=float(np.linalg.norm(z)),
            distance=distance(x_next, x_s, mask, cfg.beta1, cfg.beta2),
        ))
    return _finish(x_next, cfg.output_policy), trace


@dataclass
class BatchItem:
    image: np.ndarray = None
    trace: HarmonizeTrace = None
    error: Exception = None

    @property
    def ok(self):
        return self.error is None


def harmonize_batch(model, images, dataset_mean, cfg=None, workers=1):
    """Harmonize each image; failures are captured per item instead of raised."""

    def one(img):
        try:
            out, trace = harmonize(model, img, dataset_mean, cfg)
            return BatchItem(out, trace)
        except (BlindHarmonyError, ValueError, ArithmeticError) as exc:
            log.warning("harmonization failed: %s", exc)
            return BatchItem(error=exc)

    images = list(images)
    if workers <= 1 or len(images) <= 1:
        return [one(img) for img in images]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, images))
