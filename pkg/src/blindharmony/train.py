"""Maximum-likelihood training for :class:`~blindharmony.flow.FlowModel`."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, InvalidInputError, NumericalError
from .flow import FlowModel, actnorm_initialize

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
CLIP_NORM = 50.0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    total_steps: int = 2000
    batch_size: int = 32
    dequant_noise_scale: float = 1.0 / 256
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if int(self.total_steps) != self.total_steps or self.total_steps < 1:
            raise ConfigError(f"total_steps must be a positive integer, got {self.total_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.dequant_noise_scale < 0:
            raise ConfigError("dequant_noise_scale must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be positive")


@dataclass
class TargetDataset:
    """Min-max normalized target-domain slices plus their pixelwise mean."""

    images: np.ndarray
    mean_image: np.ndarray = None
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 3 or self.images.shape[0] == 0:
            raise InvalidInputError("dataset needs a non-empty (n, H, W) image stack")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise InvalidInputError("dataset images must lie in [0, 1]")
        if self.mean_image is None:
            self.mean_image = self.images.mean(axis=0)

    def __len__(self):
        return self.images.shape[0]

    @property
    def shape(self):
        return self.images.shape[1:]


@dataclass
class TrainState:
    step: int
    model: FlowModel
    first_moment: np.ndarray
    second_moment: np.ndarray
    running_nll_bpd: float
    rng: np.random.Generator


def cosine_lr(lr0, step, total_steps):
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def adam_update(params, grad, m, v, t, lr, betas=ADAM_BETAS, eps=ADAM_EPS):
    """One bias-corrected Adam step at 1-based step ``t``; updates ``m`` and ``v`` in place."""
    b1, b2 = betas
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_by_global_norm(grad, max_norm=CLIP_NORM):
    norm = float(np.sqrt(np.sum(grad * grad)))
    if norm > max_norm:
        return grad * (max_norm / norm), norm
    return grad, norm


def nll_bits_per_dim(model, images):
    """Mean of ``-log p(x) / (D log 2)`` over ``images``."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if images.shape[0] == 0:
        raise InvalidInputError("nll_bits_per_dim needs at least one image")
    lp = np.atleast_1d(model.log_prob(images))
    return float(np.mean(-lp / (model.arch.dim * math.log(2.0))))


def train(dataset, arch, cfg, on_step=None, on_checkpoint=None, init_seed=None):
    """Fit a flow to ``dataset`` by Adam on the mean negative log-likelihood.

    ``on_step(state, nll_bpd, lr)`` is called after every update and
    ``on_checkpoint(state)`` every ``cfg.checkpoint_every`` steps.  Both are
    optional.  Raises :class:`NumericalError` naming the step and the first
    layer that went non-finite.
    """
    if dataset.shape != (arch.input_height, arch.input_width):
        raise DimensionError(
            f"dataset images are {dataset.shape}, architecture expects "
            f"{(arch.input_height, arch.input_width)}"
        )
    rng = np.random.default_rng(cfg.seed)
    model = FlowModel.create(arch, seed=cfg.seed if init_seed is None else init_seed)
    n = len(dataset)
    bs = min(cfg.batch_size, n)
    order = rng.permutation(n)
    cursor = 0

    def next_batch():
        nonlocal order, cursor
        if cursor + bs > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        batch = dataset.images[idx]
        if cfg.dequant_noise_scale > 0:
            batch = batch + rng.uniform(0.0, cfg.dequant_noise_scale, size=batch.shape)
        return batch

    first = next_batch()
    model = actnorm_initialize(model, first)
    state = TrainState(0, model, np.zeros_like(model.params), np.zeros_like(model.params), float("nan"), rng)
    dim_bits = arch.dim * math.log(2.0)
    batch = first
    for step in range(1, cfg.total_steps + 1):
        if step > 1:
            batch = next_batch()
        nll, grad = model.nll_and_gradient(batch)
        if not (math.isfinite(nll) and np.all(np.isfinite(grad))):
            where = model.locate_nonfinite(batch)
            raise NumericalError(
                f"non-finite loss at step {step} (first bad layer: {where or 'gradient pass'})",
                step=step, where=where,
            )
        grad, _ = clip_by_global_norm(grad)
        lr = cosine_lr(cfg.learning_rate, step - 1, cfg.total_steps)
        model.params = adam_update(model.params, grad, state.first_moment, state.second_moment, step, lr)
        state.step = step
        state.running_nll_bpd = nll / dim_bits
        if on_step is not None:
            on_step(state, state.running_nll_bpd, lr)
        if on_checkpoint is not None and step % cfg.checkpoint_every == 0:
            on_checkpoint(state)
    return model


def format_log_line(step, nll_bpd, lr):
    return f"step={step} nll_bpd={nll_bpd:.6f} lr={lr:.8g}"
