"""Multiscale affine-coupling flow with hand-written reverse-mode gradients.

Tensors are ``(batch, height, width, channels)`` float64 arrays.  The model
owns one flat parameter vector; each layer addresses its own slice of it
through ``ParamSlot`` offsets, so optimizers, checkpoints and finite
difference checks all work on a single ``np.ndarray``.

Each level is ``squeeze -> K x (actnorm, 1x1 mix, affine coupling)``; every
level but the last then factors out half of its channels into the latent.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError, InvalidInputError, NumericalError

LOG_2PI = math.log(2.0 * math.pi)
LOG_SCALE_BOUND = 2.0


@dataclass(frozen=True)
class FlowArchitecture:
    input_height: int = 32
    input_width: int = 32
    levels: int = 3
    steps_per_level: int = 7
    coupling_hidden_width: int = 64
    coupling_hidden_layers: int = 2

    def __post_init__(self):
        for name in ("input_height", "input_width", "levels", "steps_per_level",
                     "coupling_hidden_width", "coupling_hidden_layers"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        k = 2 ** self.levels
        if self.input_height % k or self.input_width % k:
            raise ConfigError(
                f"input {self.input_height}x{self.input_width} not divisible by 2^levels = {k}"
            )

    @property
    def dim(self):
        return self.input_height * self.input_width

    def latent_layout(self):
        """``(level, height, width, channels)`` of each latent block, in order."""
        h, w, c = self.input_height, self.input_width, 1
        blocks = []
        for level in range(self.levels):
            h, w, c = h // 2, w // 2, c * 4
            if level < self.levels - 1:
                blocks.append((level, h, w, c - c // 2))
                c = c // 2
            else:
                blocks.append((level, h, w, c))
        return blocks


@dataclass(frozen=True)
class ParamSlot:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self):
        return int(np.prod(self.shape))

    def get(self, theta):
        return theta[self.offset:self.offset + self.size].reshape(self.shape)


class _Layout:
    def __init__(self):
        self.slots = []
        self.size = 0

    def add(self, name, shape):
        slot = ParamSlot(name, self.size, tuple(shape))
        self.slots.append(slot)
        self.size += slot.size
        return slot


# ---------------------------------------------------------------------------
# 3x3 convolution (same padding) via im2col


_OFFSETS = [(i, j) for i in range(3) for j in range(3)]


def _im2col(x):
    """Columns ordered (tap, channel) so each tap is a contiguous block."""
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, h, w, 9 * c))
    for k, (i, j) in enumerate(_OFFSETS):
        cols[..., k * c:(k + 1) * c] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(b * h * w, 9 * c)


def _col2im(dcols, shape):
    b, h, w, c = shape
    d = dcols.reshape(b, h, w, 9 * c)
    dxp = np.zeros((b, h + 2, w + 2, c))
    for k, (i, j) in enumerate(_OFFSETS):
        dxp[:, i:i + h, j:j + w, :] += d[..., k * c:(k + 1) * c]
    return dxp[:, 1:-1, 1:-1, :]


class Conv3x3:
    def __init__(self, layout, name, cin, cout):
        self.cin, self.cout = cin, cout
        self.weight = layout.add(f"{name}.weight", (cin * 9, cout))
        self.bias = layout.add(f"{name}.bias", (cout,))

    def forward(self, theta, x):
        cols = _im2col(x)
        out = cols @ self.weight.get(theta) + self.bias.get(theta)
        return out.reshape(x.shape[:3] + (self.cout,)), cols

    def backward(self, theta, grad, cols, x_shape, dout):
        d2 = dout.reshape(-1, self.cout)
        self.weight.get(grad)[...] += cols.T @ d2
        self.bias.get(grad)[...] += d2.sum(axis=0)
        return _col2im(d2 @ self.weight.get(theta).T, x_shape)


# ---------------------------------------------------------------------------
# Flow layers.  forward -> (y, logdet per sample, cache); inverse -> (x, logdet of the
# inverse map); backward accumulates parameter gradients into ``grad`` and
# returns the input gradient.  ``dlogdet`` is dLoss/dlogdet per sample.


class ActNorm:
    def __init__(self, layout, name, channels):
        self.name = name
        self.bias = layout.add(f"{name}.bias", (channels,))
        self.log_scale = layout.add(f"{name}.log_scale", (channels,))

    def forward(self, theta, x):
        ls = self.log_scale.get(theta)
        y = (x + self.bias.get(theta)) * np.exp(ls)
        hw = x.shape[1] * x.shape[2]
        return y, np.full(x.shape[0], hw * ls.sum()), y

    def inverse(self, theta, y):
        ls = self.log_scale.get(theta)
        x = y * np.exp(-ls) - self.bias.get(theta)
        hw = y.shape[1] * y.shape[2]
        return x, np.full(y.shape[0], -hw * ls.sum())

    def backward(self, theta, grad, y, dy, dlogdet):
        ls = self.log_scale.get(theta)
        hw = y.shape[1] * y.shape[2]
        scale = np.exp(ls)
        self.bias.get(grad)[...] += (dy * scale).sum(axis=(0, 1, 2))
        self.log_scale.get(grad)[...] += (dy * y).sum(axis=(0, 1, 2)) + hw * dlogdet.sum()
        return dy * scale

    def initialize(self, theta, x):
        mean = x.mean(axis=(0, 1, 2))
        std = x.std(axis=(0, 1, 2))
        if np.any(std <= 1e-12):
            raise DegenerateInputError(f"{self.name}: zero-variance channel in the init batch")
        self.bias.get(theta)[...] = -mean
        self.log_scale.get(theta)[...] = -np.log(std)


class InvConv1x1:
    """Channel mixing ``W = P L (U + diag(exp(log_s)))`` with a fixed reversal ``P``."""

    def __init__(self, layout, name, channels):
        self.name = name
        self.channels = channels
        self.perm = np.eye(channels)[::-1].copy()
        self.lower_idx = np.tril_indices(channels, -1)
        self.upper_idx = np.triu_indices(channels, 1)
        n_off = channels * (channels - 1) // 2
        self.lower = layout.add(f"{name}.lower", (n_off,))
        self.upper = layout.add(f"{name}.upper", (n_off,))
        self.log_s = layout.add(f"{name}.log_s", (channels,))

    def factors(self, theta):
        c = self.channels
        lower = np.eye(c)
        lower[self.lower_idx] = self.lower.get(theta)
        upper = np.diag(np.exp(self.log_s.get(theta)))
        upper[self.upper_idx] = self.upper.get(theta)
        return lower, upper

    def weight(self, theta):
        lower, upper = self.factors(theta)
        return self.perm @ lower @ upper

    def forward(self, theta, x):
        y = x @ self.weight(theta).T
        hw = x.shape[1] * x.shape[2]
        return y, np.full(x.shape[0], hw * self.log_s.get(theta).sum()), x

    def inverse(self, theta, y):
        lower, upper = self.factors(theta)
        # x = U^-1 L^-1 P^T y, applied row-wise
        rhs = (y @ self.perm).reshape(-1, self.channels).T
        tmp = np.linalg.solve(lower, rhs)
        x = np.linalg.solve(upper, tmp).T.reshape(y.shape)
        hw = y.shape[1] * y.shape[2]
        return x, np.full(y.shape[0], -hw * self.log_s.get(theta).sum())

    def backward(self, theta, grad, x, dy, dlogdet):
        lower, upper = self.factors(theta)
        w = self.perm @ lower @ upper
        c = self.channels
        dw = dy.reshape(-1, c).T @ x.reshape(-1, c)
        pl = self.perm @ lower
        dlower = self.perm.T @ dw @ upper.T
        dupper = pl.T @ dw
        hw = x.shape[1] * x.shape[2]
        self.lower.get(grad)[...] += dlower[self.lower_idx]
        self.upper.get(grad)[...] += dupper[self.upper_idx]
        self.log_s.get(grad)[...] += np.diag(dupper) * np.diag(upper) + hw * dlogdet.sum()
        return dy @ w


class AffineCoupling:
    """``y_b = x_b * exp(s(x_a)) + t(x_a)`` with ``s`` squashed into (-2, 2)."""

    def __init__(self, layout, name, channels, hidden, n_hidden):
        self.name = name
        self.ca = channels // 2
        self.cb = channels - self.ca
        widths = [self.ca] + [hidden] * n_hidden + [2 * self.cb]
        self.convs = [
            Conv3x3(layout, f"{name}.conv{i}", widths[i], widths[i + 1])
            for i in range(len(widths) - 1)
        ]

    def _net(self, theta, xa):
        h = xa
        acts = []
        for i, conv in enumerate(self.convs):
            inp = h
            h, cols = conv.forward(theta, inp)
            acts.append((inp.shape, cols))
            if i < len(self.convs) - 1:
                h = np.maximum(h, 0.0)
                acts[-1] = acts[-1] + (h,)
        shift = h[..., :self.cb]
        raw = h[..., self.cb:]
        log_s = LOG_SCALE_BOUND * np.tanh(raw / LOG_SCALE_BOUND)
        return shift, log_s, acts

    def forward(self, theta, x):
        xa, xb = x[..., :self.ca], x[..., self.ca:]
        shift, log_s, acts = self._net(theta, xa)
        yb = xb * np.exp(log_s) + shift
        y = np.concatenate([xa, yb], axis=-1)
        return y, log_s.sum(axis=(1, 2, 3)), (xb, log_s, acts)

    def inverse(self, theta, y):
        ya, yb = y[..., :self.ca], y[..., self.ca:]
        shift, log_s, _ = self._net(theta, ya)
        xb = (yb - shift) * np.exp(-log_s)
        return np.concatenate([ya, xb], axis=-1), -log_s.sum(axis=(1, 2, 3))

    def backward(self, theta, grad, cache, dy, dlogdet):
        xb, log_s, acts = cache
        dya, dyb = dy[..., :self.ca], dy[..., self.ca:]
        scale = np.exp(log_s)
        dlog_s = dyb * xb * scale + dlogdet[:, None, None, None]
        draw = dlog_s * (1.0 - (log_s / LOG_SCALE_BOUND) ** 2)
        dh = np.concatenate([dyb, draw], axis=-1)
        for i in reversed(range(len(self.convs))):
            entry = acts[i]
            if i < len(self.convs) - 1:
                dh = dh * (entry[2] > 0.0)
            dh = self.convs[i].backward(theta, grad, entry[1], entry[0], dh)
        return np.concatenate([dya + dh, dyb * scale], axis=-1)


def squeeze(x):
    b, h, w, c = x.shape
    x = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h // 2, w // 2, 4 * c)


def unsqueeze(x):
    b, h, w, c = x.shape
    x = x.reshape(b, h, w, 2, 2, c // 4).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, 2 * h, 2 * w, c // 4)


# ---------------------------------------------------------------------------


@dataclass
class FlowOutput:
    value: np.ndarray
    log_det: object


@dataclass
class FlowModel:
    """Invertible map image -> latent.

    Build with :meth:`create` (couplings start as the identity, actnorm waits
    for data-dependent initialization) or :meth:`random` (all parameters
    perturbed; handy for tests).
    """

    arch: FlowArchitecture
    params: np.ndarray
    actnorm_initialized: bool = False
    _steps: list = field(default=None, repr=False, compare=False)
    _layout: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        layout = _Layout()
        steps = []
        c = 1
        a = self.arch
        for level in range(a.levels):
            c *= 4
            level_steps = []
            for k in range(a.steps_per_level):
                prefix = f"level{level}.step{k}"
                level_steps.append((
                    ActNorm(layout, f"{prefix}.actnorm", c),
                    InvConv1x1(layout, f"{prefix}.mix", c),
                    AffineCoupling(layout, f"{prefix}.coupling", c,
                                   a.coupling_hidden_width, a.coupling_hidden_layers),
                ))
            steps.append(level_steps)
            if level < a.levels - 1:
                c = c // 2
        self._steps = steps
        self._layout = layout
        if self.params is None:
            self.params = np.zeros(layout.size)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (layout.size,):
            raise DimensionError(
                f"parameter vector has {self.params.size} entries, architecture needs {layout.size}"
            )

    # -- construction -------------------------------------------------------

    @staticmethod
    def parameter_count(arch):
        return FlowModel(arch, None).params.size

    @classmethod
    def create(cls, arch, seed=0):
        model = cls(arch, None)
        rng = np.random.default_rng(seed)
        theta = model.params
        for _, _, coupling in model.layers():
            for conv in coupling.convs[:-1]:
                fan_in = conv.weight.shape[0]
                conv.weight.get(theta)[...] = rng.normal(0.0, math.sqrt(2.0 / fan_in), conv.weight.shape)
            # zero last conv: the coupling starts as the identity
        return model

    @classmethod
    def identity(cls, arch, seed=0):
        model = cls.create(arch, seed)
        model.actnorm_initialized = True
        return model

    @classmethod
    def random(cls, arch, seed=0, scale=0.1):
        """Every parameter perturbed, final coupling layers included."""
        model = cls.create(arch, seed)
        rng = np.random.default_rng(seed + 1)
        noise = scale * rng.standard_normal(model.params.size)
        for slot in model.slots:
            if slot.name.endswith(".weight"):
                # keep activations O(1) through wide convs
                noise[slot.offset:slot.offset + slot.size] *= 3.0 / math.sqrt(slot.shape[0])
        model.params = model.params + noise
        model.actnorm_initialized = True
        return model

    def copy(self, params=None):
        p = self.params.copy() if params is None else np.asarray(params, dtype=np.float64).copy()
        return FlowModel(self.arch, p, self.actnorm_initialized)

    @property
    def slots(self):
        return list(self._layout.slots)

    def layers(self):
        for level in self._steps:
            yield from level

    # -- shape helpers ------------------------------------------------------

    def _as_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (self.arch.input_height, self.arch.input_width):
            raise DimensionError(
                f"expected images of shape {(self.arch.input_height, self.arch.input_width)}, got {x.shape}"
            )
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("input contains non-finite values")
        return x[..., None], single

    def _check_ready(self, strict):
        if strict and not self.actnorm_initialized:
            raise InvalidInputError("actnorm is not initialized; call actnorm_initialize first")

    # -- core passes --------------------------------------------------------

    def _forward(self, x, theta, keep_cache=False, check=False):
        """x: (B, H, W, 1).  Returns (z (B, D), logdet (B,), caches)."""
        h = x
        logdet = np.zeros(x.shape[0])
        latents = []
        caches = []
        n_levels = len(self._steps)
        for level, level_steps in enumerate(self._steps):
            h = squeeze(h)
            level_cache = []
            for step in level_steps:
                step_cache = []
                for layer in step:
                    h, ld, cache = layer.forward(theta, h)
                    logdet = logdet + ld
                    if check and not (np.all(np.isfinite(h)) and np.all(np.isfinite(ld))):
                        raise NumericalError(f"non-finite activation after {layer.name}", where=layer.name)
                    if keep_cache:
                        step_cache.append(cache)
                level_cache.append(step_cache)
            caches.append((level_cache, h.shape))
            if level < n_levels - 1:
                c = h.shape[-1] // 2
                latents.append(h[..., c:].reshape(h.shape[0], -1))
                h = h[..., :c]
            else:
                latents.append(h.reshape(h.shape[0], -1))
        return np.concatenate(latents, axis=1), logdet, caches

    def _inverse(self, z, theta):
        a = self.arch
        blocks = a.latent_layout()
        pieces = []
        offset = 0
        for _, bh, bw, bc in blocks:
            n = bh * bw * bc
            pieces.append(z[:, offset:offset + n].reshape(z.shape[0], bh, bw, bc))
            offset += n
        logdet = np.zeros(z.shape[0])
        h = pieces[-1]
        for level in reversed(range(len(self._steps))):
            if level < len(self._steps) - 1:
                h = np.concatenate([h, pieces[level]], axis=-1)
            for step in reversed(self._steps[level]):
                for layer in reversed(step):
                    h, ld = layer.inverse(theta, h)
                    logdet = logdet + ld
            h = unsqueeze(h)
        return h[..., 0], logdet

    # -- public API ---------------------------------------------------------

    def forward(self, x, strict=True):
        """Map image(s) to latent(s); ``log_det`` is log|det df/dx|."""
        self._check_ready(strict)
        xb, single = self._as_batch(x)
        z, logdet, _ = self._forward(xb, self.params)
        if single:
            return FlowOutput(z[0], float(logdet[0]))
        return FlowOutput(z, logdet)

    def inverse(self, z, strict=True):
        """Map latent(s) back to image(s); ``log_det`` is that of the inverse map."""
        self._check_ready(strict)
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        if single:
            z = z[None]
        if z.ndim != 2 or z.shape[1] != self.arch.dim:
            raise DimensionError(f"latent must have {self.arch.dim} entries, got shape {z.shape}")
        if not np.all(np.isfinite(z)):
            raise InvalidInputError("latent contains non-finite values")
        x, logdet = self._inverse(z, self.params)
        if single:
            return FlowOutput(x[0], float(logdet[0]))
        return FlowOutput(x, logdet)

    def log_prob(self, x, strict=True):
        out = self.forward(x, strict)
        z = np.atleast_2d(out.value)
        lp = -0.5 * self.arch.dim * LOG_2PI - 0.5 * np.sum(z * z, axis=1) + np.atleast_1d(out.log_det)
        return float(lp[0]) if np.ndim(out.value) == 1 else lp

    def sample(self, rng_seed, temperature=1.0, n=None):
        if not temperature > 0:
            raise ConfigError(f"temperature must be positive, got {temperature}")
        rng = np.random.default_rng(rng_seed)
        shape = (self.arch.dim,) if n is None else (n, self.arch.dim)
        z = temperature * rng.standard_normal(shape)
        return self.inverse(z).value

    def nll_and_gradient(self, batch, theta=None):
        """Mean negative log-likelihood (nats) over ``batch`` and its gradient w.r.t. the parameters."""
        theta = self.params if theta is None else theta
        xb, _ = self._as_batch(batch)
        n = xb.shape[0]
        z, logdet, caches = self._forward(xb, theta, keep_cache=True)
        nll = 0.5 * self.arch.dim * LOG_2PI + 0.5 * np.sum(z * z, axis=1) - logdet
        grad = np.zeros_like(theta)
        dz = z / n
        dlogdet = np.full(n, -1.0 / n)
        blocks = self.arch.latent_layout()
        pieces = []
        offset = 0
        for _, bh, bw, bc in blocks:
            size = bh * bw * bc
            pieces.append(dz[:, offset:offset + size].reshape(n, bh, bw, bc))
            offset += size
        dh = pieces[-1]
        for level in reversed(range(len(self._steps))):
            if level < len(self._steps) - 1:
                dh = np.concatenate([dh, pieces[level]], axis=-1)
            level_cache, _ = caches[level]
            for step, step_cache in zip(reversed(self._steps[level]), reversed(level_cache)):
                for layer, cache in zip(reversed(step), reversed(step_cache)):
                    dh = layer.backward(theta, grad, cache, dh, dlogdet)
            dh = unsqueeze(dh)
        return float(nll.mean()), grad

    def parameter_gradient(self, batch):
        """Gradient of the mean NLL over ``batch`` w.r.t. the flat parameter vector."""
        if len(batch) == 0:
            raise InvalidInputError("empty batch")
        return self.nll_and_gradient(batch)[1]

    def mean_nll(self, batch, theta=None):
        theta = self.params if theta is None else theta
        xb, _ = self._as_batch(batch)
        z, logdet, _ = self._forward(xb, theta)
        nll = 0.5 * self.arch.dim * LOG_2PI + 0.5 * np.sum(z * z, axis=1) - logdet
        return float(nll.mean())

    def locate_nonfinite(self, batch):
        """Name of the first layer producing non-finite values on ``batch``, or None."""
        xb, _ = self._as_batch(batch)
        try:
            self._forward(xb, self.params, check=True)
        except NumericalError as exc:
            return exc.where
        return None


def actnorm_initialize(model, batch):
    """Return a copy of ``model`` whose actnorm layers whiten ``batch`` per channel."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[0] < 2:
        raise DegenerateInputError("actnorm initialization needs a batch of at least 2 images")
    if np.all(batch == batch[0]):
        raise DegenerateInputError("actnorm initialization batch has no variation across images")
    out = model.copy()
    xb, _ = out._as_batch(batch)
    theta = out.params
    h = xb
    n_levels = len(out._steps)
    for level, level_steps in enumerate(out._steps):
        h = squeeze(h)
        for actnorm, mix, coupling in level_steps:
            actnorm.initialize(theta, h)
            h, _, _ = actnorm.forward(theta, h)
            h, _, _ = mix.forward(theta, h)
            h, _, _ = coupling.forward(theta, h)
        if level < n_levels - 1:
            h = h[..., :h.shape[-1] // 2]
    out.actnorm_initialized = True
    return out
