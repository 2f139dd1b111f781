import math

import numpy as np
import pytest
from scipy import ndimage

from blindharmony.errors import ConfigError, DimensionError, InvalidInputError, NumericalError
from blindharmony.flow import FlowArchitecture, FlowModel, actnorm_initialize
from blindharmony.train import (
    TargetDataset, TrainConfig, adam_update, clip_by_global_norm, cosine_lr, format_log_line,
    nll_bits_per_dim, train,
)

TOY_ARCH = FlowArchitecture(8, 8, levels=2, steps_per_level=2, coupling_hidden_width=8, coupling_hidden_layers=1)


def toy_blobs(n, seed=0):
    r = np.random.default_rng(seed)
    out = np.empty((n, 8, 8))
    for i in range(n):
        img = ndimage.gaussian_filter(r.random((8, 8)), 1.2, mode="wrap")
        out[i] = (img - img.min()) / (img.max() - img.min())
    return out


@pytest.fixture(scope="module")
def toy():
    return TargetDataset(toy_blobs(64))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(total_steps=0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_dataset_mean_is_exact():
    imgs = toy_blobs(5)
    ds = TargetDataset(imgs)
    np.testing.assert_array_equal(ds.mean_image, imgs.mean(axis=0))
    with pytest.raises(InvalidInputError):
        TargetDataset(imgs * 2.0)
    with pytest.raises(InvalidInputError):
        TargetDataset(np.zeros((0, 8, 8)))


def test_cosine_endpoints():
    assert cosine_lr(5e-4, 0, 100) == pytest.approx(5e-4, abs=1e-12)
    assert abs(cosine_lr(5e-4, 100, 100)) <= 1e-12
    assert cosine_lr(1.0, 50, 100) == pytest.approx(0.5, abs=1e-12)


def test_adam_first_step_closed_form():
    params = np.array([0.3, -1.2, 2.0])
    grad = np.ones(3)
    m, v = np.zeros(3), np.zeros(3)
    lr = 5e-4
    new = adam_update(params, grad, m, v, 1, lr)
    # bias-corrected moments are exactly g and g^2 at t=1
    expected = params - lr * 1.0 / (1.0 + 1e-8)
    assert np.max(np.abs(new - expected)) <= 1e-12
    np.testing.assert_allclose(m, 0.1)
    np.testing.assert_allclose(v, 0.001)


def test_adam_second_step_closed_form():
    g1, g2 = 0.5, -2.0
    m, v = np.zeros(1), np.zeros(1)
    p = adam_update(np.zeros(1), np.array([g1]), m, v, 1, 0.1)
    p = adam_update(p, np.array([g2]), m, v, 2, 0.1)
    m_hat = (0.9 * 0.1 * g1 + 0.1 * g2) / (1 - 0.9 ** 2)
    v_hat = (0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2) / (1 - 0.999 ** 2)
    expected = -0.1 * g1 / (abs(g1) + 1e-8) - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert abs(p[0] - expected) <= 1e-12


def test_clip_by_global_norm():
    g = np.array([30.0, 40.0, 0.0])
    same, n = clip_by_global_norm(g, 50.0)
    assert n == 50.0 and same is g
    clipped, n = clip_by_global_norm(2 * g, 50.0)
    assert n == 100.0
    assert np.linalg.norm(clipped) == pytest.approx(50.0)


def test_bpd_identity_zero_images():
    arch = FlowArchitecture(2, 2, levels=1, steps_per_level=1, coupling_hidden_width=4, coupling_hidden_layers=1)
    model = FlowModel.identity(arch)
    expected = (4 / 2 * math.log(2 * math.pi)) / (4 * math.log(2))
    assert nll_bits_per_dim(model, np.zeros((3, 2, 2))) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(1.3257, abs=1e-4)


def test_bpd_is_mean_of_singles_and_monotone():
    model = FlowModel.random(TOY_ARCH, seed=2)
    imgs = toy_blobs(4, seed=3)
    singles = [nll_bits_per_dim(model, im) for im in imgs]
    assert abs(nll_bits_per_dim(model, imgs) - np.mean(singles)) <= 1e-12
    worst = imgs[0] * 40.0
    before = nll_bits_per_dim(model, imgs)
    assert nll_bits_per_dim(model, np.concatenate([imgs, worst[None]])) > before


def test_bpd_empty():
    with pytest.raises(InvalidInputError):
        nll_bits_per_dim(FlowModel.identity(TOY_ARCH), np.zeros((0, 8, 8)))


def test_dimension_mismatch(toy):
    arch = FlowArchitecture(16, 16, levels=2, steps_per_level=1, coupling_hidden_width=4, coupling_hidden_layers=1)
    with pytest.raises(DimensionError):
        train(toy, arch, TrainConfig(total_steps=1))


def test_single_step_does_one_update(toy):
    cfg = TrainConfig(total_steps=1, batch_size=8, seed=4)
    steps = []
    model = train(toy, TOY_ARCH, cfg, on_step=lambda s, nll, lr: steps.append((s.step, lr)))
    assert steps == [(1, pytest.approx(5e-4))]
    # replay: actnorm init on the same first batch then one Adam step
    rng = np.random.default_rng(4)
    idx = rng.permutation(len(toy))[:8]
    batch = toy.images[idx] + rng.uniform(0, 1 / 256, size=(8, 8, 8))
    ref = actnorm_initialize(FlowModel.create(TOY_ARCH, seed=4), batch)
    _, grad = ref.nll_and_gradient(batch)
    grad, _ = clip_by_global_norm(grad)
    expected = adam_update(ref.params, grad, np.zeros_like(grad), np.zeros_like(grad), 1, 5e-4)
    np.testing.assert_array_equal(model.params, expected)


def test_deterministic(toy):
    cfg = TrainConfig(total_steps=5, batch_size=8, seed=9)
    a = train(toy, TOY_ARCH, cfg)
    b = train(toy, TOY_ARCH, cfg)
    np.testing.assert_array_equal(a.params, b.params)


def test_nan_diagnostic_names_step_and_layer(toy, monkeypatch):
    calls = {"n": 0}
    orig = FlowModel.nll_and_gradient

    def poisoned(self, batch, theta=None):
        calls["n"] += 1
        if calls["n"] == 3:
            self.params[self.slots[0].offset] = np.nan
        return orig(self, batch, theta)

    monkeypatch.setattr(FlowModel, "nll_and_gradient", poisoned)
    with pytest.raises(NumericalError) as info:
        train(toy, TOY_ARCH, TrainConfig(total_steps=5, batch_size=8))
    assert info.value.step == 3
    assert info.value.where
    assert "step 3" in str(info.value)


def test_format_log_line():
    assert format_log_line(12, -1.25, 5e-4) == "step=12 nll_bpd=-1.250000 lr=0.0005"


@pytest.mark.slow
def test_toy_training_lowers_bpd_by_half_a_bit():
    data = TargetDataset(toy_blobs(200, seed=1))
    cfg = TrainConfig(total_steps=500, batch_size=16, seed=0)
    trace = []
    model = train(data, TOY_ARCH, cfg, on_step=lambda s, nll, lr: trace.append(nll))
    initial = actnorm_initialize(FlowModel.create(TOY_ARCH, seed=0), data.images[:16])
    assert nll_bits_per_dim(model, data.images) <= nll_bits_per_dim(initial, data.images) - 0.5
    k = len(trace) // 10
    assert np.median(trace[-k:]) < np.median(trace[:k])
    assert np.all(np.isfinite(model.params))
