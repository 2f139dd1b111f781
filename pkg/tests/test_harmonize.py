import numpy as np
import pytest

from blindharmony.errors import BlindHarmonyError, ConfigError, DegenerateInputError, DimensionError
from blindharmony.flow import FlowArchitecture, FlowModel
from blindharmony.harmonize import HarmonizeConfig, distance, harmonize, harmonize_batch
from blindharmony.numeric import edge_mask, masked_tv, ncc
from blindharmony.phantoms import make_corpus

ARCH = FlowArchitecture(16, 16, levels=2, steps_per_level=2, coupling_hidden_width=8, coupling_hidden_layers=1)


@pytest.fixture(scope="module")
def model():
    return FlowModel.random(ARCH, seed=0, scale=0.1)


@pytest.fixture(scope="module")
def images():
    return make_corpus(6, seed=3, size=16)


def test_config_validation():
    with pytest.raises(ConfigError):
        HarmonizeConfig(alpha=1.0)
    with pytest.raises(ConfigError):
        HarmonizeConfig(iterations=0)
    with pytest.raises(ConfigError):
        HarmonizeConfig(beta1=-1.0)
    with pytest.raises(ConfigError):
        HarmonizeConfig(init_mode="custom")
    with pytest.raises(ConfigError):
        HarmonizeConfig(output_policy="wrap")


# -- distance ----------------------------------------------------------------


def test_distance_self_is_tv_term(images):
    x = images[0]
    mask = edge_mask(x, 0.8)
    assert distance(x, x, mask, 1000, 0.001) == pytest.approx(0.001 * masked_tv(x, mask), abs=1e-9)


def test_distance_zero_weights(images):
    mask = edge_mask(images[1], 0.8)
    assert distance(images[0], images[1], mask, 0, 0) == 0.0


def test_distance_recomposes_kernels():
    r = np.random.default_rng(0)
    x, xs = r.random((8, 8)), r.random((8, 8))
    mask = edge_mask(xs, 0.8)
    expected = 1000 * (1 - ncc(x, xs)) + 0.001 * masked_tv(x, mask)
    assert abs(distance(x, xs, mask, 1000, 0.001) - expected) <= 1e-10


def test_distance_constant_source():
    with pytest.raises(DegenerateInputError):
        distance(np.eye(4), np.ones((4, 4)), edge_mask(np.eye(4)), 1, 1)


# -- harmonize -----------------------------------------------------------------


def test_inert_updates_return_initial_image(model, images):
    cfg = HarmonizeConfig(alpha=0, beta1=0, beta2=0, iterations=4)
    mean = images.mean(axis=0)
    _, trace = harmonize(model, images[0], mean, cfg)
    assert np.max(np.abs(trace.iterates[-1] - mean)) <= 1e-6


def test_identity_flow_ncc_is_non_decreasing(images):
    ident = FlowModel.identity(ARCH)
    cfg = HarmonizeConfig(alpha=0, beta2=0, init_mode="source_image", iterations=6)
    _, trace = harmonize(ident, images[2], None, cfg)
    values = [ncc(images[2], images[2])] + [r.ncc_to_source for r in trace.records]
    assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))


def test_identity_flow_ncc_ascends_from_mean(images):
    ident = FlowModel.identity(ARCH)
    cfg = HarmonizeConfig(alpha=0, beta1=5.0, beta2=0, iterations=8)
    mean = images.mean(axis=0)
    _, trace = harmonize(ident, images[2], mean, cfg)
    values = [ncc(mean, images[2])] + [r.ncc_to_source for r in trace.records]
    assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))
    assert values[-1] > values[0]


def test_latent_shrinkage_law(model, images):
    cfg = HarmonizeConfig(alpha=0.1, beta1=0, beta2=0, iterations=5)
    _, trace = harmonize(model, images[0], images.mean(axis=0), cfg)
    norms = [trace.initial_latent_norm] + [r.latent_norm for r in trace.records]
    for a, b in zip(norms, norms[1:]):
        assert abs(b - 0.9 * a) <= 1e-10 * max(1.0, a)
    assert norms[-1] == pytest.approx(0.9 ** 5 * norms[0], rel=1e-9)


def test_trace_completeness(model, images):
    cfg = HarmonizeConfig(beta1=20.0, iterations=7)
    xs = images[3]
    _, trace = harmonize(model, xs, images.mean(axis=0), cfg)
    assert len(trace) == 7 and len(trace.iterates) == 7
    mask = edge_mask(xs, cfg.mask_quantile)
    for rec, x in zip(trace.records, trace.iterates):
        assert np.isfinite([rec.ncc_to_source, rec.masked_tv, rec.latent_norm, rec.distance]).all()
        assert abs(rec.distance - distance(x, xs, mask, cfg.beta1, cfg.beta2)) <= 1e-8
    lines = trace.to_tsv().splitlines()
    assert lines[0].split("\t") == ["iteration", "ncc_to_source", "masked_tv", "latent_norm", "distance_D"]
    assert len(lines) == 8


def test_deterministic(model, images):
    a, ta = harmonize(model, images[4], images.mean(axis=0))
    b, tb = harmonize(model, images[4], images.mean(axis=0))
    np.testing.assert_array_equal(a, b)
    assert ta.records == tb.records


def test_mask_depends_on_source_only(images, monkeypatch):
    import sys

    hz = sys.modules["blindharmony.harmonize"]
    seen = []
    real = hz.edge_mask

    def spy(img, q):
        out = real(img, q)
        seen.append(out.values.copy())
        return out

    monkeypatch.setattr(hz, "edge_mask", spy)
    ident = FlowModel.identity(ARCH)
    for init in (images.mean(axis=0), images[5]):
        cfg = HarmonizeConfig(init_mode="custom", init_image=init, iterations=2)
        harmonize(ident, images[0], None, cfg)
    assert len(seen) == 2
    np.testing.assert_array_equal(seen[0], seen[1])


@pytest.mark.parametrize("policy", ["clamp", "minmax"])
def test_output_in_unit_range(model, images, policy):
    out, _ = harmonize(model, images[1], images.mean(axis=0), HarmonizeConfig(output_policy=policy))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_returns_last_iterate_after_policy(model, images):
    out, trace = harmonize(model, images[1], images.mean(axis=0), HarmonizeConfig(beta1=10.0))
    np.testing.assert_array_equal(out, np.clip(trace.iterates[-1], 0, 1))


def test_errors(model, images):
    with pytest.raises(BlindHarmonyError):
        harmonize(FlowModel.create(ARCH), images[0], images.mean(axis=0))
    with pytest.raises(DegenerateInputError):
        harmonize(model, np.full((16, 16), 0.5), images.mean(axis=0))
    with pytest.raises(DimensionError):
        harmonize(model, np.random.default_rng(0).random((8, 8)), images.mean(axis=0))
    with pytest.raises(ConfigError):
        harmonize(model, images[0], None)


# -- batch ---------------------------------------------------------------------


def test_batch_empty(model):
    assert harmonize_batch(model, [], None) == []


def test_batch_of_one_matches_single(model, images):
    mean = images.mean(axis=0)
    (item,) = harmonize_batch(model, [images[0]], mean)
    out, trace = harmonize(model, images[0], mean)
    assert item.ok
    np.testing.assert_array_equal(item.image, out)
    assert item.trace.records == trace.records


@pytest.mark.parametrize("workers", [1, 3])
def test_batch_isolates_failures(model, images, workers):
    mean = images.mean(axis=0)
    batch = [images[0], np.full((16, 16), 0.2), images[1]]
    items = harmonize_batch(model, batch, mean, workers=workers)
    assert [it.ok for it in items] == [True, False, True]
    assert isinstance(items[1].error, DegenerateInputError)
    np.testing.assert_array_equal(items[2].image, harmonize(model, images[1], mean)[0])
