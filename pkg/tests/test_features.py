import math
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from diffrep.ddpm import build_linear_schedule
from diffrep.features import (
    FeatureRequest,
    FeatureStore,
    Standardizer,
    adaptive_avg_pool,
    class_balanced_subsample,
    extract_feature,
    extract_features,
    image_seeds,
    precompute_features,
)
from diffrep.unet import build_unet, toy_config


@pytest.fixture(scope="module")
def model():
    m = build_unet(toy_config(), seed=0)
    with torch.no_grad():  # give the zero-initialised layers some signal
        for name, p in m.named_parameters():
            if torch.count_nonzero(p) == 0 and p.dim() > 1:
                p.normal_(0, 0.02)
    return m


@pytest.fixture(scope="module")
def schedule():
    return build_linear_schedule()


@pytest.fixture(scope="module")
def images():
    g = torch.Generator().manual_seed(0)
    return torch.rand(4, 3, 32, 32, generator=g) * 2 - 1


# ---------------------------------------------------------------- requests

def test_request_validation(model, schedule):
    FeatureRequest(150, 7).validate(model.catalog, schedule.T)
    with pytest.raises(ValueError, match="t=0"):
        FeatureRequest(0, 7).validate(model.catalog, schedule.T)
    with pytest.raises(KeyError):
        FeatureRequest(10, 99).validate(model.catalog, schedule.T)
    with pytest.raises(ValueError, match="pool_size"):
        FeatureRequest(10, 7, 0).validate(model.catalog, schedule.T)
    with pytest.raises(ValueError, match="noise_policy"):
        FeatureRequest(10, 7, None, "other").validate(model.catalog, schedule.T)


# ---------------------------------------------------------------- single extraction

def test_mid_feature_shape(model, schedule, images):
    f = extract_feature(model, schedule, images[0], FeatureRequest(150, model.catalog.mid_id), seed=1, image_id=0)
    assert tuple(f.data.shape) == model.catalog.shape(7)
    assert f.source == (150, 7)
    assert f.provenance["image_id"] == 0 and f.provenance["noise_seed"] == 1


def test_fixed_seed_is_deterministic(model, schedule, images):
    r = FeatureRequest(150, 7)
    a = extract_feature(model, schedule, images[0], r, seed=5)
    b = extract_feature(model, schedule, images[0], r, seed=5)
    assert torch.equal(a.data, b.data)


def test_fresh_policy_differs(model, schedule, images):
    r = FeatureRequest(150, 7, noise_policy="fresh")
    a = extract_feature(model, schedule, images[0], r, seed=5).data
    b = extract_feature(model, schedule, images[0], r, seed=5).data
    assert not torch.equal(a, b)
    # differences are of the order of the features themselves, not rounding noise
    assert float((a - b).norm()) > 1e-3 * float(a.norm())


def test_fresh_policy_epoch_streams(model, schedule, images):
    r = FeatureRequest(150, 7, noise_policy="fresh")
    a = extract_feature(model, schedule, images[0], r, seed=5, epoch=3).data
    b = extract_feature(model, schedule, images[0], r, seed=5, epoch=3).data
    c = extract_feature(model, schedule, images[0], r, seed=5, epoch=4).data
    assert torch.equal(a, b) and not torch.equal(a, c)


def test_zero_eps_minimal_t_is_clean_feature(model, schedule, images):
    x0 = images[0]
    f = extract_feature(model, schedule, x0, FeatureRequest(1, 4), seed=0, eps=torch.zeros_like(x0)).data
    abar = schedule.alpha_bar(1)
    _, feats = model.run((math.sqrt(abar) * x0)[None], torch.tensor([1]), taps=[4])
    assert torch.equal(f, feats[4][0])


def test_noise_term_grows_with_t(schedule):
    eps = torch.randn(3, 8, 8, generator=torch.Generator().manual_seed(2))
    norms = [math.sqrt(1 - schedule.alpha_bar(t)) * float(eps.norm()) for t in range(1, 1001)]
    assert all(b > a for a, b in zip(norms, norms[1:]))


def test_single_image_shape_required(model, schedule, images):
    with pytest.raises(ValueError, match="single"):
        extract_feature(model, schedule, images, FeatureRequest(10, 7), seed=0)


# ---------------------------------------------------------------- pooling

def test_pool_constant_map():
    x = torch.full((2, 7, 7), 3.25)
    for out in (1, 2, 3, 5, 7, 9):
        y = adaptive_avg_pool(x, out)
        assert torch.allclose(y, torch.full_like(y, 3.25))


def test_pool_hand_example():
    x = torch.arange(1.0, 17.0).reshape(1, 4, 4)
    assert torch.equal(adaptive_avg_pool(x, 2), torch.tensor([[[3.5, 5.5], [11.5, 13.5]]]))


def test_pool_smaller_map_unchanged():
    x = torch.randn(4, 8, 8)
    assert adaptive_avg_pool(x, 16) is x
    assert adaptive_avg_pool(x, 8) is x


def _window_oracle(x, out):
    H = x.shape[-1]
    res = np.zeros((x.shape[0], out, out))
    for i in range(out):
        r0, r1 = (i * H) // out, -((-(i + 1) * H) // out)
        for j in range(out):
            c0, c1 = (j * H) // out, -((-(j + 1) * H) // out)
            res[:, i, j] = x[:, r0:r1, c0:c1].mean(axis=(1, 2))
    return res


@settings(max_examples=40, deadline=None)
@given(side=st.integers(2, 17), out=st.integers(1, 16), seed=st.integers(0, 1000))
def test_pool_matches_window_rule(side, out, seed):
    x = torch.randn(2, side, side, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    y = adaptive_avg_pool(x, out)
    if out >= side:
        assert y is x
    else:
        np.testing.assert_allclose(y.numpy(), _window_oracle(x.numpy(), out), rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(k=st.integers(1, 6), out=st.integers(1, 6), seed=st.integers(0, 1000))
def test_pool_preserves_mean_when_dividing(k, out, seed):
    x = torch.randn(3, k * out, k * out, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    y = adaptive_avg_pool(x, out)
    assert abs(float(y.mean()) - float(x.mean())) <= 1e-6


def test_pool_rejects_zero():
    with pytest.raises(ValueError):
        adaptive_avg_pool(torch.zeros(1, 4, 4), 0)


# ---------------------------------------------------------------- subsampling

def test_subsample_one_percent():
    labels = np.repeat(np.arange(10), 100)
    idx = class_balanced_subsample(labels, 0.01, seed=0)
    assert len(idx) == 10
    assert Counter(labels[idx].tolist()) == {c: 1 for c in range(10)}


def test_subsample_full():
    labels = np.repeat(np.arange(3), [5, 2, 7])
    assert class_balanced_subsample(labels, 1.0, seed=4) == list(range(14))


def test_subsample_imbalanced_counting_oracle():
    labels = np.array([0] * 37 + [1] * 5 + [2] * 1 + [3] * 12)
    frac = 0.3
    idx = class_balanced_subsample(labels, frac, seed=9)
    got = Counter(labels[idx].tolist())
    for c in range(4):
        size = int((labels == c).sum())
        want = max(1, int(math.floor(frac * size + 0.5)))
        assert got[c] == want
    assert len(set(idx)) == len(idx)


def test_subsample_deterministic():
    labels = np.repeat(np.arange(5), 20)
    assert class_balanced_subsample(labels, 0.25, 3) == class_balanced_subsample(labels, 0.25, 3)
    assert class_balanced_subsample(labels, 0.25, 3) != class_balanced_subsample(labels, 0.25, 4)


def test_subsample_errors():
    with pytest.raises(ValueError, match="empty"):
        class_balanced_subsample([], 0.5, 0)
    with pytest.raises(ValueError):
        class_balanced_subsample([0, 1], 0.0, 0)


# ---------------------------------------------------------------- precompute

def test_precompute_rows_equal_single_calls(model, schedule, images):
    # double precision: batched and single-image convolutions differ only by rounding
    m64 = build_unet(toy_config()).to(torch.float64)
    m64.load_state_dict({k: v.double() for k, v in model.state_dict().items()})
    req = FeatureRequest(150, 7)
    store = precompute_features(m64, schedule, images, torch.arange(4), req, seed=11, flatten=False, chunk=3)
    assert len(store) == 4
    seeds = image_seeds(11, 4)
    for i in range(4):
        single = extract_feature(m64, schedule, images[i], req, seeds[i]).data
        torch.testing.assert_close(store.features[i], single, rtol=1e-10, atol=1e-12)


def test_precompute_vector_store_dimension(model, schedule, images):
    store = precompute_features(model, schedule, images, None, FeatureRequest(150, 4), seed=0)
    c, h, w = model.catalog.shape(4)
    assert tuple(store.features.shape) == (4, c * h * w)
    assert torch.equal(store.labels, torch.full((4,), -1))


def test_precompute_deterministic_and_worker_independent(model, schedule, images, tmp_path):
    req = FeatureRequest(90, 10, pool_size=4)
    a = precompute_features(model, schedule, images, torch.arange(4), req, seed=2, chunk=2)
    b = precompute_features(model, schedule, images, torch.arange(4), req, seed=2, chunk=2, workers=3)
    assert torch.equal(a.features, b.features)
    a.save(tmp_path / "a.bin")
    b.save(tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    back = FeatureStore.load(tmp_path / "a.bin")
    assert torch.equal(back.features, a.features) and back.meta["request"] == req.to_dict()


def test_precompute_empty(model, schedule):
    with pytest.raises(ValueError, match="empty"):
        precompute_features(model, schedule, torch.zeros(0, 3, 32, 32), None, FeatureRequest(1, 1), 0)


def test_store_write_failure_has_file_context(model, schedule, images, tmp_path):
    store = precompute_features(model, schedule, images[:1], None, FeatureRequest(1, 1), 0)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(Exception, match="file"):
        store.save(blocker / "sub" / "store.bin")


def test_batched_extraction_seed_count(model, schedule, images):
    with pytest.raises(ValueError, match="seeds"):
        extract_features(model, schedule, images, FeatureRequest(1, 1), [1, 2])


def test_standardizer_is_optional_and_fits_train():
    x = torch.randn(50, 6, dtype=torch.float64) * 3 + 1
    s = Standardizer.fit(x)
    z = s(x)
    assert torch.allclose(z.mean(0), torch.zeros(6, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(z.std(0), torch.ones(6, dtype=torch.float64), atol=1e-12)
