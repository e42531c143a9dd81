import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmgraph.embeddings import (
    EpisodeError,
    SynthConfig,
    extract_regions,
    frame_embedding,
    nearest_text_prototype_accuracy,
    object_embedding,
    region_weights,
    synth_dataset,
    synth_prototypes,
)


def naive_mean(z):
    out = [0.0] * len(z[0])
    for row in z:
        for k, x in enumerate(row):
            out[k] += x
    return np.array([x / len(z) for x in out])


def test_frame_embedding_small_cases():
    assert frame_embedding(np.array([[1.0, 2.0, 3.0]])).tolist() == [1.0, 2.0, 3.0]
    assert frame_embedding(np.array([[0.0, 0.0], [2.0, 2.0]])).tolist() == [1.0, 1.0]


def test_frame_embedding_matches_naive_sum():
    z = np.random.default_rng(3).normal(size=(5, 4))
    np.testing.assert_allclose(frame_embedding(z), naive_mean(z.tolist()), atol=1e-12, rtol=0)


def test_frame_embedding_needs_a_patch():
    with pytest.raises(EpisodeError):
        frame_embedding(np.zeros((0, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 6), st.integers(0, 2**31))
def test_frame_embedding_permutation_invariant(n, d, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, d))
    np.testing.assert_allclose(frame_embedding(z), frame_embedding(z[rng.permutation(n)]), atol=1e-12)


def test_object_embedding_cases():
    z = np.array([[1.0, 0.0], [0.0, 4.0], [8.0, 8.0]])
    np.testing.assert_array_equal(object_embedding(z, [0.1, 0.2, 0.3], [2]), z[2])
    np.testing.assert_allclose(object_embedding(z, [2.0, 2.0, 0.0], [0, 1]), [0.5, 2.0])
    np.testing.assert_allclose(object_embedding(z, [3.0, 1.0, 0.0], [0, 1]), 0.75 * z[0] + 0.25 * z[1])


def test_object_embedding_degenerate_region():
    with pytest.raises(EpisodeError):
        object_embedding(np.ones((3, 2)), [0.0, 0.0, 1.0], [0, 1])
    with pytest.raises(EpisodeError):
        object_embedding(np.ones((3, 2)), [1.0, 1.0, 1.0], [])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=10))
def test_region_weights_normalised(att):
    if sum(att) <= 0:
        return
    w = region_weights(att, range(len(att)))
    assert (w >= 0).all()
    assert abs(w.sum() - 1.0) <= 1e-12


def test_extract_regions_rules():
    assert extract_regions([1.0, 1.0, 1.0, 1.0], 0.5) == []
    assert extract_regions([0, 0, 9, 9, 0], 0.5) == [(2, 3)]
    assert extract_regions([9, 0, 0, 0, 9], 0.5) == [(0,), (4,)]
    with pytest.raises(ValueError):
        extract_regions([1.0, 2.0], 1.0)


def small_cfg(**kw):
    base = dict(num_classes=4, episodes_per_class=3, frames=3, patches=8, objects=2, d_v=6, d_t=5)
    base.update(kw)
    return SynthConfig(**base)


def test_synth_is_deterministic():
    a = synth_dataset(small_cfg(seed=11))
    b = synth_dataset(small_cfg(seed=11))
    for x, y in zip(a, b):
        assert x.patch_embeddings.tobytes() == y.patch_embeddings.tobytes()
        assert x.attention.tobytes() == y.attention.tobytes()
        assert x.text_embedding.tobytes() == y.text_embedding.tobytes()
        assert x.regions == y.regions and x.class_id == y.class_id
    c = synth_dataset(small_cfg(seed=12))
    assert a[0].patch_embeddings.tobytes() != c[0].patch_embeddings.tobytes()


def test_synth_episodes_are_valid_and_float32_exact():
    for ep in synth_dataset(small_cfg()):
        ep.validate()
        assert np.array_equal(ep.patch_embeddings.astype(np.float32).astype(np.float64), ep.patch_embeddings)


def test_noise_free_text_is_the_prototype():
    eps = synth_dataset(small_cfg(noise_std=0.0))
    same = [e for e in eps if e.class_id == 2]
    np.testing.assert_array_equal(same[0].text_embedding, same[1].text_embedding)


def test_time_reversed_partner_has_same_frames():
    eps = synth_dataset(small_cfg(noise_std=0.0, frames=4))
    a = next(e for e in eps if e.class_id == 0)
    b = next(e for e in eps if e.class_id == 1)
    fa = [sorted(map(tuple, np.round([o for t, _, o in a.object_embeddings() if t == k], 6))) for k in range(4)]
    fb = [sorted(map(tuple, np.round([o for t, _, o in b.object_embeddings() if t == k], 6))) for k in range(4)]
    assert fa == fb[::-1]


def test_nearest_prototype_oracle():
    cfg = SynthConfig(num_classes=4, episodes_per_class=50, noise_std=0.1)
    assert nearest_text_prototype_accuracy(synth_dataset(cfg), synth_prototypes(cfg).text) >= 0.99
    cfg0 = SynthConfig(num_classes=4, episodes_per_class=10, noise_std=0.0)
    assert nearest_text_prototype_accuracy(synth_dataset(cfg0), synth_prototypes(cfg0).text) == 1.0


def test_oracle_error_grows_with_noise():
    errors = []
    for noise in (0.0, 0.1, 0.5):
        cfg = SynthConfig(num_classes=4, episodes_per_class=50, noise_std=noise, seed=7)
        errors.append(1.0 - nearest_text_prototype_accuracy(synth_dataset(cfg), synth_prototypes(cfg).text))
    assert errors == sorted(errors)
    assert errors[-1] > 0


@pytest.mark.parametrize("kw", [dict(num_classes=0), dict(d_v=1), dict(noise_std=-0.1), dict(frames=0)])
def test_synth_config_validation(kw):
    with pytest.raises(ValueError):
        small_cfg(**kw)
