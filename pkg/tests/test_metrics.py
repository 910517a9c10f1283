import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg
from scipy.stats import ortho_group

from doda.conditioning import StatsDomainEncoder
from doda.errors import NegativeSpectrumError, ShapeError, ZeroNormError
from doda.metrics import FeatureSet, _psd_sqrt, embed_images, feature_similarity, frechet_distance


def test_feature_similarity_bounds():
    a = np.array([[1.0, 0.0], [0.0, 2.0]])
    assert feature_similarity(a, a) == pytest.approx(1.0)
    assert feature_similarity(a, a[::-1]) == pytest.approx(0.0)
    assert feature_similarity(a, -a) == pytest.approx(-1.0)


def test_feature_similarity_pools_tokens(rng):
    tokens = rng.standard_normal((3, 4, 5))
    assert feature_similarity(tokens, tokens.mean(axis=1)) == pytest.approx(1.0)


def test_feature_similarity_errors():
    with pytest.raises(ShapeError):
        feature_similarity(np.ones((2, 3)), np.ones((3, 3)))
    with pytest.raises(ZeroNormError):
        feature_similarity(np.zeros((1, 3)), np.ones((1, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_frechet_identity_and_symmetry(seed):
    r = np.random.default_rng(seed)
    a = FeatureSet(r.standard_normal((40, 4)))
    b = FeatureSet(r.standard_normal((50, 4)) * 2 + 1)
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-8)
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-6)
    assert frechet_distance(a, b) > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_mean_shift_adds_squared_norm(seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((30, 3))
    shift = r.standard_normal(3)
    d = frechet_distance(FeatureSet(x), FeatureSet(x + shift))
    assert d == pytest.approx(shift @ shift, rel=1e-6, abs=1e-8)


def test_one_dimensional_closed_form():
    a = FeatureSet(np.array([0.0, 2.0, 4.0]))
    b = FeatureSet(np.array([1.0, 1.0 + 6.0, 1.0 + 12.0]))
    sa, sb = np.std(a.features, ddof=1), np.std(b.features, ddof=1)
    expected = (a.features.mean() - b.features.mean()) ** 2 + (sa - sb) ** 2
    assert frechet_distance(a, b) == pytest.approx(expected)


def test_frechet_errors_and_warning(caplog):
    with pytest.raises(ShapeError):
        frechet_distance(FeatureSet(np.ones((5, 2))), FeatureSet(np.ones((5, 3))))
    with pytest.raises(ShapeError):
        frechet_distance(FeatureSet(np.ones((1, 2))), FeatureSet(np.ones((5, 2))))
    r = np.random.default_rng(0)
    with caplog.at_level(logging.WARNING, logger="doda.metrics"):
        value = frechet_distance(FeatureSet(r.standard_normal((3, 6)), "few"), FeatureSet(r.standard_normal((3, 6))))
    assert "singular" in caplog.text
    assert np.isfinite(value)


def test_indefinite_matrix_is_rejected():
    with pytest.raises(NegativeSpectrumError):
        _psd_sqrt(np.array([[1.0, 0.0], [0.0, -1.0]]), "test")


def test_embed_images(rng):
    fs = embed_images(rng.random((4, 16, 16, 3)), tag="x")
    assert len(fs) == 4 and fs.dim == 64 and fs.tag == "x"


def test_feature_set_validation():
    with pytest.raises(ShapeError):
        FeatureSet(np.zeros((2, 2, 2)))


class PixelColourEncoder:
    """Every pixel is a token; pooling gives the mean colour."""

    def encode_batch(self, images):
        images = np.asarray(images, dtype=np.float64)
        return images.reshape(len(images), -1, 3)


def test_feature_similarity_with_an_encoder(rng):
    red = np.zeros((2, 8, 8, 3))
    red[..., 0] = 1.0
    green = np.zeros((2, 8, 8, 3))
    green[..., 1] = 1.0
    assert feature_similarity(red, green, encoder=PixelColourEncoder()) == pytest.approx(0.0)
    assert feature_similarity(red, red + green, encoder=PixelColourEncoder()) == pytest.approx(np.sqrt(0.5))
    images, refs = rng.random((3, 16, 16, 3)), rng.random((3, 16, 16, 3))
    encoder = StatsDomainEncoder()
    assert feature_similarity(images, refs, encoder=encoder) == pytest.approx(
        feature_similarity(embed_images(images, encoder), embed_images(refs, encoder)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_frechet_is_rotation_invariant(seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal((40, 5))
    b = r.standard_normal((60, 5)) * 1.5 + 0.5
    q = ortho_group.rvs(5, random_state=seed)
    before = frechet_distance(FeatureSet(a), FeatureSet(b))
    after = frechet_distance(FeatureSet(a @ q), FeatureSet(b @ q))
    assert after == pytest.approx(before, rel=1e-6, abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.1, 5.0), min_size=3, max_size=3),
       st.lists(st.floats(0.1, 5.0), min_size=3, max_size=3),
       st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3))
def test_diagonal_covariance_closed_form(scale_a, scale_b, shift):
    # Hadamard columns are zero-mean and orthogonal, so the sample covariance is exactly diagonal.
    h = linalg.hadamard(8)[:, 1:4].astype(float)
    a = h * np.array(scale_a)
    b = h * np.array(scale_b) + np.array(shift)
    var_a, var_b = np.var(a, axis=0, ddof=1), np.var(b, axis=0, ddof=1)
    expected = np.sum(np.square(shift)) + np.sum((np.sqrt(var_a) - np.sqrt(var_b)) ** 2)
    assert frechet_distance(FeatureSet(a), FeatureSet(b)) == pytest.approx(expected, rel=1e-6, abs=1e-8)
