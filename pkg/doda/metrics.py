"""Feature Similarity and the Fréchet feature distance.

Both metrics work on embeddings from a pluggable encoder. The default is
the :class:`doda.conditioning.StatsDomainEncoder`, whose tokens are
mean-pooled to one vector per image.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from doda.conditioning import StatsDomainEncoder
from doda.errors import NegativeSpectrumError, NonFiniteError, ShapeError, ZeroNormError

logger = logging.getLogger(__name__)

#: Eigenvalues below ``-SPECTRUM_TOL`` are an error; those above are clamped to 0.
SPECTRUM_TOL = 1e-8


@dataclass
class FeatureSet:
    """``n x d`` embeddings with a tag naming where they came from."""

    features: np.ndarray
    tag: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        if self.features.ndim != 2:
            raise ShapeError(f"feature set '{self.tag}' must be n x d, got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise NonFiniteError(f"feature set '{self.tag}' has non-finite values")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def embed_images(images, encoder=None, tag: str = "") -> FeatureSet:
    """Pooled encoder embeddings of ``N x H x W x 3`` images."""
    encoder = encoder or StatsDomainEncoder()
    tokens = encoder.encode_batch(np.asarray(images))
    return FeatureSet(tokens.mean(axis=1), tag=tag)


def _pooled(x) -> np.ndarray:
    arr = x.features if isinstance(x, FeatureSet) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=1)
    return arr


def feature_similarity(generated, references, encoder=None) -> float:
    """Mean cosine similarity of pooled embeddings, paired by position.

    Args:
        generated: ``n x d`` embeddings, ``n x tokens x d`` token sets or a :class:`FeatureSet`;
            with ``encoder`` given, ``n x H x W x 3`` images instead.
        references: The same for the reference images, in matching order.
        encoder: Image encoder (anything with ``encode_batch``) used to embed
            both sides first.

    Raises:
        ShapeError: If the two sides do not pair up.
        ZeroNormError: If any embedding has zero norm.
    """
    if encoder is not None:
        generated, references = embed_images(generated, encoder), embed_images(references, encoder)
    a, b = _pooled(generated), _pooled(references)
    if a.shape != b.shape:
        raise ShapeError(f"cannot pair {a.shape} generated with {b.shape} references")
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ZeroNormError()
    return float(np.mean(np.sum(a * b, axis=1) / (na * nb)))


def _psd_sqrt(mat: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = linalg.eigh(mat)
    if vals.min() < -SPECTRUM_TOL:
        raise NegativeSpectrumError(f"{what} has eigenvalue {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FeatureSet, b: FeatureSet) -> float:
    """Fréchet distance between Gaussian fits of two feature sets.

    ``||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)``,
    every square root taken through a symmetric eigendecomposition.

    Raises:
        ShapeError: If the sets have different dimensions or fewer than two rows.
        NegativeSpectrumError: If a covariance is genuinely indefinite.
    """
    if a.dim != b.dim:
        raise ShapeError(f"feature dims differ: {a.dim} vs {b.dim}")
    for fs in (a, b):
        if len(fs) < 2:
            raise ShapeError(f"feature set '{fs.tag}' needs at least 2 rows for a covariance")
        if len(fs) < fs.dim:
            logger.warning("feature set '%s' has %d rows for %d dims; covariance is singular",
                           fs.tag, len(fs), fs.dim)
    mu_a, mu_b = a.features.mean(axis=0), b.features.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a.features, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b.features, rowvar=False))
    if not (np.all(np.isfinite(cov_a)) and np.all(np.isfinite(cov_b))):
        raise NonFiniteError("non-finite covariance")
    root_a = _psd_sqrt(cov_a, "covariance of " + (a.tag or "a"))
    middle = root_a @ cov_b @ root_a
    vals = linalg.eigvalsh((middle + middle.T) / 2.0)
    if vals.min() < -SPECTRUM_TOL:
        raise NegativeSpectrumError(f"covariance product has eigenvalue {vals.min():.3e}")
    cross = np.sum(np.sqrt(np.clip(vals, 0.0, None)))
    diff = mu_a - mu_b
    return float(max(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross, 0.0))
