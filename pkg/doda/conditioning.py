"""Domain conditioning: reference-image embeddings, cross-attention and augmentation.

The domain condition is a small token matrix extracted from a reference
image of the domain to imitate. The default encoder is training-free: it
splits the image into a grid, summarises each cell with colour and
gradient-orientation statistics and projects every cell through a fixed
random matrix, one token per cell. Anything that maps an image to an
``(n_tok, d1)`` matrix can replace it.

During training the denoising target and the reference are produced by
*asymmetric augmentation*: the target view is rotated, flipped and cropped
while the reference view is only cropped, so the network cannot copy
geometry from the reference and has to take it from the layout.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from doda import diffmath as dm
from doda.errors import ConfigError, EmptyPoolError, NonFiniteError, ShapeError
from doda.layers import Linear
from doda.layout import LayoutSpec, crop_layout, flip_layout, load_png, rotate_layout90, scale_layout

logger = logging.getLogger(__name__)

GRID = 4
ORIENTATION_BINS = 8
TOKEN_DIM = 64
#: Per-cell statistics: 3 means, 3 stds and the orientation histogram.
STATS_PER_CELL = 6 + ORIENTATION_BINS
CROP_RATIO = 7 / 8


@dataclass
class DomainEmbedding:
    tokens: np.ndarray

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError(f"domain embedding needs (n_tok, d1) tokens, got {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens)):
            raise NonFiniteError("domain embedding has non-finite tokens")

    def pooled(self) -> np.ndarray:
        return self.tokens.mean(axis=0)


class StatsDomainEncoder:
    """Grid statistics projected to tokens by a fixed-seed random matrix.

    Args:
        grid: Cells per side; ``grid ** 2`` tokens are produced.
        bins: Gradient-orientation histogram bins.
        d1: Token width.
        seed: Seed of the projection matrix.
    """

    def __init__(self, grid: int = GRID, bins: int = ORIENTATION_BINS, d1: int = TOKEN_DIM, seed: int = 0):
        self.grid = grid
        self.bins = bins
        self.d1 = d1
        n_stats = 6 + bins
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((n_stats, d1)) / np.sqrt(n_stats)

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    def cell_stats(self, image: np.ndarray) -> np.ndarray:
        """``(grid*grid, 6 + bins)`` statistics, cells in row-major order."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"expected an H x W x 3 image, got {image.shape}")
        if not np.all(np.isfinite(image)):
            raise NonFiniteError("reference image has non-finite pixels")
        gray = image.mean(axis=2)
        gy, gx = np.gradient(gray)
        magnitude = np.hypot(gx, gy)
        angle = np.mod(np.arctan2(gy, gx), 2 * np.pi)
        bin_idx = np.minimum((angle / (2 * np.pi) * self.bins).astype(np.int64), self.bins - 1)
        rows = np.array_split(np.arange(image.shape[0]), self.grid)
        cols = np.array_split(np.arange(image.shape[1]), self.grid)
        stats = []
        for r in rows:
            for c in cols:
                cell = image[r[0]:r[-1] + 1, c[0]:c[-1] + 1].reshape(-1, 3)
                mags = magnitude[r[0]:r[-1] + 1, c[0]:c[-1] + 1].ravel()
                bins = bin_idx[r[0]:r[-1] + 1, c[0]:c[-1] + 1].ravel()
                hist = np.bincount(bins, weights=mags, minlength=self.bins) / len(mags)
                stats.append(np.concatenate([cell.mean(axis=0), cell.std(axis=0), hist]))
        return np.stack(stats)

    def __call__(self, image: np.ndarray) -> DomainEmbedding:
        return DomainEmbedding(self.cell_stats(image) @ self.projection)

    def encode_batch(self, images) -> np.ndarray:
        """``(N, n_tok, d1)`` tokens for a sequence of images."""
        return np.stack([self(img).tokens for img in images])


def extract_domain(image: np.ndarray, encoder=None) -> DomainEmbedding:
    """Domain embedding of one reference image (default statistics encoder)."""
    encoder = encoder or StatsDomainEncoder()
    return encoder(image)


class CrossAttention(dm.Module):
    """Multi-head attention from feature rows to domain tokens.

    ``Q = features W_Q``, ``K = tokens W_K``, ``V = tokens W_V``; each head
    computes ``softmax(Q K^T / sqrt(d_head)) V`` and the concatenated heads
    go through ``W_O``. With ``residual`` the input is added back. One head
    is exactly the single-head formula with ``d_head = d2``.

    Args:
        d_model: Feature width.
        d1: Token width.
        d2: Attention width, split evenly over ``heads``.
        rng: Generator for the initial weights.
    """

    def __init__(self, d_model: int, d1: int, d2: int, rng, heads: int = 1, residual: bool = True):
        if d2 % heads:
            raise ConfigError(f"attention width {d2} not divisible by {heads} heads")
        self.heads = heads
        self.d2 = d2
        self.residual = residual
        self.w_q = Linear(d_model, d2, rng, bias=False)
        self.w_k = Linear(d1, d2, rng, bias=False)
        self.w_v = Linear(d1, d2, rng, bias=False)
        self.w_o = Linear(d2, d_model, rng, bias=False)

    def _split(self, x, b, n):
        dh = self.d2 // self.heads
        x = dm.reshape(x, (b, n, self.heads, dh))
        x = dm.transpose(x, (0, 2, 1, 3))
        return dm.reshape(x, (b * self.heads, n, dh))

    def attend(self, features, tokens):
        """Pre-projection output ``(B, m, d2)`` and attention weights ``(B*heads, m, n)``."""
        features, tokens = dm._as_tensor(features), dm._as_tensor(tokens)
        if features.ndim != 3 or tokens.ndim != 3 or features.shape[0] != tokens.shape[0]:
            raise ShapeError(f"cross attention: features {features.shape} vs tokens {tokens.shape}")
        if tokens.shape[2] != self.w_k.weight.shape[0] or features.shape[2] != self.w_q.weight.shape[0]:
            raise ShapeError(
                f"cross attention widths: features {features.shape[2]} / tokens {tokens.shape[2]}"
            )
        b, m, _ = features.shape
        n = tokens.shape[1]
        q = self._split(self.w_q(features), b, m)
        k = self._split(self.w_k(tokens), b, n)
        v = self._split(self.w_v(tokens), b, n)
        scores = dm.scale(dm.matmul(q, dm.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.d2 // self.heads))
        weights = dm.softmax(scores)
        out = dm.matmul(weights, v)
        out = dm.reshape(out, (b, self.heads, m, self.d2 // self.heads))
        out = dm.reshape(dm.transpose(out, (0, 2, 1, 3)), (b, m, self.d2))
        return out, weights

    def forward(self, features, tokens):
        out, _ = self.attend(features, tokens)
        out = self.w_o(out)
        return dm.add(features, out) if self.residual else out


def cross_attention(features, emb: DomainEmbedding, weights: CrossAttention) -> dm.Tensor:
    """Attend ``m x d_model`` features to one embedding's tokens."""
    features = dm._as_tensor(features)
    if features.ndim != 2:
        raise ShapeError(f"cross_attention expects m x d_model features, got {features.shape}")
    f3 = dm.reshape(features, (1,) + features.shape)
    out = weights(f3, dm.Tensor(emb.tokens[None]))
    return dm.reshape(out, features.shape)


@dataclass
class AugmentationPolicy:
    """Operations applied to each view.

    .. note::
        The reference view must use a subset of the target operations.
    """

    target_ops: tuple = ("rotate90", "crop", "flip")
    reference_ops: tuple = ("crop",)
    crop_ratio: float = CROP_RATIO

    def __post_init__(self):
        known = {"rotate90", "crop", "flip"}
        if not set(self.target_ops) <= known:
            raise ConfigError(f"unknown augmentation ops {set(self.target_ops) - known}")
        if not set(self.reference_ops) <= set(self.target_ops):
            raise ConfigError("reference view ops must be a subset of target view ops")
        if not 0 < self.crop_ratio <= 1:
            raise ConfigError(f"crop ratio {self.crop_ratio} outside (0, 1]")


def resize_image(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of a float image, channel by channel."""
    channels = [
        np.asarray(Image.fromarray(image[..., c].astype(np.float32)).resize((width, height), Image.BILINEAR))
        for c in range(image.shape[2])
    ]
    return np.stack(channels, axis=2).astype(np.float64)


def _crop_box(h: int, w: int, ratio: float, rng) -> tuple:
    ch, cw = int(round(h * ratio)), int(round(w * ratio))
    if ch < 1 or cw < 1 or ch > h or cw > w:
        raise ShapeError(f"crop {cw}x{ch} does not fit image {w}x{h}")
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return x0, y0, cw, ch


def asymmetric_augment(image: np.ndarray, layout: LayoutSpec, rng, policy: AugmentationPolicy = None):
    """Produce the denoising target view and the domain reference view.

    The target view is cropped and resized back to full size, rotated by a
    random multiple of 90 degrees and randomly flipped; its layout follows
    every step. The reference view is an independent crop only. Random
    draws happen in a fixed order so a seeded ``rng`` gives a fixed pair.

    Returns:
        tuple: ``(target_image, target_layout, reference_image)``.
    """
    policy = policy or AugmentationPolicy()
    h, w = image.shape[:2]
    target, tlayout = image, layout
    if "crop" in policy.target_ops:
        x0, y0, cw, ch = _crop_box(h, w, policy.crop_ratio, rng)
        target = resize_image(image[y0:y0 + ch, x0:x0 + cw], w, h)
        tlayout = scale_layout(crop_layout(layout, x0, y0, cw, ch), w, h)
    if "rotate90" in policy.target_ops:
        k = int(rng.integers(0, 4))
        target = np.rot90(target, k)
        tlayout = rotate_layout90(tlayout, k)
    if "flip" in policy.target_ops:
        if rng.random() < 0.5:
            target = target[:, ::-1]
            tlayout = flip_layout(tlayout, horizontal=True)
        if rng.random() < 0.5:
            target = target[::-1]
            tlayout = flip_layout(tlayout, horizontal=False)
    reference = image
    if "crop" in policy.reference_ops:
        x0, y0, cw, ch = _crop_box(h, w, policy.crop_ratio, rng)
        reference = image[y0:y0 + ch, x0:x0 + cw]
    return np.ascontiguousarray(target), tlayout, np.ascontiguousarray(reference)


def sample_reference(pool, rng):
    """Uniform draw from a non-empty reference pool."""
    if len(pool) == 0:
        raise EmptyPoolError()
    return pool[int(rng.integers(0, len(pool)))]


def load_reference_pool(directory) -> list:
    """Images of a directory in sorted file-name order."""
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise EmptyPoolError(f"no PNG images in {directory}")
    return [load_png(p) for p in paths]
