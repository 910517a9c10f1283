"""Procedural multi-domain detection benchmark.

Each domain paints a value-noise background in its own hue band, texture
frequency and illumination, then scatters elliptical "heads" whose colour is
offset in hue from the background. Every box is the tight bound of its
object's full (unoccluded) mask.

A corpus on disk looks like::

    corpus/
        corpus.json                 # specs, split plans, seed, image size
        train/annotations.json      # COCO, labeled splits only
        train/domains.json          # {"train/<file>.png": domain_id}
        train/*.png
        unlabeled/domains.json      # includes the train and target_pool files
        ...

File paths in ``domains.json`` are relative to the corpus root so the
unlabeled superset can list images that live in other splits.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import zoom

from doda.config import substream
from doda.errors import ConfigError, EmptyDatasetError
from doda.layout import BoundingBox, LayoutSpec, load_coco, load_png, save_coco, save_png

logger = logging.getLogger(__name__)

IMAGE_SIZE = 32
HEAD_CATEGORY = 0
MAX_ASPECT = 1.6
MIN_MASK_PIXELS = 6
UNLABELED_SPLIT = "unlabeled"


@dataclass(frozen=True)
class DomainSpec:
    """Appearance parameters of one domain.

    Hue values are on the ``[0, 1)`` wheel; ``texture_freq`` is the number of
    value-noise lattice cells per image side.
    """

    domain_id: int
    bg_hue: tuple = (0.22, 0.30)
    texture_freq: int = 4
    illumination: float = 1.0
    object_hue_offset: float = 0.5
    object_scale: tuple = (3.0, 5.5)
    density: tuple = (2, 5)

    def __post_init__(self):
        if not self.bg_hue[0] < self.bg_hue[1]:
            raise ConfigError(f"domain {self.domain_id}: empty hue range {self.bg_hue}")
        if not 0 < self.object_scale[0] <= self.object_scale[1]:
            raise ConfigError(f"domain {self.domain_id}: bad object scale {self.object_scale}")
        if not 0 <= self.density[0] <= self.density[1]:
            raise ConfigError(f"domain {self.domain_id}: bad density {self.density}")
        if self.texture_freq < 1 or self.illumination <= 0:
            raise ConfigError(f"domain {self.domain_id}: bad texture or illumination")


DEFAULT_DOMAINS = (
    DomainSpec(0, bg_hue=(0.22, 0.30), texture_freq=3, illumination=1.00, object_hue_offset=0.45),
    DomainSpec(1, bg_hue=(0.08, 0.14), texture_freq=5, illumination=0.85, object_hue_offset=0.50,
               object_scale=(3.0, 5.0)),
    DomainSpec(2, bg_hue=(0.55, 0.62), texture_freq=7, illumination=1.10, object_hue_offset=0.40,
               density=(3, 6)),
    DomainSpec(3, bg_hue=(0.75, 0.82), texture_freq=4, illumination=0.90, object_hue_offset=0.55,
               object_scale=(3.5, 6.0)),
    DomainSpec(4, bg_hue=(0.95, 0.99), texture_freq=6, illumination=0.80, object_hue_offset=0.35,
               object_scale=(3.0, 5.0), density=(2, 6)),
)


@dataclass
class GeneratedSample:
    image: np.ndarray
    layout: Optional[LayoutSpec]
    domain_id: int
    masks: list = field(default_factory=list)
    file_name: str = ""


def validate_specs(specs) -> None:
    ids = [s.domain_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"domain ids are not unique: {ids}")


def value_noise(rng, size: int, cells: int) -> np.ndarray:
    """Bilinear-interpolated random lattice in ``[0, 1]``."""
    lattice = rng.random((cells + 1, cells + 1))
    field_ = zoom(lattice, size / (cells + 1), order=1)
    return np.clip(field_[:size, :size], 0.0, 1.0)


def ellipse_mask(size: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - cx, ys - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def mask_box(mask: np.ndarray, category_id: int = HEAD_CATEGORY) -> BoundingBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BoundingBox(category_id, float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def gen_scene(domain: DomainSpec, rng, size: int = IMAGE_SIZE) -> GeneratedSample:
    """Render one image of ``domain`` with its exact layout."""
    hue = rng.uniform(*domain.bg_hue)
    coarse = value_noise(rng, size, domain.texture_freq)
    fine = value_noise(rng, size, 2 * domain.texture_freq)
    hsv = np.stack([
        np.mod(hue + 0.04 * (coarse - 0.5), 1.0),
        0.45 + 0.25 * fine,
        np.clip(domain.illumination * (0.30 + 0.25 * coarse), 0.0, 1.0),
    ], axis=-1)
    image = hsv_to_rgb(hsv)
    k = int(rng.integers(domain.density[0], domain.density[1] + 1))
    boxes, masks = [], []
    obj_hue = np.mod(hue + domain.object_hue_offset, 1.0)
    for _ in range(k):
        a = rng.uniform(*domain.object_scale)
        b = a / rng.uniform(1.0, MAX_ASPECT)
        cx, cy = rng.uniform(0, size, size=2)
        theta = rng.uniform(0, np.pi)
        texture = rng.random((size, size))
        mask = ellipse_mask(size, cx, cy, a, b, theta)
        if mask.sum() < MIN_MASK_PIXELS:
            continue
        obj = hsv_to_rgb(np.stack([
            np.full((size, size), obj_hue),
            np.full((size, size), 0.75),
            np.clip(domain.illumination * (0.80 + 0.15 * texture), 0.0, 1.0),
        ], axis=-1))
        image[mask] = obj[mask]
        boxes.append(mask_box(mask))
        masks.append(mask)
    return GeneratedSample(image=image, layout=LayoutSpec(size, size, boxes), domain_id=domain.domain_id,
                           masks=masks)


def mean_hue(image: np.ndarray) -> float:
    """Circular mean hue of an RGB image, on ``[0, 1)``."""
    h = rgb_to_hsv(np.clip(image, 0, 1))[..., 0] * 2 * np.pi
    return float(np.mod(np.arctan2(np.sin(h).mean(), np.cos(h).mean()) / (2 * np.pi), 1.0))


@dataclass
class SplitPlan:
    """Images of one split per domain; ``extra_members`` are other splits folded in."""

    name: str
    counts: dict
    labeled: bool = True
    extra_members: tuple = ()


def default_plans(corpus_cfg) -> list:
    """The standard experiment: source train/test, unlabeled superset, target splits."""
    train_domains = list(corpus_cfg.train_domains)
    target = corpus_cfg.target_domain

    def spread(total, domains):
        base, rem = divmod(int(total), len(domains))
        return {d: base + (1 if i < rem else 0) for i, d in enumerate(domains)}

    extra = corpus_cfg.unlabeled - corpus_cfg.labeled - corpus_cfg.target_pool
    if extra < 0:
        raise ConfigError("unlabeled set must be at least labeled + target_pool images")
    return [
        SplitPlan("train", spread(corpus_cfg.labeled, train_domains)),
        SplitPlan("source_test", spread(25 * len(train_domains), train_domains)),
        SplitPlan("target_pool", {target: corpus_cfg.target_pool}, labeled=False),
        SplitPlan("target_test", {target: corpus_cfg.target_test}),
        SplitPlan("target_oracle", {target: corpus_cfg.target_pool}),
        SplitPlan(UNLABELED_SPLIT, spread(extra, train_domains + [target]), labeled=False,
                  extra_members=("train", "target_pool")),
    ]


def build_corpus(out_dir, specs, plans, seed: int, image_size: int = IMAGE_SIZE) -> dict:
    """Generate every split and write PNG, COCO JSON and domain maps.

    The result is a pure function of ``(specs, plans, seed, image_size)``:
    sample ``i`` of domain ``d`` in split ``s`` uses its own substream.

    Returns:
        dict: ``split name -> {relative file name: domain_id}``.
    """
    validate_specs(specs)
    by_id = {s.domain_id: s for s in specs}
    root = Path(out_dir)
    domain_maps = {}
    for plan in plans:
        split_dir = root / plan.name
        split_dir.mkdir(parents=True, exist_ok=True)
        records, dmap = [], {}
        for domain_id in sorted(plan.counts):
            if domain_id not in by_id:
                raise ConfigError(f"split {plan.name} names unknown domain {domain_id}")
            for i in range(plan.counts[domain_id]):
                rng = substream(seed, f"{plan.name}/{domain_id}/{i}")
                sample = gen_scene(by_id[domain_id], rng, image_size)
                rel = f"{plan.name}/{plan.name}_d{domain_id}_{i:05d}.png"
                save_png(root / rel, sample.image)
                dmap[rel] = domain_id
                records.append((rel, sample.layout))
        for member in plan.extra_members:
            dmap.update(domain_maps[member])
        if plan.labeled:
            save_coco(split_dir / "annotations.json", records,
                      categories=[{"id": HEAD_CATEGORY, "name": "head"}])
        with open(split_dir / "domains.json", "w") as fh:
            json.dump(dmap, fh, sort_keys=True, indent=1)
        domain_maps[plan.name] = dmap
        logger.info("split %s: %d images", plan.name, len(dmap))
    meta = {
        "seed": seed,
        "image_size": image_size,
        "specs": [asdict(s) for s in specs],
        "plans": [asdict(p) for p in plans],
    }
    with open(root / "corpus.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
    return domain_maps


def load_split(root, split: str, with_images: bool = True) -> list:
    """Samples of a split; ``layout`` is ``None`` for unlabeled splits.

    Raises:
        EmptyDatasetError: If the split does not exist or is empty.
    """
    root = Path(root)
    dmap_path = root / split / "domains.json"
    if not dmap_path.exists():
        raise EmptyDatasetError(f"no split '{split}' under {root}")
    with open(dmap_path) as fh:
        dmap = json.load(fh)
    layouts = {}
    ann = root / split / "annotations.json"
    if ann.exists():
        layouts = dict(load_coco(ann))
    samples = []
    for rel in sorted(dmap):
        image = load_png(root / rel) if with_images else None
        samples.append(GeneratedSample(image=image, layout=layouts.get(rel), domain_id=int(dmap[rel]),
                                       file_name=rel))
    if not samples:
        raise EmptyDatasetError(f"split '{split}' is empty")
    return samples


def load_specs(root) -> list:
    with open(Path(root) / "corpus.json") as fh:
        meta = json.load(fh)
    return [DomainSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in s.items()})
            for s in meta["specs"]]
