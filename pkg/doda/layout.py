"""Bounding boxes, channel coding and layout rasterization.

A layout is the list of boxes of one image. Before it can condition the
score network it is drawn as an image:

* **single-class** layouts go through *channel coding*: boxes that overlap
  are coloured with a greedy first-fit graph colouring so that overlapping
  instances land in different raster channels;
* **multi-class** layouts are drawn largest-first with a per-category hue,
  a dim fill and a full-brightness border.

The module also tiles large images into overlapping windows and converts
layouts to and from COCO JSON.

Example
-------

.. code-block:: python

    spec = LayoutSpec(8, 8, [BoundingBox(0, 2, 2, 5, 5)])
    raster = render_single_class(spec, assign_channels(overlap_graph(spec)))
    raster[..., 0].sum()    # 9.0
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image

from doda.errors import InvalidBoxError, TilingError

logger = logging.getLogger(__name__)

#: Raster channels used by channel coding.
CHANNELS = 3
#: Multi-class fill and border brightness.
FILL_VALUE = 0.6
BORDER_VALUE = 1.0
BORDER_PX = 2
#: A clipped box is kept if at least this share of its area survives.
MIN_KEEP = 0.25


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, ``x`` along columns."""

    category_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.category_id < 0:
            raise InvalidBoxError(f"negative category id {self.category_id}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidBoxError(
                f"degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def intersection_area(self, other: "BoundingBox") -> float:
        iw = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        ih = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        return max(iw, 0.0) * max(ih, 0.0)

    def clip(self, x0: float, y0: float, x1: float, y1: float) -> Optional["BoundingBox"]:
        """Intersect with a window; ``None`` if nothing is left."""
        nx0, ny0 = max(self.x_min, x0), max(self.y_min, y0)
        nx1, ny1 = min(self.x_max, x1), min(self.y_max, y1)
        if nx0 >= nx1 or ny0 >= ny1:
            return None
        return BoundingBox(self.category_id, nx0, ny0, nx1, ny1)

    def shift(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.category_id, self.x_min + dx, self.y_min + dy,
                           self.x_max + dx, self.y_max + dy)

    def to_xywh(self) -> list:
        return [self.x_min, self.y_min, self.width, self.height]

    @classmethod
    def from_xywh(cls, category_id: int, xywh) -> "BoundingBox":
        x, y, w, h = (float(v) for v in xywh)
        return cls(int(category_id), x, y, x + w, y + h)


@dataclass
class LayoutSpec:
    """Image size and the ordered boxes of one image."""

    width: int
    height: int
    boxes: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.boxes)

    def as_array(self) -> np.ndarray:
        """``(n, 4)`` array of ``x_min, y_min, x_max, y_max``."""
        if not self.boxes:
            return np.zeros((0, 4))
        return np.array([[b.x_min, b.y_min, b.x_max, b.y_max] for b in self.boxes], dtype=np.float64)

    def categories(self) -> np.ndarray:
        return np.array([b.category_id for b in self.boxes], dtype=np.int64)


@dataclass
class OverlapGraph:
    n: int
    adjacency: np.ndarray

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def max_degree(self) -> int:
        return int(self.degrees().max()) if self.n else 0


@dataclass
class ChannelAssignment:
    """1-based channel index per box."""

    channels: np.ndarray

    def max_channel(self) -> int:
        return int(self.channels.max()) if self.channels.size else 0


def overlap_graph(layout: LayoutSpec) -> OverlapGraph:
    """Adjacency of boxes whose intersection has strictly positive area."""
    b = layout.as_array()
    n = len(b)
    iw = np.minimum(b[:, None, 2], b[None, :, 2]) - np.maximum(b[:, None, 0], b[None, :, 0])
    ih = np.minimum(b[:, None, 3], b[None, :, 3]) - np.maximum(b[:, None, 1], b[None, :, 1])
    adj = ((np.clip(iw, 0, None) * np.clip(ih, 0, None)) > 0).astype(np.uint8)
    np.fill_diagonal(adj, 0)
    return OverlapGraph(n=n, adjacency=adj)


def assign_channels(graph: OverlapGraph) -> ChannelAssignment:
    """Greedy first-fit colouring in box order.

    Box ``i`` takes the smallest positive channel not used by any already
    coloured neighbour ``j < i``.
    """
    channels = np.zeros(graph.n, dtype=np.int64)
    for i in range(graph.n):
        used = {int(channels[j]) for j in np.flatnonzero(graph.adjacency[i, :i])}
        c = 1
        while c in used:
            c += 1
        channels[i] = c
    return ChannelAssignment(channels=channels)


def _pixel_span(lo: float, hi: float, limit: int) -> tuple:
    a = int(np.floor(lo + 0.5))
    b = int(np.floor(hi + 0.5))
    return min(max(a, 0), limit), min(max(b, 0), limit)


def render_single_class(layout: LayoutSpec, assignment: Optional[ChannelAssignment] = None,
                        channels: int = CHANNELS) -> np.ndarray:
    """Fill box ``i`` with 1.0 in raster channel ``(channels[i] - 1) mod C``.

    Pixel ``(r, c)`` belongs to a box when ``floor(x_min + 0.5) <= c <
    floor(x_max + 0.5)`` and likewise for rows.

    .. warning::
        If the colouring needs more than ``C`` channels the extra ones wrap
        around and overlapping boxes may share a raster channel. A warning
        is logged when that happens.

    Returns:
        np.ndarray: ``H x W x C`` raster in ``[0, 1]``.
    """
    if assignment is None:
        assignment = assign_channels(overlap_graph(layout))
    if assignment.max_channel() > channels:
        logger.warning("channel coding needs %d channels, wrapping onto %d",
                       assignment.max_channel(), channels)
    raster = np.zeros((layout.height, layout.width, channels), dtype=np.float64)
    for box, ch in zip(layout.boxes, assignment.channels):
        c0, c1 = _pixel_span(box.x_min, box.x_max, layout.width)
        r0, r1 = _pixel_span(box.y_min, box.y_max, layout.height)
        raster[r0:r1, c0:c1, (int(ch) - 1) % channels] = 1.0
    return raster


def render_uncoded(layout: LayoutSpec, channels: int = CHANNELS) -> np.ndarray:
    """Every box in channel 0, the no-coding baseline of the channel-coding ablation."""
    ones = ChannelAssignment(channels=np.ones(len(layout), dtype=np.int64))
    return render_single_class(layout, ones, channels)


def category_color(category_id: int, num_categories: int, value: float) -> np.ndarray:
    return hsv_to_rgb([category_id / max(num_categories, 1), 1.0, value])


def render_multi_class(layout: LayoutSpec, num_categories: Optional[int] = None) -> np.ndarray:
    """Largest-first hue-coded boxes: dim fill and a bright 2-pixel border.

    Boxes are drawn in descending order of area (stable for ties) so smaller
    boxes stay visible on top of larger ones.
    """
    raster = np.zeros((layout.height, layout.width, 3), dtype=np.float64)
    if not layout.boxes:
        return raster
    if num_categories is None:
        num_categories = int(layout.categories().max()) + 1
    order = sorted(range(len(layout)), key=lambda i: -layout.boxes[i].area)
    for i in order:
        box = layout.boxes[i]
        c0, c1 = _pixel_span(box.x_min, box.x_max, layout.width)
        r0, r1 = _pixel_span(box.y_min, box.y_max, layout.height)
        if c0 >= c1 or r0 >= r1:
            continue
        raster[r0:r1, c0:c1] = category_color(box.category_id, num_categories, BORDER_VALUE)
        raster[r0 + BORDER_PX:r1 - BORDER_PX, c0 + BORDER_PX:c1 - BORDER_PX] = category_color(
            box.category_id, num_categories, FILL_VALUE
        )
    return raster


def crop_layout(layout: LayoutSpec, x0: float, y0: float, width: int, height: int,
                min_keep: float = MIN_KEEP) -> LayoutSpec:
    """Clip boxes to a window and move them into its frame.

    Boxes keeping less than ``min_keep`` of their area are dropped.
    """
    kept = []
    for box in layout.boxes:
        clipped = box.clip(x0, y0, x0 + width, y0 + height)
        if clipped is None or clipped.area < min_keep * box.area:
            continue
        kept.append(clipped.shift(-x0, -y0))
    return LayoutSpec(width, height, kept)


def scale_layout(layout: LayoutSpec, width: int, height: int) -> LayoutSpec:
    sx, sy = width / layout.width, height / layout.height
    boxes = [BoundingBox(b.category_id, b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy)
             for b in layout.boxes]
    return LayoutSpec(width, height, boxes)


def rotate_layout90(layout: LayoutSpec, k: int = 1) -> LayoutSpec:
    """Boxes of ``np.rot90(image, k)`` (counter-clockwise quarter turns).

    One turn maps ``(x1, y1, x2, y2)`` to ``(y1, W - x2, y2, W - x1)``.
    """
    for _ in range(k % 4):
        w = layout.width
        boxes = [BoundingBox(b.category_id, b.y_min, w - b.x_max, b.y_max, w - b.x_min)
                 for b in layout.boxes]
        layout = LayoutSpec(layout.height, layout.width, boxes)
    return layout


def flip_layout(layout: LayoutSpec, horizontal: bool = True) -> LayoutSpec:
    w, h = layout.width, layout.height
    if horizontal:
        boxes = [BoundingBox(b.category_id, w - b.x_max, b.y_min, w - b.x_min, b.y_max) for b in layout.boxes]
    else:
        boxes = [BoundingBox(b.category_id, b.x_min, h - b.y_max, b.x_max, h - b.y_min) for b in layout.boxes]
    return LayoutSpec(w, h, boxes)


@dataclass
class Tile:
    image: np.ndarray
    layout: LayoutSpec
    offset: tuple


def tile_offsets(size: int, tile: int, stride: int) -> list:
    """Window starts along one axis; a last window is pinned to the edge if needed."""
    offsets = list(range(0, size - tile + 1, stride))
    if offsets[-1] + tile < size:
        offsets.append(size - tile)
    return offsets


def tile(image: np.ndarray, layout: LayoutSpec, tile: int = 512, stride: int = 256,
         min_keep: float = MIN_KEEP) -> list:
    """Cut an image and its layout into overlapping square windows.

    Raises:
        TilingError: If the tile is larger than the image or the stride is not positive.
    """
    h, w = image.shape[:2]
    if tile > h or tile > w:
        raise TilingError(f"tile {tile} larger than image {w}x{h}")
    if stride < 1:
        raise TilingError(f"stride must be positive, got {stride}")
    tiles = []
    for oy in tile_offsets(h, tile, stride):
        for ox in tile_offsets(w, tile, stride):
            sub = crop_layout(layout, ox, oy, tile, tile, min_keep)
            tiles.append(Tile(image[oy:oy + tile, ox:ox + tile].copy(), sub, (ox, oy)))
    return tiles


def tiling_covers(layout: LayoutSpec, tiles: list, stride: int, min_keep: float = MIN_KEEP) -> bool:
    """Check that tiling lost no box it should have kept.

    A box must appear, clipped and shifted, in every tile holding at least
    ``min_keep`` of its area, and a box no wider or taller than
    ``tile - stride`` must land in some tile whole.
    """
    for box in layout.boxes:
        whole = False
        for t in tiles:
            ox, oy = t.offset
            size = t.image.shape[0]
            clipped = box.clip(ox, oy, ox + size, oy + size)
            if clipped is None or clipped.area < min_keep * box.area:
                continue
            if clipped.shift(-ox, -oy) not in t.layout.boxes:
                return False
            whole |= clipped == box
        if not whole and tiles and max(box.width, box.height) <= tiles[0].image.shape[0] - stride:
            return False
    return True


# ---------------------------------------------------------------------------
# COCO JSON and PNG
# ---------------------------------------------------------------------------

def to_coco(records, categories=None) -> dict:
    """Build a COCO dict from ``(file_name, LayoutSpec)`` pairs.

    Image ids are 1-based in record order; annotation ids run across images.
    """
    images, annotations = [], []
    seen_cats = set()
    ann_id = 1
    for image_id, (file_name, spec) in enumerate(records, start=1):
        images.append({"id": image_id, "file_name": file_name, "width": spec.width, "height": spec.height})
        for box in spec.boxes:
            seen_cats.add(box.category_id)
            annotations.append({
                "id": ann_id,
                "image_id": image_id,
                "category_id": box.category_id,
                "bbox": [round(v, 4) for v in box.to_xywh()],
                "area": round(box.area, 4),
                "iscrowd": 0,
            })
            ann_id += 1
    if categories is None:
        categories = [{"id": c, "name": f"class{c}"} for c in sorted(seen_cats)]
    return {"images": images, "annotations": annotations, "categories": categories}


def from_coco(data: dict) -> list:
    """Inverse of :func:`to_coco`: ``(file_name, LayoutSpec)`` in image order."""
    by_image = {img["id"]: [] for img in data["images"]}
    for ann in data["annotations"]:
        by_image[ann["image_id"]].append(BoundingBox.from_xywh(ann["category_id"], ann["bbox"]))
    return [
        (img["file_name"], LayoutSpec(int(img["width"]), int(img["height"]), by_image[img["id"]]))
        for img in data["images"]
    ]


def save_coco(path, records, categories=None) -> None:
    with open(path, "w") as fh:
        json.dump(to_coco(records, categories), fh, sort_keys=True)


def load_coco(path) -> list:
    with open(path) as fh:
        return from_coco(json.load(fh))


def save_png(path, image: np.ndarray) -> None:
    """Write an ``H x W x 3`` image in ``[0, 1]`` as 8-bit RGB."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# Property suite
# ---------------------------------------------------------------------------

WORKED_EXAMPLES = {
    "single": ([(0, 0, 4, 4)], [1]),
    "chain": ([(0, 0, 4, 4), (3, 0, 7, 4), (6, 0, 10, 4)], [1, 2, 1]),
    "triangle": ([(0, 0, 4, 4), (1, 1, 5, 5), (2, 2, 6, 6)], [1, 2, 3]),
}


def random_layout(rng, size: int = 64, max_boxes: int = 12) -> LayoutSpec:
    boxes = []
    for _ in range(int(rng.integers(0, max_boxes + 1))):
        x0, y0 = rng.uniform(0, size - 2, size=2)
        w, h = rng.uniform(1, size / 3, size=2)
        boxes.append(BoundingBox(0, x0, y0, min(x0 + w, size), min(y0 + h, size)))
    return LayoutSpec(size, size, boxes)


def run_property_suite(seed: int = 0, count: int = 1000) -> dict:
    """Channel-coding and tiling checks on worked examples and random layouts.

    Returns:
        dict: ``check name -> bool``.
    """
    rng = np.random.default_rng(seed)
    results = {}
    for name, (corners, expected) in WORKED_EXAMPLES.items():
        spec = LayoutSpec(16, 16, [BoundingBox(0, *c) for c in corners])
        got = assign_channels(overlap_graph(spec)).channels.tolist()
        results[f"worked_{name}"] = got == expected
    proper, bounded = True, True
    for _ in range(count):
        graph = overlap_graph(random_layout(rng))
        ch = assign_channels(graph).channels
        rows, cols = np.nonzero(graph.adjacency)
        proper &= bool(np.all(ch[rows] != ch[cols]))
        bounded &= assign_channels(graph).max_channel() <= graph.max_degree() + 1
    results["adjacent_channels_differ"] = proper
    results["greedy_bound"] = bounded
    results["tile_offsets_1024"] = tile_offsets(1024, 512, 256) == [0, 256, 512]
    image = np.zeros((96, 96, 3))
    clipped = True
    for _ in range(count // 10):
        spec = random_layout(rng, size=96)
        for t in tile(image, spec, tile=48, stride=24):
            for b in t.layout.boxes:
                clipped &= 0 <= b.x_min < b.x_max <= 48 and 0 <= b.y_min < b.y_max <= 48
    results["tile_boxes_clipped"] = bool(clipped)
    covered = True
    for _ in range(count // 10):
        spec = random_layout(rng, size=96)
        covered &= tiling_covers(spec, tile(image, spec, tile=48, stride=24), stride=24)
    results["tiling_coverage"] = bool(covered)
    footprint = True
    for size in range(48, 200):
        offsets = tile_offsets(size, 48, 24)
        footprint &= offsets[0] == 0 and offsets[-1] + 48 == size and bool(np.all(np.diff(offsets) <= 24))
    results["tile_footprint"] = bool(footprint)
    for name, ok in results.items():
        if not ok:
            logger.warning("layout check '%s' failed", name)
    return results
