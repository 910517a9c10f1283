"""COCO-style box AP evaluation.

Follows the official bounding-box protocol:

* detections are sorted by score (stable) and capped at ``MAX_DETS`` per image;
* at each IoU threshold ``0.50:0.05:0.95`` every detection greedily takes the
  best still-unmatched ground truth with IoU at or above the threshold;
  ground truth outside the evaluated area range is *ignored* (matches to it
  neither help nor hurt), as are unmatched detections outside the range;
* precision is made monotone from the right and read at 101 recall points.

Area ranges put small boxes below ``12**2`` and medium boxes below ``28**2``
pixels on a 32-pixel image; other sizes scale the limits by
``(image_size / 32) ** 2``.

.. note::
    COCO reports ``-1`` for a partition without ground truth; this module
    reports ``0.0`` and logs a warning instead so tables stay numeric.
"""

import json
import logging
from dataclasses import dataclass

import numpy as np

from doda.errors import DuplicateImageError
from doda.layout import BoundingBox, LayoutSpec

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100
#: Area partition limits (box side in pixels) on a DESK_SIZE image.
DESK_SIZE = 32
DESK_SMALL = 12
DESK_MEDIUM = 28
REPORT_KEYS = ("AP", "AP50", "AP75", "APs", "APm", "APl")


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float

    @property
    def category_id(self) -> int:
        return self.box.category_id


@dataclass
class ApReport:
    AP: float = 0.0
    AP50: float = 0.0
    AP75: float = 0.0
    APs: float = 0.0
    APm: float = 0.0
    APl: float = 0.0

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in REPORT_KEYS}

    def delta(self, other: "ApReport") -> dict:
        return {k: float(getattr(self, k) - getattr(other, k)) for k in REPORT_KEYS}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)


def area_ranges(image_size: int) -> dict:
    """Small below 12², medium below 28² at 32 px; limits scale with the image area."""
    scale = (image_size / DESK_SIZE) ** 2
    small, medium = DESK_SMALL ** 2 * scale, DESK_MEDIUM ** 2 * scale
    return {"all": (0.0, 1e10), "small": (0.0, small), "medium": (small, medium), "large": (medium, 1e10)}


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(n, 4)`` and ``(m, 4)`` corner boxes."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def _as_mapping(pairs, what: str) -> dict:
    if isinstance(pairs, dict):
        return pairs
    out = {}
    for image_id, value in pairs:
        if image_id in out:
            raise DuplicateImageError(f"image id {image_id!r} appears twice in {what}")
        out[image_id] = value
    return out


def _gt_boxes(value) -> list:
    return list(value.boxes) if isinstance(value, LayoutSpec) else list(value)


def _match_image(gts, dts, area_rng):
    """Per-threshold matches of one image and category."""
    g_arr = np.array([[g.x_min, g.y_min, g.x_max, g.y_max] for g in gts]).reshape(-1, 4)
    g_area = np.array([g.area for g in gts])
    g_ignore = ((g_area < area_rng[0]) | (g_area > area_rng[1])).astype(int)
    g_order = np.argsort(g_ignore, kind="mergesort")
    g_arr, g_area, g_ignore = g_arr[g_order], g_area[g_order], g_ignore[g_order]
    d_order = np.argsort([-d.score for d in dts], kind="mergesort")[:MAX_DETS]
    dts = [dts[i] for i in d_order]
    d_arr = np.array([[d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max] for d in dts]).reshape(-1, 4)
    ious = box_iou(d_arr, g_arr)
    n_t, n_g, n_d = len(IOU_THRESHOLDS), len(gts), len(dts)
    gtm = np.zeros((n_t, n_g), dtype=bool)
    dtm = np.zeros((n_t, n_d), dtype=bool)
    dt_ig = np.zeros((n_t, n_d), dtype=bool)
    for ti, thr in enumerate(IOU_THRESHOLDS):
        for di in range(n_d):
            best_iou = min(thr, 1 - 1e-10)
            m = -1
            for gi in range(n_g):
                if gtm[ti, gi]:
                    continue
                if m > -1 and g_ignore[m] == 0 and g_ignore[gi] == 1:
                    break
                if ious[di, gi] < best_iou:
                    continue
                best_iou = ious[di, gi]
                m = gi
            if m == -1:
                continue
            dt_ig[ti, di] = bool(g_ignore[m])
            dtm[ti, di] = True
            gtm[ti, m] = True
    d_area = np.array([d.box.area for d in dts])
    outside = (d_area < area_rng[0]) | (d_area > area_rng[1])
    dt_ig |= (~dtm) & outside[None, :]
    scores = np.array([d.score for d in dts])
    return scores, dtm, dt_ig, int((g_ignore == 0).sum())


def _precision_table(per_image) -> np.ndarray:
    """``(T, R)`` interpolated precision, or ``None`` without ground truth."""
    n_pos = sum(p[3] for p in per_image)
    if n_pos == 0:
        return None
    scores = np.concatenate([p[0] for p in per_image]) if per_image else np.zeros(0)
    order = np.argsort(-scores, kind="mergesort")
    dtm = np.concatenate([p[1] for p in per_image], axis=1)[:, order]
    dt_ig = np.concatenate([p[2] for p in per_image], axis=1)[:, order]
    tps = np.cumsum(dtm & ~dt_ig, axis=1).astype(np.float64)
    fps = np.cumsum(~dtm & ~dt_ig, axis=1).astype(np.float64)
    table = np.zeros((len(IOU_THRESHOLDS), len(RECALL_POINTS)))
    for ti in range(len(IOU_THRESHOLDS)):
        tp, fp = tps[ti], fps[ti]
        rc = tp / n_pos
        pr = tp / (tp + fp + np.spacing(1))
        pr = np.maximum.accumulate(pr[::-1])[::-1] if len(pr) else pr
        idx = np.searchsorted(rc, RECALL_POINTS, side="left")
        valid = idx < len(pr)
        table[ti, valid] = pr[idx[valid]]
    return table


def evaluate_ap(detections, ground_truth, image_size: int = 32) -> ApReport:
    """COCO box AP of detections against ground-truth layouts.

    Args:
        detections: ``image_id -> [Detection]`` mapping or ``(image_id, dets)`` pairs.
        ground_truth: ``image_id -> LayoutSpec`` (or box list), mapping or pairs.
        image_size: Side length used to scale the area partitions.

    Raises:
        DuplicateImageError: If an image id is listed twice.
    """
    dets = _as_mapping(detections, "detections")
    gts = _as_mapping(ground_truth, "ground truth")
    image_ids = sorted(set(gts) | set(dets), key=str)
    categories = sorted({b.category_id for v in gts.values() for b in _gt_boxes(v)}
                        | {d.category_id for v in dets.values() for d in v})
    ranges = area_ranges(image_size)
    summary = {}
    for rname, rng in ranges.items():
        tables = []
        for cat in categories:
            per_image = []
            for img in image_ids:
                g = [b for b in _gt_boxes(gts.get(img, [])) if b.category_id == cat]
                d = [x for x in dets.get(img, []) if x.category_id == cat]
                if g or d:
                    per_image.append(_match_image(g, d, rng))
            table = _precision_table(per_image)
            if table is not None:
                tables.append(table)
        summary[rname] = np.stack(tables) if tables else None
    report = ApReport()
    if summary["all"] is not None:
        report.AP = float(summary["all"].mean())
        report.AP50 = float(summary["all"][:, 0].mean())
        report.AP75 = float(summary["all"][:, 5].mean())
    else:
        logger.warning("AP requested without any ground truth; reporting 0")
    for key, rname in (("APs", "small"), ("APm", "medium"), ("APl", "large")):
        if summary[rname] is None:
            logger.warning("no ground truth in the %s area range; %s reported as 0", rname, key)
        else:
            setattr(report, key, float(summary[rname].mean()))
    return report


def detections_to_results(detections) -> list:
    """COCO results JSON entries (``bbox`` as ``[x, y, w, h]``)."""
    out = []
    for image_id, dets in sorted(_as_mapping(detections, "detections").items(), key=lambda kv: str(kv[0])):
        for d in dets:
            out.append({"image_id": image_id, "category_id": d.category_id,
                        "bbox": [round(v, 4) for v in d.box.to_xywh()], "score": round(float(d.score), 6)})
    return out


def save_results(path, detections) -> None:
    with open(path, "w") as fh:
        json.dump(detections_to_results(detections), fh, sort_keys=True)
