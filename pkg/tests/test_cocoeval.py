import json

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from doda.cocoeval import (
    ApReport,
    Detection,
    area_ranges,
    box_iou,
    detections_to_results,
    evaluate_ap,
    save_results,
)
from doda.errors import DuplicateImageError
from doda.layout import BoundingBox, LayoutSpec


def box(x0, y0, x1, y1, cat=0):
    return BoundingBox(cat, x0, y0, x1, y1)


def test_hand_computed_case():
    """One detection at IoU 0.92 matches at nine of the ten thresholds."""
    gt = {1: LayoutSpec(32, 32, [box(0, 0, 10, 10)])}
    dets = {1: [Detection(box(0, 0, 10, 9.2), 0.8)]}
    report = evaluate_ap(dets, gt, image_size=32)
    assert report.AP == pytest.approx(0.9)
    assert report.AP50 == pytest.approx(1.0)
    assert report.AP75 == pytest.approx(1.0)
    assert report.APs == pytest.approx(0.9)
    assert report.APm == 0.0


def test_perfect_and_empty_detections():
    gt = {k: LayoutSpec(32, 32, [box(k, k, k + 8, k + 6)]) for k in range(3)}
    perfect = {k: [Detection(v.boxes[0], 0.9)] for k, v in gt.items()}
    assert evaluate_ap(perfect, gt).AP == pytest.approx(1.0)
    assert evaluate_ap({}, gt).AP == 0.0


def test_higher_scored_false_positive_halves_precision():
    gt = {0: [box(0, 0, 10, 10)]}
    dets = {0: [Detection(box(20, 20, 30, 30), 0.9), Detection(box(0, 0, 10, 10), 0.5)]}
    assert evaluate_ap(dets, gt).AP50 == pytest.approx(0.5)


def test_duplicate_image_ids_are_rejected():
    with pytest.raises(DuplicateImageError):
        evaluate_ap([(1, []), (1, [])], {1: []})


def test_area_ranges_scale_with_image_area():
    assert area_ranges(32)["small"] == (0.0, 12 ** 2)
    assert area_ranges(32)["medium"] == (12 ** 2, 28 ** 2)
    ranges = area_ranges(64)
    assert ranges["small"] == (0.0, 4 * 12 ** 2)
    assert ranges["medium"] == (4 * 12 ** 2, 4 * 28 ** 2)


@pytest.mark.parametrize(
    "side, partition",
    [(11.96, "APs"), (12.04, "APm"), (27.98, "APm"), (28.02, "APl")],
)
def test_area_thresholds_at_32_pixels(side, partition):
    """Boxes just either side of 12² and 28² land in one partition only."""
    gt = {0: LayoutSpec(32, 32, [box(1, 1, 1 + side, 1 + side)])}
    dets = {0: [Detection(gt[0].boxes[0], 0.9)]}
    report = evaluate_ap(dets, gt, image_size=32)
    for key in ("APs", "APm", "APl"):
        assert getattr(report, key) == pytest.approx(1.0 if key == partition else 0.0)


def test_box_iou():
    a = np.array([[0, 0, 2, 2], [1, 1, 3, 3]], dtype=float)
    iou = box_iou(a, a)
    np.testing.assert_allclose(np.diag(iou), 1.0)
    assert iou[0, 1] == pytest.approx(1 / 7)
    np.testing.assert_allclose(iou, iou.T)
    assert box_iou(a, np.zeros((0, 4))).shape == (2, 0)


def brute_force_ap50(gts, dets):
    """Single image, single class, everything in range."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    matched, tp = set(), []
    for i in order:
        best, m = 0.5, -1
        for j, g in enumerate(gts):
            if j in matched:
                continue
            iou = box_iou(np.array([[dets[i].box.x_min, dets[i].box.y_min, dets[i].box.x_max, dets[i].box.y_max]]),
                          np.array([[g.x_min, g.y_min, g.x_max, g.y_max]]))[0, 0]
            if iou >= best:
                best, m = iou, j
        if m >= 0:
            matched.add(m)
        tp.append(m >= 0)
    tp = np.array(tp, dtype=float)
    ctp, cfp = np.cumsum(tp), np.cumsum(1 - tp)
    recall = ctp / len(gts)
    precision = ctp / (ctp + cfp + np.spacing(1))
    points = []
    for r in np.linspace(0, 1, 101):
        ok = precision[recall >= r]
        points.append(ok.max() if ok.size else 0.0)
    return float(np.mean(points))


box_st = st.tuples(st.integers(0, 24), st.integers(0, 24), st.integers(2, 8), st.integers(2, 8))


@settings(max_examples=100, deadline=None)
@given(st.lists(box_st, min_size=1, max_size=6), st.lists(box_st, max_size=8), st.randoms())
def test_matches_brute_force_reference(gt_corners, det_corners, random):
    gts = [box(x, y, x + w, y + h) for x, y, w, h in gt_corners]
    scores = random.sample(range(1, 1000), len(det_corners))
    dets = [Detection(box(x, y, x + w, y + h), s / 1000) for (x, y, w, h), s in zip(det_corners, scores)]
    report = evaluate_ap({0: dets}, {0: gts}, image_size=32)
    assert report.AP50 == pytest.approx(brute_force_ap50(gts, dets), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(box_st, min_size=1, max_size=6), st.lists(box_st, max_size=8), st.randoms())
def test_trailing_false_positive_changes_nothing(gt_corners, det_corners, random):
    gts = [box(x, y, x + w, y + h) for x, y, w, h in gt_corners]
    scores = random.sample(range(2, 1000), len(det_corners))
    dets = [Detection(box(x, y, x + w, y + h), s / 1000) for (x, y, w, h), s in zip(det_corners, scores)]
    far = Detection(box(100, 100, 110, 110), 0.0005)
    base = evaluate_ap({0: dets}, {0: gts})
    extra = evaluate_ap({0: dets + [far]}, {0: gts})
    assert extra.AP == pytest.approx(base.AP, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(box_st, min_size=1, max_size=6), st.lists(box_st, max_size=8), st.randoms(), st.integers(0, 5))
def test_adding_a_true_positive_never_lowers_ap(gt_corners, det_corners, random, pick):
    gts = [box(x, y, x + w, y + h) for x, y, w, h in gt_corners]
    scores = random.sample(range(1, 1000), len(det_corners))
    dets = [Detection(box(x, y, x + w, y + h), s / 1000) for (x, y, w, h), s in zip(det_corners, scores)]
    target = gts[pick % len(gts)]
    corners = np.array([[target.x_min, target.y_min, target.x_max, target.y_max]])
    others = np.array([[d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max] for d in dets]).reshape(-1, 4)
    assume(not np.any(box_iou(corners, others) >= 0.5))
    before = evaluate_ap({0: dets}, {0: gts}, image_size=32)
    after = evaluate_ap({0: dets + [Detection(target, 1.0)]}, {0: gts}, image_size=32)
    assert after.AP >= before.AP - 1e-12
    assert after.AP50 >= before.AP50 - 1e-12

def test_report_helpers(tmp_path):
    a, b = ApReport(AP=0.5, AP50=0.8), ApReport(AP=0.25, AP50=0.5)
    assert a.delta(b)["AP"] == pytest.approx(0.25)
    a.save(tmp_path / "ap.json")
    assert json.loads((tmp_path / "ap.json").read_text())["AP50"] == pytest.approx(0.8)


def test_results_json(tmp_path):
    dets = {3: [Detection(box(1, 2, 4, 6), 0.75)]}
    assert detections_to_results(dets) == [{"image_id": 3, "category_id": 0, "bbox": [1, 2, 3, 4], "score": 0.75}]
    save_results(tmp_path / "r.json", dets)
    assert len(json.loads((tmp_path / "r.json").read_text())) == 1
