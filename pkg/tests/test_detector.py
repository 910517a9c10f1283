import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from doda import Detector
from doda.cocoeval import ApReport, Detection
from doda.Detector import DetectorModel, build_targets, decode, fine_tune, nms, predict, train, yolo_score
from doda.errors import EmptyDatasetError
from doda.layout import BoundingBox, LayoutSpec
from doda.synthbench import DEFAULT_DOMAINS, gen_scene


def scenes(n, size=16, seed=0):
    rng = np.random.default_rng(seed)
    samples = [gen_scene(DEFAULT_DOMAINS[0], rng, size) for _ in range(n)]
    return np.stack([s.image for s in samples]), [s.layout for s in samples]


def test_targets_peak_at_box_centers():
    spec = LayoutSpec(16, 16, [BoundingBox(0, 4, 4, 8, 10)])
    t = build_targets([spec], 16)
    assert t.heat.shape == (1, 1, 8, 8)
    assert t.num_pos == 1
    assert t.heat[0, 0, 3, 3] == 1.0
    np.testing.assert_allclose(t.size[0, :, 3, 3], np.log([4, 6]))
    np.testing.assert_allclose(t.offset[0, :, 3, 3], [0.0, 0.5])


def test_decode_recovers_a_box():
    heat = np.zeros((1, 8, 8))
    heat[0, 3, 3] = 0.9
    size = np.zeros((2, 8, 8))
    size[:, 3, 3] = np.log([4, 6])
    offset = np.zeros((2, 8, 8))
    offset[:, 3, 3] = [0.0, 0.5]
    dets = decode(heat, size, offset, image_size=16)
    assert len(dets) == 1
    b = dets[0].box
    assert (b.x_min, b.y_min, b.x_max, b.y_max) == pytest.approx((4, 4, 8, 10))
    assert dets[0].score == pytest.approx(0.9)


def test_decode_below_threshold_is_empty():
    zeros = np.zeros((2, 8, 8))
    assert decode(np.full((1, 8, 8), 0.01), zeros, zeros, image_size=16) == []


def test_decode_clips_to_the_image():
    heat = np.zeros((1, 8, 8))
    heat[0, 0, 0] = 0.8
    size = np.full((2, 8, 8), np.log(6.0))
    dets = decode(heat, size, np.zeros((2, 8, 8)), image_size=16)
    assert dets[0].box.x_min == 0.0 and dets[0].box.y_min == 0.0


def test_nms_keeps_the_best_of_overlapping_boxes():
    a = Detection(BoundingBox(0, 0, 0, 10, 10), 0.9)
    b = Detection(BoundingBox(0, 1, 1, 11, 11), 0.8)
    c = Detection(BoundingBox(0, 20, 20, 30, 30), 0.7)
    assert nms([b, c, a], iou=0.5) == [a, c]
    assert nms([], iou=0.5) == []


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(2, 10), st.integers(2, 10)),
                max_size=10), st.randoms())
def test_nms_ignores_input_order(corners, random):
    scores = random.sample(range(1, 1000), len(corners))
    dets = [Detection(BoundingBox(0, x, y, x + w, y + h), s / 1000) for (x, y, w, h), s in zip(corners, scores)]
    shuffled = list(dets)
    random.shuffle(shuffled)
    assert nms(shuffled, iou=0.5) == nms(dets, iou=0.5)


def test_training_lowers_the_loss():
    images, layouts = scenes(8)
    model = train(DetectorModel(width=4, seed=0), images, layouts, epochs=15, lr=5e-3, batch_size=4)
    losses = model.last_losses
    assert len(losses) == 30
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_training_needs_data():
    with pytest.raises(EmptyDatasetError):
        train(DetectorModel(width=4), np.zeros((0, 16, 16, 3)), [], epochs=1)


def test_fine_tune_on_nothing_changes_nothing():
    model = DetectorModel(width=4)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    assert fine_tune(model, [], []) is model
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_copy_is_independent():
    model = DetectorModel(width=4)
    clone = model.copy()
    clone.stem.weight.data += 1.0
    assert not np.allclose(model.stem.weight.data, clone.stem.weight.data)


def test_save_load(tmp_path):
    model = DetectorModel(width=4, seed=2)
    model.save(tmp_path / "det.ckpt")
    loaded = DetectorModel.load(tmp_path / "det.ckpt")
    np.testing.assert_allclose(loaded.heat.bias.data, model.heat.bias.data, rtol=1e-6)


def test_predict_returns_one_list_per_image():
    images, _ = scenes(3)
    out = predict(DetectorModel(width=4), images, score_thresh=0.0)
    assert len(out) == 3
    assert all(len(d) <= 100 for d in out)


def test_yolo_score_plumbing(monkeypatch):
    layouts = scenes(4)[1]

    def oracle_predict(judge, images, score_thresh, nms_iou):
        return [[Detection(b, 0.9) for b in spec.boxes] for spec in layouts]

    monkeypatch.setattr(Detector, "predict", oracle_predict)
    report = yolo_score(lambda specs: np.zeros((len(specs), 16, 16, 3)), layouts, DetectorModel(width=4), 16)
    assert isinstance(report, ApReport)
    assert report.AP == pytest.approx(1.0)
    with pytest.raises(EmptyDatasetError):
        yolo_score(lambda specs: None, [], DetectorModel(width=4), 16)
