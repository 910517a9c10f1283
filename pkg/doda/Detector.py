"""Tiny anchor-free detector (center heatmap + size + offset heads).

The network sees the image at full resolution and predicts at stride 2:

* ``heat``: per-class center heatmap logits (sigmoid gives the probability);
* ``size``: ``log`` of the box width and height in pixels;
* ``offset``: sub-cell position of the center.

Training uses the penalty-reduced focal loss on the heatmap plus L1 losses on
size and offset at the object centers. Decoding takes 3x3 local maxima of the
heatmap above a score threshold and removes duplicates with greedy NMS.

It serves two roles: the detector being adapted to a new domain, and the
judge that scores how well generated images follow their layouts.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from doda import diffmath as dm
from doda.Adam import Adam
from doda.cocoeval import Detection, box_iou, evaluate_ap
from doda.config import substream
from doda.errors import EmptyDatasetError
from doda.layers import Conv2d
from doda.TrainTask import TrainTask
from doda.UNet import images_to_model

logger = logging.getLogger(__name__)

STRIDE = 2
#: Initial heatmap bias, a prior probability of 0.1.
HEAT_PRIOR = 0.1
FOCAL_BETA = 4.0
SIZE_WEIGHT = 1.0
OFFSET_WEIGHT = 1.0
PROB_CLAMP = 1e-4


class DetectorModel(dm.Module):
    """Small conv backbone with three 1x1 heads.

    Args:
        width: Channels of the first stage; the stride-2 stages use twice that.
        num_classes: Heatmap channels.
        seed: Seed of the initial weights.
    """

    def __init__(self, width: int = 16, num_classes: int = 1, seed: int = 0):
        rng = substream(seed, "detector")
        self.width = width
        self.num_classes = num_classes
        self.seed = seed
        self.stem = Conv2d(3, width, rng)
        self.down = Conv2d(width, 2 * width, rng, stride=STRIDE)
        self.body1 = Conv2d(2 * width, 2 * width, rng)
        self.body2 = Conv2d(2 * width, 2 * width, rng)
        self.heat = Conv2d(2 * width, num_classes, rng, kernel=1)
        self.heat.weight.data *= 0.1
        self.heat.bias.data[:] = np.log(HEAT_PRIOR / (1 - HEAT_PRIOR))
        self.size = Conv2d(2 * width, 2, rng, kernel=1)
        self.offset = Conv2d(2 * width, 2, rng, kernel=1)

    def forward(self, x):
        h = dm.silu(self.stem(x))
        h = dm.silu(self.down(h))
        h = dm.silu(self.body1(h))
        h = dm.add(h, dm.silu(self.body2(h)))
        return self.heat(h), self.size(h), self.offset(h)

    def save(self, path) -> None:
        dm.save_parameters(path, self, meta={"width": self.width, "num_classes": self.num_classes,
                                             "seed": self.seed})

    @classmethod
    def load(cls, path) -> "DetectorModel":
        state, meta = dm.load_parameters(path, with_meta=True)
        model = cls(width=meta["width"], num_classes=meta["num_classes"], seed=meta["seed"])
        model.load_state_dict(state)
        return model

    def copy(self) -> "DetectorModel":
        clone = DetectorModel(self.width, self.num_classes, self.seed)
        clone.load_state_dict(self.state_dict())
        return clone


@dataclass
class Targets:
    heat: np.ndarray
    size: np.ndarray
    offset: np.ndarray
    mask: np.ndarray

    @property
    def num_pos(self) -> int:
        return int(self.mask.sum())


def build_targets(layouts, image_size: int, num_classes: int = 1) -> Targets:
    """Gaussian center heatmaps and regression targets at stride 2."""
    n, out = len(layouts), image_size // STRIDE
    heat = np.zeros((n, num_classes, out, out))
    size = np.zeros((n, 2, out, out))
    offset = np.zeros((n, 2, out, out))
    mask = np.zeros((n, 1, out, out))
    ys, xs = np.mgrid[0:out, 0:out]
    for k, spec in enumerate(layouts):
        for b in spec.boxes:
            cx = (b.x_min + b.x_max) / 2 / STRIDE
            cy = (b.y_min + b.y_max) / 2 / STRIDE
            ix, iy = min(int(cx), out - 1), min(int(cy), out - 1)
            sigma = max(max(b.width, b.height) / STRIDE / 6.0, 0.5)
            g = np.exp(-((xs - ix) ** 2 + (ys - iy) ** 2) / (2 * sigma ** 2))
            heat[k, b.category_id] = np.maximum(heat[k, b.category_id], g)
            size[k, :, iy, ix] = np.log([b.width, b.height])
            offset[k, :, iy, ix] = (cx - ix, cy - iy)
            mask[k, 0, iy, ix] = 1.0
    return Targets(heat, size, offset, mask)


def detection_loss(model: DetectorModel, images: np.ndarray, targets: Targets) -> dm.Tensor:
    """Focal heatmap loss (squared modulating factor) plus masked L1 size and offset losses, per positive."""
    dtype = model.stem.weight.dtype
    heat_logits, size, offset = model(dm.Tensor(images_to_model(images).astype(dtype)))
    p = dm.clamp(dm.sigmoid(heat_logits), PROB_CLAMP, 1 - PROB_CLAMP)
    y = targets.heat
    pos = (y == 1.0).astype(dtype)
    neg_w = ((1.0 - y) ** FOCAL_BETA * (1.0 - pos)).astype(dtype)
    one_minus_p = dm.sub(1.0, p)
    pos_term = dm.mul(dm.mul(dm.mul(one_minus_p, one_minus_p), dm.log(p)), dm.Tensor(pos))
    neg_term = dm.mul(dm.mul(dm.mul(p, p), dm.log(one_minus_p)), dm.Tensor(neg_w))
    norm = 1.0 / max(targets.num_pos, 1)
    focal = dm.scale(dm.reduce_sum(dm.add(pos_term, neg_term)), -norm)
    m2 = dm.Tensor(np.repeat(targets.mask, 2, axis=1).astype(dtype))
    size_l1 = dm.reduce_sum(dm.mul(dm.absolute(dm.sub(size, dm.Tensor(targets.size.astype(dtype)))), m2))
    off_l1 = dm.reduce_sum(dm.mul(dm.absolute(dm.sub(offset, dm.Tensor(targets.offset.astype(dtype)))), m2))
    return dm.add(focal, dm.scale(dm.add(dm.scale(size_l1, SIZE_WEIGHT), dm.scale(off_l1, OFFSET_WEIGHT)), norm))


def train_steps(model: DetectorModel, images: np.ndarray, layouts, epochs: int, lr: float,
                batch_size: int, rng):
    """Generator: one Adam step per batch, yielding the batch loss."""
    opt = Adam(model.parameters(), lr=lr)
    targets = build_targets(layouts, images.shape[1], model.num_classes)
    n = len(images)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = Targets(targets.heat[idx], targets.size[idx], targets.offset[idx], targets.mask[idx])
            opt.zero_grad()
            loss = detection_loss(model, images[idx], batch)
            dm.backward(loss, params=opt.params)
            opt.step()
            yield loss.item()


def train(model: DetectorModel, images, layouts, epochs: int, lr: float = 2e-3, batch_size: int = 16,
          seed: int = 0, name: str = "detector", progress: bool = False) -> DetectorModel:
    """Fit the detector in place on labeled images.

    Raises:
        EmptyDatasetError: If there are no images.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise EmptyDatasetError("detector training needs at least one labeled image")
    task = TrainTask(train_steps, model, images, list(layouts), epochs, lr, batch_size,
                     substream(seed, name), name=name, progress=progress)
    task.run()
    model.last_losses = task.losses
    return model


def fine_tune(model: DetectorModel, images, layouts, epochs: int = 1, base_lr: float = 2e-3,
              lr_scale: float = 0.1, batch_size: int = 16, seed: int = 0) -> DetectorModel:
    """A short pass at a reduced learning rate; an empty set leaves the model unchanged."""
    if len(images) == 0:
        logger.warning("fine-tune called with no images; detector left unchanged")
        return model
    return train(model, images, layouts, epochs, lr=base_lr * lr_scale, batch_size=batch_size,
                 seed=seed, name="fine-tune")


def nms(detections, iou: float) -> list:
    """Greedy non-maximum suppression; highest score first."""
    order = sorted(detections, key=lambda d: -d.score)
    kept = []
    for det in order:
        box = np.array([[det.box.x_min, det.box.y_min, det.box.x_max, det.box.y_max]])
        if kept:
            others = np.array([[k.box.x_min, k.box.y_min, k.box.x_max, k.box.y_max] for k in kept])
            if np.any(box_iou(box, others)[0] > iou):
                continue
        kept.append(det)
    return kept


def decode(heat: np.ndarray, size: np.ndarray, offset: np.ndarray, image_size: int,
           score_thresh: float = 0.05, nms_iou: float = 0.5, max_dets: int = 100) -> list:
    """Detections from one image's head outputs.

    Args:
        heat: ``(C, h, w)`` probabilities.
        size: ``(2, h, w)`` log width/height.
        offset: ``(2, h, w)`` center offsets in cells.
    """
    from doda.layout import BoundingBox

    peaks = (heat == maximum_filter(heat, size=(1, 3, 3), mode="constant", cval=-np.inf)) & (heat > score_thresh)
    dets = []
    for c, iy, ix in zip(*np.nonzero(peaks)):
        cx = (ix + offset[0, iy, ix]) * STRIDE
        cy = (iy + offset[1, iy, ix]) * STRIDE
        w, h = np.exp(np.clip(size[:, iy, ix], -5.0, np.log(4 * image_size)))
        x0, y0 = max(cx - w / 2, 0.0), max(cy - h / 2, 0.0)
        x1, y1 = min(cx + w / 2, float(image_size)), min(cy + h / 2, float(image_size))
        if x1 - x0 <= 1e-6 or y1 - y0 <= 1e-6:
            continue
        dets.append(Detection(BoundingBox(int(c), float(x0), float(y0), float(x1), float(y1)),
                              float(heat[c, iy, ix])))
    return nms(dets, nms_iou)[:max_dets]


def predict(model: DetectorModel, images, score_thresh: float = 0.05, nms_iou: float = 0.5,
            max_dets: int = 100, batch_size: int = 64) -> list:
    """Detections for each image of ``images`` (``N x H x W x 3``)."""
    images = np.asarray(images)
    out = []
    dtype = model.stem.weight.dtype
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        with dm.no_grad():
            heat, size, offset = model(dm.Tensor(images_to_model(chunk).astype(dtype)))
        prob = 1.0 / (1.0 + np.exp(-heat.data.astype(np.float64)))
        for k in range(len(chunk)):
            out.append(decode(prob[k], size.data[k].astype(np.float64), offset.data[k].astype(np.float64),
                              images.shape[1], score_thresh, nms_iou, max_dets))
    return out


def evaluate(model: DetectorModel, images, layouts, score_thresh: float = 0.05, nms_iou: float = 0.5):
    """AP of the detector on labeled images."""
    dets = predict(model, images, score_thresh, nms_iou)
    return evaluate_ap(dict(enumerate(dets)), dict(enumerate(layouts)), image_size=np.asarray(images).shape[1])


def yolo_score(generate, layouts, judge: DetectorModel, image_size: int, score_thresh: float = 0.05,
               nms_iou: float = 0.5):
    """AP of the judge's detections on generated images against the layouts they were made from.

    Args:
        generate: Callable mapping a list of layouts to ``N x H x W x 3`` images,
            one per layout.
        layouts: Layouts to condition on.
        judge: Detector trained on real data of the same family.

    Raises:
        EmptyDatasetError: If ``layouts`` is empty.
    """
    layouts = list(layouts)
    if not layouts:
        raise EmptyDatasetError("yolo score needs at least one layout")
    images = np.asarray(generate(layouts))
    dets = predict(judge, images, score_thresh, nms_iou)
    return evaluate_ap(dict(enumerate(dets)), dict(enumerate(layouts)), image_size=image_size)
