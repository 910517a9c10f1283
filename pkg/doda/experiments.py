"""End-to-end pipeline: corpus, two-stage diffusion training, generation and adaptation.

:class:`Experiment` owns one run directory. Its stages cache what they
produce (checkpoints under ``<out>/checkpoints``) so later stages and sweeps
reuse earlier work:

.. code-block:: text

    gen-corpus -> pretrain (domain only, unlabeled) -> posttrain (dual, labeled)
                                                     -> sample / adapt / ablate / eval

Adaptation never reads target-domain labels. It draws reference images from
the target domain's unlabeled images and layouts from the source training
set, generates images, and fine-tunes a copy of the source-trained detector
on them. Target labels are read only by the final AP evaluation.
"""

import dataclasses
import hashlib
import logging
import time
from pathlib import Path

import numpy as np
import pandas as pd

from doda import Detector, diffmath as dm, sde
from doda.Adam import Adam
from doda.cocoeval import ApReport, evaluate_ap, save_results
from doda.conditioning import AugmentationPolicy, StatsDomainEncoder, asymmetric_augment, sample_reference
from doda.config import RunConfig, canonical_json, substream
from doda.errors import ConfigError, EmptyDatasetError, EmptyPoolError, ScheduleError
from doda.layout import (LayoutSpec, flip_layout, overlap_graph, render_single_class, render_uncoded, save_coco,
                         rotate_layout90, save_png)
from doda.metrics import embed_images, feature_similarity, frechet_distance
from doda.ReportPlotter import ReportPlotter, loss_decreased
from doda.synthbench import DEFAULT_DOMAINS, UNLABELED_SPLIT, build_corpus, default_plans, load_split
from doda.TrainTask import TrainTask
from doda.UNet import PRESETS, DiffusionModel, FusionPlacement, images_to_model, layouts_to_model, model_to_images

logger = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoints"
DIGEST_CHARS = 12
#: Config sections a trained diffusion model depends on.
DIFFUSION_SECTIONS = ("schedule", "unet", "encoder", "training", "corpus")
DETECTOR_SECTIONS = ("detector", "corpus")
RENDERERS = {"coded": render_single_class, "uncoded": render_uncoded}
ABLATIONS = ("fusion", "channel-coding", "refpool", "pretrain-size", "image-count")


def resample_layouts(source, n: int, rng) -> list:
    """Draw ``n`` layouts from source layouts, each under a random quarter turn and flip."""
    source = [s for s in source if s is not None]
    if not source:
        raise EmptyDatasetError("no source layouts to resample")
    out = []
    for _ in range(n):
        spec = source[int(rng.integers(0, len(source)))]
        spec = rotate_layout90(spec, int(rng.integers(0, 4)))
        if rng.random() < 0.5:
            spec = flip_layout(spec, horizontal=True)
        out.append(spec)
    return out


def diffusion_steps(model: DiffusionModel, images, layouts, encoder, schedule, loss_cfg, lr: float,
                    batch_size: int, rng, renderer, freeze_domain_branch: bool = False):
    """Generator of diffusion training steps on asymmetrically augmented views.

    Each batch item contributes a target view (the denoising input, with its
    transformed layout) and a reference view (domain tokens).
    """
    opt = Adam(model.trainable_parameters(freeze_domain_branch), lr=lr)
    policy = AugmentationPolicy()
    n = len(images)
    size = images[0].shape[0]
    empty = LayoutSpec(size, size, [])
    while True:
        idx = rng.integers(0, n, size=batch_size)
        targets, refs, rasters = [], [], []
        for i in idx:
            spec = layouts[i] if layouts is not None else empty
            target, tlayout, reference = asymmetric_augment(images[i], spec, rng, policy)
            targets.append(target)
            refs.append(reference)
            if loss_cfg.kind == "dual":
                rasters.append(renderer(tlayout))
        batch = sde.Batch(
            x0=images_to_model(np.stack(targets)),
            domain=encoder.encode_batch(refs),
            layout=layouts_to_model(np.stack(rasters)) if rasters else None,
        )
        model.zero_grad()
        loss = sde.loss(model, batch, schedule, loss_cfg, rng)
        dm.backward(loss, params=opt.params)
        opt.step()
        yield loss.item()


class Experiment:
    """Stages of one run, sharing a config, a corpus and an output directory.

    Args:
        config: Full run configuration.
        progress: Show progress bars.
    """

    def __init__(self, config: RunConfig, progress: bool = False):
        self.config = config
        self.progress = progress
        self.out = config.out_dir
        self.root = config.corpus_path
        enc = config.encoder
        self.encoder = StatsDomainEncoder(grid=enc.grid, bins=enc.bins, d1=enc.d1, seed=enc.seed)
        try:
            self.schedule = sde.NoiseSchedule(T=config.schedule.T, beta_min=config.schedule.beta_min,
                                              beta_max=config.schedule.beta_max,
                                              lambda_kind=config.schedule.lambda_kind,
                                              rescale=config.schedule.rescale)
        except ScheduleError as exc:
            raise ConfigError(f"schedule: {exc}") from exc
        self.plotter = ReportPlotter(self.out)
        self.dtype = np.dtype(config.training.precision).type
        self.timings = {}
        self._splits = {}

    # ------------------------------------------------------------------ data

    def checkpoint(self, name: str, sections=DIFFUSION_SECTIONS, **extra) -> Path:
        """Cache path for a trained stage.

        The file name carries a digest of the seed, the config sections the
        stage depends on and any ``extra`` stage arguments.
        """
        data = self.config.to_dict()
        key = {"seed": self.config.seed, **{s: data[s] for s in sections}, **extra}
        digest = hashlib.sha256(canonical_json(key).encode("utf-8")).hexdigest()[:DIGEST_CHARS]
        path = self.out / CHECKPOINT_DIR
        path.mkdir(parents=True, exist_ok=True)
        return path / f"{name}-{digest}.ckpt"

    def gen_corpus(self) -> dict:
        cc = self.config.corpus
        specs = [s for s in DEFAULT_DOMAINS if s.domain_id in set(cc.train_domains) | {cc.target_domain}]
        maps = build_corpus(self.root, specs, default_plans(cc), self.config.seed, cc.image_size)
        return {name: len(m) for name, m in maps.items()}

    def split(self, name: str) -> list:
        if name not in self._splits:
            self._splits[name] = load_split(self.root, name)
        return self._splits[name]

    def domain_images(self, split: str, domain: int) -> list:
        return [s for s in self.split(split) if s.domain_id == domain]

    def reference_pool(self, domain: int) -> list:
        """Unlabeled images of one domain; labels are never attached."""
        pool = [s.image for s in self.domain_images(UNLABELED_SPLIT, domain)]
        if not pool:
            raise EmptyPoolError(f"no unlabeled images of domain {domain}")
        return pool

    def eval_split(self, domain: int) -> list:
        if domain == self.config.corpus.target_domain:
            return self.split("target_test")
        samples = self.domain_images("source_test", domain)
        if not samples:
            raise EmptyDatasetError(f"no test images of domain {domain}")
        return samples

    # -------------------------------------------------------------- training

    def build_model(self, kind: str, placement: FusionPlacement = None) -> DiffusionModel:
        preset = PRESETS.get(self.config.unet.preset)
        if preset is None:
            raise ConfigError(f"unknown U-Net preset '{self.config.unet.preset}'")
        placement = placement or FusionPlacement.named(self.config.unet.fusion)
        with dm.default_dtype(self.dtype):
            return DiffusionModel(preset, kind=kind, T=self.schedule.T, seed=self.config.seed,
                                  placement=placement)

    def _train(self, model, samples, kind: str, steps: int, name: str, renderer=render_single_class,
               freeze: bool = False) -> list:
        tc = self.config.training
        images = [s.image for s in samples]
        layouts = [s.layout for s in samples] if kind == "dual" else None
        loss_cfg = sde.LossConfig(kind=kind, dropout=tc.dropout)
        with dm.default_dtype(self.dtype):
            task = TrainTask(diffusion_steps, model, images, layouts, self.encoder, self.schedule, loss_cfg,
                             tc.lr, tc.batch_size, substream(self.config.seed, name), renderer, freeze,
                             name=name, steps=steps, progress=self.progress)
            losses = task.run()
        self.timings[name] = task.total_time
        if steps and not loss_decreased(losses):
            logger.warning("%s: smoothed loss did not decrease over %d steps", name, steps)
        return losses

    def pretrain_samples(self, fraction: float = 1.0) -> list:
        """Labeled images plus ``fraction`` of the additional unlabeled ones."""
        labeled = self.split("train")
        names = {s.file_name for s in labeled}
        extra = [s for s in self.split(UNLABELED_SPLIT) if s.file_name not in names]
        keep = int(round(fraction * len(extra)))
        order = substream(self.config.seed, "pretrain/subset").permutation(len(extra))[:keep]
        return labeled + [extra[i] for i in sorted(order)]

    def pretrain(self, fraction: float = 1.0, name: str = "pretrain") -> Path:
        """Domain-conditioned model on unlabeled images."""
        path = self.checkpoint(name, fraction=float(fraction))
        if path.exists():
            return path
        model = self.build_model("domain")
        losses = self._train(model, self.pretrain_samples(fraction), "domain",
                             self.config.training.pretrain_steps, name)
        model.save(path)
        self.plotter.loss_curves(f"loss_{name}", {name: losses})
        return path

    def posttrain(self, init=None, placement: FusionPlacement = None, coding: str = "coded",
                  name: str = "posttrain") -> Path:
        """Dual-conditioned model on labeled images, initialised from ``init`` when given."""
        path = self.checkpoint(name, init=Path(init).name if init is not None else None,
                               placement=dataclasses.asdict(placement) if placement else None, coding=coding)
        if path.exists():
            return path
        model = self.build_model("dual", placement)
        if init is not None:
            model.init_from(init)
        tc = self.config.training
        losses = self._train(model, self.split("train"), "dual", tc.posttrain_steps, name,
                             renderer=RENDERERS[coding], freeze=tc.freeze_domain_branch)
        model.save(path)
        self.plotter.loss_curves(f"loss_{name}", {name: losses})
        return path

    def load_model(self, path) -> DiffusionModel:
        with dm.default_dtype(self.dtype):
            return DiffusionModel.load(path)

    def baseline_detector(self) -> Detector.DetectorModel:
        """Detector trained on the labeled source images (cached)."""
        path = self.checkpoint("detector_baseline", DETECTOR_SECTIONS)
        if path.exists():
            with dm.default_dtype(self.dtype):
                return Detector.DetectorModel.load(path)
        dc = self.config.detector
        samples = self.split("train")
        with dm.default_dtype(self.dtype):
            model = Detector.DetectorModel(width=dc.width, seed=self.config.seed)
            start = time.perf_counter()
            Detector.train(model, np.stack([s.image for s in samples]), [s.layout for s in samples],
                           dc.epochs, lr=dc.lr, batch_size=dc.batch_size, seed=self.config.seed,
                           progress=self.progress)
        self.timings["detector_baseline"] = time.perf_counter() - start
        model.save(path)
        return model

    # ------------------------------------------------------------ generation

    def generate(self, model: DiffusionModel, layouts, references, rng, coding: str = "coded",
                 paired: bool = False, null_domain: bool = False):
        """One image per layout.

        Args:
            references: Reference pool; with ``paired`` the i-th reference
                goes with the i-th layout, otherwise each draw is uniform.
            null_domain: Feed all-zero domain tokens (the dropped condition).

        Returns:
            tuple: ``(images, references used)``.
        """
        tc = self.config.training
        size = model.config.image_size
        mode = tc.sample_mode
        stride = tc.sample_stride if mode == "deterministic" else 1
        images, used = [], []
        for start in range(0, len(layouts), tc.sample_batch):
            chunk = layouts[start:start + tc.sample_batch]
            if paired:
                refs = list(references[start:start + len(chunk)])
            else:
                refs = [sample_reference(references, rng) for _ in chunk]
            tokens = self.encoder.encode_batch(refs)
            if null_domain:
                tokens = np.zeros_like(tokens)
            raster = None
            if model.kind == "dual":
                raster = layouts_to_model(np.stack([RENDERERS[coding](spec) for spec in chunk]))
            x = sde.sample(model, self.schedule, (len(chunk), model.config.in_channels, size, size), rng,
                           domain=tokens if model.kind != "uncond" else None, layout=raster,
                           mode=mode, stride=stride)
            images.append(model_to_images(x))
            used.extend(refs)
        return np.concatenate(images), used

    def sample(self, model_path, domain: int, count: int, name: str = "samples") -> Path:
        """Write ``count`` generated images with their layouts as PNG + COCO."""
        model = self.load_model(model_path)
        rng = substream(self.config.seed, f"sample/{domain}")
        layouts = resample_layouts([s.layout for s in self.split("train")], count, rng)
        images, _ = self.generate(model, layouts, self.reference_pool(domain), rng)
        out = self.out / name
        out.mkdir(parents=True, exist_ok=True)
        records = []
        for k, (img, spec) in enumerate(zip(images, layouts)):
            rel = f"gen_d{domain}_{k:05d}.png"
            save_png(out / rel, img)
            records.append((rel, spec))
        save_coco(out / "annotations.json", records, categories=[{"id": 0, "name": "head"}])
        self.plotter.sample_grid(f"{name}_grid", images[:32], layouts[:32])
        return out

    # ------------------------------------------------------------ adaptation

    def adapt(self, model_path, domain: int, seed: int, count: int = None, pool=None,
              tag: str = "generated", null_domain: bool = False) -> dict:
        """Generate ``count`` target-like images, fine-tune the baseline, report both APs.

        The row also carries ``fs``, the feature similarity of each generated
        image to the reference it was drawn with.
        """
        ac = self.config.adapt
        count = ac.num_generated if count is None else count
        model = self.load_model(model_path)
        rng = substream(self.config.seed, f"adapt/{tag}/{domain}/{seed}/{count}")
        layouts = resample_layouts([s.layout for s in self.split("train")], count, rng)
        pool = self.reference_pool(domain) if pool is None else pool
        start = time.perf_counter()
        images, used = self.generate(model, layouts, pool, rng, null_domain=null_domain)
        gen_time = time.perf_counter() - start
        row = self._fine_tune_row(images, layouts, domain, seed, tag, gen_time)
        row["fs"] = feature_similarity(images, np.stack(used), encoder=self.encoder)
        return row

    def _fine_tune_row(self, images, layouts, domain: int, seed: int, tag: str, gen_time: float = 0.0) -> dict:
        dc = self.config.detector
        baseline = self.baseline_detector()
        tuned = baseline.copy()
        start = time.perf_counter()
        Detector.fine_tune(tuned, images, layouts, epochs=dc.finetune_epochs, base_lr=dc.lr,
                           lr_scale=dc.finetune_lr_scale, batch_size=dc.batch_size, seed=seed)
        tune_time = time.perf_counter() - start
        test = self.eval_split(domain)
        test_images = np.stack([s.image for s in test])
        test_layouts = [s.layout for s in test]
        before = Detector.evaluate(baseline, test_images, test_layouts, dc.score_thresh, dc.nms_iou)
        after = Detector.evaluate(tuned, test_images, test_layouts, dc.score_thresh, dc.nms_iou)
        row = {"domain": domain, "seed": seed, "source": tag, "images": len(images),
               "generation_s": gen_time, "finetune_s": tune_time}
        row.update({f"base_{k}": v for k, v in before.to_dict().items()})
        row.update({k: v for k, v in after.to_dict().items()})
        row.update({f"delta_{k}": v for k, v in after.delta(before).items()})
        logger.info("adapt %s domain %d seed %d: AP50 %.3f -> %.3f", tag, domain, seed,
                    before.AP50, after.AP50)
        return row

    def real_target_row(self, domain: int, seed: int, count: int) -> dict:
        """Upper-bound control: fine-tune on labeled real images of the target domain."""
        real = self.split("target_oracle")[:count]
        return self._fine_tune_row(np.stack([s.image for s in real]), [s.layout for s in real], domain,
                                   seed, "real")

    def adapt_table(self, model_path, domains, with_real: bool = True) -> pd.DataFrame:
        """Per-domain baseline vs adapted AP, seeds as rows, plus an average row."""
        rows = []
        target = self.config.corpus.target_domain
        for domain in domains:
            for seed in self.config.adapt.seeds:
                rows.append(self.adapt(model_path, domain, seed))
                if with_real and domain == target:
                    rows.append(self.real_target_row(domain, seed, self.config.adapt.num_generated))
        df = pd.DataFrame(rows)
        generated = df[df["source"] == "generated"]
        avg = generated.drop(columns=["source"]).mean(numeric_only=True).to_dict()
        avg.update({"domain": "average", "source": "generated"})
        df = pd.concat([df, pd.DataFrame([avg])], ignore_index=True)
        self.plotter.save_table("adapt", df)
        return df

    # ------------------------------------------------------------- ablations

    def yolo_score(self, model_path, layouts, references, seed: int, coding: str = "coded") -> ApReport:
        judge = self.baseline_detector()
        model = self.load_model(model_path)
        rng = substream(self.config.seed, f"yolo/{Path(model_path).stem}/{coding}/{seed}")
        dc = self.config.detector

        def generate(specs):
            return self.generate(model, specs, references, rng, coding=coding, paired=True)[0]

        return Detector.yolo_score(generate, layouts, judge, self.config.corpus.image_size, dc.score_thresh,
                                   dc.nms_iou)

    def yolo_inputs(self, overlap_only: bool = False):
        """Source test layouts with their own images as references."""
        samples = self.split("source_test")
        if overlap_only:
            heavy = [s for s in samples if overlap_graph(s.layout).max_degree() > 0]
            samples = heavy or samples
        return [s.layout for s in samples], [s.image for s in samples]

    def ablate(self, kind: str) -> pd.DataFrame:
        if kind not in ABLATIONS:
            raise ConfigError(f"unknown ablation '{kind}'")
        ac = self.config.adapt
        target = self.config.corpus.target_domain
        pre = self.pretrain()
        rows = []
        if kind == "fusion":
            layouts, refs = self.yolo_inputs()
            # "none" is the domain-only model with no layout branch at all.
            for variant in ["none", *ac.fusion_variants]:
                path = pre if variant == "none" else self.posttrain(
                    pre, FusionPlacement.named(variant), name=f"posttrain_{variant}")
                for seed in ac.seeds:
                    ys = self.yolo_score(path, layouts, refs, seed)
                    ad = self.adapt(path, target, seed, tag=variant)
                    rows.append({"fusion": variant, "seed": seed, "yolo_AP50": ys.AP50, "yolo_AP": ys.AP,
                                 "AP50": ad["AP50"], "delta_AP50": ad["delta_AP50"]})
        elif kind == "channel-coding":
            layouts, refs = self.yolo_inputs(overlap_only=True)
            for coding in RENDERERS:
                path = self.posttrain(pre, coding=coding, name=f"posttrain_{coding}")
                for seed in ac.seeds:
                    ys = self.yolo_score(path, layouts, refs, seed, coding=coding)
                    rows.append({"coding": coding, "seed": seed, "yolo_AP50": ys.AP50, "yolo_AP": ys.AP})
        elif kind == "refpool":
            post = self.posttrain(pre)
            full = self.reference_pool(target)
            for size in ac.pool_sizes:
                for draw in range(ac.pool_draws):
                    pool, label = self._reference_subset(full, size, draw)
                    ad = self.adapt(post, target, draw, pool=pool, tag=f"pool{label}", null_domain=size == 0)
                    rows.append({"pool_size": label, "draw": draw, "AP50": ad["AP50"],
                                 "delta_AP50": ad["delta_AP50"], "fs": ad["fs"]})
        elif kind == "pretrain-size":
            one_stage = self.posttrain(None, name="posttrain_one_stage")
            rows.extend(self._stage_rows("one-stage", one_stage, target))
            for fraction in ac.pretrain_fractions:
                tag = f"f{fraction:g}"
                pre_f = self.pretrain(fraction, name=f"pretrain_{tag}")
                post_f = self.posttrain(pre_f, name=f"posttrain_{tag}")
                rows.extend(self._stage_rows(fraction, post_f, target))
        elif kind == "image-count":
            post = self.posttrain(pre)
            for seed in ac.seeds:
                rows.extend(self._image_count_rows(post, target, seed))
        df = pd.DataFrame(rows)
        self.plotter.save_table(f"ablate_{kind}", df)
        self._plot_ablation(kind, df)
        return df

    def _reference_subset(self, full: list, size, draw: int):
        """Pool for one refpool row: ``None`` is the full pool, ``0`` the unconditional row."""
        if size is None or size >= len(full):
            return full, "full"
        if size == 0:
            return full, 0
        if size < 0:
            raise ConfigError(f"reference pool size must be >= 0 or null, got {size}")
        rng = substream(self.config.seed, f"refpool/{size}/{draw}")
        return [full[i] for i in rng.choice(len(full), size=size, replace=False)], size

    def _stage_rows(self, label, path, target) -> list:
        rows = []
        for seed in self.config.adapt.seeds:
            ad = self.adapt(path, target, seed, tag=f"stage_{label}")
            rows.append({"pretrain": label, "seed": seed, "AP50": ad["AP50"], "delta_AP50": ad["delta_AP50"]})
        return rows

    def _image_count_rows(self, path, target, seed) -> list:
        counts = sorted(self.config.adapt.image_counts)
        model = self.load_model(path)
        rng = substream(self.config.seed, f"image-count/{seed}")
        layouts = resample_layouts([s.layout for s in self.split("train")], counts[-1], rng)
        start = time.perf_counter()
        images, _ = self.generate(model, layouts, self.reference_pool(target), rng)
        per_image = (time.perf_counter() - start) / max(len(layouts), 1)
        rows = []
        for n in counts:
            row = self._fine_tune_row(images[:n], layouts[:n], target, seed, f"count{n}", per_image * n)
            rows.append({"images": n, "seed": seed, "AP50": row["AP50"], "delta_AP50": row["delta_AP50"]})
        return rows

    def _plot_ablation(self, kind: str, df: pd.DataFrame) -> None:
        if df.empty:
            return
        if kind == "image-count":
            self.plotter.sweep("image_count", df, "images", "AP50", title="AP50 vs generated images")
        elif kind == "refpool":
            self.plotter.sweep("refpool", df.assign(pool=df["pool_size"].astype(str)), "pool", "AP50",
                               title="AP50 vs reference pool size")

    # ------------------------------------------------------------- metrics

    def feature_similarity_report(self, model_path) -> dict:
        """FS of domain-conditioned vs. null-domain generations against the same references."""
        model = self.load_model(model_path)
        target = self.config.corpus.target_domain
        refs = self.reference_pool(target)
        out = {}
        for seed in self.config.adapt.seeds:
            rng = substream(self.config.seed, f"fs/{seed}")
            n = min(self.config.training.sample_batch, len(refs))
            layouts = resample_layouts([s.layout for s in self.split("train")], n, rng)
            chosen = [refs[i] for i in rng.choice(len(refs), size=n, replace=False)]
            cond, _ = self.generate(model, layouts, chosen, substream(self.config.seed, f"fs/{seed}/gen"),
                                    paired=True)
            null, _ = self.generate(model, layouts, chosen, substream(self.config.seed, f"fs/{seed}/gen"),
                                    paired=True, null_domain=True)
            ref_set = embed_images(chosen, self.encoder, "references")
            out[f"seed{seed}"] = {
                "fs_conditioned": feature_similarity(embed_images(cond, self.encoder), ref_set),
                "fs_unconditioned": feature_similarity(embed_images(null, self.encoder), ref_set),
            }
        return out

    def frechet_report(self, model_path) -> dict:
        """Fréchet distance of generated and source images to real target test images."""
        target = self.config.corpus.target_domain
        real = embed_images([s.image for s in self.split("target_test")], self.encoder, "target_test")
        source = embed_images([s.image for s in self.split("source_test")], self.encoder, "source_test")
        model = self.load_model(model_path)
        rng = substream(self.config.seed, "frechet")
        layouts = resample_layouts([s.layout for s in self.split("train")], len(real), rng)
        images, _ = self.generate(model, layouts, self.reference_pool(target), rng)
        generated = embed_images(images, self.encoder, "generated")
        return {"frechet_generated": frechet_distance(generated, real),
                "frechet_source": frechet_distance(source, real)}

    def ap_report(self, save_detections: bool = True) -> dict:
        det = self.baseline_detector()
        dc = self.config.detector
        out = {}
        for name in ("source_test", "target_test"):
            samples = self.split(name)
            images = np.stack([s.image for s in samples])
            dets = Detector.predict(det, images, dc.score_thresh, dc.nms_iou, dc.max_detections)
            if save_detections:
                self.out.mkdir(parents=True, exist_ok=True)
                save_results(self.out / f"detections_{name}.json",
                             {s.file_name: d for s, d in zip(samples, dets)})
            report = evaluate_ap(dict(enumerate(dets)), dict(enumerate(s.layout for s in samples)),
                                 image_size=images.shape[1])
            out[name] = report.to_dict()
        return out

    def yolo_report(self, dual_path, domain_path) -> dict:
        """YOLO-score of the dual model vs. the layout-blind domain model on the same layouts."""
        layouts, refs = self.yolo_inputs()
        out = {}
        for seed in self.config.adapt.seeds:
            out[f"seed{seed}"] = {
                "dual": self.yolo_score(dual_path, layouts, refs, seed).to_dict(),
                "unconditional": self.yolo_score(domain_path, layouts, refs, seed).to_dict(),
            }
        return out
