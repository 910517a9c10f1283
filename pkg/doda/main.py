"""Command-line entry point.

``doda <command> [options]`` runs one pipeline stage inside a run directory
and appends its results to ``<out>/manifest.jsonl``.

Overview
--------

* ``gen-corpus``: write the synthetic multi-domain benchmark.
* ``layout-render`` / ``tile``: layout tools on COCO annotations.
* ``pretrain``: domain-conditioned diffusion on unlabeled images.
* ``posttrain``: dual-conditioned diffusion on labeled images.
* ``sample``: generate labeled images for a domain.
* ``adapt``: generate target-domain data and fine-tune the detector.
* ``ablate``: fusion placement, channel coding, reference pool, pre-training
  size, generated image count.
* ``verify``: score-objective oracle, gradient checks, layout properties.
* ``eval``: Feature Similarity, Fréchet distance, AP, YOLO-score.

Every command takes ``--config`` (JSON), any number of ``--set key=value``
overrides, ``--out`` (or ``DODA_OUT_ROOT``) and ``--seed``.

Exit codes: 0 on success, 1 when a verification fails, 2 on a usage or
configuration error, 3 when a stage fails at run time (divergence, empty
pools, bad shapes and the like).
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from doda import __version__, diffmath as dm
from doda.config import RunManifest, load_config
from doda.errors import ConfigError, DodaError, VerificationError
from doda.experiments import ABLATIONS, RENDERERS, Experiment
from doda.layout import load_coco, load_png, render_multi_class, save_coco, save_png, tile

logger = logging.getLogger(__name__)

LOG_FORMAT = "[%(levelname)s] %(message)s"
VERIFY_KINDS = ("prop1", "gradcheck", "layout", "all")
EVAL_KINDS = ("fs", "frechet", "ap", "yolo-score")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. training.lr=1e-4")
    common.add_argument("--out", help="run output directory (default $DODA_OUT_ROOT or ./runs)")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging and progress bars")

    parser = argparse.ArgumentParser(prog="doda", description="Dual-conditioned diffusion for detection data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-corpus", parents=[common], help="write the synthetic benchmark")

    p = sub.add_parser("layout-render", parents=[common], help="render layout images from COCO annotations")
    p.add_argument("annotations")
    p.add_argument("--coding", choices=sorted(RENDERERS) + ["multi-class"], default="coded")
    p.add_argument("--dest", required=True)

    p = sub.add_parser("tile", parents=[common], help="cut an image and its boxes into overlapping tiles")
    p.add_argument("image")
    p.add_argument("annotations")
    p.add_argument("--file-name", help="annotation entry of the image (default: its base name)")
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--stride", type=int, default=256)
    p.add_argument("--dest", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="domain-conditioned pre-training")
    p.add_argument("--fraction", type=float, default=1.0, help="share of the extra unlabeled images")

    p = sub.add_parser("posttrain", parents=[common], help="dual-conditioned post-training")
    p.add_argument("--one-stage", action="store_true", help="start from scratch instead of the pretrain checkpoint")

    p = sub.add_parser("sample", parents=[common], help="generate labeled images")
    p.add_argument("--domain", type=int)
    p.add_argument("--count", type=int, default=64)

    p = sub.add_parser("adapt", parents=[common], help="adapt the detector to a domain")
    p.add_argument("--domain", type=int)
    p.add_argument("--all-domains", action="store_true", help="adapt to every domain in turn")

    p = sub.add_parser("ablate", parents=[common], help="run an ablation sweep")
    p.add_argument("kind", choices=ABLATIONS)

    p = sub.add_parser("verify", parents=[common], help="run verification suites")
    p.add_argument("kind", choices=VERIFY_KINDS)
    p.add_argument("--withhold-y2", action="store_true", help="negative control for prop1")

    p = sub.add_parser("eval", parents=[common], help="metric reports")
    p.add_argument("kind", choices=EVAL_KINDS)
    return parser


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, force=True)


def _layout_render(args, exp):
    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    records = load_coco(args.annotations)
    for name, spec in records:
        if args.coding == "multi-class":
            raster = render_multi_class(spec)
        else:
            raster = RENDERERS[args.coding](spec)
        save_png(dest / Path(name).name, raster)
    return {"rendered": len(records)}, {}, [args.annotations]


def _tile(args, exp):
    name = args.file_name or Path(args.image).name
    layouts = {Path(k).name if args.file_name is None else k: v for k, v in load_coco(args.annotations)}
    if name not in layouts:
        raise ConfigError(f"no annotation entry '{name}' in {args.annotations}")
    tiles = tile(load_png(args.image), layouts[name], tile=args.size, stride=args.stride)
    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    stem = Path(name).stem
    records = []
    for t in tiles:
        rel = f"{stem}_{t.offset[0]}_{t.offset[1]}.png"
        save_png(dest / rel, t.image)
        records.append((rel, t.layout))
    save_coco(dest / "annotations.json", records)
    return {"tiles": len(tiles), "offsets": [list(t.offset) for t in tiles]}, {}, [args.image, args.annotations]


def _verify(args, exp):
    from doda.layout import run_property_suite
    from doda.oracle import verify_prop1

    kinds = ("prop1", "gradcheck", "layout") if args.kind == "all" else (args.kind,)
    metrics, failed = {}, []
    seed = exp.config.seed
    if "gradcheck" in kinds:
        results = dm.run_gradcheck_suite(seed)
        metrics["gradcheck"] = {k: {"passed": r.passed, "max_rel_error": r.max_rel_error}
                                for k, r in results.items()}
        failed += [f"gradcheck:{k}" for k, r in results.items() if not r.passed]
    if "layout" in kinds:
        results = run_property_suite(seed)
        metrics["layout"] = results
        failed += [f"layout:{k}" for k, ok in results.items() if not ok]
    if "prop1" in kinds:
        report = verify_prop1(exp.config.oracle, seed=seed, withhold_y2=args.withhold_y2, progress=exp.progress)
        metrics["prop1"] = report.to_dict()
        exp.timings["prop1"] = report.seconds
        exp.out.mkdir(parents=True, exist_ok=True)
        report.save(exp.out / ("prop1_withheld.json" if args.withhold_y2 else "prop1.json"))
        if not report.passed:
            failed.append("prop1")
    metrics["failed"] = failed
    return metrics, {}, []


def _eval(args, exp):
    if args.kind == "ap":
        return exp.ap_report(), {}, []
    dual = exp.posttrain(exp.pretrain())
    if args.kind == "fs":
        return exp.feature_similarity_report(dual), {}, [dual]
    if args.kind == "frechet":
        return exp.frechet_report(dual), {}, [dual]
    domain_only = exp.pretrain()
    return exp.yolo_report(dual, domain_only), {}, [dual, domain_only]


def run_command(args, exp: Experiment):
    """Run one command. Returns ``(metrics, tables, inputs)``."""
    cfg = exp.config
    target = cfg.corpus.target_domain
    if args.command == "gen-corpus":
        return exp.gen_corpus(), {}, []
    if args.command == "layout-render":
        return _layout_render(args, exp)
    if args.command == "tile":
        return _tile(args, exp)
    if args.command == "pretrain":
        path = exp.pretrain(args.fraction, name="pretrain" if args.fraction == 1.0 else f"pretrain_f{args.fraction:g}")
        return {"checkpoint": str(path)}, {}, [exp.root / "corpus.json"]
    if args.command == "posttrain":
        if args.one_stage:
            path = exp.posttrain(None, name="posttrain_one_stage")
            return {"checkpoint": str(path)}, {}, [exp.root / "corpus.json"]
        init = exp.pretrain()
        path = exp.posttrain(init)
        return {"checkpoint": str(path)}, {}, [init]
    if args.command == "sample":
        model = exp.posttrain(exp.pretrain())
        domain = target if args.domain is None else args.domain
        dest = exp.sample(model, domain, args.count)
        return {"samples": str(dest), "count": args.count}, {}, [model]
    if args.command == "adapt":
        model = exp.posttrain(exp.pretrain())
        if args.all_domains:
            domains = sorted(set(cfg.corpus.train_domains) | {target})
        else:
            domains = [target if args.domain is None else args.domain]
        df = exp.adapt_table(model, domains)
        return {"average": df[df["domain"] == "average"].iloc[0].drop(["domain", "source"]).to_dict()}, \
            {"adapt": df.to_dict(orient="records")}, [model]
    if args.command == "ablate":
        df = exp.ablate(args.kind)
        return {"rows": len(df)}, {args.kind: df.to_dict(orient="records")}, []
    if args.command == "verify":
        return _verify(args, exp)
    if args.command == "eval":
        return _eval(args, exp)
    raise ConfigError(f"unknown command '{args.command}'")


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    return value


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging(args.verbose)
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        config = load_config(args.config, overrides, out=args.out)
        config.stage = args.command
        exp = Experiment(config, progress=args.verbose)
        start = time.perf_counter()
        metrics, tables, inputs = run_command(args, exp)
        exp.timings["total"] = time.perf_counter() - start
        command = " ".join([args.command] + [str(getattr(args, k)) for k in ("kind",) if hasattr(args, k)])
        RunManifest(config.out_dir).append(command, config, inputs=inputs, metrics=_jsonable(metrics),
                                           timings=_jsonable(exp.timings), tables=_jsonable(tables))
        print(json.dumps(_jsonable(metrics), indent=2, sort_keys=True, default=str))
        failed = metrics.get("failed") if isinstance(metrics, dict) else None
        if failed:
            raise VerificationError(f"verification failed: {', '.join(failed)}")
    except VerificationError as exc:
        logger.error("%s", exc)
        return 1
    except ConfigError as exc:
        logger.error("%s", exc)
        return 2
    except DodaError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
