"""Run configuration, random substreams and the append-only run manifest.

A run is described by one :class:`RunConfig`, a tree of dataclasses read
from JSON and adjusted with ``--set dotted.key=value`` flags on the command
line. Every number a command reports is written to ``manifest.jsonl``
together with the SHA-256 of the canonical config, so a result can always be
traced back to the exact settings that produced it.

All randomness derives from ``RunConfig.seed`` through :func:`substream`.
Two runs that differ in one factor draw identical numbers everywhere else.
"""

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from doda.errors import ConfigError

logger = logging.getLogger(__name__)

OUT_ROOT_ENV = "DODA_OUT_ROOT"
DEFAULT_OUT_ROOT = "runs"
MANIFEST_NAME = "manifest.jsonl"


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose under a root seed."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[k:k + 4], "little") for k in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + words))


@dataclass
class ScheduleConfig:
    T: int = 200
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    lambda_kind: str = "noise"
    rescale: bool = False


@dataclass
class UNetSettings:
    preset: str = "desk32"
    fusion: str = "dec"


@dataclass
class EncoderConfig:
    grid: int = 4
    bins: int = 8
    d1: int = 64
    seed: int = 0


@dataclass
class DiffusionTrainConfig:
    batch_size: int = 16
    lr: float = 2e-4
    pretrain_steps: int = 3000
    posttrain_steps: int = 3000
    dropout: float = 0.1
    freeze_domain_branch: bool = False
    precision: str = "float32"
    sample_mode: str = "deterministic"
    sample_stride: int = 4
    sample_batch: int = 25


@dataclass
class DetectorConfig:
    width: int = 16
    lr: float = 2e-3
    epochs: int = 40
    batch_size: int = 16
    finetune_lr_scale: float = 0.1
    finetune_epochs: int = 1
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100


@dataclass
class CorpusConfig:
    image_size: int = 32
    labeled: int = 500
    unlabeled: int = 2000
    target_pool: int = 100
    target_test: int = 100
    train_domains: list = field(default_factory=lambda: [0, 1, 2, 3])
    target_domain: int = 4


@dataclass
class AdaptConfig:
    num_generated: int = 200
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    image_counts: list = field(default_factory=lambda: [50, 100, 200, 400])
    #: 0 is the unconditional row, null the full pool.
    pool_sizes: list = field(default_factory=lambda: [0, 1, 10, 100, None])
    pool_draws: int = 5
    pretrain_fractions: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 1.0])
    fusion_variants: list = field(default_factory=lambda: ["enc", "dec", "both"])


@dataclass
class OracleConfig:
    k: int = 2
    n_y1: int = 3
    n_y2: int = 3
    sigma: float = 0.25
    width: int = 128
    depth: int = 3
    steps: int = 20000
    batch_size: int = 256
    lr: float = 1e-3
    T: int = 100
    rescale: bool = True
    cos_threshold: float = 0.95
    rmse_threshold: float = 0.10
    sample_count: int = 2000


@dataclass
class RunConfig:
    seed: int = 0
    out: str = ""
    corpus_dir: str = ""
    stage: str = ""
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    unet: UNetSettings = field(default_factory=UNetSettings)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    training: DiffusionTrainConfig = field(default_factory=DiffusionTrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def out_dir(self) -> Path:
        return Path(self.out or os.environ.get(OUT_ROOT_ENV, DEFAULT_OUT_ROOT))

    @property
    def corpus_path(self) -> Path:
        return Path(self.corpus_dir) if self.corpus_dir else self.out_dir / "corpus"


def _from_dict(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {cls.__name__}, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key '{key}' in {cls.__name__}")
        ftype = fields[key].type
        if dataclasses.is_dataclass(ftype):
            kwargs[key] = _from_dict(ftype, value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data)


def apply_override(config: RunConfig, assignment: str) -> None:
    """Apply one ``dotted.key=value`` override; values are parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = key.strip().split(".")
    for part in parts[:-1]:
        if not hasattr(node, part) or not dataclasses.is_dataclass(getattr(node, part)):
            raise ConfigError(f"unknown config section '{part}' in '{key}'")
        node = getattr(node, part)
    leaf = parts[-1]
    if leaf not in {f.name for f in dataclasses.fields(node)}:
        raise ConfigError(f"unknown config key '{key}'")
    setattr(node, leaf, value)


def load_config(path=None, overrides=(), out=None) -> RunConfig:
    """Read a JSON config (or defaults), apply overrides and the output root."""
    if path:
        try:
            with open(path) as fh:
                config = config_from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    else:
        config = RunConfig()
    for assignment in overrides:
        apply_override(config, assignment)
    if out:
        config.out = str(out)
    return config


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonical config JSON, output location excluded."""
    data = config.to_dict()
    data.pop("out", None)
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def content_hash(path) -> str:
    """Git-style blob hash of a file, or of the sorted listing of a directory."""
    path = Path(path)
    if path.is_dir():
        lines = [f"{p.relative_to(path).as_posix()} {content_hash(p)}"
                 for p in sorted(path.rglob("*")) if p.is_file()]
        payload = "\n".join(lines).encode("utf-8")
    else:
        payload = path.read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


class RunManifest:
    """Append-only JSON-lines log of every command run under an output root."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / MANIFEST_NAME

    def append(self, command: str, config: RunConfig, inputs=(), metrics=None, timings=None,
               tables=None) -> dict:
        entry = {
            "command": command,
            "config_hash": config_hash(config),
            "seed": config.seed,
            "inputs": {str(p): content_hash(p) for p in inputs if Path(p).exists()},
            "metrics": metrics or {},
            "timings": timings or {},
            "tables": tables or {},
            "recorded_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        logger.info("manifest entry '%s' appended to %s", command, self.path)
        return entry

    def entries(self) -> list:
        if not self.path.exists():
            return []
        with open(self.path) as fh:
            return [json.loads(line) for line in fh if line.strip()]
