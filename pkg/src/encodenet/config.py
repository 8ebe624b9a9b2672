"""Pipeline configuration: a versioned TOML document plus ``key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import tomli

from .errors import ConfigError
from .trainer import TrainConfig

CONFIG_VERSION = 1
TARGET_MODES = ("representative_clustered", "representative_unclustered", "same_image")
HEAD_INITS = ("scratch", "from_baseline")
DATA_SOURCES = ("synthetic", "idx", "cifar10")

STAGE_DEFAULTS = {
    "baseline": TrainConfig(epochs=40, batch_size=32, optimizer="sgd", lr=0.1, weight_decay=1e-4,
                            schedule="cosine"),
    "cae": TrainConfig(epochs=60, batch_size=32, optimizer="adam", lr=1e-3, weight_decay=0.0,
                       schedule="constant"),
    "head": TrainConfig(epochs=40, batch_size=32, optimizer="sgd", lr=0.1, weight_decay=1e-4,
                        schedule="cosine"),
}


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    # None draws (or subsamples) the data with each run's seed, so every
    # seed is an independent replicate; an int pins one dataset for all seeds.
    seed: int | None = None
    # synthetic generator
    num_classes: int = 10
    modes: int = 3
    noise: float = 0.2
    train_per_class: int = 200
    test_per_class: int = 100
    # file-backed sources; ``train_per_class``/``test_per_class`` subsample them (0 keeps all)
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_files: tuple = ()
    test_files: tuple = ()

    def __post_init__(self):
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"data.source must be one of {DATA_SOURCES}, got {self.source!r}")
        object.__setattr__(self, "train_files", tuple(self.train_files))
        object.__setattr__(self, "test_files", tuple(self.test_files))


@dataclass(frozen=True)
class ClusterConfig:
    k_mode: str = "fixed"
    k: int = 3
    k_range: tuple = (1, 2, 3, 4, 5, 6)
    max_iters: int = 100

    def __post_init__(self):
        if self.k_mode not in ("fixed", "elbow"):
            raise ConfigError(f"cluster.k_mode must be 'fixed' or 'elbow', got {self.k_mode!r}")
        if self.k < 1:
            raise ConfigError("cluster.k must be >= 1")
        object.__setattr__(self, "k_range", tuple(int(k) for k in self.k_range))


@dataclass(frozen=True)
class PipelineConfig:
    spec: str = "vgg8_mini"
    data: DataConfig = field(default_factory=DataConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    target_mode: str = "representative_clustered"
    head_init: str = "scratch"
    holdout_fraction: float = 0.1
    seeds: tuple = (0, 1, 2)
    baseline: TrainConfig = STAGE_DEFAULTS["baseline"]
    cae: TrainConfig = STAGE_DEFAULTS["cae"]
    head: TrainConfig = STAGE_DEFAULTS["head"]
    base_dir: str = "."

    def __post_init__(self):
        if self.target_mode not in TARGET_MODES:
            raise ConfigError(f"target_mode must be one of {TARGET_MODES}, got {self.target_mode!r}")
        if self.head_init not in HEAD_INITS:
            raise ConfigError(f"head_init must be one of {HEAD_INITS}, got {self.head_init!r}")
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds:
            raise ConfigError("seeds must be non-empty")
        object.__setattr__(self, "seeds", seeds)
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must lie in [0, 1)")

    @property
    def effective_cluster(self):
        """Clustering as used: the unclustered target mode forces k=1 per class."""
        if self.target_mode == "representative_unclustered":
            return ClusterConfig("fixed", 1, self.cluster.k_range, self.cluster.max_iters)
        return self.cluster

    def with_target_mode(self, mode):
        return replace_config(self, target_mode=mode)

    def to_dict(self):
        d = asdict(self)
        d.pop("base_dir")
        return d

    def resolve_path(self, path):
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


def replace_config(cfg, **changes):
    values = {name: getattr(cfg, name) for name in cfg.__dataclass_fields__}
    values.update(changes)
    return PipelineConfig(**values)


def fingerprint(*parts):
    """Stable short hash of JSON-serializable parts."""
    blob = json.dumps(parts, sort_keys=True, default=_jsonable).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, tuple):
        return list(obj)
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


# -- TOML document ---------------------------------------------------------------------


def parse_override(text):
    """``a.b=value``; the value is read as a TOML literal, else taken as a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = (s.strip() for s in text.split("=", 1))
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key, value


def apply_overrides(doc, overrides):
    doc = copy.deepcopy(doc)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        node = doc
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a table")
        node[leaf] = value
    return doc


def config_from_dict(doc, base_dir="."):
    doc = copy.deepcopy(doc)
    version = doc.pop("version", None)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version {version!r} is not supported (expected {CONFIG_VERSION})")
    try:
        model = doc.pop("model", {})
        pipeline = doc.pop("pipeline", {})
        train = doc.pop("train", {})
        data = DataConfig(**doc.pop("data", {}))
        cluster = ClusterConfig(**doc.pop("cluster", {}))
        stages = {}
        for stage, default in STAGE_DEFAULTS.items():
            stages[stage] = default.replace(**train.pop(stage, {}))
        if train:
            raise ConfigError(f"unknown train stages: {sorted(train)}")
        if doc:
            raise ConfigError(f"unknown config sections: {sorted(doc)}")
        spec = model.pop("spec", PipelineConfig.spec)
        if model:
            raise ConfigError(f"unknown model keys: {sorted(model)}")
        return PipelineConfig(spec=spec, data=data, cluster=cluster, base_dir=str(base_dir), **pipeline, **stages)
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from None


def builtin_config_path(name):
    """Path of a packaged config such as ``desk``, or None."""
    candidate = resources.files("encodenet") / "configs" / f"{name}.toml"
    return Path(str(candidate)) if "/" not in str(name) and candidate.is_file() else None


def load_config(path=None, overrides=()):
    """Read a TOML config (or defaults when ``path`` is None) and apply overrides.

    ``path`` may also name a packaged config, e.g. ``"desk"``.
    """
    if path is None:
        doc, base = {"version": CONFIG_VERSION}, Path.cwd()
    else:
        path = builtin_config_path(path) or Path(path)
        try:
            doc = tomli.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.parent
    return config_from_dict(apply_overrides(doc, overrides), base_dir=base)
