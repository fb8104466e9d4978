"""Pipeline configuration: one JSON document, unknown keys are errors."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

TARGET_KINDS = ("categorical", "binary", "continuous")
ROLES = ("embedding", "statistics", "prediction")


class ConfigError(ValueError):
    pass


@dataclass
class SourceConfig:
    path: str
    format: str = "csv"
    id_column: str = "id"
    sidecar: str | None = None
    tensor_shape: list[int] | None = None
    targets: dict[str, str] = field(default_factory=dict)
    targets_path: str | None = None
    exclude_features: list[str] = field(default_factory=list)


@dataclass
class SplitConfig:
    test_fraction: float = 0.2
    test_roles: list[str] = field(default_factory=lambda: ["statistics", "prediction"])


@dataclass
class ScalingConfig:
    method: str = "minmax"
    non_finite: str = "reject"


@dataclass
class EmbedderConfig:
    n_neighbors: int = 15
    min_dist: float = 0.1
    spread: float = 1.0
    n_components: int = 2
    n_epochs: int | None = None
    learning_rate: float = 1.0
    negative_sample_rate: int = 5
    transform_epochs: int = 0


@dataclass
class PrecomputedConfig:
    embedding: str
    statistics: str | None = None
    prediction: str | None = None
    id_column: str = "id"


@dataclass
class DLSConfig:
    overlap_target: float = 0.05
    r_max: int = 1024
    binning: str = "floor"


@dataclass
class StatmapConfig:
    sigma: float | None = None
    r_min: float = 0.2
    connectivity: str = "full"
    min_pixels: int = 5
    method: str = "auto"
    targets: list[str] | None = None


@dataclass
class ProfilerConfig:
    min_members: int = 5
    effect_threshold: float = 0.2


@dataclass
class PredictorConfig:
    task: str = "auto"
    targets: list[str] | None = None
    n_perms: int = 100
    k: int = 5
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_leaf: int | None = None
    mtry: int | None = None


@dataclass
class RenderConfig:
    enabled: bool = True
    color_by: str | None = None


@dataclass
class PipelineConfig:
    seed: int
    datasets: dict[str, SourceConfig | None]
    output_dir: str = "out"
    threads: int = 1
    split: SplitConfig | None = None
    scaling: ScalingConfig = field(default_factory=ScalingConfig)
    embedder: EmbedderConfig | None = None
    precomputed: PrecomputedConfig | None = None
    dls: DLSConfig = field(default_factory=DLSConfig)
    statmap: StatmapConfig = field(default_factory=StatmapConfig)
    profiler: ProfilerConfig = field(default_factory=ProfilerConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    base_dir: str = field(default=".", repr=False)

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    @property
    def out(self) -> Path:
        return self.resolve(self.output_dir)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name != "base_dir"}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


_SECTIONS = {
    "split": SplitConfig,
    "scaling": ScalingConfig,
    "embedder": EmbedderConfig,
    "precomputed": PrecomputedConfig,
    "dls": DLSConfig,
    "statmap": StatmapConfig,
    "profiler": ProfilerConfig,
    "predictor": PredictorConfig,
    "render": RenderConfig,
}


def config_from_dict(data: dict, base_dir: str | os.PathLike = ".", check_paths: bool = True) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in dataclasses.fields(PipelineConfig)} - {"base_dir"}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    if "seed" not in data or not isinstance(data["seed"], int) or isinstance(data["seed"], bool):
        raise ConfigError("an integer 'seed' is required (no wall-clock seeding)")
    if "datasets" not in data or not isinstance(data["datasets"], dict):
        raise ConfigError("'datasets' object is required")
    ds = {}
    bad_roles = sorted(set(data["datasets"]) - set(ROLES))
    if bad_roles:
        raise ConfigError(f"datasets: unknown role(s) {bad_roles}")
    for role in ROLES:
        src = data["datasets"].get(role)
        ds[role] = None if src is None else _build(SourceConfig, src, f"datasets.{role}")
    if ds["embedding"] is None:
        raise ConfigError("datasets.embedding is required")
    kwargs: dict[str, Any] = {"seed": data["seed"], "datasets": ds}
    for key in ("output_dir", "threads"):
        if key in data:
            kwargs[key] = data[key]
    for key, cls in _SECTIONS.items():
        if key in data:
            kwargs[key] = None if data[key] is None else _build(cls, data[key], key)
    if "embedder" not in data and "precomputed" not in data:
        kwargs["embedder"] = EmbedderConfig()
    cfg = PipelineConfig(**kwargs, base_dir=str(base_dir))
    validate(cfg, check_paths)
    return cfg


def validate(cfg: PipelineConfig, check_paths: bool = True) -> None:
    if (cfg.embedder is None) == (cfg.precomputed is None):
        raise ConfigError("exactly one of 'embedder' and 'precomputed' must be given")
    if not isinstance(cfg.threads, int) or cfg.threads < 1:
        raise ConfigError("threads must be a positive integer")
    if cfg.split is not None:
        if not 0.0 < cfg.split.test_fraction < 1.0:
            raise ConfigError("split.test_fraction must lie in (0, 1)")
        bad = [r for r in cfg.split.test_roles if r not in ("statistics", "prediction")]
        if bad or not cfg.split.test_roles:
            raise ConfigError("split.test_roles must name 'statistics' and/or 'prediction'")
        for r in cfg.split.test_roles:
            if cfg.datasets[r] is not None:
                raise ConfigError(f"datasets.{r} cannot be given when the split produces it")
    if cfg.scaling.method not in ("minmax", "none"):
        raise ConfigError("scaling.method must be 'minmax' or 'none'")
    if cfg.scaling.non_finite not in ("reject", "drop_row"):
        raise ConfigError("scaling.non_finite must be 'reject' or 'drop_row'")
    if cfg.dls.binning not in ("floor", "nearest"):
        raise ConfigError("dls.binning must be 'floor' or 'nearest'")
    if not 0.0 <= cfg.dls.overlap_target < 1.0 or cfg.dls.r_max < 2:
        raise ConfigError("dls needs 0 <= overlap_target < 1 and r_max >= 2")
    if cfg.statmap.method not in ("auto", "pearson", "point_biserial"):
        raise ConfigError("statmap.method must be auto, pearson or point_biserial")
    if cfg.statmap.connectivity not in ("full", "face"):
        raise ConfigError("statmap.connectivity must be 'full' or 'face'")
    if cfg.statmap.sigma is not None and not cfg.statmap.sigma > 0:
        raise ConfigError("statmap.sigma must be > 0")
    if not cfg.statmap.r_min > 0 or cfg.statmap.min_pixels < 1:
        raise ConfigError("statmap needs r_min > 0 and min_pixels >= 1")
    if cfg.predictor.task not in ("auto", "classification", "regression"):
        raise ConfigError("predictor.task must be auto, classification or regression")
    if cfg.predictor.n_perms < 1 or cfg.predictor.k < 2 or cfg.predictor.n_trees < 1:
        raise ConfigError("predictor needs n_perms >= 1, k >= 2, n_trees >= 1")
    for role, src in cfg.datasets.items():
        if src is None:
            continue
        if src.format not in ("csv", "tensor"):
            raise ConfigError(f"datasets.{role}.format must be 'csv' or 'tensor'")
        if src.format == "tensor" and src.sidecar is None:
            raise ConfigError(f"datasets.{role}: tensor format needs a 'sidecar'")
        for col, kind in src.targets.items():
            if kind not in TARGET_KINDS:
                raise ConfigError(f"datasets.{role}.targets.{col}: kind must be one of {TARGET_KINDS}")
        if check_paths:
            for p in (src.path, src.sidecar, src.targets_path):
                if p is not None and not cfg.resolve(p).is_file():
                    raise ConfigError(f"datasets.{role}: file not found: {cfg.resolve(p)}")
    if cfg.precomputed is not None and check_paths:
        for p in (cfg.precomputed.embedding, cfg.precomputed.statistics, cfg.precomputed.prediction):
            if p is not None and not cfg.resolve(p).is_file():
                raise ConfigError(f"precomputed: file not found: {cfg.resolve(p)}")


def load_config(path, out_override: str | None = None, threads_override: int | None = None) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    env_out = os.environ.get("LATENT_ATLAS_OUT")
    env_threads = os.environ.get("LATENT_ATLAS_THREADS")
    if out_override or env_out:
        data = dict(data, output_dir=str(Path(out_override or env_out).resolve()))
    if threads_override or env_threads:
        try:
            data = dict(data, threads=int(threads_override or env_threads))
        except ValueError:
            raise ConfigError("thread count must be an integer") from None
    return config_from_dict(data, base_dir=path.parent.resolve())
