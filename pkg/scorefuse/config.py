"""Configuration management for scorefuse runs."""

import hashlib
import json
import os
from dataclasses import MISSING, Field, asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Optional

from scorefuse.baselines import WeightedSumConfig
from scorefuse.errors import ConfigError, DegenerateConfig, ScoreFuseError
from scorefuse.metrics import EvaluationConfig, OpenSetProtocol
from scorefuse.qme import FusionTrainingConfig
from scorefuse.quality import QualityTrainingConfig
from scorefuse.synth import SynthConfig, SynthModality


def get_data_dir() -> Path:
    """Get data directory path."""
    if os.name == "nt":
        base = Path(os.environ.get("LOCALAPPDATA", Path.home()))
    else:
        base = Path(os.environ.get("XDG_DATA_HOME", Path.home() / ".local" / "share"))
    return base / "scorefuse"


@dataclass
class RunConfig:
    """One experiment: data, stage hyperparameters, metric targets.

    ``data_dir`` points at an emitted dataset (``train/`` and ``test/``);
    when unset, ``generate`` writes one under ``<output_dir>/data``.
    """
    seed: int = 0
    output_dir: Optional[str] = None
    data_dir: Optional[str] = None
    modalities: Optional[list[str]] = None
    gating_modality: Optional[str] = None
    qe_modalities: Optional[list[str]] = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    quality: QualityTrainingConfig = field(default_factory=QualityTrainingConfig)
    fusion: FusionTrainingConfig = field(default_factory=FusionTrainingConfig)
    weighted_sum: WeightedSumConfig = field(default_factory=WeightedSumConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    open_set: OpenSetProtocol = field(default_factory=OpenSetProtocol)
    histogram_bins: int = 40

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with ``seed`` pushed into every seeded stage."""
        return replace(
            self,
            seed=seed,
            synth=replace(self.synth, seed=seed),
            quality=replace(self.quality, seed=seed),
            fusion=replace(self.fusion, seed=seed),
            weighted_sum=replace(self.weighted_sum, seed=seed),
            open_set=replace(self.open_set, seed=seed),
        )

    @property
    def out_path(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return get_data_dir() / "runs" / config_hash(self)

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir) if self.data_dir else self.out_path / "data"


def _field_default(f: Field) -> Any:
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None


def _build(cls, data: Any):
    """Dataclass from a JSON object, ignoring unknown keys."""
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} must be a JSON object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            continue
        default = _field_default(known[key])
        if cls is SynthConfig and key == "modalities":
            if not isinstance(value, list):
                raise ConfigError("synth.modalities must be a list of objects")
            value = [_build(SynthModality, m) for m in value]
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        elif is_dataclass(default) and not isinstance(value, type(default)):
            value = _build(type(default), value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError, ScoreFuseError) as e:
        raise ConfigError(f"invalid {cls.__name__}: {e}") from e


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def validate(cfg: RunConfig) -> RunConfig:
    """Raise ConfigError on any value the stages cannot run with."""
    _check(isinstance(cfg.seed, int) and cfg.seed >= 0, f"seed must be a non-negative integer, got {cfg.seed!r}")
    try:
        cfg.synth.validate()
    except DegenerateConfig as e:
        raise ConfigError(str(e)) from e

    q = cfg.quality
    _check(q.delta > 1, f"quality.delta must be > 1, got {q.delta}")
    _check(q.epochs >= 1 and q.batch_size >= 2, "quality.epochs must be >= 1 and batch_size >= 2")
    _check(q.learning_rate > 0, "quality.learning_rate must be > 0")

    f = cfg.fusion
    _check(f.num_experts >= 1, f"fusion.num_experts must be >= 1, got {f.num_experts}")
    _check(f.margin > 0, f"fusion.margin must be > 0, got {f.margin}")
    _check(f.loss in ("score", "triplet"), f"fusion.loss must be 'score' or 'triplet', got {f.loss!r}")
    _check(f.gating in ("quality", "uniform"), f"fusion.gating must be 'quality' or 'uniform', got {f.gating!r}")
    _check(f.epochs >= 1 and f.batch_size >= 1, "fusion.epochs and fusion.batch_size must be >= 1")
    _check(f.learning_rate > 0, "fusion.learning_rate must be > 0")
    _check(0 <= f.warmup_fraction < 1, "fusion.warmup_fraction must be in [0, 1)")
    _check(f.frames_per_view >= 1 and f.views_per_query >= 1, "fusion views need >= 1 frame and >= 1 view")

    w = cfg.weighted_sum
    _check(w.normalization in ("zscore", "minmax", "rhe"), f"unknown normalization {w.normalization!r}")

    e = cfg.evaluation
    for rate in (*e.far_targets, *e.fpir_targets, e.distribution_far):
        _check(0 < rate < 1, f"metric targets must be in (0, 1), got {rate}")
    _check(all(k >= 1 for k in e.ranks), "CMC ranks must be >= 1")
    _check(cfg.histogram_bins >= 1, "histogram_bins must be >= 1")

    if cfg.modalities is not None:
        _check(len(cfg.modalities) >= 2, "score fusion needs at least two modalities")
        _check(len(set(cfg.modalities)) == len(cfg.modalities), "duplicate modality in modalities")
    return cfg


def run_config_from_dict(data: dict) -> RunConfig:
    """Top-level ``seed`` is pushed into every nested stage config."""
    cfg = _build(RunConfig, data)
    if "seed" in data:
        cfg = cfg.with_seed(cfg.seed)
    return validate(cfg)


def load_run_config(path: Optional[Path] = None, seed: Optional[int] = None) -> RunConfig:
    """Load a JSON run config; ``seed`` overrides the file's seed."""
    if path is None:
        cfg = RunConfig()
    else:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        cfg = run_config_from_dict(data)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return validate(cfg)


def config_to_dict(cfg: RunConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg), default=str))


def config_hash(cfg: RunConfig) -> str:
    """First 16 hex digits of SHA-256 over the canonical config JSON (output_dir excluded)."""
    data = config_to_dict(cfg)
    data.pop("output_dir", None)
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def save_run_config(cfg: RunConfig, path: Path) -> None:
    """Save the resolved configuration next to a run's artifacts."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config_to_dict(cfg), f, indent=2, sort_keys=True)
