"""Synthetic multimodal benchmark with a known per-query quality factor.

Each modality gets unit-norm identity vectors per subject. Gallery templates
are identity + small noise; query frames are identity + noise whose scale is
``sigma * (1 + kappa * (1 - q))``. Simulated intermediate features replicate
every frame over U x P patches and add patch noise that also grows as q falls,
so the spread across patches carries the quality signal.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from scorefuse.core import build_score_matrix
from scorefuse.errors import DegenerateConfig, FormatError
from scorefuse.models import GalleryManifest, GalleryTemplate, MetricKind, ModalityChannel, QueryRecord, ScoreMatrix
from scorefuse.quality import reduce_features
from scorefuse.storage import (
    load_manifest, read_feature_csv, read_gallery_csv, read_quality_table, read_score_csv, save_manifest,
    write_feature_csv, write_gallery_csv, write_quality_table, write_score_csv,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")

# Stream id for identity and gallery draws, outside the query index range.
_GALLERY_STREAM = 2**31 - 1


@dataclass
class SynthModality:
    """Noise model of one channel. ``sigma`` is the per-frame noise norm at q=1."""
    modality_id: str
    feature_dim: int = 32
    metric_kind: MetricKind = MetricKind.COSINE
    sigma: float = 0.5
    kappa: float = 0.0
    gallery_sigma: float = 0.3
    quality_range: tuple[float, float] = (0.8, 1.0)
    degraded_fraction: float = 0.0
    degraded_range: tuple[float, float] = (0.0, 0.2)
    patch_sigma: float = 0.05
    patch_kappa: float = 10.0
    missing_fraction: float = 0.0

    def __post_init__(self):
        self.metric_kind = MetricKind(self.metric_kind)
        self.quality_range = tuple(self.quality_range)
        self.degraded_range = tuple(self.degraded_range)

    @property
    def channel(self) -> ModalityChannel:
        return ModalityChannel(self.modality_id, self.metric_kind, self.feature_dim)

    def noise_scale(self, q: float) -> float:
        return self.sigma * (1.0 + self.kappa * (1.0 - q))

    def patch_scale(self, q: float) -> float:
        return self.patch_sigma * (1.0 + self.patch_kappa * (1.0 - q))


def default_modalities() -> list[SynthModality]:
    """Face degrades badly on 40% of queries; body is steady but weaker."""
    return [
        SynthModality("face", sigma=0.5, kappa=20.0, quality_range=(0.8, 1.0),
                      degraded_fraction=0.4, degraded_range=(0.0, 0.2)),
        SynthModality("body", sigma=4.0, kappa=1.0, quality_range=(0.6, 1.0)),
    ]


@dataclass
class SynthConfig:
    train_subjects: int = 100
    test_subjects: int = 50
    templates_per_subject: int = 4
    queries_per_subject: int = 6
    frames_per_query: int = 12
    blocks: int = 2
    patches: int = 4
    modalities: list[SynthModality] = field(default_factory=default_modalities)
    seed: int = 0

    def validate(self) -> None:
        counts = {
            "train_subjects": self.train_subjects,
            "test_subjects": self.test_subjects,
            "templates_per_subject": self.templates_per_subject,
            "queries_per_subject": self.queries_per_subject,
            "frames_per_query": self.frames_per_query,
            "blocks": self.blocks,
            "patches": self.patches,
        }
        for name, value in counts.items():
            if value < 1:
                raise DegenerateConfig(f"{name} must be >= 1, got {value}")
        if not self.modalities:
            raise DegenerateConfig("need at least one modality")
        ids = [m.modality_id for m in self.modalities]
        if len(set(ids)) != len(ids):
            raise DegenerateConfig(f"duplicate modality ids: {ids}")
        for m in self.modalities:
            if m.feature_dim < 2:
                raise DegenerateConfig(f"{m.modality_id}: feature_dim must be >= 2, got {m.feature_dim}")
            if m.sigma <= 0 or m.gallery_sigma < 0 or m.patch_sigma < 0:
                raise DegenerateConfig(f"{m.modality_id}: noise scales must be positive")
            if m.kappa < 0 or m.patch_kappa < 0:
                raise DegenerateConfig(f"{m.modality_id}: kappa must be >= 0")
            for lo, hi in (m.quality_range, m.degraded_range):
                if not 0.0 <= lo <= hi <= 1.0:
                    raise DegenerateConfig(f"{m.modality_id}: quality range ({lo}, {hi}) outside [0, 1]")
            if not 0.0 <= m.degraded_fraction <= 1.0 or not 0.0 <= m.missing_fraction < 1.0:
                raise DegenerateConfig(f"{m.modality_id}: fractions must lie in [0, 1)")

    @property
    def channels(self) -> list[ModalityChannel]:
        return [m.channel for m in self.modalities]


@dataclass
class SynthSplit:
    """One split on disk or in memory.

    ``reduced`` holds per-frame QE inputs (L x 2d) by modality and query;
    ``intermediate`` keeps the raw (L, U, P, d) tensors when generated.
    """
    name: str
    manifest: GalleryManifest
    channels: list[ModalityChannel]
    reduced: dict[str, dict[str, np.ndarray]]
    quality: dict[tuple[str, str], float]
    intermediate: Optional[dict[str, dict[str, np.ndarray]]] = None
    scores: dict[str, ScoreMatrix] = field(default_factory=dict)

    @property
    def modality_order(self) -> list[str]:
        return [c.modality_id for c in self.channels]

    def channel(self, modality_id: str) -> ModalityChannel:
        for c in self.channels:
            if c.modality_id == modality_id:
                return c
        raise KeyError(modality_id)

    def score_matrix(self, modality_id: str) -> ScoreMatrix:
        if modality_id not in self.scores:
            self.scores[modality_id] = build_score_matrix(
                self.channel(modality_id), self.manifest.queries, self.manifest
            )
        return self.scores[modality_id]

    def quality_rows(self) -> list[tuple[str, str, float]]:
        """Quality table rows in manifest query order, then modality order."""
        return [
            (q.query_id, m, self.quality[(q.query_id, m)])
            for q in self.manifest.queries
            for m in self.modality_order
            if (q.query_id, m) in self.quality
        ]


@dataclass
class SynthDataset:
    config: SynthConfig
    train: SynthSplit
    test: SynthSplit

    def split(self, name: str) -> SynthSplit:
        return {"train": self.train, "test": self.test}[name]


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _noise(rng: np.random.Generator, shape, scale: float, d: int) -> np.ndarray:
    # Per-coordinate std scale/sqrt(d) gives a noise vector of norm ~scale.
    return rng.standard_normal(shape) * (scale / np.sqrt(d))


def _draw_quality(rng: np.random.Generator, modality: SynthModality) -> float:
    lo, hi = modality.quality_range
    if rng.random() < modality.degraded_fraction:
        lo, hi = modality.degraded_range
    return float(rng.uniform(lo, hi))


def generate_split(config: SynthConfig, split_index: int) -> SynthSplit:
    name = SPLITS[split_index]
    prefix = "tr" if split_index == 0 else "te"
    num_subjects = config.train_subjects if split_index == 0 else config.test_subjects
    subjects = [f"{prefix}{s:04d}" for s in range(num_subjects)]

    gallery_rng = np.random.default_rng([config.seed, split_index, _GALLERY_STREAM])
    identities = {}
    gallery = {}
    templates = [
        GalleryTemplate(f"{sid}_g{k}", sid)
        for sid in subjects
        for k in range(config.templates_per_subject)
    ]
    for m in config.modalities:
        identities[m.modality_id] = _unit_rows(gallery_rng, num_subjects, m.feature_dim)
        repeated = np.repeat(identities[m.modality_id], config.templates_per_subject, axis=0)
        gallery[m.modality_id] = repeated + _noise(gallery_rng, repeated.shape, m.gallery_sigma, m.feature_dim)

    L, U, P = config.frames_per_query, config.blocks, config.patches
    queries = []
    reduced = {m.modality_id: {} for m in config.modalities}
    intermediate = {m.modality_id: {} for m in config.modalities}
    quality = {}
    query_index = 0
    for s, sid in enumerate(subjects):
        for k in range(config.queries_per_subject):
            rng = np.random.default_rng([config.seed, split_index, query_index])
            query_id = f"{sid}_q{k}"
            features = {}
            for m in config.modalities:
                q = _draw_quality(rng, m)
                missing = rng.random() < m.missing_fraction
                d = m.feature_dim
                frames = identities[m.modality_id][s] + _noise(rng, (L, d), m.noise_scale(q), d)
                patches = frames[:, None, None, :] + _noise(rng, (L, U, P, d), m.patch_scale(q), d)
                if missing:
                    continue
                quality[(query_id, m.modality_id)] = q
                features[m.modality_id] = frames
                intermediate[m.modality_id][query_id] = patches
                reduced[m.modality_id][query_id] = reduce_features(patches)
            queries.append(QueryRecord(query_id, sid, L, features))
            query_index += 1

    manifest = GalleryManifest(subjects=subjects, templates=templates, queries=queries, features=gallery)
    return SynthSplit(name, manifest, config.channels, reduced, quality, intermediate)


def generate(config: SynthConfig) -> SynthDataset:
    """Both splits; subjects are disjoint and every draw is seeded."""
    config.validate()
    dataset = SynthDataset(config, generate_split(config, 0), generate_split(config, 1))
    logger.debug(
        "Generated %d train / %d test queries over %s",
        len(dataset.train.manifest.queries), len(dataset.test.manifest.queries),
        [m.modality_id for m in config.modalities],
    )
    return dataset


# ===== FILES =====

def emit_split(split: SynthSplit, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / "manifest.json"]
    save_manifest(split.manifest, written[0], split.channels)
    for channel in split.channels:
        mod = channel.modality_id
        paths = {
            "scores": out_dir / f"scores_{mod}.csv",
            "features": out_dir / f"features_{mod}.csv",
            "gallery": out_dir / f"gallery_{mod}.csv",
            "qe": out_dir / f"qe_{mod}.csv",
        }
        write_score_csv(split.score_matrix(mod), paths["scores"])
        frames = {q.query_id: q.features[mod] for q in split.manifest.queries if q.has(mod)}
        write_feature_csv(frames, paths["features"])
        write_gallery_csv(split.manifest.template_ids, split.manifest.features[mod], paths["gallery"])
        write_feature_csv(split.reduced[mod], paths["qe"])
        written.extend(paths.values())
    quality_path = out_dir / "quality.csv"
    write_quality_table(split.quality_rows(), quality_path)
    written.append(quality_path)
    return written


def emit(dataset: SynthDataset, out_dir: Path) -> list[Path]:
    """Write both splits under ``out_dir/train`` and ``out_dir/test``."""
    written = []
    for name in SPLITS:
        written.extend(emit_split(dataset.split(name), out_dir / name))
    return written


def _infer_channels(split_dir: Path) -> list[ModalityChannel]:
    """Channels from ``scores_<mod>.csv`` files, for manifests that declare none."""
    channels = []
    for path in sorted(split_dir.glob("scores_*.csv")):
        mod = path.stem[len("scores_"):]
        dim = 1
        gallery = split_dir / f"gallery_{mod}.csv"
        if gallery.exists():
            dim = max(read_gallery_csv(gallery)[1].shape[1], 1)
        channels.append(ModalityChannel(mod, MetricKind.COSINE, dim))
    return channels


def load_split(split_dir: Path) -> SynthSplit:
    """Read a split: a manifest plus per-modality score CSVs.

    Frame features, gallery features, QE inputs and the quality table are
    optional. A modality needs either its score CSV or both feature files.
    Raw intermediate tensors are never stored.
    """
    manifest, channels = load_manifest(split_dir / "manifest.json")
    if not channels:
        channels = _infer_channels(split_dir)
    if not channels:
        raise FormatError(f"{split_dir}: manifest declares no modalities and there are no scores_<modality>.csv files")

    frames_by_mod = {}
    gallery = {}
    reduced = {}
    scores = {}
    for c in channels:
        mod = c.modality_id
        features_path = split_dir / f"features_{mod}.csv"
        gallery_path = split_dir / f"gallery_{mod}.csv"
        qe_path = split_dir / f"qe_{mod}.csv"
        scores_path = split_dir / f"scores_{mod}.csv"

        if features_path.exists():
            frames_by_mod[mod] = read_feature_csv(features_path)
        if gallery_path.exists():
            ids, matrix = read_gallery_csv(gallery_path)
            if ids != manifest.template_ids:
                raise FormatError(f"gallery_{mod}.csv template order differs from the manifest")
            gallery[mod] = matrix
        reduced[mod] = read_feature_csv(qe_path) if qe_path.exists() else {}
        if scores_path.exists():
            matrix = read_score_csv(scores_path, mod, c.metric_kind)
            if matrix.template_ids != manifest.template_ids:
                raise FormatError(f"scores_{mod}.csv template order differs from the manifest")
            scores[mod] = matrix
        elif not (mod in frames_by_mod and mod in gallery):
            raise FormatError(f"{split_dir}: {mod} needs scores_{mod}.csv or features_{mod}.csv with gallery_{mod}.csv")

    queries = [
        QueryRecord(
            q.query_id, q.subject_id, q.frame_count,
            {mod: frames[q.query_id] for mod, frames in frames_by_mod.items() if q.query_id in frames},
        )
        for q in manifest.queries
    ]

    quality_path = split_dir / "quality.csv"
    quality = read_quality_table(quality_path) if quality_path.exists() else {}

    full = GalleryManifest(manifest.subjects, manifest.templates, queries, gallery)
    return SynthSplit(split_dir.name, full, channels, reduced, quality, None, scores)
