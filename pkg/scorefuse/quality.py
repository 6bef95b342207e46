"""Quality estimator (QE).

Intermediate backbone features are reduced to per-frame mean/std statistics
and mapped by a small encoder to a quality weight in (0, 1). Training targets
are pseudo labels derived from where each frame ranks its own subject among
the training gallery's subject centers.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from scorefuse import FORMAT_VERSION
from scorefuse.core import similarity
from scorefuse.errors import EmptyTrainingSet, InvalidDelta, InvalidRank, NumericalFailure, ShapeError, UnknownSubject
from scorefuse.models import MetricKind, QueryRecord
from scorefuse.nnkit import AdamState, DenseNet, LrSchedule, adam_step

logger = logging.getLogger(__name__)

# Keeps weights strictly inside (0, 1) when the sigmoid saturates.
_WEIGHT_EPS = 1e-12


@dataclass
class IntermediateFeatures:
    """Per-frame block/patch features of one modality: (L, U, P, d)."""
    modality_id: str
    tensor: np.ndarray

    def __post_init__(self):
        tensor = np.asarray(self.tensor, dtype=np.float64)
        if tensor.ndim == 3:
            tensor = tensor[None]
        if tensor.ndim != 4 or min(tensor.shape) < 1:
            raise ShapeError(f"expected (L, U, P, d) features, got shape {tensor.shape}")
        self.tensor = tensor

    @property
    def frame_count(self) -> int:
        return self.tensor.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.tensor.shape[3]


def reduce_features(features: Union[IntermediateFeatures, np.ndarray]) -> np.ndarray:
    """(L, U, P, d) -> (L, 2d): mean and population std over blocks and patches."""
    if not isinstance(features, IntermediateFeatures):
        features = IntermediateFeatures("", features)
    t = features.tensor
    return np.concatenate([t.mean(axis=(1, 2)), t.std(axis=(1, 2))], axis=1)


@dataclass
class QualityWeight:
    frame_weights: np.ndarray
    query_weight: float


# ===== PSEUDO LABELS =====

@dataclass
class TrainingGallery:
    """One center feature per training subject, fixed subject order."""
    modality_id: str
    subject_ids: list[str]
    centers: np.ndarray
    metric_kind: MetricKind = MetricKind.COSINE

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[0] != len(self.subject_ids):
            raise ShapeError(f"need one center per subject, got {self.centers.shape} for {len(self.subject_ids)}")
        if len(set(self.subject_ids)) != len(self.subject_ids):
            raise ShapeError("duplicate subject in training gallery")
        self._index = {s: i for i, s in enumerate(self.subject_ids)}

    @classmethod
    def from_samples(
        cls,
        modality_id: str,
        subjects: Sequence[str],
        features: np.ndarray,
        metric_kind: MetricKind = MetricKind.COSINE,
    ) -> "TrainingGallery":
        """Average-pool all features of each subject into its center."""
        features = np.asarray(features, dtype=np.float64)
        subjects = np.asarray(subjects, dtype=object)
        order = sorted(set(subjects.tolist()))
        centers = np.stack([features[subjects == s].mean(axis=0) for s in order])
        return cls(modality_id, order, centers, metric_kind)

    def index(self, subject_id: str) -> int:
        try:
            return self._index[subject_id]
        except KeyError:
            raise UnknownSubject(f"subject {subject_id} not in training gallery") from None


def _rank_from_similarities(sims: np.ndarray, true_index: int) -> int:
    # Ties with the true center count against the query.
    others = np.delete(sims, true_index)
    return 1 + int(np.sum(others >= sims[true_index]))


def compute_rank(q: np.ndarray, gallery: TrainingGallery, true_subject: str) -> int:
    """Position of the true subject's center when centers are sorted by similarity to ``q``."""
    true_index = gallery.index(true_subject)
    return _rank_from_similarities(similarity(q, gallery.centers, gallery.metric_kind), true_index)


def compute_frame_ranks(frames: np.ndarray, gallery: TrainingGallery, true_subject: str) -> np.ndarray:
    true_index = gallery.index(true_subject)
    return np.array([
        _rank_from_similarities(similarity(frame, gallery.centers, gallery.metric_kind), true_index)
        for frame in np.asarray(frames, dtype=np.float64)
    ])


def pseudo_quality_label(rank: float, delta: float) -> float:
    """relu((delta - r) / (delta - 1))."""
    if not delta > 1:
        raise InvalidDelta(f"delta must be > 1, got {delta}")
    if rank < 1:
        raise InvalidRank(f"rank must be >= 1, got {rank}")
    return max(0.0, (delta - rank) / (delta - 1))


@dataclass(frozen=True)
class RankTarget:
    rank: int
    delta: float

    def __post_init__(self):
        pseudo_quality_label(self.rank, self.delta)

    @property
    def label(self) -> float:
        return pseudo_quality_label(self.rank, self.delta)


# ===== MODEL =====

@dataclass
class QualityEstimatorModel:
    """Standardize reduced features, then encoder -> sigmoid weight per frame."""
    modality_id: str
    delta: float
    encoder: DenseNet
    input_mean: np.ndarray
    input_std: np.ndarray
    history: list[float] = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.encoder.in_features

    def predict_frames(self, reduced: np.ndarray) -> np.ndarray:
        reduced = np.atleast_2d(np.asarray(reduced, dtype=np.float64))
        if reduced.shape[1] != self.input_dim:
            raise ShapeError(f"QE for {self.modality_id} expects {self.input_dim} inputs, got {reduced.shape[1]}")
        x = (reduced - self.input_mean) / self.input_std
        return np.clip(self.encoder(x)[:, 0], _WEIGHT_EPS, 1.0 - _WEIGHT_EPS)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "modality_id": self.modality_id,
            "delta": self.delta,
            "layers": self.encoder.to_dict(),
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QualityEstimatorModel":
        return cls(
            modality_id=data["modality_id"],
            delta=float(data["delta"]),
            encoder=DenseNet.from_dict(data["layers"]),
            input_mean=np.array(data["input_mean"], dtype=np.float64),
            input_std=np.array(data["input_std"], dtype=np.float64),
            history=list(data.get("history", [])),
        )


def predict_query_weight(
    model: QualityEstimatorModel,
    features: Union[IntermediateFeatures, np.ndarray],
) -> QualityWeight:
    """Per-frame weights and their mean.

    ``features`` is either raw (L, U, P, d) intermediate features or the
    already reduced (L, 2d) statistics.
    """
    if isinstance(features, IntermediateFeatures) or np.ndim(features) >= 3:
        reduced = reduce_features(features)
    else:
        reduced = np.atleast_2d(np.asarray(features, dtype=np.float64))
    frame_weights = model.predict_frames(reduced)
    return QualityWeight(frame_weights, float(frame_weights.mean()))


# ===== TRAINING =====

@dataclass
class QESample:
    query_id: str
    reduced: np.ndarray
    labels: np.ndarray


@dataclass
class QualityTrainingConfig:
    delta: float = 3.0
    hidden: tuple[int, ...] = (64, 32)
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    warmup_fraction: float = 0.1
    floor_lr: float = 0.0
    seed: int = 0


def build_qe_samples(
    modality_id: str,
    queries: Sequence[QueryRecord],
    reduced: dict[str, np.ndarray],
    gallery: TrainingGallery,
    delta: float,
) -> list[QESample]:
    """Per-frame pseudo labels for every query that has both frame and QE features."""
    samples = []
    for record in queries:
        frames = record.features.get(modality_id)
        stats = reduced.get(record.query_id)
        if frames is None or stats is None:
            continue
        if stats.shape[0] != frames.shape[0]:
            raise ShapeError(f"query {record.query_id}: {frames.shape[0]} frames but {stats.shape[0]} QE rows")
        ranks = compute_frame_ranks(frames, gallery, record.subject_id)
        labels = np.array([pseudo_quality_label(r, delta) for r in ranks])
        samples.append(QESample(record.query_id, stats, labels))
    return samples


def train_qe(
    samples: Sequence[QESample],
    config: QualityTrainingConfig,
    modality_id: str,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> QualityEstimatorModel:
    """Fit the encoder to the pseudo labels with a per-frame MSE loss."""
    if not samples:
        raise EmptyTrainingSet(f"no QE training frames for {modality_id}")
    x = np.vstack([s.reduced for s in samples])
    y = np.concatenate([s.labels for s in samples])

    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std < 1e-12] = 1.0
    xs = (x - mean) / std

    rng = np.random.default_rng(config.seed)
    encoder = DenseNet.build([x.shape[1], *config.hidden, 1], rng, "relu", "sigmoid")
    steps_per_epoch = math.ceil(len(y) / config.batch_size)
    schedule = LrSchedule.with_warmup_fraction(
        config.epochs * steps_per_epoch, config.learning_rate, config.warmup_fraction, config.floor_lr
    )
    adam = AdamState.for_params(
        encoder.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay, schedule=schedule
    )

    model = QualityEstimatorModel(modality_id, config.delta, encoder, mean, std)
    for epoch in range(config.epochs):
        order = rng.permutation(len(y))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            out, cache = encoder.forward(xs[idx], "train")
            err = out[:, 0] - y[idx]
            loss = float(np.mean(err ** 2))
            if not math.isfinite(loss):
                raise NumericalFailure(f"non-finite QE loss at epoch {epoch}")
            grads, _ = encoder.backward(cache, (2.0 * err / len(idx))[:, None])
            encoder.set_parameters(adam_step(adam, encoder.parameters(), grads))
            losses.append(loss)
        model.history.append(float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(epoch, model.history[-1])
    logger.debug("QE %s trained on %d frames, final loss %.5f", modality_id, len(y), model.history[-1])
    return model


def qe_loss(model: QualityEstimatorModel, samples: Sequence[QESample]) -> float:
    """Mean per-frame squared error of a trained QE."""
    x = np.vstack([s.reduced for s in samples])
    y = np.concatenate([s.labels for s in samples])
    return float(np.mean((model.predict_frames(x) - y) ** 2))
