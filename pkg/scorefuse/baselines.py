"""Fixed-rule and simple trained score-fusion baselines.

Normalization statistics are fitted on training score pools only; normalized
scores are fused by the arithmetic mean over present modalities.
"""

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from scorefuse.errors import AllModalitiesMissing, EmptyTrainingSet
from scorefuse.models import ConcatScores
from scorefuse.nnkit import AdamState, adam_step
from scorefuse.qme import ScoreLabels, score_triplet_loss_with_grad

logger = logging.getLogger(__name__)

Normalization = Literal["zscore", "minmax", "rhe"]

_STD_FLOOR = 1e-12


@dataclass
class ModalityStats:
    """Pool statistics of one modality; ``reference`` is sorted ascending."""
    mean: float
    std: float
    min: float
    max: float
    reference: np.ndarray

    def __post_init__(self):
        self.reference = np.sort(np.asarray(self.reference, dtype=np.float64))
        if self.reference.size == 0:
            raise EmptyTrainingSet("RHE reference sample is empty")
        if self.std < 0 or self.min > self.max:
            raise ValueError("inconsistent modality statistics")


@dataclass
class NormalizationStats:
    per_modality: dict[str, ModalityStats] = field(default_factory=dict)

    def __getitem__(self, modality_id: str) -> ModalityStats:
        return self.per_modality[modality_id]

    def to_dict(self) -> dict:
        return {
            m: {"mean": s.mean, "std": s.std, "min": s.min, "max": s.max, "reference": s.reference.tolist()}
            for m, s in self.per_modality.items()
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NormalizationStats":
        return cls({m: ModalityStats(**entry) for m, entry in data.items()})


def fit_modality_stats(scores: np.ndarray, is_match: np.ndarray) -> ModalityStats:
    """Fit on present scores; the RHE reference is the non-match pool."""
    scores = np.asarray(scores, dtype=np.float64)
    is_match = np.asarray(is_match, dtype=bool)
    keep = ~np.isnan(scores)
    scores, is_match = scores[keep], is_match[keep]
    if scores.size == 0:
        raise EmptyTrainingSet("no scores to fit normalization statistics")
    reference = scores[~is_match]
    if reference.size == 0:
        logger.warning("No non-match scores in the pool; RHE reference falls back to all scores")
        reference = scores
    return ModalityStats(
        mean=float(scores.mean()),
        std=float(scores.std()),
        min=float(scores.min()),
        max=float(scores.max()),
        reference=reference,
    )


def fit_normalization_stats(samples: list[ConcatScores], labels: list[ScoreLabels]) -> NormalizationStats:
    """Fit per-modality statistics from training queries."""
    if not samples:
        raise EmptyTrainingSet("no training queries")
    order = samples[0].modality_order
    stats = {}
    for j, modality_id in enumerate(order):
        pool = np.concatenate([s.values[:, j][s.mask[:, j]] for s in samples])
        match = np.concatenate([lab.match[s.mask[:, j]] for s, lab in zip(samples, labels)])
        stats[modality_id] = fit_modality_stats(pool, match)
    return NormalizationStats(stats)


# ===== FIXED RULES =====

def _present(row: np.ndarray, mask=None) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    present = ~np.isnan(row) if mask is None else np.asarray(mask, dtype=bool)
    if not present.any():
        raise AllModalitiesMissing("every modality is masked for this row")
    return row[present]


def min_fusion(row: np.ndarray, mask=None) -> float:
    return float(_present(row, mask).min())


def max_fusion(row: np.ndarray, mask=None) -> float:
    return float(_present(row, mask).max())


def mean_fusion(row: np.ndarray, mask=None) -> float:
    return float(_present(row, mask).mean())


def zscore_normalize(stats: NormalizationStats, modality_id: str, score):
    s = stats[modality_id]
    arr = np.asarray(score, dtype=np.float64)
    # Constant pools map every score to 0.
    out = np.zeros_like(arr) if s.std <= _STD_FLOOR else (arr - s.mean) / max(s.std, _STD_FLOOR)
    return out if np.ndim(score) else float(out)


def minmax_normalize(stats: NormalizationStats, modality_id: str, score):
    s = stats[modality_id]
    score_arr = np.asarray(score, dtype=np.float64)
    if s.max == s.min:
        out = np.full_like(score_arr, 0.5)
    else:
        out = np.clip((score_arr - s.min) / (s.max - s.min), 0.0, 1.0)
    return out if np.ndim(score) else float(out)


def rhe_normalize(stats: NormalizationStats, modality_id: str, score):
    """Empirical CDF of ``score`` against the modality's reference pool."""
    ref = stats[modality_id].reference
    out = np.searchsorted(ref, np.asarray(score, dtype=np.float64), side="right") / ref.size
    return out if np.ndim(score) else float(out)


_NORMALIZERS = {
    "zscore": zscore_normalize,
    "minmax": minmax_normalize,
    "rhe": rhe_normalize,
}


def normalize_concat(stats: NormalizationStats, concat: ConcatScores, kind: Normalization) -> np.ndarray:
    """T x N normalized scores, NaN where masked."""
    normalizer = _NORMALIZERS[kind]
    out = np.full(concat.values.shape, np.nan)
    for j, modality_id in enumerate(concat.modality_order):
        present = concat.mask[:, j]
        if present.any():
            out[present, j] = normalizer(stats, modality_id, concat.values[present, j])
    return out


def fuse_rows(values: np.ndarray, mask: np.ndarray, rule: Literal["min", "max", "mean"]) -> np.ndarray:
    """Apply a fixed rule to every template row of a T x N matrix."""
    if not mask.any(axis=1).all():
        raise AllModalitiesMissing("a template row has no present modality")
    masked = np.where(mask, values, np.nan)
    if rule == "min":
        return np.nanmin(masked, axis=1)
    if rule == "max":
        return np.nanmax(masked, axis=1)
    return np.nanmean(masked, axis=1)


def normalized_mean_fusion(stats: NormalizationStats, concat: ConcatScores, kind: Normalization) -> np.ndarray:
    return fuse_rows(normalize_concat(stats, concat, kind), concat.mask, "mean")


# ===== WEIGHTED SUM =====

def weighted_sum_fusion(weights: np.ndarray, row: np.ndarray, mask=None) -> float:
    """Dot product over present entries, weights renormalized over them."""
    weights = np.asarray(weights, dtype=np.float64)
    row = np.asarray(row, dtype=np.float64)
    present = ~np.isnan(row) if mask is None else np.asarray(mask, dtype=bool)
    if not present.any():
        raise AllModalitiesMissing("every modality is masked for this row")
    w = np.where(present, weights, 0.0)
    total = w.sum()
    if total <= 0:
        return float(row[present].mean())
    return float(np.dot(w[present] / total, row[present]))


def _softmax_rows(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max()) * mask
    return shifted / shifted.sum(axis=1, keepdims=True)


@dataclass
class WeightedSumConfig:
    margin: float = 3.0
    normalization: Normalization = "zscore"
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0


@dataclass
class WeightedSumModel:
    """Softmax-parameterized modality weights over normalized scores."""
    modality_order: list[str]
    logits: np.ndarray
    stats: NormalizationStats
    normalization: Normalization = "zscore"
    history: list[float] = field(default_factory=list)

    @property
    def weights(self) -> np.ndarray:
        e = np.exp(self.logits - self.logits.max())
        return e / e.sum()

    def fuse(self, concat: ConcatScores) -> np.ndarray:
        normalized = normalize_concat(self.stats, concat, self.normalization)
        return np.array([
            weighted_sum_fusion(self.weights, normalized[t], concat.mask[t])
            for t in range(concat.num_templates)
        ])

    def to_dict(self) -> dict:
        return {
            "modality_order": self.modality_order,
            "logits": self.logits.tolist(),
            "normalization": self.normalization,
            "baseline_stats": self.stats.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "WeightedSumModel":
        return cls(
            modality_order=list(data["modality_order"]),
            logits=np.array(data["logits"], dtype=np.float64),
            stats=NormalizationStats.from_dict(data["baseline_stats"]),
            normalization=data.get("normalization", "zscore"),
        )


def fit_weighted_sum(
    samples: list[ConcatScores],
    labels: list[ScoreLabels],
    config: WeightedSumConfig | None = None,
    stats: NormalizationStats | None = None,
) -> WeightedSumModel:
    """Learn modality weights with the score triplet loss."""
    config = config or WeightedSumConfig()
    pairs = [(s, lab) for s, lab in zip(samples, labels) if lab.match.any() and s.mask.any()]
    if not pairs:
        raise EmptyTrainingSet("no training queries with match templates")
    stats = stats or fit_normalization_stats(samples, labels)
    order = pairs[0][0].modality_order

    normalized = [np.nan_to_num(normalize_concat(stats, s, config.normalization)) for s, _ in pairs]
    logits = np.zeros(len(order))
    adam = AdamState.for_params([logits], lr=config.learning_rate, weight_decay=0.0)
    rng = np.random.default_rng(config.seed)
    history = []

    for _ in range(config.epochs):
        order_idx = rng.permutation(len(pairs))
        epoch_losses = []
        for start in range(0, len(pairs), config.batch_size):
            batch = order_idx[start:start + config.batch_size]
            grad = np.zeros_like(logits)
            batch_loss = 0.0
            for i in batch:
                concat, lab = pairs[i]
                z, mask = normalized[i], concat.mask
                rows = mask.any(axis=1)
                p = _softmax_rows(np.broadcast_to(logits, z.shape)[rows], mask[rows])
                fused = (p * z[rows]).sum(axis=1)
                loss, d_fused = score_triplet_loss_with_grad(fused, lab.subset(rows), config.margin)
                batch_loss += loss
                grad += (d_fused[:, None] * p * (z[rows] - fused[:, None])).sum(axis=0)
            (logits,) = adam_step(adam, [logits], [grad / len(batch)])
            epoch_losses.append(batch_loss / len(batch))
        history.append(float(np.mean(epoch_losses)))

    model = WeightedSumModel(order, logits, stats, config.normalization, history)
    logger.debug("Weighted-sum weights: %s", dict(zip(order, model.weights.round(4).tolist())))
    return model
