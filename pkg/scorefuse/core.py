"""Score-space primitives: feature aggregation, similarity and score matrices."""

import numpy as np

from scorefuse.errors import EmptyQuery, NegativeDistance, ShapeError, TemplateOrderMismatch, ZeroNormFeature
from scorefuse.models import ConcatScores, GalleryManifest, MetricKind, ModalityChannel, QueryRecord, ScoreMatrix


def aggregate_query_feature(frames: np.ndarray) -> np.ndarray:
    """Average L frame features into one query-level feature."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ShapeError(f"expected an L x d frame matrix, got shape {frames.shape}")
    if frames.shape[0] == 0:
        raise EmptyQuery("cannot aggregate a query with no frames")
    return frames.mean(axis=0)


def cosine_scores(q: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Cosine similarity of one query vector against every gallery row."""
    q = np.asarray(q, dtype=np.float64)
    gallery = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if gallery.shape[1] != q.shape[0]:
        raise ShapeError(f"query dim {q.shape[0]} != gallery dim {gallery.shape[1]}")

    q_norm = np.linalg.norm(q)
    g_norms = np.linalg.norm(gallery, axis=1)
    if q_norm == 0:
        raise ZeroNormFeature("query feature has zero norm")
    if np.any(g_norms == 0):
        raise ZeroNormFeature(f"{int(np.sum(g_norms == 0))} gallery rows have zero norm")

    scores = (gallery @ q) / (g_norms * q_norm)
    return np.clip(scores, -1.0, 1.0)


def euclidean_to_similarity(dist):
    """Map a Euclidean distance to 1 / (1 + dist), a similarity in (0, 1]."""
    arr = np.asarray(dist, dtype=np.float64)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise NegativeDistance(f"distance must be >= 0, got {dist}")
    sim = 1.0 / (1.0 + arr)
    return float(sim) if sim.ndim == 0 else sim


def euclidean_scores(q: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    gallery = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if gallery.shape[1] != q.shape[0]:
        raise ShapeError(f"query dim {q.shape[0]} != gallery dim {gallery.shape[1]}")
    return euclidean_to_similarity(np.linalg.norm(gallery - q, axis=1))


def similarity(q: np.ndarray, gallery: np.ndarray, metric_kind: MetricKind) -> np.ndarray:
    """Score ``q`` against ``gallery`` with the modality's metric."""
    if MetricKind(metric_kind) is MetricKind.EUCLIDEAN:
        return euclidean_scores(q, gallery)
    return cosine_scores(q, gallery)


def score_query(frames: np.ndarray, gallery: np.ndarray, metric_kind: MetricKind) -> np.ndarray:
    """Aggregate a query's frames, then score it against every template."""
    return similarity(aggregate_query_feature(frames), gallery, metric_kind)


def build_score_matrix(
    channel: ModalityChannel,
    queries: list[QueryRecord],
    manifest: GalleryManifest,
) -> ScoreMatrix:
    """Score every query that carries features for ``channel``; others stay masked."""
    gallery = manifest.features.get(channel.modality_id)
    if gallery is None:
        raise ShapeError(f"no gallery features for modality {channel.modality_id}")

    values = np.full((len(queries), len(manifest.templates)), np.nan)
    for i, record in enumerate(queries):
        frames = record.features.get(channel.modality_id)
        if frames is None:
            continue
        values[i] = score_query(frames, gallery, channel.metric_kind)

    return ScoreMatrix(
        modality_id=channel.modality_id,
        query_ids=[q.query_id for q in queries],
        template_ids=manifest.template_ids,
        values=values,
        metric_kind=channel.metric_kind,
    )


def build_concat_scores(matrices: list[ScoreMatrix], query_id: str) -> ConcatScores:
    """Stack one query's per-modality rows into a T x N matrix.

    Column order follows ``matrices``. A modality without the query, or with a
    masked row, contributes a fully masked column; imputation happens at
    fusion time.
    """
    if not matrices:
        raise ShapeError("no score matrices to concatenate")
    template_ids = list(matrices[0].template_ids)
    for matrix in matrices[1:]:
        if list(matrix.template_ids) != template_ids:
            raise TemplateOrderMismatch(
                f"{matrix.modality_id} template order differs from {matrices[0].modality_id}"
            )

    num_templates = len(template_ids)
    values = np.full((num_templates, len(matrices)), np.nan)
    mask = np.zeros((num_templates, len(matrices)), dtype=bool)
    for j, matrix in enumerate(matrices):
        if not matrix.has_query(query_id):
            continue
        row, row_mask = matrix.row(query_id)
        values[:, j] = row
        mask[:, j] = row_mask

    return ConcatScores(
        query_id=query_id,
        template_ids=template_ids,
        modality_order=[m.modality_id for m in matrices],
        values=values,
        mask=mask,
    )


def split_concat_scores(concat: ConcatScores) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Inverse of build_concat_scores for one query: modality -> (row, mask)."""
    return {
        modality_id: (concat.values[:, j].copy(), concat.mask[:, j].copy())
        for j, modality_id in enumerate(concat.modality_order)
    }


def concat_all(matrices: list[ScoreMatrix], query_ids: list[str]) -> list[ConcatScores]:
    return [build_concat_scores(matrices, qid) for qid in query_ids]


def match_matrix(query_subjects, template_subjects) -> np.ndarray:
    """Q x T booleans, True where query and template share a subject."""
    q = np.asarray(query_subjects, dtype=object).reshape(-1, 1)
    t = np.asarray(template_subjects, dtype=object).reshape(1, -1)
    return np.asarray(q == t, dtype=bool)
