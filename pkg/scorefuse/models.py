"""Data models for scorefuse - the domain types every module shares."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from scorefuse.errors import EmptyQuery, FormatError, ShapeError

# Slack for cosine values that land a few ulps outside [-1, 1].
_RANGE_TOL = 1e-9


class MetricKind(str, Enum):
    """How a modality compares features."""
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"


@dataclass(frozen=True)
class ModalityChannel:
    """One biometric channel (face, gait, body...)."""
    modality_id: str
    metric_kind: MetricKind = MetricKind.COSINE
    feature_dim: int = 1

    def __post_init__(self):
        if not self.modality_id:
            raise ShapeError("modality_id must be a non-empty string")
        if self.feature_dim < 1:
            raise ShapeError(f"feature_dim must be >= 1, got {self.feature_dim}")
        # Accept plain strings from JSON
        object.__setattr__(self, "metric_kind", MetricKind(self.metric_kind))


@dataclass
class QueryRecord:
    """A query sequence and its per-modality frame features (L x d_n)."""
    query_id: str
    subject_id: str
    frame_count: int
    features: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.frame_count < 1:
            raise EmptyQuery(f"query {self.query_id} has no frames")
        for modality_id, frames in list(self.features.items()):
            frames = np.asarray(frames, dtype=np.float64)
            if frames.ndim != 2 or frames.shape[0] != self.frame_count:
                raise ShapeError(
                    f"query {self.query_id}/{modality_id}: expected {self.frame_count} frame rows, "
                    f"got shape {frames.shape}"
                )
            self.features[modality_id] = frames

    def has(self, modality_id: str) -> bool:
        return modality_id in self.features


@dataclass(frozen=True)
class GalleryTemplate:
    """An enrolled template."""
    template_id: str
    subject_id: str


@dataclass
class GalleryManifest:
    """Subjects, gallery templates, queries and per-modality template features (T x d_n)."""
    subjects: list[str]
    templates: list[GalleryTemplate]
    queries: list[QueryRecord] = field(default_factory=list)
    features: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.templates:
            raise FormatError("gallery needs at least one template")
        known = set(self.subjects)
        ids = [t.template_id for t in self.templates]
        if len(set(ids)) != len(ids):
            raise FormatError("duplicate template_id in gallery")
        for template in self.templates:
            if template.subject_id not in known:
                raise FormatError(f"template {template.template_id} has unknown subject {template.subject_id}")
        for modality_id, matrix in list(self.features.items()):
            matrix = np.asarray(matrix, dtype=np.float64)
            if matrix.ndim != 2 or matrix.shape[0] != len(self.templates):
                raise ShapeError(
                    f"gallery features for {modality_id}: expected {len(self.templates)} rows, got {matrix.shape}"
                )
            self.features[modality_id] = matrix

    @property
    def template_ids(self) -> list[str]:
        return [t.template_id for t in self.templates]

    @property
    def template_subjects(self) -> np.ndarray:
        return np.array([t.subject_id for t in self.templates], dtype=object)

    @property
    def query_ids(self) -> list[str]:
        return [q.query_id for q in self.queries]

    @property
    def query_subjects(self) -> np.ndarray:
        return np.array([q.subject_id for q in self.queries], dtype=object)

    def query(self, query_id: str) -> QueryRecord:
        for record in self.queries:
            if record.query_id == query_id:
                return record
        raise KeyError(query_id)


@dataclass
class ScoreMatrix:
    """Per-modality query x template similarity scores with a presence mask.

    Masked entries hold NaN in ``values``; readers consult ``mask``.
    """
    modality_id: str
    query_ids: list[str]
    template_ids: list[str]
    values: np.ndarray
    mask: Optional[np.ndarray] = None
    metric_kind: MetricKind = MetricKind.COSINE

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (len(self.query_ids), len(self.template_ids)):
            raise ShapeError(
                f"{self.modality_id}: values shape {values.shape} does not match "
                f"{len(self.query_ids)} queries x {len(self.template_ids)} templates"
            )
        mask = ~np.isnan(values) if self.mask is None else np.array(self.mask, dtype=bool)
        if mask.shape != values.shape:
            raise ShapeError(f"{self.modality_id}: mask shape {mask.shape} != values shape {values.shape}")
        values[~mask] = np.nan
        if np.isnan(values[mask]).any():
            raise FormatError(f"{self.modality_id}: NaN score marked as present")

        self.metric_kind = MetricKind(self.metric_kind)
        present = values[mask]
        if present.size:
            if self.metric_kind is MetricKind.COSINE:
                bad = (present < -1 - _RANGE_TOL) | (present > 1 + _RANGE_TOL)
            else:
                bad = (present <= 0) | (present > 1 + _RANGE_TOL)
            if bad.any():
                raise FormatError(f"{self.modality_id}: {int(bad.sum())} scores outside the {self.metric_kind.value} range")

        values.setflags(write=False)
        mask.setflags(write=False)
        self.values = values
        self.mask = mask
        self._row_index = {qid: i for i, qid in enumerate(self.query_ids)}

    def has_query(self, query_id: str) -> bool:
        return query_id in self._row_index

    def row(self, query_id: str) -> tuple[np.ndarray, np.ndarray]:
        """(values, mask) for one query."""
        i = self._row_index[query_id]
        return self.values[i], self.mask[i]


@dataclass
class ConcatScores:
    """T x N scores of one query, one column per modality in ``modality_order``."""
    query_id: str
    template_ids: list[str]
    modality_order: list[str]
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if len(self.modality_order) < 2:
            raise ShapeError("score fusion needs at least two modalities")
        expected = (len(self.template_ids), len(self.modality_order))
        if self.values.shape != expected or self.mask.shape != expected:
            raise ShapeError(f"concat scores for {self.query_id}: expected {expected}, got {self.values.shape}")

    @property
    def num_templates(self) -> int:
        return len(self.template_ids)

    @property
    def missing_modalities(self) -> list[str]:
        """Modalities with no present score for this query."""
        absent = ~self.mask.any(axis=0)
        return [m for m, gone in zip(self.modality_order, absent) if gone]

    def column(self, modality_id: str) -> tuple[np.ndarray, np.ndarray]:
        j = self.modality_order.index(modality_id)
        return self.values[:, j], self.mask[:, j]
