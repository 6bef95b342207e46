"""Abstract base class for fusion methods."""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from scorefuse.baselines import NormalizationStats, WeightedSumModel
from scorefuse.errors import AllModalitiesMissing, StageOrderViolation
from scorefuse.models import ConcatScores
from scorefuse.qme import FusionModel
from scorefuse.quality import QualityEstimatorModel

logger = logging.getLogger(__name__)


@dataclass
class FusionInputs:
    """Test-split scores of every query plus the QE inputs available for gating."""
    modality_order: list[str]
    concats: list[ConcatScores]
    gating_features: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    @property
    def query_ids(self) -> list[str]:
        return [c.query_id for c in self.concats]


@dataclass
class TrainedArtifacts:
    """Whatever the training stages produced; methods pick what they need."""
    stats: Optional[NormalizationStats] = None
    weighted_sum: Optional[WeightedSumModel] = None
    fusion: Optional[FusionModel] = None
    qe: dict[str, QualityEstimatorModel] = field(default_factory=dict)

    def require(self, name: str, stage: str):
        value = getattr(self, name)
        if value is None:
            raise StageOrderViolation(f"{name} is missing; run {stage} first")
        return value


class FusionMethod(ABC):
    """Base class for all fusion methods."""

    requires: tuple[str, ...] = ()

    @property
    @abstractmethod
    def name(self) -> str:
        """Method name for tables and --method."""
        ...

    @abstractmethod
    def fuse(self, inputs: FusionInputs, artifacts: TrainedArtifacts) -> np.ndarray:
        """Q x T fused scores, NaN where a template row cannot be scored."""
        ...


def fuse_per_query(inputs: FusionInputs, fn: Callable[[ConcatScores], np.ndarray], method: str) -> np.ndarray:
    """Apply ``fn`` per query; a query with nothing to fuse gets a NaN row."""
    rows = []
    skipped = 0
    for concat in inputs.concats:
        try:
            rows.append(np.asarray(fn(concat), dtype=np.float64))
        except AllModalitiesMissing:
            rows.append(np.full(concat.num_templates, np.nan))
            skipped += 1
    if skipped:
        logger.warning("%s: %d queries had no modality to fuse", method, skipped)
    return np.vstack(rows) if rows else np.zeros((0, 0))
