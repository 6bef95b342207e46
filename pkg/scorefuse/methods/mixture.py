"""QME and its single-expert views."""

import logging
from typing import Optional

import numpy as np

from scorefuse.methods.base import FusionInputs, FusionMethod, TrainedArtifacts
from scorefuse.qme import FusedScores, FusionModel, infer_batch

logger = logging.getLogger(__name__)


def run_mixture(model: FusionModel, inputs: FusionInputs, artifacts: TrainedArtifacts) -> list[FusedScores]:
    gating = model.gating_modality
    qe = artifacts.qe.get(gating) if gating else None
    features = inputs.gating_features.get(gating, {}) if gating else {}
    return infer_batch(model, qe, inputs.concats, [features.get(qid) for qid in inputs.query_ids])


class QME(FusionMethod):
    """Quality-gated mixture of experts. ``model`` overrides the trained checkpoint."""
    requires = ("fusion",)

    def __init__(self, label: str = "qme", model: Optional[FusionModel] = None):
        self.label = label
        self.model = model

    @property
    def name(self) -> str:
        return self.label

    def results(self, inputs: FusionInputs, artifacts: TrainedArtifacts) -> list[FusedScores]:
        model = self.model or artifacts.require("fusion", "train-fusion")
        return run_mixture(model, inputs, artifacts)

    def fuse(self, inputs: FusionInputs, artifacts: TrainedArtifacts) -> np.ndarray:
        return np.vstack([r.fused for r in self.results(inputs, artifacts)])


class QMEExpert(FusionMethod):
    """Scores of expert ``index`` alone (1-based in the name)."""
    requires = ("fusion",)

    def __init__(self, index: int):
        self.index = index

    @property
    def name(self) -> str:
        return f"qme-expert{self.index + 1}"

    def fuse(self, inputs: FusionInputs, artifacts: TrainedArtifacts) -> np.ndarray:
        model = artifacts.require("fusion", "train-fusion")
        if self.index >= model.num_experts:
            raise ValueError(f"model has {model.num_experts} experts, asked for expert {self.index + 1}")
        return np.vstack([r.per_expert[self.index] for r in run_mixture(model, inputs, artifacts)])
