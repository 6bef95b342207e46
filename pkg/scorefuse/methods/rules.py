"""Single-modality, fixed-rule and normalized-mean fusion."""

import numpy as np

from scorefuse.baselines import fuse_rows, normalized_mean_fusion
from scorefuse.methods.base import FusionInputs, FusionMethod, TrainedArtifacts, fuse_per_query


class SingleModality(FusionMethod):
    """One modality's raw scores; queries without it stay NaN."""

    def __init__(self, modality_id: str):
        self.modality_id = modality_id

    @property
    def name(self) -> str:
        return f"single:{self.modality_id}"

    def fuse(self, inputs: FusionInputs, artifacts: TrainedArtifacts) -> np.ndarray:
        rows = []
        for concat in inputs.concats:
            values, mask = concat.column(self.modality_id)
            rows.append(np.where(mask, values, np.nan))
        return np.vstack(rows)


class FixedRule(FusionMethod):
    """min / max / mean over present raw scores."""

    def __init__(self, rule: str):
        self.rule = rule

    @property
    def name(self) -> str:
        return self.rule

    def fuse(self, inputs: FusionInputs, artifacts: TrainedArtifacts) -> np.ndarray:
        return fuse_per_query(inputs, lambda c: fuse_rows(c.values, c.mask, self.rule), self.name)


class NormalizedMean(FusionMethod):
    requires = ("stats",)

    def __init__(self, kind: str):
        self.kind = kind

    @property
    def name(self) -> str:
        return self.kind

    def fuse(self, inputs: FusionInputs, artifacts: TrainedArtifacts) -> np.ndarray:
        stats = artifacts.require("stats", "train-fusion")
        return fuse_per_query(inputs, lambda c: normalized_mean_fusion(stats, c, self.kind), self.name)


class WeightedSum(FusionMethod):
    requires = ("weighted_sum",)

    @property
    def name(self) -> str:
        return "weighted-sum"

    def fuse(self, inputs: FusionInputs, artifacts: TrainedArtifacts) -> np.ndarray:
        model = artifacts.require("weighted_sum", "train-fusion")
        return fuse_per_query(inputs, model.fuse, self.name)
