"""Fusion methods package."""

from scorefuse.methods.base import FusionInputs, FusionMethod, TrainedArtifacts
from scorefuse.methods.mixture import QME, QMEExpert
from scorefuse.methods.rules import FixedRule, NormalizedMean, SingleModality, WeightedSum

__all__ = [
    "FusionInputs",
    "FusionMethod",
    "TrainedArtifacts",
    "QME",
    "QMEExpert",
    "FixedRule",
    "NormalizedMean",
    "SingleModality",
    "WeightedSum",
]


def _registry(modality_order: list[str], num_experts: int = 2) -> dict[str, FusionMethod]:
    """Every method for a dataset, in comparison-table order."""
    methods: list[FusionMethod] = [SingleModality(m) for m in modality_order]
    methods += [FixedRule(rule) for rule in ("min", "max", "mean")]
    methods += [NormalizedMean(kind) for kind in ("zscore", "minmax", "rhe")]
    methods.append(WeightedSum())
    methods.append(QME())
    if num_experts > 1:
        methods += [QMEExpert(z) for z in range(num_experts)]
    return {m.name: m for m in methods}


def get_method(name: str, modality_order: list[str], num_experts: int = 2) -> FusionMethod | None:
    """Get a method by name."""
    return _registry(modality_order, num_experts).get(name)


def get_all_methods(modality_order: list[str], num_experts: int = 2) -> list[FusionMethod]:
    """Get all registered methods."""
    return list(_registry(modality_order, num_experts).values())
