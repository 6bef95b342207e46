import numpy as np
import pytest

from scorefuse.baselines import NormalizationStats, fit_modality_stats
from scorefuse.errors import StageOrderViolation
from scorefuse.methods import (
    QME, FixedRule, FusionInputs, NormalizedMean, QMEExpert, SingleModality, TrainedArtifacts, get_all_methods,
    get_method,
)
from scorefuse.models import ConcatScores
from scorefuse.qme import FusionModel


def _inputs():
    values = [
        np.array([[0.9, 0.2], [0.1, 0.4]]),
        np.array([[0.3, np.nan], [0.5, np.nan]]),
        np.array([[np.nan, np.nan], [np.nan, np.nan]]),
    ]
    concats = [ConcatScores(f"q{i}", ["t0", "t1"], ["face", "body"], v, ~np.isnan(v)) for i, v in enumerate(values)]
    return FusionInputs(["face", "body"], concats)


def test_registry_order_and_names():
    names = [m.name for m in get_all_methods(["face", "body"], num_experts=2)]
    assert names == ["single:face", "single:body", "min", "max", "mean", "zscore", "minmax", "rhe",
                     "weighted-sum", "qme", "qme-expert1", "qme-expert2"]
    assert "qme-expert1" not in [m.name for m in get_all_methods(["face", "body"], num_experts=1)]
    assert get_method("nope", ["face", "body"]) is None


def test_single_modality_keeps_nan_for_absent_queries():
    scores = SingleModality("body").fuse(_inputs(), TrainedArtifacts())
    np.testing.assert_array_equal(scores[0], [0.2, 0.4])
    assert np.isnan(scores[1]).all()


def test_fixed_rule_fills_unfusable_query_with_nan(caplog):
    scores = FixedRule("max").fuse(_inputs(), TrainedArtifacts())
    np.testing.assert_array_equal(scores[:2], [[0.9, 0.4], [0.3, 0.5]])
    assert np.isnan(scores[2]).all()
    assert "no modality to fuse" in caplog.text


def test_trained_methods_require_artifacts():
    with pytest.raises(StageOrderViolation):
        NormalizedMean("zscore").fuse(_inputs(), TrainedArtifacts())
    with pytest.raises(StageOrderViolation):
        QME().fuse(_inputs(), TrainedArtifacts())


def test_normalized_mean_uses_stats():
    stats = NormalizationStats({
        "face": fit_modality_stats(np.array([0.0, 1.0]), np.zeros(2, dtype=bool)),
        "body": fit_modality_stats(np.array([0.0, 0.5]), np.zeros(2, dtype=bool)),
    })
    scores = NormalizedMean("minmax").fuse(_inputs(), TrainedArtifacts(stats=stats))
    np.testing.assert_allclose(scores[0], [(0.9 + 0.4) / 2, (0.1 + 0.8) / 2])


def test_qme_and_expert_views_agree():
    inputs = _inputs()
    inputs.concats = inputs.concats[:2]
    model = FusionModel.build(["face", "body"], seed=1, gating="uniform")
    artifacts = TrainedArtifacts(fusion=model)
    fused = QME().fuse(inputs, artifacts)
    e1 = QMEExpert(0).fuse(inputs, artifacts)
    e2 = QMEExpert(1).fuse(inputs, artifacts)
    np.testing.assert_allclose(fused, (e1 + e2) / 2, atol=1e-12)
    assert QME("variant", model).fuse(inputs, TrainedArtifacts()).shape == (2, 2)
