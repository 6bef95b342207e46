import numpy as np
import pytest

from scorefuse.baselines import (
    NormalizationStats, WeightedSumConfig, WeightedSumModel, fit_modality_stats, fit_normalization_stats,
    fit_weighted_sum, fuse_rows, max_fusion, mean_fusion, min_fusion, minmax_normalize, normalize_concat,
    rhe_normalize, weighted_sum_fusion, zscore_normalize,
)
from scorefuse.errors import AllModalitiesMissing
from scorefuse.models import ConcatScores
from scorefuse.qme import ScoreLabels


def _stats(pool, match=None):
    pool = np.asarray(pool, dtype=float)
    match = np.zeros(pool.size, dtype=bool) if match is None else np.asarray(match)
    return NormalizationStats({"m": fit_modality_stats(pool, match)})


# ===== FIXED RULES =====

def test_fixed_rules_on_two_scores():
    row = np.array([0.2, 0.8])
    assert min_fusion(row) == 0.2
    assert max_fusion(row) == 0.8
    assert mean_fusion(row) == pytest.approx(0.5)


def test_fixed_rules_skip_masked_entry():
    row = np.array([np.nan, 0.7])
    assert min_fusion(row) == max_fusion(row) == mean_fusion(row) == 0.7


def test_fixed_rules_all_masked():
    with pytest.raises(AllModalitiesMissing):
        mean_fusion(np.array([np.nan, np.nan]))


def test_fuse_rows_matches_loop(rng):
    values = rng.uniform(-1, 1, size=(20, 3))
    mask = rng.random((20, 3)) > 0.3
    mask[:, 0] = True
    for rule, fn in (("min", min), ("max", max)):
        expected = [fn(v for v, keep in zip(row, m) if keep) for row, m in zip(values, mask)]
        np.testing.assert_array_equal(fuse_rows(values, mask, rule), expected)


def test_fuse_rows_rejects_empty_row():
    with pytest.raises(AllModalitiesMissing):
        fuse_rows(np.zeros((2, 2)), np.array([[True, False], [False, False]]), "mean")


# ===== NORMALIZATION =====

def test_zscore_examples():
    stats = _stats([1.0, 2.0, 3.0])
    assert zscore_normalize(stats, "m", 2.0) == pytest.approx(0.0)
    assert zscore_normalize(stats, "m", 3.0) == pytest.approx(1.2247, abs=1e-4)


def test_zscore_constant_pool_maps_to_zero():
    assert zscore_normalize(_stats([0.4, 0.4, 0.4]), "m", 0.9) == 0.0


def test_minmax_examples():
    stats = _stats([2.0, 6.0])
    assert minmax_normalize(stats, "m", 4.0) == pytest.approx(0.5)
    assert minmax_normalize(stats, "m", 1.0) == 0.0
    assert minmax_normalize(stats, "m", 9.0) == 1.0
    assert minmax_normalize(_stats([3.0, 3.0]), "m", 7.0) == 0.5


def test_minmax_maps_pool_onto_unit_interval(rng):
    pool = rng.normal(size=50)
    stats = _stats(pool)
    out = minmax_normalize(stats, "m", pool)
    assert out.min() == 0.0 and out.max() == 1.0
    expected = [(p - pool.min()) / (pool.max() - pool.min()) for p in pool]
    np.testing.assert_allclose(out, expected, atol=1e-15)


def test_rhe_examples():
    stats = _stats([0.1, 0.2, 0.3, 0.4])
    assert rhe_normalize(stats, "m", 0.25) == 0.5
    assert rhe_normalize(stats, "m", 0.9) == 1.0


def test_rhe_reference_is_non_match_pool():
    stats = _stats([0.1, 0.2, 0.9], match=[False, False, True])
    assert rhe_normalize(stats, "m", 0.5) == 1.0


def test_rhe_matches_counting_oracle(rng):
    ref = rng.normal(size=40)
    stats = _stats(ref)
    for score in rng.normal(size=20):
        assert rhe_normalize(stats, "m", score) == sum(r <= score for r in ref) / 40


def test_normalize_concat_keeps_masked_entries_nan():
    concat = ConcatScores("q", ["a", "b"], ["m", "n"], np.array([[1.0, np.nan], [3.0, 0.5]]),
                          np.array([[True, False], [True, True]]))
    stats = NormalizationStats({**_stats([1.0, 3.0]).per_modality,
                                "n": fit_modality_stats(np.array([0.0, 1.0]), np.array([False, False]))})
    out = normalize_concat(stats, concat, "minmax")
    assert np.isnan(out[0, 1])
    np.testing.assert_allclose(out[:, 0], [0.0, 1.0])


def test_stats_round_trip():
    stats = _stats([0.3, 0.1, 0.2])
    back = NormalizationStats.from_dict(stats.to_dict())
    assert back["m"].mean == stats["m"].mean
    np.testing.assert_array_equal(back["m"].reference, [0.1, 0.2, 0.3])


# ===== WEIGHTED SUM =====

def test_weighted_sum_examples():
    assert weighted_sum_fusion(np.array([0.5, 0.5]), np.array([0.2, 0.8])) == pytest.approx(0.5)
    assert weighted_sum_fusion(np.array([1.0, 0.0]), np.array([0.37, 0.8])) == 0.37


def test_weighted_sum_renormalizes_over_present():
    assert weighted_sum_fusion(np.array([0.25, 0.75]), np.array([np.nan, 0.6])) == pytest.approx(0.6)


def _noise_vs_signal(seed, queries=200, templates=10):
    rng = np.random.default_rng(seed)
    samples, labels = [], []
    for q in range(queries):
        match = np.zeros(templates, dtype=bool)
        match[rng.integers(templates)] = True
        noise = rng.normal(0.0, 1.0, templates)
        signal = np.where(match, rng.normal(2.0, 0.5, templates), rng.normal(0.0, 0.5, templates))
        values = np.stack([noise, signal], axis=1)
        samples.append(ConcatScores(f"q{q}", [f"t{t}" for t in range(templates)], ["noise", "signal"],
                                    values, np.ones_like(values, dtype=bool)))
        labels.append(ScoreLabels(match))
    return samples, labels


@pytest.mark.parametrize("seed", range(5))
def test_weighted_sum_learns_to_ignore_noise(seed):
    samples, labels = _noise_vs_signal(seed)
    model = fit_weighted_sum(samples, labels, WeightedSumConfig(seed=seed))
    assert model.weights[0] < 0.2
    assert model.history[-1] < model.history[0]


def test_weighted_sum_model_round_trip():
    samples, labels = _noise_vs_signal(0, queries=20)
    model = fit_weighted_sum(samples, labels, WeightedSumConfig(epochs=2))
    clone = WeightedSumModel.from_dict(model.to_dict())
    np.testing.assert_array_equal(clone.fuse(samples[0]), model.fuse(samples[0]))
    assert set(fit_normalization_stats(samples, labels).per_modality) == {"noise", "signal"}
