import numpy as np
import pytest

from scorefuse.core import match_matrix
from scorefuse.errors import DegenerateConfig
from scorefuse.metrics import cmc
from scorefuse.storage import NA_TOKEN
from scorefuse.synth import SynthConfig, SynthModality, default_modalities, emit, generate, generate_split, load_split


def _labels(split):
    return match_matrix(split.manifest.query_subjects, split.manifest.template_subjects)


def _match_similarity(split, modality_id):
    values = split.score_matrix(modality_id).values
    labels = _labels(split)
    return np.array([row[m].mean() for row, m in zip(values, labels)])


def test_generation_is_deterministic(tiny_synth):
    a, b = generate(tiny_synth), generate(tiny_synth)
    for mod in ("face", "body"):
        np.testing.assert_array_equal(a.test.score_matrix(mod).values, b.test.score_matrix(mod).values)
    assert a.train.quality == b.train.quality


def test_seed_changes_the_draws(tiny_synth):
    other = SynthConfig(**{**tiny_synth.__dict__, "seed": 1})
    assert not np.array_equal(generate_split(tiny_synth, 1).score_matrix("face").values,
                              generate_split(other, 1).score_matrix("face").values)


def test_split_layout(tiny_synth):
    dataset = generate(tiny_synth)
    train, test = dataset.train, dataset.test
    assert not set(train.manifest.subjects) & set(test.manifest.subjects)
    assert len(test.manifest.templates) == 10 * 2
    assert len(test.manifest.queries) == 10 * 3
    assert test.manifest.query_ids[:2] == ["te0000_q0", "te0000_q1"]
    assert test.intermediate["face"]["te0000_q0"].shape == (6, 2, 2, 8)
    assert test.reduced["face"]["te0000_q0"].shape == (6, 16)
    assert test.modality_order == ["face", "body"]


@pytest.mark.parametrize("change", [
    {"frames_per_query": 0},
    {"test_subjects": 0},
    {"modalities": []},
    {"modalities": [SynthModality("face"), SynthModality("face")]},
    {"modalities": [SynthModality("face", feature_dim=1)]},
    {"modalities": [SynthModality("face", quality_range=(0.5, 1.2))]},
])
def test_degenerate_configs(change):
    with pytest.raises(DegenerateConfig):
        generate(SynthConfig(**change))


def test_emitted_split_round_trips(tiny_synth, tmp_path):
    dataset = generate(tiny_synth)
    written = emit(dataset, tmp_path)
    assert (tmp_path / "train" / "manifest.json") in written
    test = load_split(tmp_path / "test")
    assert test.name == "test"
    for mod in ("face", "body"):
        np.testing.assert_array_equal(test.score_matrix(mod).values, dataset.test.score_matrix(mod).values)
        np.testing.assert_array_equal(test.manifest.features[mod], dataset.test.manifest.features[mod])
        np.testing.assert_array_equal(test.reduced[mod]["te0003_q1"], dataset.test.reduced[mod]["te0003_q1"])
    assert test.quality == dataset.test.quality
    assert test.quality_rows() == dataset.test.quality_rows()


def test_missing_modality_is_written_as_na(tmp_path):
    config = SynthConfig(
        train_subjects=4, test_subjects=5, templates_per_subject=1, queries_per_subject=4, frames_per_query=3,
        modalities=[SynthModality("face", feature_dim=4), SynthModality("body", feature_dim=4, missing_fraction=0.5)],
    )
    dataset = generate(config)
    emit(dataset, tmp_path)
    absent = [q.query_id for q in dataset.test.manifest.queries if not q.has("body")]
    assert absent

    rows = {line.split(",")[0]: line.split(",")[1:]
            for line in (tmp_path / "test" / "scores_body.csv").read_text().splitlines()[1:]}
    for query_id, tokens in rows.items():
        assert (tokens == [NA_TOKEN] * 5) == (query_id in absent)
    quality = load_split(tmp_path / "test").quality
    assert all((qid, "body") not in quality for qid in absent)


def test_clean_queries_are_identified(rng):
    config = SynthConfig(
        train_subjects=2, test_subjects=20, templates_per_subject=2, queries_per_subject=3,
        modalities=[SynthModality("face", sigma=0.05, quality_range=(1.0, 1.0)), SynthModality("body")],
    )
    test = generate(config).test
    assert cmc(test.score_matrix("face").values, _labels(test), 1) >= 0.95


def test_match_similarity_falls_with_quality():
    config = SynthConfig(
        train_subjects=2, test_subjects=50, queries_per_subject=24, frames_per_query=12,
        modalities=[SynthModality("face", kappa=5.0, quality_range=(0.0, 1.0)), SynthModality("body")],
    )
    test = generate(config).test
    sims = _match_similarity(test, "face")
    q = np.array([test.quality[(qid, "face")] for qid in test.manifest.query_ids])
    bins = np.minimum((q * 10).astype(int), 9)
    means = [sims[bins == b].mean() for b in range(10)]
    assert np.corrcoef(np.argsort(np.argsort(means)), np.arange(10))[0, 1] >= 0.9


def test_degraded_face_queries_rank_worse():
    config = SynthConfig(train_subjects=2, test_subjects=30, modalities=default_modalities())
    test = generate(config).test
    q = np.array([test.quality[(qid, "face")] for qid in test.manifest.query_ids])
    degraded = q < 0.5
    assert 0 < degraded.sum() < len(q)
    scores, labels = test.score_matrix("face").values, _labels(test)
    assert cmc(scores[~degraded], labels[~degraded]) - cmc(scores[degraded], labels[degraded]) >= 0.10


def test_patch_spread_tracks_quality():
    config = SynthConfig(
        train_subjects=2, test_subjects=20, queries_per_subject=10,
        modalities=[SynthModality("face", quality_range=(0.0, 1.0)), SynthModality("body")],
    )
    test = generate(config).test
    d = 32
    spread = [test.reduced["face"][qid][:, d:].mean() for qid in test.manifest.query_ids]
    q = [test.quality[(qid, "face")] for qid in test.manifest.query_ids]
    rank_corr = np.corrcoef(np.argsort(np.argsort(spread)), np.argsort(np.argsort(q)))[0, 1]
    assert rank_corr <= -0.9


def test_noise_scale_ignores_quality_without_kappa():
    m = SynthModality("face", sigma=0.4, kappa=0.0)
    assert m.noise_scale(0.1) == m.noise_scale(0.9) == 0.4
    assert SynthModality("face", sigma=0.5, kappa=20.0).noise_scale(0.0) == pytest.approx(10.5)
