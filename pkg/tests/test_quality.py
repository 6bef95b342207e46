import numpy as np
import pytest

from scorefuse.errors import EmptyTrainingSet, InvalidDelta, InvalidRank, ShapeError, UnknownSubject
from scorefuse.models import QueryRecord
from scorefuse.nnkit import DenseLayer, DenseNet
from scorefuse.quality import (
    IntermediateFeatures, QESample, QualityEstimatorModel, QualityTrainingConfig, RankTarget, TrainingGallery,
    build_qe_samples, compute_frame_ranks, compute_rank, predict_query_weight, pseudo_quality_label, qe_loss,
    reduce_features, train_qe,
)


# ===== FEATURE REDUCTION =====

def test_reduce_constant_tensor():
    out = reduce_features(np.full((3, 2, 4, 5), 0.7))
    np.testing.assert_allclose(out[:, :5], 0.7)
    np.testing.assert_allclose(out[:, 5:], 0.0, atol=1e-15)


def test_reduce_single_block_and_patch():
    tensor = np.arange(6, dtype=float).reshape(2, 1, 1, 3)
    out = reduce_features(IntermediateFeatures("face", tensor))
    np.testing.assert_array_equal(out[:, :3], tensor[:, 0, 0])
    np.testing.assert_array_equal(out[:, 3:], 0.0)


def test_reduce_matches_two_pass_moments(rng):
    tensor = rng.standard_normal((3, 4, 9, 8))
    out = reduce_features(tensor)
    for frame in range(3):
        flat = tensor[frame].reshape(-1, 8)
        mean = flat.sum(axis=0) / 36
        std = np.sqrt(((flat - mean) ** 2).sum(axis=0) / 36)
        np.testing.assert_allclose(out[frame, :8], mean, atol=1e-12)
        np.testing.assert_allclose(out[frame, 8:], std, atol=1e-12)


def test_intermediate_features_promotes_single_frame():
    assert IntermediateFeatures("face", np.zeros((2, 3, 4))).frame_count == 1
    with pytest.raises(ShapeError):
        IntermediateFeatures("face", np.zeros((2, 3)))


# ===== RANKS AND PSEUDO LABELS =====

@pytest.fixture
def axis_gallery():
    return TrainingGallery("face", ["a", "b", "c"], np.eye(3))


def test_rank_own_center(axis_gallery):
    assert compute_rank(np.array([1.0, 0.0, 0.0]), axis_gallery, "a") == 1


def test_rank_closer_to_other_center():
    gallery = TrainingGallery("face", ["a", "b"], np.eye(2))
    assert compute_rank(np.array([0.0, 1.0]), gallery, "a") == 2


def test_rank_ties_count_against_query(axis_gallery):
    assert compute_rank(np.array([1.0, 1.0, 0.0]), axis_gallery, "a") == 2


def test_rank_unknown_subject(axis_gallery):
    with pytest.raises(UnknownSubject):
        compute_rank(np.ones(3), axis_gallery, "z")


def test_rank_matches_full_sort(rng):
    subjects = [f"s{i:02d}" for i in range(20)]
    gallery = TrainingGallery("face", subjects, rng.standard_normal((20, 6)))
    for trial in range(30):
        q = rng.standard_normal(6)
        true = subjects[trial % 20]
        t = subjects.index(true)
        sims = gallery.centers @ q / (np.linalg.norm(gallery.centers, axis=1) * np.linalg.norm(q))
        order = sorted(range(20), key=lambda i: (-sims[i], i == t))
        assert compute_rank(q, gallery, true) == order.index(t) + 1


def test_gallery_centers_are_subject_means():
    gallery = TrainingGallery.from_samples(
        "face", ["b", "a", "b"], np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 0.0]])
    )
    assert gallery.subject_ids == ["a", "b"]
    np.testing.assert_array_equal(gallery.centers, [[0.0, 2.0], [2.0, 0.0]])


@pytest.mark.parametrize("rank,delta,expected", [
    (1, 3, 1.0), (2, 3, 0.5), (3, 3, 0.0), (7, 3, 0.0), (10, 20, 10 / 19),
])
def test_pseudo_quality_label(rank, delta, expected):
    assert pseudo_quality_label(rank, delta) == pytest.approx(expected)


def test_pseudo_quality_label_errors():
    with pytest.raises(InvalidDelta):
        pseudo_quality_label(1, 1.0)
    with pytest.raises(InvalidRank):
        pseudo_quality_label(0, 3.0)
    with pytest.raises(InvalidRank):
        RankTarget(0, 3.0)
    assert RankTarget(2, 3.0).label == 0.5


def test_frame_ranks_and_samples(axis_gallery):
    frames = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.9, 0.1, 0.0]])
    # the zero similarity to "c" ties with "a" on the second frame
    np.testing.assert_array_equal(compute_frame_ranks(frames, axis_gallery, "a"), [1, 3, 1])

    queries = [QueryRecord("q0", "a", 3, {"face": frames}), QueryRecord("q1", "b", 1)]
    samples = build_qe_samples("face", queries, {"q0": np.zeros((3, 4))}, axis_gallery, 3.0)
    assert [s.query_id for s in samples] == ["q0"]
    np.testing.assert_allclose(samples[0].labels, [1.0, 0.0, 1.0])

    with pytest.raises(ShapeError):
        build_qe_samples("face", queries, {"q0": np.zeros((2, 4))}, axis_gallery, 3.0)


# ===== ESTIMATOR =====

def _fixed_model(weight, bias=0.0):
    encoder = DenseNet([DenseLayer(np.array([[weight]]), np.array([bias]), "sigmoid")])
    return QualityEstimatorModel("face", 3.0, encoder, np.zeros(1), np.ones(1))


def test_query_weight_of_one_frame():
    model = _fixed_model(1.0)
    result = predict_query_weight(model, np.array([[0.4]]))
    assert result.query_weight == result.frame_weights[0]


def test_query_weight_is_frame_mean():
    model = _fixed_model(1.0)
    logit = np.log(0.2 / 0.8)
    result = predict_query_weight(model, np.array([[logit], [-logit]]))
    np.testing.assert_allclose(result.frame_weights, [0.2, 0.8])
    assert result.query_weight == pytest.approx(0.5)


def test_query_weight_matches_loop(rng):
    model = QualityEstimatorModel("face", 3.0, DenseNet.build([4, 3, 1], rng, output_activation="sigmoid"),
                                  np.zeros(4), np.ones(4))
    frames = rng.standard_normal((8, 4))
    expected = sum(model.predict_frames(frame[None])[0] for frame in frames) / 8
    assert predict_query_weight(model, frames).query_weight == pytest.approx(expected, abs=1e-12)


def test_query_weight_reduces_raw_features(rng):
    model = QualityEstimatorModel("face", 3.0, DenseNet.build([6, 1], rng, output_activation="sigmoid"),
                                  np.zeros(6), np.ones(6))
    raw = rng.standard_normal((5, 2, 3, 3))
    assert predict_query_weight(model, raw).query_weight == predict_query_weight(
        model, reduce_features(raw)).query_weight


def test_query_weight_dimension_mismatch():
    with pytest.raises(ShapeError):
        predict_query_weight(_fixed_model(1.0), np.zeros((2, 3)))


def _constant_label_samples(rng, label):
    return [QESample(f"q{i}", rng.standard_normal((5, 6)), np.full(5, label)) for i in range(20)]


_FAST = QualityTrainingConfig(hidden=(16, 8), epochs=80, batch_size=32, learning_rate=3e-2, weight_decay=0.0)


def test_qe_learns_constant_high_quality(rng):
    samples = _constant_label_samples(rng, 1.0)
    model = train_qe(samples, _FAST, "face")
    assert model.predict_frames(np.vstack([s.reduced for s in samples])).mean() >= 0.9


def test_qe_learns_constant_low_quality(rng):
    samples = _constant_label_samples(rng, 0.0)
    model = train_qe(samples, _FAST, "face")
    assert model.predict_frames(np.vstack([s.reduced for s in samples])).mean() <= 0.1
    assert qe_loss(model, samples) < 0.05


def test_qe_outputs_stay_inside_unit_interval(rng):
    model = _fixed_model(1000.0)
    weights = model.predict_frames(np.array([[5.0], [-5.0]]))
    assert 0.0 < weights.min() and weights.max() < 1.0


def test_qe_empty_training_set():
    with pytest.raises(EmptyTrainingSet):
        train_qe([], QualityTrainingConfig(), "face")


def test_qe_model_round_trip(rng):
    model = train_qe(_constant_label_samples(rng, 0.5), QualityTrainingConfig(epochs=2), "face")
    clone = QualityEstimatorModel.from_dict(model.to_dict())
    x = rng.standard_normal((4, 6))
    np.testing.assert_array_equal(clone.predict_frames(x), model.predict_frames(x))
    assert clone.history == model.history
