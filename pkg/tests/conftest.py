import numpy as np
import pytest

from scorefuse.config import RunConfig
from scorefuse.metrics import EvaluationConfig, OpenSetProtocol
from scorefuse.qme import FusionTrainingConfig
from scorefuse.quality import QualityTrainingConfig
from scorefuse.synth import SynthConfig, SynthModality


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def make_tiny_synth() -> SynthConfig:
    return SynthConfig(
        train_subjects=12,
        test_subjects=10,
        templates_per_subject=2,
        queries_per_subject=3,
        frames_per_query=6,
        blocks=2,
        patches=2,
        modalities=[
            SynthModality("face", feature_dim=8, sigma=0.5, kappa=10.0, degraded_fraction=0.4),
            SynthModality("body", feature_dim=8, sigma=2.0, kappa=1.0, quality_range=(0.6, 1.0)),
        ],
        seed=0,
    )


def make_tiny_run(output_dir) -> RunConfig:
    """A run small enough to push through every stage in a few seconds."""
    return RunConfig(
        seed=0,
        output_dir=str(output_dir),
        synth=make_tiny_synth(),
        quality=QualityTrainingConfig(epochs=3, batch_size=16),
        fusion=FusionTrainingConfig(epochs=3, batch_size=8, frames_per_view=4, views_per_query=2),
        evaluation=EvaluationConfig(ranks=(1, 5), far_targets=(0.01,), fpir_targets=(0.01,)),
        open_set=OpenSetProtocol(num_subsets=3, fraction=0.2, seed=0),
        histogram_bins=10,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_synth() -> SynthConfig:
    return make_tiny_synth()


@pytest.fixture
def tiny_run(tmp_path) -> RunConfig:
    return make_tiny_run(tmp_path / "run")
