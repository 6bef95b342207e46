"""Multi-seed trend checks on the default synthetic benchmark. Slow: run with ``-m slow``."""
import json
from dataclasses import dataclass

import numpy as np
import pytest

from scorefuse.config import RunConfig
from scorefuse.metrics import EvalReport
from scorefuse.pipeline import (
    CompareResult, RunContext, load_data, load_qe, run_compare, run_evaluate, run_generate, run_train_fusion,
    run_train_qe,
)
from scorefuse.quality import predict_query_weight
from scorefuse.reports import spearman

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4)


@dataclass
class SeedRun:
    cfg: RunConfig
    compare: CompareResult
    qme: EvalReport

    def tar(self, method: str) -> float:
        rows = self.compare.rows + self.compare.ablation_rows
        return next(r["tar@far"] for r in rows if r["method"] == method)

    def row(self, method: str) -> dict:
        return next(r for r in self.compare.rows if r["method"] == method)


@pytest.fixture(scope="module")
def seed_runs(tmp_path_factory) -> list[SeedRun]:
    root = tmp_path_factory.mktemp("experiments")
    runs = []
    for seed in SEEDS:
        cfg = RunConfig(output_dir=str(root / f"seed{seed}")).with_seed(seed)
        run_generate(cfg)
        run_train_qe(cfg)
        run_train_fusion(cfg)
        compare = run_compare(cfg, ["grid"], mask_fraction=0.2, mask_modality="face")
        runs.append(SeedRun(cfg, compare, run_evaluate(cfg, "qme")))
    return runs


def _nonincreasing_fraction(history: list[float]) -> float:
    steps = np.diff(history)
    return float(np.mean(steps <= 0.0))


def test_qe_tracks_true_quality(seed_runs):
    hits = 0
    for run in seed_runs:
        ctx = RunContext.open(run.cfg)
        model = load_qe(ctx, "face")
        test = load_data(ctx, "test")
        ids = [q.query_id for q in test.manifest.queries if test.reduced["face"].get(q.query_id) is not None]
        predicted = [predict_query_weight(model, test.reduced["face"][qid]).query_weight for qid in ids]
        truth = [test.quality[(qid, "face")] for qid in ids]
        hits += spearman(predicted, truth) >= 0.6
    assert hits >= 4


def test_training_losses_mostly_nonincreasing(seed_runs):
    hits = 0
    for run in seed_runs:
        out = run.cfg.out_path
        qe_history = json.loads((out / "qe_face.json").read_text())["payload"]["history"]
        fusion_history = json.loads((out / "fusion.json").read_text())["payload"]["history"]
        hits += _nonincreasing_fraction(qe_history) >= 0.95 and _nonincreasing_fraction(fusion_history) >= 0.95
    assert hits >= 4


def test_fusion_beats_single_modality_and_zscore(seed_runs):
    wins = 0
    for run in seed_runs:
        qme = run.row("qme")
        rivals = [run.row("single:face"), run.row("single:body"), run.row("zscore")]
        beats = all(qme["rank1"] > r["rank1"] and qme["tar@far"] > r["tar@far"] for r in rivals)
        wins += beats and qme["tar@far"] - run.row("zscore")["tar@far"] >= 0.01
    assert wins >= 4


@pytest.mark.parametrize("better, worse", [
    ("qme[score,uniform,z1]", "qme[triplet,uniform,z1]"),
    ("qme[score,uniform,z2]", "qme[triplet,uniform,z2]"),
    ("qme[score,uniform,z2]", "qme[score,uniform,z1]"),
    ("qme[triplet,uniform,z2]", "qme[triplet,uniform,z1]"),
    ("qme[score,qe,z2]", "qme[score,uniform,z2]"),
])
def test_ablation_ordering(seed_runs, better, worse):
    assert sum(run.tar(better) > run.tar(worse) for run in seed_runs) >= 4


def test_match_scores_pushed_past_margin(seed_runs):
    for run in seed_runs:
        dist = run.qme.distribution
        assert dist.match_mean >= run.cfg.fusion.margin - 0.5
        assert dist.non_match_p95 <= 1.0


def test_missing_modality_robustness(seed_runs):
    qme_drops, mean_drops = [], []
    for run in seed_runs:
        drops = {r["method"]: r["rank1_drop"] for r in run.compare.robustness_rows}
        qme_drops.append(drops["qme"])
        mean_drops.append(drops["mean"])
    assert np.median(qme_drops) <= 0.5 * np.median(mean_drops)
