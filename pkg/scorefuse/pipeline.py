"""Stage orchestration: generate -> train-qe -> train-fusion -> evaluate -> compare.

Every artifact is a JSON envelope carrying the format version and the hash of
the config that produced it; a later stage refuses an artifact from another
config.
"""

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from scorefuse import FORMAT_VERSION
from scorefuse.baselines import NormalizationStats, WeightedSumModel, fit_normalization_stats, fit_weighted_sum
from scorefuse.config import RunConfig, config_hash, save_run_config
from scorefuse.core import concat_all, match_matrix, score_query
from scorefuse.errors import ConfigDrift, ConfigError, FormatError, StageOrderViolation
from scorefuse.methods import QME, FusionInputs, FusionMethod, TrainedArtifacts, get_all_methods, get_method
from scorefuse.metrics import EvalReport, cmc, evaluate, split_scores
from scorefuse.models import ConcatScores
from scorefuse.qme import (
    NEUTRAL_WEIGHT, FusionModel, FusionSample, FusionTrainingConfig, ScoreLabels, train_fusion,
)
from scorefuse.quality import QualityEstimatorModel, TrainingGallery, build_qe_samples, predict_query_weight, train_qe
from scorefuse.reports import (
    comparison_row, quality_histogram, score_histogram, spearman, write_comparison, write_histogram, write_report,
)
from scorefuse.runlog import RunLog, attach_runlog
from scorefuse.synth import SynthSplit, emit, generate, load_split

logger = logging.getLogger(__name__)

# Substream ids next to the synth split indices 0 (train) and 1 (test).
_VIEW_STREAM = 2
_MASK_STREAM = 3

ABLATION_FLAGS = {
    "score-loss-off": {"loss": "triplet"},
    "qe-off": {"gating": "uniform"},
    "z1": {"num_experts": 1},
}

ABLATION_GRID = [
    ("qme[triplet,uniform,z1]", {"loss": "triplet", "gating": "uniform", "num_experts": 1}),
    ("qme[score,uniform,z1]", {"loss": "score", "gating": "uniform", "num_experts": 1}),
    ("qme[triplet,uniform,z2]", {"loss": "triplet", "gating": "uniform", "num_experts": 2}),
    ("qme[score,uniform,z2]", {"loss": "score", "gating": "uniform", "num_experts": 2}),
    ("qme[score,qe,z2]", {"loss": "score", "gating": "quality", "num_experts": 2}),
]


# ===== ARTIFACTS =====

def write_artifact(path: Path, kind: str, payload: dict, cfg_hash: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    envelope = {"format_version": FORMAT_VERSION, "kind": kind, "config_hash": cfg_hash, "payload": payload}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(envelope, f, indent=2, sort_keys=True)
    return path


def read_artifact(path: Path, kind: str, cfg_hash: str, stage: str) -> dict:
    """Payload of an artifact; missing -> StageOrderViolation, other config -> ConfigDrift."""
    if not path.exists():
        raise StageOrderViolation(f"{path.name} not found; run {stage} first")
    try:
        with open(path, "r", encoding="utf-8") as f:
            envelope = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: {e}") from e
    if envelope.get("format_version") != FORMAT_VERSION or envelope.get("kind") != kind:
        raise FormatError(f"{path}: expected {kind} v{FORMAT_VERSION}, got {envelope.get('kind')} "
                          f"v{envelope.get('format_version')}")
    if envelope.get("config_hash") != cfg_hash:
        raise ConfigDrift(f"{path.name} was produced by config {envelope.get('config_hash')}, current is {cfg_hash}")
    return envelope["payload"]


# ===== RUN CONTEXT =====

@dataclass
class RunContext:
    config: RunConfig
    config_hash: str
    out: Path
    runlog: RunLog

    @classmethod
    def open(cls, config: RunConfig) -> "RunContext":
        cfg_hash = config_hash(config)
        out = config.out_path
        runlog = RunLog(out / "run.log.jsonl", cfg_hash, config.seed)
        save_run_config(config, out / "config.json")
        attach_runlog(runlog)
        return cls(config, cfg_hash, out, runlog)

    @contextmanager
    def stage(self, name: str):
        self.runlog.event("stage_start", stage=name)
        start = time.perf_counter()
        try:
            yield
        except Exception as e:
            self.runlog.event("stage_failed", stage=name, error=getattr(e, "code", type(e).__name__), message=str(e),
                              seconds=round(time.perf_counter() - start, 3))
            raise
        self.runlog.event("stage_end", stage=name, seconds=round(time.perf_counter() - start, 3))

    def write(self, name: str, kind: str, payload: dict) -> Path:
        path = write_artifact(self.out / name, kind, payload, self.config_hash)
        self.runlog.event("artifact_written", path=str(path), kind=kind)
        return path

    def read(self, name: str, kind: str, stage: str) -> dict:
        return read_artifact(self.out / name, kind, self.config_hash, stage)

    def epoch_logger(self, stage: str, **fields):
        def on_epoch(epoch: int, loss: float) -> None:
            self.runlog.event("epoch", stage=stage, epoch=epoch, loss=loss, **fields)
        return on_epoch


# ===== DATA =====

def load_data(ctx: RunContext, split: str) -> SynthSplit:
    data_path = ctx.config.data_path
    marker = data_path / "dataset.json"
    if marker.exists():
        read_artifact(marker, "dataset", ctx.config_hash, "generate")
    split_dir = data_path / split
    if not (split_dir / "manifest.json").exists():
        raise StageOrderViolation(f"no {split} split under {data_path}; run generate first")
    return load_split(split_dir)


def modality_order(cfg: RunConfig, split: SynthSplit) -> list[str]:
    available = split.modality_order
    order = list(cfg.modalities) if cfg.modalities else available
    unknown = [m for m in order if m not in available]
    if unknown:
        raise ConfigError(f"modalities {unknown} not in dataset (has {available})")
    if len(order) < 2:
        raise ConfigError("score fusion needs at least two modalities")
    return order


def gating_modality(cfg: RunConfig, order: list[str], split: SynthSplit) -> str:
    gating = cfg.gating_modality or order[0]
    if gating not in split.modality_order:
        raise ConfigError(f"gating modality {gating} not in dataset")
    return gating


def build_concats(split: SynthSplit, order: list[str]) -> list[ConcatScores]:
    matrices = [split.score_matrix(m) for m in order]
    return concat_all(matrices, split.manifest.query_ids)


def build_labels(split: SynthSplit) -> list[ScoreLabels]:
    template_subjects = split.manifest.template_subjects
    return [ScoreLabels.from_subjects(q.subject_id, template_subjects) for q in split.manifest.queries]


def build_fusion_samples(
    split: SynthSplit,
    order: list[str],
    gating: str,
    qe: Optional[QualityEstimatorModel],
    config: FusionTrainingConfig,
) -> list[FusionSample]:
    """Per training query, ``views_per_query`` views of ``frames_per_view`` sampled frames.

    Each view re-aggregates the sampled frames, rescores them against the
    gallery and, with a QE, predicts the gating weight from the same frames.
    Modalities without frame or gallery features reuse the stored score row.
    """
    manifest = split.manifest
    labels = build_labels(split)
    channels = {m: split.channel(m) for m in order}
    stored = {m: split.score_matrix(m) for m in order}
    gating_inputs = split.reduced.get(gating, {})
    fallbacks = 0
    samples = []
    for qi, record in enumerate(manifest.queries):
        rng = np.random.default_rng([config.seed, _VIEW_STREAM, qi])
        L = record.frame_count
        views = []
        for _ in range(config.views_per_query):
            idx = np.sort(rng.choice(L, min(config.frames_per_view, L), replace=False))
            values = np.full((len(manifest.templates), len(order)), np.nan)
            mask = np.zeros(values.shape, dtype=bool)
            for j, m in enumerate(order):
                if record.has(m) and m in manifest.features:
                    values[:, j] = score_query(record.features[m][idx], manifest.features[m], channels[m].metric_kind)
                    mask[:, j] = True
                elif stored[m].has_query(record.query_id):
                    values[:, j], mask[:, j] = stored[m].row(record.query_id)
            concat = ConcatScores(record.query_id, manifest.template_ids, order, values, mask)
            w = NEUTRAL_WEIGHT
            if qe is not None:
                reduced = gating_inputs.get(record.query_id)
                if reduced is None:
                    fallbacks += 1
                else:
                    w = predict_query_weight(qe, reduced[idx]).query_weight
            views.append((concat, w))
        samples.append(FusionSample(labels[qi], views))
    if fallbacks:
        logger.warning("%d training views had no %s features, gated with w=%.1f", fallbacks, gating, NEUTRAL_WEIGHT)
    return samples


def needs_qe(config: FusionTrainingConfig) -> bool:
    return config.gating == "quality" and config.num_experts > 1


# ===== STAGES =====

def run_generate(cfg: RunConfig) -> list[Path]:
    ctx = RunContext.open(cfg)
    with ctx.stage("generate"):
        dataset = generate(cfg.synth)
        written = emit(dataset, cfg.data_path)
        marker = write_artifact(cfg.data_path / "dataset.json", "dataset", {"splits": ["train", "test"]},
                                ctx.config_hash)
        for path in (*written, marker):
            ctx.runlog.event("artifact_written", path=str(path), kind="dataset")
    return [*written, marker]


def run_train_qe(cfg: RunConfig) -> dict[str, Path]:
    """One QE per modality in ``qe_modalities`` (default: every modality with gallery and QE features)."""
    ctx = RunContext.open(cfg)
    written = {}
    with ctx.stage("train-qe"):
        split = load_data(ctx, "train")
        manifest = split.manifest
        trainable = [m for m in split.modality_order if m in manifest.features and split.reduced.get(m)]
        targets = cfg.qe_modalities or trainable
        if not targets:
            raise FormatError(f"no modality in {cfg.data_path / 'train'} has gallery and QE features")
        for mod in targets:
            if mod not in split.modality_order:
                raise ConfigError(f"qe modality {mod} not in dataset (has {split.modality_order})")
            if mod not in trainable:
                raise FormatError(f"train-qe needs gallery_{mod}.csv and qe_{mod}.csv in {cfg.data_path / 'train'}")
            channel = split.channel(mod)
            gallery = TrainingGallery.from_samples(
                mod, manifest.template_subjects, manifest.features[mod], channel.metric_kind
            )
            samples = build_qe_samples(mod, manifest.queries, split.reduced.get(mod, {}), gallery, cfg.quality.delta)
            model = train_qe(samples, cfg.quality, mod, on_epoch=ctx.epoch_logger("train-qe", modality=mod))
            written[mod] = ctx.write(f"qe_{mod}.json", "qe", model.to_dict())
    return written


def load_qe(ctx: RunContext, modality_id: str) -> QualityEstimatorModel:
    return QualityEstimatorModel.from_dict(ctx.read(f"qe_{modality_id}.json", "qe", "train-qe"))


def _fit_variant(
    ctx: RunContext,
    samples: list[FusionSample],
    config: FusionTrainingConfig,
    order: list[str],
    gating: str,
    label: str,
) -> FusionModel:
    return train_fusion(samples, config, order, gating, on_epoch=ctx.epoch_logger("train-fusion", variant=label))


def run_train_fusion(cfg: RunConfig) -> list[Path]:
    """Baseline statistics, weighted-sum weights and the QME checkpoint."""
    ctx = RunContext.open(cfg)
    with ctx.stage("train-fusion"):
        split = load_data(ctx, "train")
        order = modality_order(cfg, split)
        gating = gating_modality(cfg, order, split)
        qe = load_qe(ctx, gating) if needs_qe(cfg.fusion) else None

        concats = build_concats(split, order)
        labels = build_labels(split)
        stats = fit_normalization_stats(concats, labels)
        ws = fit_weighted_sum(concats, labels, cfg.weighted_sum, stats)
        payload = {"baseline_stats": stats.to_dict(), "weighted_sum": ws.to_dict()}
        baselines = ctx.write("baselines.json", "baselines", payload)

        samples = build_fusion_samples(split, order, gating, qe, cfg.fusion)
        model = _fit_variant(ctx, samples, cfg.fusion, order, gating, "qme")
        fusion = ctx.write("fusion.json", "fusion", model.to_dict())
    return [baselines, fusion]


def load_artifacts(ctx: RunContext, requires: tuple[str, ...]) -> TrainedArtifacts:
    artifacts = TrainedArtifacts()
    if {"stats", "weighted_sum"} & set(requires):
        payload = ctx.read("baselines.json", "baselines", "train-fusion")
        artifacts.stats = NormalizationStats.from_dict(payload["baseline_stats"])
        artifacts.weighted_sum = WeightedSumModel.from_dict(payload["weighted_sum"])
    if "fusion" in requires:
        artifacts.fusion = FusionModel.from_dict(ctx.read("fusion.json", "fusion", "train-fusion"))
        if artifacts.fusion.router.num_experts > 1 and not artifacts.fusion.router.uniform:
            gating = artifacts.fusion.gating_modality
            artifacts.qe[gating] = load_qe(ctx, gating)
    return artifacts


def eval_inputs(split: SynthSplit, order: list[str]) -> FusionInputs:
    return FusionInputs(order, build_concats(split, order), dict(split.reduced))


def _safe(name: str) -> str:
    return name.replace(":", "_").replace("[", "_").replace("]", "").replace(",", "_")


def evaluate_method(
    ctx: RunContext,
    method: FusionMethod,
    split: SynthSplit,
    inputs: FusionInputs,
    artifacts: TrainedArtifacts,
    write: bool = True,
) -> EvalReport:
    cfg = ctx.config
    manifest = split.manifest
    scores = method.fuse(inputs, artifacts)
    labels = match_matrix(manifest.query_subjects, manifest.template_subjects)
    report = evaluate(
        method.name, scores, labels, manifest.query_ids, manifest.query_subjects.tolist(),
        manifest.template_subjects.tolist(), cfg.evaluation, cfg.open_set,
    )
    if not write:
        return report

    out_dir = ctx.out / "reports" / _safe(method.name)
    match, non_match = split_scores(scores, labels)
    hist = score_histogram(match, non_match, cfg.histogram_bins, cfg.seed)
    dist = report.distribution
    written = [write_histogram(hist, out_dir / "score_hist.csv", ctx.config_hash, {"tau": dist.tau, "far": dist.far})]

    if isinstance(method, QME):
        results = method.results(inputs, artifacts)
        weights = np.array([r.quality_weight for r in results])
        report.extras["gating_fallbacks"] = float(sum(r.gating_fallback for r in results))
        model = method.model or artifacts.fusion
        gating = model.gating_modality
        truth = [split.quality.get((r.query_id, gating)) for r in results]
        pairs = [(w, t) for w, t, r in zip(weights, truth, results) if t is not None and not r.gating_fallback]
        if len(pairs) > 2 and not model.router.uniform and model.num_experts > 1:
            report.extras["qe_spearman"] = spearman(*zip(*pairs))
        qhist = quality_histogram(weights, cfg.histogram_bins)
        written.append(write_histogram(qhist, out_dir / "quality_hist.csv", ctx.config_hash, {"gating_modality": gating}))

    written.extend(write_report(report, out_dir, ctx.config_hash))
    for path in written:
        ctx.runlog.event("artifact_written", path=str(path), kind="report")
    return report


def run_evaluate(cfg: RunConfig, method_name: str) -> EvalReport:
    ctx = RunContext.open(cfg)
    with ctx.stage("evaluate"):
        split = load_data(ctx, "test")
        order = modality_order(cfg, split)
        method = get_method(method_name, order, cfg.fusion.num_experts)
        if method is None:
            known = [m.name for m in get_all_methods(order, cfg.fusion.num_experts)]
            raise ConfigError(f"unknown method {method_name!r}; known: {', '.join(known)}")
        artifacts = load_artifacts(ctx, method.requires)
        report = evaluate_method(ctx, method, split, eval_inputs(split, order), artifacts)
    return report


# ===== COMPARE =====

def mask_inputs(inputs: FusionInputs, modality_id: str, fraction: float, seed: int) -> tuple[FusionInputs, list[str]]:
    """Hide ``modality_id`` on a seeded fraction of queries (scores and QE inputs)."""
    if modality_id not in inputs.modality_order:
        raise ConfigError(f"cannot mask {modality_id}: not a fused modality")
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"mask fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng([seed, _MASK_STREAM])
    count = int(round(fraction * len(inputs.concats)))
    chosen = set(rng.choice(len(inputs.concats), count, replace=False).tolist())
    j = inputs.modality_order.index(modality_id)

    concats = []
    masked_ids = []
    for i, concat in enumerate(inputs.concats):
        if i in chosen:
            values, mask = concat.values.copy(), concat.mask.copy()
            values[:, j] = np.nan
            mask[:, j] = False
            concat = ConcatScores(concat.query_id, concat.template_ids, concat.modality_order, values, mask)
            masked_ids.append(concat.query_id)
        concats.append(concat)
    hidden = set(masked_ids)
    gating = {
        m: ({q: f for q, f in feats.items() if q not in hidden} if m == modality_id else feats)
        for m, feats in inputs.gating_features.items()
    }
    return FusionInputs(inputs.modality_order, concats, gating), masked_ids


def ablation_variants(flags: list[str]) -> list[tuple[str, dict]]:
    """'grid' (or all three flags) gives the five-row grid; single flags ablate one axis of QME."""
    unknown = [f for f in flags if f != "grid" and f not in ABLATION_FLAGS]
    if unknown:
        raise ConfigError(f"unknown ablation flags {unknown}; known: grid, {', '.join(ABLATION_FLAGS)}")
    if "grid" in flags or set(ABLATION_FLAGS) <= set(flags):
        return list(ABLATION_GRID)
    return [(f"qme[{flag}]", ABLATION_FLAGS[flag]) for flag in flags]


@dataclass
class CompareResult:
    rows: list[dict]
    ablation_rows: list[dict] = field(default_factory=list)
    robustness_rows: list[dict] = field(default_factory=list)
    paths: list[Path] = field(default_factory=list)


def run_compare(
    cfg: RunConfig,
    ablation: Optional[list[str]] = None,
    mask_fraction: Optional[float] = None,
    mask_modality: Optional[str] = None,
) -> CompareResult:
    """Every registered method on the same test split, plus optional ablations and masking."""
    ctx = RunContext.open(cfg)
    far = cfg.evaluation.far_targets[0]
    fpir = cfg.evaluation.fpir_targets[0]
    with ctx.stage("compare"):
        split = load_data(ctx, "test")
        order = modality_order(cfg, split)
        inputs = eval_inputs(split, order)

        trained = load_artifacts(ctx, ("stats", "weighted_sum", "fusion"))
        methods = get_all_methods(order, trained.fusion.num_experts)

        reports = [evaluate_method(ctx, m, split, inputs, trained) for m in methods]
        result = CompareResult([comparison_row(r, far, fpir) for r in reports])
        result.paths.append(write_comparison(result.rows, ctx.out / "comparison.csv", ctx.config_hash))

        if ablation:
            train_split = load_data(ctx, "train")
            gating = gating_modality(cfg, order, train_split)
            qe = trained.qe.get(gating) or (load_qe(ctx, gating) if needs_qe(cfg.fusion) else None)
            samples = build_fusion_samples(train_split, order, gating, qe, cfg.fusion)
            for label, overrides in ablation_variants(ablation):
                variant_cfg = replace(cfg.fusion, **overrides)
                if variant_cfg == cfg.fusion:
                    model = trained.fusion
                else:
                    if needs_qe(variant_cfg) and qe is None:
                        qe = load_qe(ctx, gating)
                        samples = build_fusion_samples(train_split, order, gating, qe, cfg.fusion)
                    model = _fit_variant(ctx, samples, variant_cfg, order, gating, label)
                report = evaluate_method(ctx, QME(label, model), split, inputs, trained)
                result.ablation_rows.append(comparison_row(report, far, fpir))
            result.paths.append(write_comparison(result.ablation_rows, ctx.out / "ablation.csv", ctx.config_hash))

        if mask_fraction is not None:
            target = mask_modality or order[0]
            masked, masked_ids = mask_inputs(inputs, target, mask_fraction, cfg.seed)
            ctx.runlog.event("warning", message=f"masked {target} on {len(masked_ids)} test queries")
            rows_masked = np.isin(split.manifest.query_ids, masked_ids)
            for method, clean in zip(methods, reports):
                if method.name == f"single:{target}":
                    continue
                scores_clean = method.fuse(inputs, trained)
                scores_masked = method.fuse(masked, trained)
                labels = match_matrix(split.manifest.query_subjects, split.manifest.template_subjects)
                before = cmc(scores_clean[rows_masked], labels[rows_masked], 1)
                after = cmc(scores_masked[rows_masked], labels[rows_masked], 1)
                result.robustness_rows.append({
                    "method": method.name,
                    "rank1": round(float(clean.rank1), 6),
                    "rank1_subset_clean": round(before, 6),
                    "rank1_subset_masked": round(after, 6),
                    "rank1_drop": round(before - after, 6),
                })
            result.paths.append(write_comparison(result.robustness_rows, ctx.out / "robustness.csv", ctx.config_hash))

        for path in result.paths:
            ctx.runlog.event("artifact_written", path=str(path), kind="comparison")
    return result
