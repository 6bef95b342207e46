"""Quality-guided mixture of score-fusion experts.

Concatenated scores (T x N) are imputed, batch-normalized and passed row by
row through Z expert networks (N -> 1). A router turns the query's quality
weight into expert weights p_1..p_Z and the fused row is S' = sum_z p_z S_z.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional, Sequence

import numpy as np

from scorefuse import FORMAT_VERSION
from scorefuse.errors import (
    EmptyTrainingSet, InvalidQualityWeight, ModalityOrderMismatch, NegativeDistance,
    NoMatchTemplates, NumericalFailure, ShapeError,
)
from scorefuse.models import ConcatScores
from scorefuse.nnkit import AdamState, BatchNormState, DenseNet, LrSchedule, adam_step
from scorefuse.quality import QualityEstimatorModel, predict_query_weight

logger = logging.getLogger(__name__)

LossKind = Literal["score", "triplet"]
GatingKind = Literal["quality", "uniform"]

NEUTRAL_WEIGHT = 0.5


@dataclass(frozen=True)
class MarginConfig:
    m: float = 3.0

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError(f"margin must be > 0, got {self.m}")


@dataclass
class ScoreLabels:
    """Match / non-match split of one query's templates."""
    match: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.match = np.asarray(self.match, dtype=bool)
        self.valid = np.ones_like(self.match) if self.valid is None else np.asarray(self.valid, dtype=bool)
        self.match = self.match & self.valid

    @classmethod
    def from_subjects(cls, query_subject: str, template_subjects: Sequence[str]) -> "ScoreLabels":
        return cls(np.array([s == query_subject for s in template_subjects], dtype=bool))

    @property
    def non_match(self) -> np.ndarray:
        return self.valid & ~self.match

    @property
    def is_mated(self) -> bool:
        return bool(self.match.any())

    def subset(self, rows: np.ndarray) -> "ScoreLabels":
        return ScoreLabels(self.match[rows], self.valid[rows])


# ===== LOSSES =====

def score_triplet_loss_with_grad(fused: np.ndarray, labels: ScoreLabels, margin: float) -> tuple[float, np.ndarray]:
    """Mean relu(S'_nm) + mean relu(m - S'_mat), and its gradient w.r.t. ``fused``."""
    fused = np.asarray(fused, dtype=np.float64)
    mat, nm = labels.match, labels.non_match
    if not mat.any():
        raise NoMatchTemplates("query has no match template")

    grad = np.zeros_like(fused)
    loss = 0.0
    if nm.any():
        s_nm = fused[nm]
        loss += np.maximum(s_nm, 0.0).mean()
        grad[nm] = (s_nm > 0).astype(np.float64) / nm.sum()
    gap = margin - fused[mat]
    loss += np.maximum(gap, 0.0).mean()
    grad[mat] = -(gap > 0).astype(np.float64) / mat.sum()
    return float(loss), grad


def score_triplet_loss(fused: np.ndarray, labels: ScoreLabels, margin: float = 3.0) -> float:
    return score_triplet_loss_with_grad(fused, labels, margin)[0]


def triplet_loss(d_ap, d_an, margin: float):
    """relu(d_ap - d_an + margin)."""
    d_ap = np.asarray(d_ap, dtype=np.float64)
    d_an = np.asarray(d_an, dtype=np.float64)
    if np.any(d_ap < 0) or np.any(d_an < 0):
        raise NegativeDistance("triplet distances must be >= 0")
    out = np.maximum(d_ap - d_an + margin, 0.0)
    return float(out) if out.ndim == 0 else out


def pairwise_triplet_loss_with_grad(fused: np.ndarray, labels: ScoreLabels, margin: float) -> tuple[float, np.ndarray]:
    """Triplet loss over every (match, non-match) template pair of one query.

    Distances are taken as (c - S') for a constant c, which cancels, so the
    hinge is relu(S'_nm - S'_mat + m) averaged over pairs.
    """
    fused = np.asarray(fused, dtype=np.float64)
    mat, nm = labels.match, labels.non_match
    if not mat.any():
        raise NoMatchTemplates("query has no match template")
    grad = np.zeros_like(fused)
    if not nm.any():
        return 0.0, grad

    s_mat, s_nm = fused[mat], fused[nm]
    hinge = s_nm[None, :] - s_mat[:, None] + margin
    active = (hinge > 0).astype(np.float64)
    pairs = hinge.size
    grad[mat] = -active.sum(axis=1) / pairs
    grad[nm] = active.sum(axis=0) / pairs
    return float(np.maximum(hinge, 0.0).sum() / pairs), grad


_LOSSES: dict[str, Callable] = {
    "score": score_triplet_loss_with_grad,
    "triplet": pairwise_triplet_loss_with_grad,
}


# ===== ROUTER =====

@dataclass
class Router:
    """Maps a quality weight to expert weights.

    Z=1 -> (1); Z=2 -> (w, 1-w); Z>2 -> softmax(weight * w + bias).
    ``uniform`` ignores w and averages the experts.
    """
    num_experts: int
    uniform: bool = False
    weight: np.ndarray = field(default=None)
    bias: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.num_experts < 1:
            raise ValueError("need at least one expert")
        self.weight = np.zeros(self.num_experts) if self.weight is None else np.asarray(self.weight, dtype=np.float64)
        self.bias = np.zeros(self.num_experts) if self.bias is None else np.asarray(self.bias, dtype=np.float64)

    @property
    def learnable(self) -> bool:
        return self.num_experts > 2 and not self.uniform

    def __call__(self, w: float) -> np.ndarray:
        return route(w, self.num_experts, self)

    def parameters(self) -> list[np.ndarray]:
        return [self.weight, self.bias] if self.learnable else []

    def to_dict(self) -> dict:
        return {
            "num_experts": self.num_experts,
            "uniform": self.uniform,
            "weight": self.weight.tolist(),
            "bias": self.bias.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Router":
        return cls(data["num_experts"], data.get("uniform", False), data.get("weight"), data.get("bias"))


def route(w: float, num_experts: int, router: Optional[Router] = None) -> np.ndarray:
    if not 0.0 < w < 1.0:
        raise InvalidQualityWeight(f"quality weight must be in (0, 1), got {w}")
    if num_experts == 1:
        return np.ones(1)
    if router is not None and router.uniform:
        return np.full(num_experts, 1.0 / num_experts)
    if num_experts == 2:
        return np.array([w, 1.0 - w])
    weight = router.weight if router is not None else np.zeros(num_experts)
    bias = router.bias if router is not None else np.zeros(num_experts)
    logits = weight * w + bias
    e = np.exp(logits - logits.max())
    return e / e.sum()


# ===== MODEL =====

@dataclass
class FusedScores:
    query_id: str
    fused: np.ndarray
    per_expert: np.ndarray
    gate: np.ndarray
    quality_weight: float
    gating_fallback: bool = False


@dataclass
class FusionModel:
    """Norm layer + Z experts + router."""
    modality_order: list[str]
    norm: BatchNormState
    experts: list[DenseNet]
    router: Router
    gating_modality: Optional[str] = None
    margin: float = 3.0
    loss: LossKind = "score"
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.experts) != self.router.num_experts:
            raise ShapeError("router and expert counts differ")
        for expert in self.experts:
            if expert.in_features != len(self.modality_order) or expert.out_features != 1:
                raise ShapeError(f"experts must map {len(self.modality_order)} -> 1")

    @classmethod
    def build(
        cls,
        modality_order: list[str],
        num_experts: int = 2,
        hidden: Sequence[int] = (16, 16),
        gating_modality: Optional[str] = None,
        margin: float = 3.0,
        loss: LossKind = "score",
        gating: GatingKind = "quality",
        seed: int = 0,
    ) -> "FusionModel":
        rng = np.random.default_rng(seed)
        n = len(modality_order)
        experts = [DenseNet.build([n, *hidden, 1], rng) for _ in range(num_experts)]
        return cls(
            modality_order=list(modality_order),
            norm=BatchNormState(n),
            experts=experts,
            router=Router(num_experts, uniform=(gating == "uniform")),
            gating_modality=gating_modality,
            margin=MarginConfig(margin).m,
            loss=loss,
        )

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    # Parameter order: norm scale/shift, experts, router (when learnable).
    def parameters(self) -> list[np.ndarray]:
        params = list(self.norm.parameters())
        for expert in self.experts:
            params.extend(expert.parameters())
        params.extend(self.router.parameters())
        return params

    def decay_mask(self) -> list[bool]:
        """Weight decay skips the norm layer's scale/shift."""
        return [False, False] + [True] * (len(self.parameters()) - 2)

    def set_parameters(self, params: list[np.ndarray]) -> None:
        self.norm.set_parameters(params[:2])
        offset = 2
        for expert in self.experts:
            k = len(expert.parameters())
            expert.set_parameters(params[offset:offset + k])
            offset += k
        if self.router.learnable:
            self.router.weight = np.array(params[offset], dtype=np.float64)
            self.router.bias = np.array(params[offset + 1], dtype=np.float64)

    def check_order(self, concat: ConcatScores) -> None:
        if list(concat.modality_order) != self.modality_order:
            raise ModalityOrderMismatch(
                f"scores ordered {concat.modality_order}, model expects {self.modality_order}"
            )

    def impute(self, concat: ConcatScores) -> np.ndarray:
        """Masked entries take the running mean, i.e. 0 after normalization."""
        self.check_order(concat)
        return np.where(concat.mask, np.nan_to_num(concat.values), self.norm.running_mean[None, :])

    def init_norm(self, samples: Sequence[ConcatScores]) -> None:
        """Seed the running statistics from a score pool."""
        for j in range(len(self.modality_order)):
            pool = np.concatenate([s.values[:, j][s.mask[:, j]] for s in samples])
            if pool.size:
                self.norm.running_mean[j] = pool.mean()
                self.norm.running_var[j] = pool.var()

    def expert_outputs(self, x: np.ndarray, mode: str = "eval"):
        xn, norm_cache = self.norm.apply(x, mode)
        outputs, caches = [], []
        for expert in self.experts:
            out, cache = expert.forward(xn, mode)
            outputs.append(out[:, 0])
            caches.append(cache)
        return np.stack(outputs), norm_cache, caches

    def loss_and_gradients(
        self,
        batch: Sequence[tuple[ConcatScores, ScoreLabels, float]],
        mode: str = "train",
    ) -> tuple[float, list[np.ndarray]]:
        """Mean loss over the batch's queries and gradients in ``parameters()`` order."""
        loss_fn = _LOSSES[self.loss]
        blocks = [self.impute(concat) for concat, _, _ in batch]
        x = np.vstack(blocks)
        bounds = np.cumsum([0] + [b.shape[0] for b in blocks])
        outputs, norm_cache, caches = self.expert_outputs(x, mode)

        d_out = np.zeros_like(outputs)
        d_router = [np.zeros(self.num_experts), np.zeros(self.num_experts)]
        total = 0.0
        nq = len(batch)
        for i, (_, labels, w) in enumerate(batch):
            rows = slice(bounds[i], bounds[i + 1])
            p = route(w, self.num_experts, self.router)
            fused = p @ outputs[:, rows]
            loss, d_fused = loss_fn(fused, labels, self.margin)
            total += loss
            d_out[:, rows] += np.outer(p, d_fused) / nq
            if self.router.learnable:
                dp = outputs[:, rows] @ d_fused / nq
                d_logit = p * (dp - np.dot(p, dp))
                d_router[0] += d_logit * w
                d_router[1] += d_logit

        expert_grads = []
        d_xn = np.zeros_like(x)
        for z, expert in enumerate(self.experts):
            grads, dx = expert.backward(caches[z], d_out[z][:, None])
            expert_grads.extend(grads)
            d_xn += dx
        norm_grads, _ = self.norm.backward(norm_cache, d_xn)

        grads = norm_grads + expert_grads
        if self.router.learnable:
            grads += d_router
        return total / nq, grads

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "modality_order": self.modality_order,
            "norm": self.norm.to_dict(),
            "experts": [expert.to_dict() for expert in self.experts],
            "router": self.router.to_dict(),
            "gating_modality": self.gating_modality,
            "margin": self.margin,
            "loss": self.loss,
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FusionModel":
        return cls(
            modality_order=list(data["modality_order"]),
            norm=BatchNormState.from_dict(data["norm"]),
            experts=[DenseNet.from_dict(layers) for layers in data["experts"]],
            router=Router.from_dict(data["router"]),
            gating_modality=data.get("gating_modality"),
            margin=float(data.get("margin", 3.0)),
            loss=data.get("loss", "score"),
            history=list(data.get("history", [])),
        )


def fuse(model: FusionModel, concat: ConcatScores, w: float) -> FusedScores:
    """Eval-mode fusion of one query."""
    if concat.values.shape[1] != len(model.modality_order):
        raise ModalityOrderMismatch(f"expected {len(model.modality_order)} score columns, got {concat.values.shape[1]}")
    gate = route(w, model.num_experts, model.router)
    per_expert, _, _ = model.expert_outputs(model.impute(concat), "eval")
    return FusedScores(concat.query_id, gate @ per_expert, per_expert, gate, w)


def fuse_batch(model: FusionModel, concats: Sequence[ConcatScores], weights: Sequence[float]) -> list[FusedScores]:
    """Fuse many queries in one forward pass."""
    if not concats:
        return []
    blocks = [model.impute(c) for c in concats]
    bounds = np.cumsum([0] + [b.shape[0] for b in blocks])
    per_expert, _, _ = model.expert_outputs(np.vstack(blocks), "eval")
    results = []
    for i, (concat, w) in enumerate(zip(concats, weights)):
        gate = route(w, model.num_experts, model.router)
        chunk = per_expert[:, bounds[i]:bounds[i + 1]]
        results.append(FusedScores(concat.query_id, gate @ chunk, chunk, gate, w))
    return results


# ===== TRAINING =====

@dataclass
class FusionSample:
    """One training query: labels plus one or more (scores, quality weight) views."""
    labels: ScoreLabels
    views: list[tuple[ConcatScores, float]]

    @property
    def query_id(self) -> str:
        return self.views[0][0].query_id


@dataclass
class FusionTrainingConfig:
    num_experts: int = 2
    hidden: tuple[int, ...] = (16, 16)
    margin: float = 3.0
    loss: LossKind = "score"
    gating: GatingKind = "quality"
    batch_size: int = 32
    epochs: int = 40
    learning_rate: float = 1e-2
    weight_decay: float = 1e-2
    warmup_fraction: float = 0.1
    floor_lr: float = 0.0
    frames_per_view: int = 8
    views_per_query: int = 4
    seed: int = 0


def train_fusion(
    samples: Sequence[FusionSample],
    config: FusionTrainingConfig,
    modality_order: list[str],
    gating_modality: Optional[str] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> FusionModel:
    """Train norm layer, experts and (for Z>2) router; quality weights are fixed inputs."""
    usable = [s for s in samples if s.labels.is_mated and s.views]
    if not usable:
        raise EmptyTrainingSet("no training queries with match templates")

    model = FusionModel.build(
        modality_order,
        num_experts=config.num_experts,
        hidden=config.hidden,
        gating_modality=gating_modality,
        margin=config.margin,
        loss=config.loss,
        gating=config.gating,
        seed=config.seed,
    )
    model.init_norm([s.views[0][0] for s in usable])

    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(usable) / config.batch_size)
    schedule = LrSchedule.with_warmup_fraction(
        config.epochs * steps_per_epoch, config.learning_rate, config.warmup_fraction, config.floor_lr
    )
    adam = AdamState.for_params(
        model.parameters(),
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
        schedule=schedule,
        decay_mask=model.decay_mask(),
    )

    for epoch in range(config.epochs):
        order = rng.permutation(len(usable))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = []
            for i in order[start:start + config.batch_size]:
                sample = usable[i]
                concat, w = sample.views[rng.integers(len(sample.views))]
                batch.append((concat, sample.labels, w))
            loss, grads = model.loss_and_gradients(batch, "train")
            if not math.isfinite(loss):
                raise NumericalFailure(f"non-finite fusion loss at epoch {epoch}")
            model.set_parameters(adam_step(adam, model.parameters(), grads))
            losses.append(loss)
        model.history.append(float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(epoch, model.history[-1])
        logger.debug("fusion epoch %d loss %.6f", epoch, model.history[-1])
    return model


# ===== INFERENCE =====

def gating_weight(
    model: FusionModel,
    qe: Optional[QualityEstimatorModel],
    gating_features: Optional[np.ndarray],
) -> tuple[float, bool]:
    """(quality weight, fell back?) for one query."""
    if model.router.uniform or model.num_experts == 1:
        return NEUTRAL_WEIGHT, False
    if qe is None or gating_features is None:
        return NEUTRAL_WEIGHT, True
    return predict_query_weight(qe, gating_features).query_weight, False


def infer(
    model: FusionModel,
    qe: Optional[QualityEstimatorModel],
    concat: ConcatScores,
    gating_features: Optional[np.ndarray] = None,
) -> FusedScores:
    """predict_query_weight -> route -> fuse. Missing gating features fall back to w=0.5."""
    w, fallback = gating_weight(model, qe, gating_features)
    if fallback:
        logger.warning("Query %s: no %s features for gating, using w=%.1f",
                       concat.query_id, model.gating_modality, NEUTRAL_WEIGHT)
    result = fuse(model, concat, w)
    result.gating_fallback = fallback
    return result


def infer_batch(
    model: FusionModel,
    qe: Optional[QualityEstimatorModel],
    concats: Sequence[ConcatScores],
    gating_features: Sequence[Optional[np.ndarray]],
) -> list[FusedScores]:
    gates = [gating_weight(model, qe, f) for f in gating_features]
    fallbacks = sum(fb for _, fb in gates)
    if fallbacks:
        logger.warning("%d queries had no %s features for gating, using w=%.1f",
                       fallbacks, model.gating_modality, NEUTRAL_WEIGHT)
    results = fuse_batch(model, concats, [w for w, _ in gates])
    for result, (_, fallback) in zip(results, gates):
        result.gating_fallback = fallback
    return results
