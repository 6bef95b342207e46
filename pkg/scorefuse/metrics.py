"""Closed-set, verification and open-set metrics.

All thresholds are exact order statistics of observed scores and every tie
is resolved against the method under test.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from scorefuse.errors import DegenerateSplit, EmptyScoreSet, NoNonMatedQueries

logger = logging.getLogger(__name__)


def _valid_rows(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels, dtype=bool))
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ")
    has_match = labels.any(axis=1)
    excluded = int((~has_match).sum())
    if excluded:
        logger.warning("%d queries without a match template excluded", excluded)
    return scores[has_match], labels[has_match]


def _match_ranks(row: np.ndarray, match: np.ndarray) -> np.ndarray:
    """1-based pessimistic rank of every match template in one query row.

    Masked (NaN) templates never outrank anything.
    """
    s = np.where(np.isnan(row), -np.inf, row)
    # Descending score; on ties non-matches come first.
    order = np.lexsort((match, -s))
    return np.flatnonzero(match[order]) + 1


# ===== CLOSED SET =====

def cmc_curve(scores: np.ndarray, labels: np.ndarray, max_rank: Optional[int] = None) -> np.ndarray:
    """CMC values for k = 1..max_rank."""
    scores, labels = _valid_rows(scores, labels)
    max_rank = max_rank or scores.shape[1]
    if scores.shape[0] == 0:
        return np.zeros(max_rank)
    first = np.array([_match_ranks(s, m)[0] for s, m in zip(scores, labels)])
    ks = np.arange(1, max_rank + 1)
    return (first[None, :] <= ks[:, None]).mean(axis=1)


def cmc(scores: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    """Fraction of queries whose best match template ranks within the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(cmc_curve(scores, labels, k)[k - 1])


def average_precision(row: np.ndarray, match: np.ndarray) -> float:
    ranks = _match_ranks(np.asarray(row, dtype=np.float64), np.asarray(match, dtype=bool))
    hits = np.arange(1, len(ranks) + 1)
    return float(np.mean(hits / ranks))


def map_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean average precision over queries with at least one match."""
    scores, labels = _valid_rows(scores, labels)
    if scores.shape[0] == 0:
        return 0.0
    return float(np.mean([average_precision(s, m) for s, m in zip(scores, labels)]))


map = map_score  # noqa: A001


# ===== VERIFICATION =====

@dataclass(frozen=True)
class ThresholdPoint:
    tau: float
    target: float
    rate: float

    def __post_init__(self):
        if not 0.0 < self.target < 1.0:
            raise ValueError(f"target rate must be in (0, 1), got {self.target}")


def _conservative_threshold(candidates: np.ndarray, negatives: np.ndarray, rate: float) -> float:
    """Smallest candidate tau with #(negatives >= tau) <= rate * #negatives."""
    neg = np.sort(negatives)
    allowed = rate * neg.size + 1e-9
    pool = np.unique(np.concatenate([candidates, [np.nextafter(neg[-1], np.inf)]]))
    accepted = neg.size - np.searchsorted(neg, pool, side="left")
    return float(pool[np.argmax(accepted <= allowed)])


def tar_at_far(match: np.ndarray, non_match: np.ndarray, far: float) -> tuple[float, float]:
    """(TAR, tau) at the given false accept rate."""
    match = np.asarray(match, dtype=np.float64).ravel()
    non_match = np.asarray(non_match, dtype=np.float64).ravel()
    match, non_match = match[~np.isnan(match)], non_match[~np.isnan(non_match)]
    if match.size == 0 or non_match.size == 0:
        raise EmptyScoreSet("TAR@FAR needs match and non-match scores")
    tau = _conservative_threshold(np.concatenate([match, non_match]), non_match, far)
    return float(np.mean(match >= tau)), tau


def split_scores(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pool every unmasked query-template pair into (match, non-match)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    present = ~np.isnan(scores)
    return scores[labels & present], scores[~labels & present]


# ===== OPEN SET =====

@dataclass
class QueryResult:
    query_id: str
    subject_id: str
    max_score: float
    top1_subject: str


def query_results(
    scores: np.ndarray,
    query_ids: Sequence[str],
    query_subjects: Sequence[str],
    template_subjects: Sequence[str],
) -> list[QueryResult]:
    """Max score and top-1 subject for every query; ties resolve to a wrong subject."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    template_subjects = np.asarray(template_subjects, dtype=object)
    results = []
    for row, pid, sid in zip(scores, query_ids, query_subjects):
        s = np.where(np.isnan(row), -np.inf, row)
        best = s.max()
        tied = template_subjects[s == best]
        wrong = [t for t in tied if t != sid]
        results.append(QueryResult(pid, sid, float(best), wrong[0] if wrong else sid))
    return results


def fnir_at_fpir(
    mated: Sequence[QueryResult],
    non_mated: Sequence[QueryResult],
    fpir: float,
) -> tuple[float, float]:
    """(FNIR, tau). A mated query fails on a wrong top-1 or a max score below tau."""
    if not non_mated:
        raise NoNonMatedQueries("open-set evaluation needs non-mated queries")
    nm_max = np.array([p.max_score for p in non_mated])
    if not mated:
        return 0.0, _conservative_threshold(nm_max, nm_max, fpir)
    m_max = np.array([p.max_score for p in mated])
    tau = _conservative_threshold(np.concatenate([m_max, nm_max]), nm_max, fpir)
    failures = [p.top1_subject != p.subject_id or p.max_score < tau for p in mated]
    return float(np.mean(failures)), tau


@dataclass(frozen=True)
class OpenSetProtocol:
    num_subsets: int = 10
    fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.num_subsets < 1:
            raise ValueError("need at least one subset")
        if not 0.0 < self.fraction < 1.0:
            raise ValueError(f"non-mated fraction must be in (0, 1), got {self.fraction}")


@dataclass
class OpenSetResult:
    fpir: float
    median: float
    std: float
    values: list[float]
    taus: list[float]
    removed: list[list[str]]


def draw_non_mated_subsets(subjects: Sequence[str], protocol: OpenSetProtocol) -> list[list[str]]:
    subjects = sorted(set(subjects))
    if len(subjects) < 5:
        raise DegenerateSplit(f"open-set protocol needs >= 5 subjects, got {len(subjects)}")
    count = int(round(protocol.fraction * len(subjects)))
    if count == 0 or count >= len(subjects):
        raise DegenerateSplit(f"fraction {protocol.fraction} removes {count} of {len(subjects)} subjects")
    rng = np.random.default_rng(protocol.seed)
    return [
        sorted(np.array(subjects, dtype=object)[rng.choice(len(subjects), count, replace=False)].tolist())
        for _ in range(protocol.num_subsets)
    ]


def run_open_set_protocol(
    scores: np.ndarray,
    query_ids: Sequence[str],
    query_subjects: Sequence[str],
    template_subjects: Sequence[str],
    protocol: OpenSetProtocol,
    fpir: float = 0.01,
) -> OpenSetResult:
    """FNIR@FPIR over seeded non-mated subsets: median and population std."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    template_subjects = np.asarray(template_subjects, dtype=object)
    query_subjects = list(query_subjects)
    subsets = draw_non_mated_subsets(template_subjects.tolist(), protocol)

    values, taus = [], []
    for removed in subsets:
        keep = ~np.isin(template_subjects, removed)
        results = query_results(scores[:, keep], query_ids, query_subjects, template_subjects[keep])
        removed_set = set(removed)
        non_mated = [r for r in results if r.subject_id in removed_set]
        mated = [r for r in results if r.subject_id not in removed_set]
        fnir, tau = fnir_at_fpir(mated, non_mated, fpir)
        values.append(fnir)
        taus.append(tau)
    return OpenSetResult(fpir, float(np.median(values)), float(np.std(values)), values, taus, subsets)


# ===== REPORT =====

@dataclass
class ScoreDistribution:
    match_mean: float
    non_match_mean: float
    non_match_p95: float
    tau: float
    far: float


@dataclass
class EvalReport:
    method: str
    cmc: dict[int, float]
    map: float
    tar: dict[float, ThresholdPoint]
    fnir: dict[float, OpenSetResult]
    distribution: ScoreDistribution
    excluded_queries: int = 0
    extras: dict[str, float] = field(default_factory=dict)

    @property
    def rank1(self) -> float:
        return self.cmc.get(1, float("nan"))


@dataclass
class EvaluationConfig:
    ranks: tuple[int, ...] = (1, 5, 10)
    far_targets: tuple[float, ...] = (0.01, 0.001)
    fpir_targets: tuple[float, ...] = (0.01,)
    distribution_far: float = 0.01


def evaluate(
    method: str,
    scores: np.ndarray,
    labels: np.ndarray,
    query_ids: Sequence[str],
    query_subjects: Sequence[str],
    template_subjects: Sequence[str],
    config: Optional[EvaluationConfig] = None,
    protocol: Optional[OpenSetProtocol] = None,
) -> EvalReport:
    """Every metric of one method's fused Q x T score matrix."""
    config = config or EvaluationConfig()
    protocol = protocol or OpenSetProtocol()
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)

    excluded = int((~labels.any(axis=1)).sum())
    curve = cmc_curve(scores, labels, max(config.ranks))
    match, non_match = split_scores(scores, labels)

    tar = {}
    for far in config.far_targets:
        rate, tau = tar_at_far(match, non_match, far)
        tar[far] = ThresholdPoint(tau, far, rate)

    fnir = {
        fpir: run_open_set_protocol(scores, query_ids, query_subjects, template_subjects, protocol, fpir)
        for fpir in config.fpir_targets
    }

    _, dist_tau = tar_at_far(match, non_match, config.distribution_far)
    distribution = ScoreDistribution(
        match_mean=float(match.mean()),
        non_match_mean=float(non_match.mean()),
        non_match_p95=float(np.percentile(non_match, 95)),
        tau=dist_tau,
        far=config.distribution_far,
    )
    return EvalReport(
        method=method,
        cmc={k: float(curve[k - 1]) for k in config.ranks},
        map=map_score(scores, labels),
        tar=tar,
        fnir=fnir,
        distribution=distribution,
        excluded_queries=excluded,
    )
