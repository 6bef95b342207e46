"""On-disk formats: manifest JSON, score/feature CSVs and the quality table.

Floats are written with ``repr`` so every value parses back bit-exactly.
Missing scores are written as the token ``NA``.
"""

import csv
import json
from pathlib import Path
from typing import Iterable

import numpy as np

from scorefuse.errors import FormatError
from scorefuse.models import GalleryManifest, GalleryTemplate, MetricKind, ModalityChannel, QueryRecord, ScoreMatrix

NA_TOKEN = "NA"


def _fmt(value: float) -> str:
    return repr(float(value))


def _read_rows(path: Path) -> list[list[str]]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            return list(csv.reader(f))
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e


def _parse(token: str) -> float:
    if token == NA_TOKEN:
        return float("nan")
    try:
        return float(token)
    except ValueError:
        raise FormatError(f"not a number: {token!r}") from None


# ===== MANIFEST =====

def save_manifest(
    manifest: GalleryManifest,
    path: Path,
    modalities: Iterable[ModalityChannel] = (),
) -> None:
    """Write the manifest JSON (features are stored separately)."""
    data = {
        "subjects": list(manifest.subjects),
        "templates": [{"template_id": t.template_id, "subject_id": t.subject_id} for t in manifest.templates],
        "queries": [
            {"query_id": q.query_id, "subject_id": q.subject_id, "frame_count": q.frame_count}
            for q in manifest.queries
        ],
    }
    channels = [
        {"modality_id": c.modality_id, "metric_kind": c.metric_kind.value, "feature_dim": c.feature_dim}
        for c in modalities
    ]
    if channels:
        data["modalities"] = channels

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)


def load_manifest(path: Path) -> tuple[GalleryManifest, list[ModalityChannel]]:
    """Read a manifest JSON. Returns the manifest and any declared modalities."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        templates = [GalleryTemplate(t["template_id"], t["subject_id"]) for t in data["templates"]]
        queries = [
            QueryRecord(q["query_id"], q["subject_id"], int(q["frame_count"]))
            for q in data.get("queries", [])
        ]
        channels = [
            ModalityChannel(c["modality_id"], MetricKind(c.get("metric_kind", "cosine")), int(c["feature_dim"]))
            for c in data.get("modalities", [])
        ]
        manifest = GalleryManifest(subjects=list(data["subjects"]), templates=templates, queries=queries)
    except (OSError, KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
        raise FormatError(f"bad manifest {path}: {e}") from e
    return manifest, channels


# ===== SCORES =====

def write_score_csv(matrix: ScoreMatrix, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["query_id", *matrix.template_ids])
        for i, query_id in enumerate(matrix.query_ids):
            row = [_fmt(v) if present else NA_TOKEN for v, present in zip(matrix.values[i], matrix.mask[i])]
            writer.writerow([query_id, *row])


def read_score_csv(
    path: Path,
    modality_id: str,
    metric_kind: MetricKind = MetricKind.COSINE,
) -> ScoreMatrix:
    rows = _read_rows(path)
    if not rows or rows[0][0] != "query_id":
        raise FormatError(f"{path}: header must start with 'query_id'")

    template_ids = rows[0][1:]
    query_ids = []
    values = []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(template_ids) + 1:
            raise FormatError(f"{path}:{line_no}: expected {len(template_ids) + 1} fields, got {len(row)}")
        query_ids.append(row[0])
        values.append([_parse(token) for token in row[1:]])

    matrix = np.array(values, dtype=np.float64).reshape(len(query_ids), len(template_ids))
    return ScoreMatrix(
        modality_id=modality_id,
        query_ids=query_ids,
        template_ids=template_ids,
        values=matrix,
        metric_kind=metric_kind,
    )


# ===== FEATURES =====

def write_feature_csv(features: dict[str, np.ndarray], path: Path) -> None:
    """Per-frame features: one row per (query_id, frame_index)."""
    if not features:
        dim = 0
    else:
        dim = next(iter(features.values())).shape[1]
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["query_id", "frame_index", *[f"f{k}" for k in range(dim)]])
        for query_id, frames in features.items():
            for index, frame in enumerate(frames):
                writer.writerow([query_id, index, *[_fmt(v) for v in frame]])


def read_feature_csv(path: Path) -> dict[str, np.ndarray]:
    rows = _read_rows(path)
    if not rows or rows[0][:2] != ["query_id", "frame_index"]:
        raise FormatError(f"{path}: header must start with 'query_id,frame_index'")

    dim = len(rows[0]) - 2
    frames: dict[str, dict[int, list[float]]] = {}
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != dim + 2:
            raise FormatError(f"{path}:{line_no}: expected {dim + 2} fields")
        frames.setdefault(row[0], {})[int(row[1])] = [_parse(token) for token in row[2:]]

    out = {}
    for query_id, by_index in frames.items():
        if sorted(by_index) != list(range(len(by_index))):
            raise FormatError(f"{path}: frame indices of {query_id} are not 0..L-1")
        out[query_id] = np.array([by_index[i] for i in range(len(by_index))], dtype=np.float64)
    return out


def write_gallery_csv(template_ids: list[str], features: np.ndarray, path: Path) -> None:
    """Gallery template features: one row per template, manifest order."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["template_id", *[f"f{k}" for k in range(features.shape[1])]])
        for template_id, row in zip(template_ids, features):
            writer.writerow([template_id, *[_fmt(v) for v in row]])


def read_gallery_csv(path: Path) -> tuple[list[str], np.ndarray]:
    rows = _read_rows(path)
    if not rows or rows[0][0] != "template_id":
        raise FormatError(f"{path}: header must start with 'template_id'")
    ids = [row[0] for row in rows[1:]]
    matrix = np.array([[_parse(token) for token in row[1:]] for row in rows[1:]], dtype=np.float64)
    return ids, matrix.reshape(len(ids), len(rows[0]) - 1)


# ===== QUALITY TABLE =====

def write_quality_table(rows: list[tuple[str, str, float]], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["query_id", "modality_id", "quality_factor"])
        for query_id, modality_id, quality in rows:
            writer.writerow([query_id, modality_id, _fmt(quality)])


def read_quality_table(path: Path) -> dict[tuple[str, str], float]:
    rows = _read_rows(path)
    if not rows or rows[0] != ["query_id", "modality_id", "quality_factor"]:
        raise FormatError(f"{path}: header must be 'query_id,modality_id,quality_factor'")
    table = {}
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise FormatError(f"{path}:{line_no}: expected 3 fields, got {len(row)}")
        table[(row[0], row[1])] = _parse(row[2])
    return table
