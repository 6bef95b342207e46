import csv
import json

import numpy as np
import pytest

from scorefuse import FORMAT_VERSION
from scorefuse.metrics import EvaluationConfig, OpenSetProtocol, evaluate
from scorefuse.reports import (
    comparison_row, comparison_table, quality_histogram, report_to_dict, score_histogram, spearman,
    write_comparison, write_histogram, write_report,
)


def _read_stamped(path):
    """(leading '#' lines, csv rows after them)."""
    lines = path.read_text(encoding="utf-8").splitlines()
    stamp = [line for line in lines if line.startswith("# ")]
    return stamp, list(csv.DictReader(lines[len(stamp):]))


def _report(rng):
    subjects = [f"s{i}" for i in range(6)]
    labels = np.eye(6, dtype=bool).repeat(2, axis=0)
    scores = np.where(labels, rng.uniform(0.6, 1.0, labels.shape), rng.uniform(0.0, 0.7, labels.shape))
    queries = [f"p{i}" for i in range(12)]
    return evaluate("zscore", scores, labels, queries, [s for s in subjects for _ in range(2)], subjects,
                    EvaluationConfig(ranks=(1, 5)), OpenSetProtocol(num_subsets=2))


def test_report_files(rng, tmp_path):
    report = _report(rng)
    json_path, csv_path = write_report(report, tmp_path / "zscore", "0123abcd")
    data = json.loads(json_path.read_text())
    assert data["format_version"] == FORMAT_VERSION
    assert data["config_hash"] == "0123abcd"
    assert data["method"] == "zscore"
    assert set(data["cmc"]) == {"1", "5"}
    assert data == report_to_dict(report, "0123abcd")

    stamp, rows = _read_stamped(csv_path)
    assert stamp == [f"# format_version={FORMAT_VERSION!r}", "# config_hash='0123abcd'"]
    assert rows[0]["name"] == "cmc@1"
    assert float(rows[0]["value"]) == report.cmc[1]
    assert {r["name"] for r in rows} >= {"map", "tar_at_far", "fnir_at_fpir", "tau"}


def test_score_histogram_uses_equal_samples(rng):
    hist = score_histogram(rng.normal(1, 0.1, 50), rng.normal(0, 0.1, 500), bins=8, seed=0)
    assert hist.counts["match"].sum() == hist.counts["non_match"].sum() == 50
    assert len(hist.edges) == 9


def test_histogram_file(tmp_path):
    hist = quality_histogram(np.array([0.05, 0.15, 0.95, 0.96]), bins=10)
    path = write_histogram(hist, tmp_path / "quality_hist.csv", "0123abcd", {"gating_modality": "face"})
    lines = path.read_text().splitlines()
    assert lines[:3] == [f"# format_version={FORMAT_VERSION!r}", "# config_hash='0123abcd'", "# gating_modality='face'"]
    assert lines[3] == "bin_lo,bin_hi,count"
    assert lines[4].endswith(",1") and lines[-1].endswith(",2")


def test_spearman():
    assert spearman([0.1, 0.2, 0.3], [1, 5, 9]) == pytest.approx(1.0)
    assert spearman([0.1, 0.2, 0.3], [9, 5, 1]) == pytest.approx(-1.0)


def test_comparison_files(rng, tmp_path):
    row = comparison_row(_report(rng), 0.01, 0.01)
    assert row["method"] == "zscore"
    path = write_comparison([row, {**row, "method": "qme"}], tmp_path / "comparison.csv", "0123abcd")
    stamp, rows = _read_stamped(path)
    assert "# config_hash='0123abcd'" in stamp
    assert [r["method"] for r in rows] == ["zscore", "qme"]
    assert comparison_table([row]).row_count == 1
