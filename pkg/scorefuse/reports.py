"""Report emission: EvalReport JSON/CSV, histogram data and comparison tables."""

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Optional, Sequence

import numpy as np
from rich.markup import escape
from rich.table import Table
from scipy import stats

from scorefuse import FORMAT_VERSION
from scorefuse.metrics import EvalReport


def _r(value: float) -> float:
    # Reports carry 6 decimals; raw values live in the JSON.
    return round(float(value), 6)


def _write_stamp(f: IO[str], config_hash: str, extra: Optional[dict] = None) -> None:
    """Leading '#' lines: format version, producing config hash, then ``extra``."""
    f.write(f"# format_version={FORMAT_VERSION!r}\n")
    f.write(f"# config_hash={config_hash!r}\n")
    for key, value in sorted((extra or {}).items()):
        f.write(f"# {key}={value!r}\n")


def report_to_dict(report: EvalReport, config_hash: str) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "method": report.method,
        "cmc": {str(k): v for k, v in sorted(report.cmc.items())},
        "map": report.map,
        "tar_at_far": {
            repr(far): {"tar": p.rate, "tau": p.tau} for far, p in sorted(report.tar.items())
        },
        "fnir_at_fpir": {
            repr(fpir): {"median": r.median, "std": r.std, "values": r.values, "taus": r.taus}
            for fpir, r in sorted(report.fnir.items())
        },
        "distribution": {
            "match_mean": report.distribution.match_mean,
            "non_match_mean": report.distribution.non_match_mean,
            "non_match_p95": report.distribution.non_match_p95,
            "tau": report.distribution.tau,
            "far": report.distribution.far,
        },
        "excluded_queries": report.excluded_queries,
        "extras": dict(sorted(report.extras.items())),
    }


def report_rows(report: EvalReport) -> list[tuple[str, float, str, str]]:
    """Flat (name, value, std, params) rows."""
    rows = [(f"cmc@{k}", v, "", f"k={k}") for k, v in sorted(report.cmc.items())]
    rows.append(("map", report.map, "", ""))
    for far, p in sorted(report.tar.items()):
        rows.append(("tar_at_far", p.rate, "", f"far={far!r};tau={p.tau!r}"))
    for fpir, r in sorted(report.fnir.items()):
        rows.append(("fnir_at_fpir", r.median, repr(r.std), f"fpir={fpir!r};subsets={len(r.values)}"))
    d = report.distribution
    rows.append(("match_mean", d.match_mean, "", ""))
    rows.append(("non_match_mean", d.non_match_mean, "", ""))
    rows.append(("tau", d.tau, "", f"far={d.far!r}"))
    for name, value in sorted(report.extras.items()):
        rows.append((name, value, "", ""))
    return rows


def write_report(report: EvalReport, out_dir: Path, config_hash: str) -> list[Path]:
    """report.json and report.csv under ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(report_to_dict(report, config_hash), f, indent=2, sort_keys=True)
    csv_path = out_dir / "report.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        _write_stamp(f, config_hash)
        writer = csv.writer(f)
        writer.writerow(["name", "value", "std", "params"])
        for name, value, std, params in report_rows(report):
            writer.writerow([name, repr(float(value)), std, params])
    return [json_path, csv_path]


# ===== HISTOGRAMS =====

@dataclass
class Histogram:
    edges: np.ndarray
    counts: dict[str, np.ndarray]

    def rows(self) -> list[list]:
        names = list(self.counts)
        return [
            [repr(float(self.edges[i])), repr(float(self.edges[i + 1])), *[int(self.counts[n][i]) for n in names]]
            for i in range(len(self.edges) - 1)
        ]


def score_histogram(match: np.ndarray, non_match: np.ndarray, bins: int, seed: int) -> Histogram:
    """Match vs non-match histogram on an equal-size random sample of each."""
    rng = np.random.default_rng(seed)
    n = min(match.size, non_match.size)
    m = match if match.size == n else rng.choice(match, n, replace=False)
    nm = non_match if non_match.size == n else rng.choice(non_match, n, replace=False)
    both = np.concatenate([m, nm])
    edges = np.histogram_bin_edges(both, bins=bins)
    return Histogram(edges, {
        "match": np.histogram(m, bins=edges)[0],
        "non_match": np.histogram(nm, bins=edges)[0],
    })


def quality_histogram(weights: np.ndarray, bins: int) -> Histogram:
    edges = np.linspace(0.0, 1.0, bins + 1)
    return Histogram(edges, {"count": np.histogram(weights, bins=edges)[0]})


def write_histogram(hist: Histogram, path: Path, config_hash: str, extra: Optional[dict] = None) -> Path:
    """Bin rows after the stamp; ``extra`` key/values follow it as '#' lines."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        _write_stamp(f, config_hash, extra)
        writer = csv.writer(f)
        writer.writerow(["bin_lo", "bin_hi", *hist.counts])
        writer.writerows(hist.rows())
    return path


def spearman(predicted: Sequence[float], truth: Sequence[float]) -> float:
    rho, _ = stats.spearmanr(predicted, truth)
    return float(rho)


# ===== COMPARISON =====

COMPARISON_COLUMNS = ["method", "rank1", "map", "tar@far", "fnir@fpir", "fnir_std", "match_mean", "non_match_mean", "tau"]


def comparison_row(report: EvalReport, far: float, fpir: float) -> dict:
    fnir = report.fnir[fpir]
    return {
        "method": report.method,
        "rank1": _r(report.rank1),
        "map": _r(report.map),
        "tar@far": _r(report.tar[far].rate),
        "fnir@fpir": _r(fnir.median),
        "fnir_std": _r(fnir.std),
        "match_mean": _r(report.distribution.match_mean),
        "non_match_mean": _r(report.distribution.non_match_mean),
        "tau": _r(report.distribution.tau),
    }


def write_comparison(rows: list[dict], path: Path, config_hash: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(rows[0]) if rows else COMPARISON_COLUMNS
    with open(path, "w", encoding="utf-8", newline="") as f:
        _write_stamp(f, config_hash)
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    return path


def comparison_table(rows: list[dict], title: str = "Fusion comparison") -> Table:
    """Rich table; every numeric column shown as a percentage."""
    columns = list(rows[0]) if rows else COMPARISON_COLUMNS
    table = Table(title=title, show_header=True, header_style="bold magenta")
    for name in columns:
        table.add_column(name, style="cyan" if name == "method" else "green", justify="left" if name == "method" else "right")
    for row in rows:
        cells = []
        for name in columns:
            value = row[name]
            if name == "method":
                cells.append(escape(str(value)))
            elif name in ("match_mean", "non_match_mean", "tau"):
                cells.append(f"{value:.3f}")
            else:
                cells.append(f"{100 * value:.2f}")
        table.add_row(*cells)
    return table
