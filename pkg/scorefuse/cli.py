"""scorefuse CLI - main command-line interface."""

import sys
from dataclasses import replace
from functools import wraps
from pathlib import Path
from typing import Optional

import click
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from scorefuse import __version__
from scorefuse.config import RunConfig, config_hash, load_run_config
from scorefuse.errors import ScoreFuseError
from scorefuse.metrics import EvalReport
from scorefuse.pipeline import (
    ABLATION_FLAGS, run_compare, run_evaluate, run_generate, run_train_fusion, run_train_qe,
)
from scorefuse.reports import comparison_table
from scorefuse.runlog import setup_logging

console = Console()


# ===== HELPERS =====

def run_options(fn):
    """--config/--seed/--out/--verbose, shared by every stage command."""
    @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
                  default=None, help="JSON run config")
    @click.option("--seed", type=int, default=None, help="Override the config seed")
    @click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None, help="Output directory")
    @click.option("--verbose", is_flag=True, help="Debug logging")
    @wraps(fn)
    def wrapper(config_path: Optional[Path], seed: Optional[int], out: Optional[Path], verbose: bool, **kwargs):
        setup_logging(verbose, Console(stderr=True))
        try:
            cfg = load_run_config(config_path, seed)
            if out is not None:
                cfg = replace(cfg, output_dir=str(out))
            return fn(cfg, **kwargs)
        except ScoreFuseError as e:
            console.print(f"[red]{escape(str(e))}[/]")
            sys.exit(e.exit_code)
    return wrapper


def display_run_header(cfg: RunConfig, stage: str):
    console.print(f"[bold cyan]{escape(stage)}[/] [dim]config {config_hash(cfg)} • seed {cfg.seed} • {cfg.out_path}[/]")


def display_report(report: EvalReport):
    table = Table(title=f"Evaluation: {escape(report.method)}", show_header=True, header_style="bold magenta")
    table.add_column("Metric", style="cyan")
    table.add_column("Value", style="green", justify="right")
    table.add_column("Detail", style="dim")

    for k, value in sorted(report.cmc.items()):
        table.add_row(f"Rank-{k}", f"{100 * value:.2f}", "")
    table.add_row("mAP", f"{100 * report.map:.2f}", "")
    for far, point in sorted(report.tar.items()):
        table.add_row(f"TAR@FAR={100 * far:g}%", f"{100 * point.rate:.2f}", f"τ={point.tau:.4f}")
    for fpir, result in sorted(report.fnir.items()):
        table.add_row(f"FNIR@FPIR={100 * fpir:g}%", f"{100 * result.median:.2f}",
                      f"± {100 * result.std:.2f} over {len(result.values)} subsets")
    d = report.distribution
    table.add_row("Match mean", f"{d.match_mean:.3f}", "")
    table.add_row("Non-match mean", f"{d.non_match_mean:.3f}", f"τ@{100 * d.far:g}%FAR={d.tau:.4f}")
    for name, value in sorted(report.extras.items()):
        table.add_row(name, f"{value:.4f}", "")
    console.print(table)
    if report.excluded_queries:
        console.print(f"[yellow]{report.excluded_queries} queries without a match template were excluded[/]")


# ===== COMMANDS =====

@click.group(invoke_without_command=True)
@click.option("--version", "-v", is_flag=True, help="Show version")
@click.pass_context
def main(ctx, version):
    """Quality-guided mixture-of-experts score fusion for multimodal biometrics."""
    if version:
        console.print(f"scorefuse v{__version__}")
        return
    if ctx.invoked_subcommand is None:
        console.print(ctx.get_help())


@main.command()
@run_options
def generate(cfg: RunConfig):
    """Generate the synthetic train/test benchmark."""
    display_run_header(cfg, "generate")
    written = run_generate(cfg)
    console.print(f"[green]✓ Dataset written to {cfg.data_path}[/] [dim]({len(written)} files)[/]")


@main.command("train-qe")
@run_options
def train_qe_cmd(cfg: RunConfig):
    """Train one quality estimator per modality."""
    display_run_header(cfg, "train-qe")
    written = run_train_qe(cfg)
    for modality_id, path in written.items():
        console.print(f"[green]✓ QE {modality_id}[/] → {path}")


@main.command("train-fusion")
@run_options
def train_fusion_cmd(cfg: RunConfig):
    """Fit baseline statistics, weighted-sum weights and the QME model."""
    display_run_header(cfg, "train-fusion")
    for path in run_train_fusion(cfg):
        console.print(f"[green]✓ {path.name}[/] → {path}")


@main.command()
@click.option("--method", "-m", default="qme", help="Fusion method (single:<modality>, min, max, mean, "
                                                     "zscore, minmax, rhe, weighted-sum, qme, qme-expert<z>)")
@run_options
def evaluate(cfg: RunConfig, method: str):
    """Evaluate one fusion method on the test split."""
    display_run_header(cfg, f"evaluate {method}")
    display_report(run_evaluate(cfg, method))


@main.command()
@click.option("--ablation", default="", help=f"Comma list: grid, {', '.join(ABLATION_FLAGS)}")
@click.option("--mask-fraction", type=float, default=None, help="Mask one modality on this fraction of test queries")
@click.option("--mask-modality", default=None, help="Modality to mask (default: first)")
@run_options
def compare(cfg: RunConfig, ablation: str, mask_fraction: Optional[float], mask_modality: Optional[str]):
    """Run every registered method on the same test split."""
    display_run_header(cfg, "compare")
    flags = [flag.strip() for flag in ablation.split(",") if flag.strip()]
    result = run_compare(cfg, flags, mask_fraction, mask_modality)

    far = 100 * cfg.evaluation.far_targets[0]
    console.print(comparison_table(result.rows, f"Fusion comparison (TAR@{far:g}%FAR)"))
    if result.ablation_rows:
        console.print(comparison_table(result.ablation_rows, "Ablation"))
    if result.robustness_rows:
        console.print(comparison_table(result.robustness_rows, "Missing-modality robustness"))
    for path in result.paths:
        console.print(f"[green]✓[/] {path}")


if __name__ == "__main__":
    main()
