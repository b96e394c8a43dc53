"""Aggregation of finished runs into per-cell curve summaries.

A run directory holds `config.txt` and `metrics.jsonl` (one JSON record
per update). The "final smoothed return" of a run is the trailing mean
of the `mean_return` field over the last 10% of updates; cells group
runs by (variant, noise length, particle count) across seeds.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig, load_config
from .errors import ConfigError

SMOOTHING_DOC = "final smoothed return = trailing mean of mean_return over the last 10% of updates"


@dataclass
class RunResult:
    path: str
    cfg: TrainConfig
    final_return: float | None
    records: int
    expected_records: int

    @property
    def complete(self) -> bool:
        return self.records >= self.expected_records and self.final_return is not None

    @property
    def cell(self) -> tuple:
        return (self.cfg.variant, self.cfg.noise_len, self.cfg.K)


@dataclass
class CurveSummary:
    """Per-cell statistics over seeds plus bookkeeping for partial runs."""

    cells: dict = field(default_factory=dict)       # cell -> {seed: final}
    incomplete: list = field(default_factory=list)  # RunResult

    def median(self, cell: tuple) -> float:
        return float(np.median(list(self.cells[cell].values())))

    def spread(self, cell: tuple) -> tuple[float, float]:
        vals = list(self.cells[cell].values())
        return float(min(vals)), float(max(vals))

    def robustness_ratio(self, variant: str, K: int, l_hi: int = 100,
                         l_lo: int = 0) -> float | None:
        """median final return at l_hi divided by the one at l_lo."""
        hi, lo = (variant, l_hi, K), (variant, l_lo, K)
        if hi not in self.cells or lo not in self.cells:
            return None
        return self.median(hi) / self.median(lo)


def read_metrics(path: str) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def final_smoothed_return(records: list[dict]) -> float | None:
    """Trailing mean of mean_return over the last 10% of updates."""
    if not records:
        return None
    tail = records[-max(1, len(records) // 10):]
    vals = [r["mean_return"] for r in tail if r.get("mean_return") is not None]
    if not vals:
        return None
    return float(np.mean(vals))


def load_run(run_dir: str) -> RunResult:
    cfg_path = os.path.join(run_dir, "config.txt")
    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    if not os.path.exists(cfg_path):
        raise ConfigError(f"run {run_dir}: missing config.txt")
    cfg = load_config(cfg_path)
    records = read_metrics(metrics_path) if os.path.exists(metrics_path) else []
    expected = max(1, cfg.total_env_steps // (cfg.envs * cfg.n_steps))
    return RunResult(
        path=run_dir,
        cfg=cfg,
        final_return=final_smoothed_return(records),
        records=len(records),
        expected_records=expected,
    )


def summarize(run_dirs: list[str]) -> CurveSummary:
    """Collect completed runs into cells; incomplete runs are kept in the
    summary's `incomplete` list rather than silently dropped."""
    if not run_dirs:
        raise ConfigError("summarize: no run directories given")
    out = CurveSummary()
    for d in sorted(run_dirs):
        run = load_run(d)
        if not run.complete:
            out.incomplete.append(run)
            continue
        out.cells.setdefault(run.cell, {})[run.cfg.seed] = run.final_return
    return out


def _cell_name(cell: tuple) -> str:
    variant, l, K = cell
    return f"{variant} l={l} K={K}"


def render_table(summary: CurveSummary) -> str:
    lines = [f"# {SMOOTHING_DOC}"]
    width = max((len(_cell_name(c)) for c in summary.cells), default=10) + 2
    lines.append(f"{'cell':<{width}} {'median':>10} {'min':>10} {'max':>10} seeds")
    for cell in sorted(summary.cells):
        med = summary.median(cell)
        lo, hi = summary.spread(cell)
        seeds = ",".join(str(s) for s in sorted(summary.cells[cell]))
        lines.append(
            f"{_cell_name(cell):<{width}} {med:>10.3f} {lo:>10.3f} {hi:>10.3f} {seeds}"
        )
    for variant in sorted({c[0] for c in summary.cells}):
        for K in sorted({c[2] for c in summary.cells if c[0] == variant}):
            ratio = summary.robustness_ratio(variant, K)
            if ratio is not None:
                lines.append(
                    f"robustness ratio {variant} K={K}: "
                    f"return(l=100)/return(l=0) = {ratio:.4f}"
                )
    for run in summary.incomplete:
        lines.append(
            f"INCOMPLETE: {run.path} ({run.records}/{run.expected_records} updates)"
        )
    return "\n".join(lines) + "\n"


def write_summary_csv(summary: CurveSummary, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {SMOOTHING_DOC}\n")
        fh.write("variant,l,K,seed,final_return,median,min,max\n")
        for cell in sorted(summary.cells):
            med = summary.median(cell)
            lo, hi = summary.spread(cell)
            for seed in sorted(summary.cells[cell]):
                fh.write(
                    f"{cell[0]},{cell[1]},{cell[2]},{seed},"
                    f"{summary.cells[cell][seed]!r},{med!r},{lo!r},{hi!r}\n"
                )
        for run in summary.incomplete:
            fh.write(f"# INCOMPLETE,{run.path},{run.records}/{run.expected_records}\n")
