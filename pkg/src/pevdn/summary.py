"""Aggregate per-run metric logs into per-mode curves and a final table."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import MissingMode
from .train import read_metrics

SUMMARY_COLUMNS = ("mode", "total_steps", "n_runs", "win_rate_mean", "win_rate_min", "win_rate_max",
                   "mean_return_mean", "mean_return_min", "mean_return_max")


@dataclass
class Summary:
    """``rows`` holds one entry per (mode, eval step); ``final`` one per mode."""

    rows: list[dict]
    final: dict[str, dict]

    def curve(self, mode: str, metric: str = "mean_return"):
        rows = [r for r in self.rows if r["mode"] == mode]
        steps = np.array([r["total_steps"] for r in rows])
        return (steps, np.array([r[f"{metric}_mean"] for r in rows]),
                np.array([r[f"{metric}_min"] for r in rows]), np.array([r[f"{metric}_max"] for r in rows]))

    def ratio(self, mode: str, reference: str, metric: str = "mean_return") -> float:
        ref = self.final[reference][f"{metric}_mean"]
        return self.final[mode][f"{metric}_mean"] / ref if ref else float("nan")


def _stats(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.min()), float(arr.max())


def summarize(runs, required_modes=None) -> Summary:
    """Per-mode mean and min/max envelope at each evaluation step.

    ``runs`` is an iterable of metric logs (lists of rows) or CSV paths.
    Step values missing from some seeds of a mode are averaged over the
    seeds that have them; the final table uses each run's last row.
    """
    by_mode = defaultdict(list)
    for run in runs:
        rows = read_metrics(run) if not isinstance(run, list) else run
        if rows:
            by_mode[rows[0]["mode"]].append(rows)
    for mode in required_modes or ():
        mode = getattr(mode, "value", mode)
        if mode not in by_mode:
            raise MissingMode(f"no runs for mode {mode}")
    if not by_mode:
        raise MissingMode("no runs to summarize")
    table, final = [], {}
    for mode in sorted(by_mode):
        logs = by_mode[mode]
        at_step = defaultdict(list)
        for log in logs:
            for r in log:
                at_step[r["total_steps"]].append(r)
        for step in sorted(at_step):
            group = at_step[step]
            row = {"mode": mode, "total_steps": step, "n_runs": len(group)}
            for metric in ("win_rate", "mean_return"):
                row[f"{metric}_mean"], row[f"{metric}_min"], row[f"{metric}_max"] = \
                    _stats([r[metric] for r in group])
            table.append(row)
        last = [log[-1] for log in logs]
        entry = {"mode": mode, "total_steps": max(r["total_steps"] for r in last), "n_runs": len(last)}
        for metric in ("win_rate", "mean_return"):
            entry[f"{metric}_mean"], entry[f"{metric}_min"], entry[f"{metric}_max"] = \
                _stats([r[metric] for r in last])
        final[mode] = entry
    return Summary(table, final)


def write_summary(summary: Summary, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for row in summary.rows:
            writer.writerow(row)


def format_final(summary: Summary) -> str:
    lines = [f"{'mode':<12} {'runs':>4} {'win_rate':>9} {'return':>9} {'return range':>18}"]
    for mode, e in summary.final.items():
        lines.append(f"{mode:<12} {e['n_runs']:>4} {e['win_rate_mean']:>9.3f} {e['mean_return_mean']:>9.3f} "
                     f"[{e['mean_return_min']:>7.3f}, {e['mean_return_max']:>7.3f}]")
    return "\n".join(lines)
