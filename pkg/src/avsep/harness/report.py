"""Summary tables and SVG figures from the persisted result CSVs."""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .config import ExperimentConfig, atomic_write_text
from ..errors import ConfigError


def _read_csv(path: str) -> list:
    if not os.path.exists(path):
        return []
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _format_table(rows, columns) -> str:
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) if rows else len(c) for c in columns]
    def fmt(vals):
        return "  ".join(str(v).ljust(w) for v, w in zip(vals, widths))
    lines = [fmt(columns), fmt(["-" * w for w in widths])]
    for r in rows:
        lines.append(fmt([r[c] for c in columns]))
    return "\n".join(lines)


def plot_step_curves(cfg: ExperimentConfig, variant: str) -> str | None:
    path = cfg.path("results", f"curves_{variant}.csv")
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for row in reader:
            curve = [float(x) for x in row[1:]]
            ax.plot(range(1, len(curve) + 1), curve, label=row[0])
    ax.set_xlabel("step")
    ax.set_ylabel("refined-estimate L1 loss")
    ax.set_title(f"separation quality over time ({variant})")
    ax.legend(fontsize=7)
    fig.tight_layout()
    os.makedirs(cfg.path("curves"), exist_ok=True)
    out = cfg.path("curves", f"quality_vs_time_{variant}.svg")
    fig.savefig(out)
    plt.close(fig)
    return out


def plot_noise_sweep(cfg: ExperimentConfig) -> str | None:
    rows = _read_csv(cfg.path("results", "noise_results.csv"))
    rows = [r for r in rows if r["metric"] == "si_sdr"]
    if not rows:
        return None
    levels = []
    for r in rows:
        if r["snr_db"] not in levels:
            levels.append(r["snr_db"])
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for model in sorted({r["model"] for r in rows}):
        for refiner, style in (("True", "-"), ("False", "--")):
            ys = [
                float(r["mean"])
                for level in levels
                for r in rows
                if r["model"] == model and r["refiner"] == refiner and r["snr_db"] == level
            ]
            if ys:
                label = model + ("" if refiner == "True" else " (no refiner)")
                ax.plot(range(len(ys)), ys, style, marker="o", label=label)
    ax.set_xticks(range(len(levels)))
    ax.set_xticklabels([str(l) for l in levels])
    ax.set_xlabel("microphone noise (SNR dB; left = clean)")
    ax.set_ylabel("SI-SDR (dB)")
    ax.set_title("robustness to microphone noise")
    ax.legend(fontsize=7)
    fig.tight_layout()
    os.makedirs(cfg.path("curves"), exist_ok=True)
    out = cfg.path("curves", "noise_sweep.svg")
    fig.savefig(out)
    plt.close(fig)
    return out


def stage_report(cfg: ExperimentConfig) -> dict:
    """Collect every results CSV into one human-readable summary plus SVGs."""
    sections = []
    produced = {}
    for variant in ("near", "far"):
        rows = _read_csv(cfg.path("results", f"{variant}_results.csv"))
        if rows:
            sections.append(f"== {variant}-target separation ==")
            sections.append(_format_table(rows, ["model", "metric", "mean", "ci95", "n_episodes", "n_seeds"]))
            sections.append("")
            svg = plot_step_curves(cfg, variant)
            if svg:
                produced[f"curve_{variant}"] = svg
    nav = _read_csv(cfg.path("results", "nav_results.csv"))
    if nav:
        sections.append("== navigation with distractors ==")
        sections.append(_format_table(nav, ["model", "metric", "mean", "n_episodes", "n_seeds"]))
        sections.append("")
    noise = _read_csv(cfg.path("results", "noise_results.csv"))
    if noise:
        sections.append("== noise sweep (SI-SDR) ==")
        sections.append(
            _format_table(
                [r for r in noise if r["metric"] == "si_sdr"],
                ["model", "snr_db", "refiner", "mean", "n"],
            )
        )
        sections.append("")
        svg = plot_noise_sweep(cfg)
        if svg:
            produced["noise_sweep"] = svg
    ablation = _read_csv(cfg.path("results", "ablation.csv"))
    if ablation:
        sections.append("== far-target ablations ==")
        sections.append(_format_table(ablation, ["model", "metric", "mean", "ci95", "n_episodes"]))
        sections.append("")
    if not sections:
        raise ConfigError("no result CSVs found; run eval stages before report")
    text = "\n".join(sections)
    atomic_write_text(cfg.path("report", "summary.txt"), text)
    produced["summary"] = cfg.path("report", "summary.txt")
    return produced
