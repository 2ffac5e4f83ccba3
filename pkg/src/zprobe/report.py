"""Per-round CSV, JSON summary and figures for one experiment."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from zprobe.harness import RoundMetrics, TrainingResult

SCHEMA_VERSION = 1
PHASES = ("step1", "step2", "step3")
CSV_COLUMNS = ["epoch", "accuracy", "flagged_correctness", "flagged_robustness",
               "flagged_magnitude", "agg_norm"] + [f"phase_ms_{p}" for p in PHASES]


def csv_row(m: RoundMetrics, timing: bool) -> list[str]:
    row = [str(m.epoch), f"{m.accuracy:.6f}", str(len(m.flagged_correctness)),
           str(len(m.flagged_robustness)), str(int(m.flagged_magnitude)), f"{m.agg_norm:.9g}"]
    # wall-clock columns stay empty by default so reruns are byte-identical
    row += [f"{m.phase_ms.get(p, 0.0):.3f}" if timing and p in m.phase_ms else "" for p in PHASES]
    return row


def write_metrics_csv(result: TrainingResult, path: str | Path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for m in result.metrics:
            w.writerow(csv_row(m, result.config.timing))
    return Path(path)


def summary(result: TrainingResult) -> dict:
    ms = result.metrics
    byz = set(result.byzantine)
    rounds = []
    for m in ms:
        entry = {
            "epoch": m.epoch,
            "accuracy": m.accuracy,
            "contributors": m.contributors,
            "flagged_correctness": m.flagged_correctness,
            "flagged_robustness": m.flagged_robustness,
            "flagged_magnitude": m.flagged_magnitude,
            "eta_bound_exceeded": m.eta_flag,
            "skipped": m.skipped,
            "bounds": m.bounds,
        }
        if result.config.timing:
            entry["phase_ms"] = m.phase_ms
        rounds.append(entry)
    return {
        "schema_version": SCHEMA_VERSION,
        "config": result.config.to_dict(),
        "initial_accuracy": result.initial_accuracy,
        "final_accuracy": result.final_accuracy,
        "byzantine": result.byzantine,
        "totals": {
            "epochs": len(ms),
            "skipped_rounds": sum(m.skipped for m in ms),
            "flagged_correctness": sum(len(m.flagged_correctness) for m in ms),
            "flagged_robustness": sum(len(m.flagged_robustness) for m in ms),
            "flagged_magnitude": sum(m.flagged_magnitude for m in ms),
            "byzantine_flags": sum(len(byz & m.flagged) for m in ms),
            "honest_flags": sum(len(m.flagged - byz) for m in ms),
        },
        "rounds": rounds,
    }


def write_summary(result: TrainingResult, path: str | Path) -> Path:
    Path(path).write_text(json.dumps(summary(result), indent=2, sort_keys=True) + "\n")
    return Path(path)


def write_figures(result: TrainingResult, out: Path) -> list[Path]:
    from zprobe.plotting import plot_accuracy, plot_flags

    return [
        plot_accuracy(result.metrics, out / "accuracy.png", result.config.name),
        plot_flags(result.metrics, out / "flags.png", len(result.byzantine)),
    ]
