"""Render a training log into figures and a delimited summary.

Input is the JSONL log written by train_loop: one object per optimizer
step with {step, epoch, mode, loss[, reward]}, plus one object per
validation pass carrying "val_metrics". Output is a set of PNG figures
(loss curve, reward curve when present, validation metrics when present)
and a CSV with one row per log line, written side by side in out_dir.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


class ReportError(ValueError):
    """Raised when a log file is missing, empty, or malformed."""


def load_log(path) -> list[dict]:
    """Read a JSONL training log, checking each line is a well-formed entry."""
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ReportError(f"cannot read log {path!r}: {exc}") from exc
    entries = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ReportError(f"{path}:{lineno}: not valid JSON: {exc.msg}") from exc
        if not isinstance(entry, dict) or not {"step", "epoch", "mode", "loss"} <= set(entry):
            raise ReportError(f"{path}:{lineno}: missing step/epoch/mode/loss")
        entries.append(entry)
    if not entries:
        raise ReportError(f"log {path!r} contains no entries")
    return entries


def _save_line_plot(path, series, xlabel, ylabel, title):
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, xs, ys in series:
        ax.plot(xs, ys, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1 or series[0][0]:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_summary_csv(entries: list[dict], path) -> None:
    metric_keys = sorted({k for e in entries for k in e.get("val_metrics", {})})
    fields = ["step", "epoch", "mode", "loss", "reward"] + metric_keys
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for e in entries:
            row = {k: e.get(k, "") for k in ("step", "epoch", "mode", "loss", "reward")}
            for k in metric_keys:
                row[k] = e.get("val_metrics", {}).get(k, "")
            writer.writerow(row)


def write_report(entries: list[dict], out_dir) -> dict:
    """Write figures and the CSV; returns {name: path} for everything written."""
    os.makedirs(out_dir, exist_ok=True)
    produced = {}

    steps = [e for e in entries if "val_metrics" not in e]
    vals = [e for e in entries if "val_metrics" in e]

    loss_src = steps or vals
    loss_path = os.path.join(out_dir, "loss.png")
    _save_line_plot(loss_path,
                    [("", [e["step"] for e in loss_src], [e["loss"] for e in loss_src])],
                    "step", "loss", "training loss")
    produced["loss"] = loss_path

    rewarded = [e for e in steps if "reward" in e]
    if rewarded:
        reward_path = os.path.join(out_dir, "reward.png")
        _save_line_plot(reward_path,
                        [("", [e["step"] for e in rewarded],
                          [e["reward"] for e in rewarded])],
                        "step", "mean reward", "SCST reward")
        produced["reward"] = reward_path

    if vals:
        metric_keys = sorted({k for e in vals for k in e["val_metrics"]})
        series = [(key, [e["epoch"] for e in vals],
                   [e["val_metrics"].get(key) for e in vals]) for key in metric_keys]
        val_path = os.path.join(out_dir, "val_metrics.png")
        _save_line_plot(val_path, series, "epoch", "score", "validation metrics")
        produced["val_metrics"] = val_path

    csv_path = os.path.join(out_dir, "summary.csv")
    write_summary_csv(entries, csv_path)
    produced["summary"] = csv_path
    return produced
