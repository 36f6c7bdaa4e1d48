"""Deterministic CSV / JSON / SVG writers and the timestamp sidecar."""

from __future__ import annotations

import csv
import json
import math
import platform
import time
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "trajkit"
matplotlib.rcParams["svg.fonttype"] = "none"

SIDECAR = "run_meta.json"


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: _fmt(r[c]) for c in columns})


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n")


def write_sidecar(out_dir: Path, command: str, started: float) -> None:
    """Wall-clock facts live here so every other output stays byte-identical on rerun."""
    write_json(
        out_dir / SIDECAR,
        {
            "command": command,
            "started_unix": started,
            "elapsed_s": time.time() - started,
            "python": platform.python_version(),
        },
    )


def histogram_svg(path: Path, series: dict[str, Iterable[float]], title: str, xlabel: str) -> None:
    """Overlaid histograms on [0, 1]; metadata stripped for reproducible bytes."""
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = [i / 20 for i in range(21)]
    for name, vals in series.items():
        ax.hist(list(vals), bins=bins, alpha=0.55, label=name)
    ax.set_xlim(0, 1)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("scenes")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def bar_svg(path: Path, labels: Sequence[str], means: Sequence[float], lo: Sequence[float], hi: Sequence[float], title: str) -> None:
    """Bars with min/max whiskers."""
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = range(len(labels))
    err = [[m - a for m, a in zip(means, lo)], [b - m for m, b in zip(means, hi)]]
    ax.bar(xs, means, yerr=err, capsize=4, color="#4c78a8")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("mean held-out EPDMS")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
