"""Report files: JSON, CSV tables and matplotlib figures."""

from __future__ import annotations

import csv
import io
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .container import atomic_write_bytes  # noqa: E402


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default)
    atomic_write_bytes(path, (text + "\n").encode("utf-8"))


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def loss_curve_rows(curve):
    return [(i, float(v)) for i, v in enumerate(curve)]


def sweep_table(rows):
    """Flatten robustness rows (one per R) into a header and value rows."""
    keys = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    return keys, [[r.get(k, "") for k in keys] for r in rows]


def compare_table(reports):
    """One row per (model, task, R) with every metric the reports carry.

    ``reports`` is a mapping or a sequence of (name, report) pairs; a name may
    repeat across tasks.
    """
    pairs = list(reports.items()) if isinstance(reports, dict) else list(reports)
    metrics = []
    for _, rep in pairs:
        for m in rep["per_R"].values():
            metrics += [k for k in m if k not in metrics]
    rows = []
    for name, rep in pairs:
        for R, m in sorted(rep["per_R"].items(), key=lambda kv: float(kv[0])):
            rows.append([name, rep["task"], float(R)] + [m.get(k, "") for k in metrics])
    return ["model", "task", "R"] + metrics, rows


def _save(fig, path):
    buf = io.BytesIO()
    fig.savefig(buf, format=os.path.splitext(path)[1][1:] or "png", dpi=120)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_loss_curve(curve, path, title="training loss", window=50):
    curve = np.asarray(curve, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(curve, lw=0.6, alpha=0.4, color="tab:blue", label="step")
    if len(curve) >= window:
        smooth = np.convolve(curve, np.ones(window) / window, mode="valid")
        ax.plot(np.arange(window - 1, len(curve)), smooth, color="tab:blue", label=f"{window}-step mean")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def plot_metric_vs_R(per_R: dict, path, title=""):
    Rs = sorted(float(r) for r in per_R)
    names = [k for k, v in per_R[next(iter(per_R))].items() if isinstance(v, (int, float)) and not isinstance(v, bool)]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for name in names:
        vals = [per_R[r][name] if r in per_R else per_R[str(r)][name] for r in Rs]
        ax.plot(Rs, vals, "o-", label=name)
    ax.set_xscale("log", base=2)
    ax.set_xticks(Rs)
    ax.set_xticklabels([f"{r:g}" for r in Rs])
    ax.set_xlabel("acceleration R")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def plot_mask(lines, path, title=""):
    fig, ax = plt.subplots(figsize=(5, 2.2))
    ax.imshow(np.asarray(lines, dtype=float), cmap="gray", vmin=0, vmax=1, aspect="auto", interpolation="nearest")
    ax.set_xlabel("phase-encode line")
    ax.set_ylabel("frame")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
