"""Run and benchmark reports: JSON, CSV and matplotlib figures.

CSV column order is fixed (:data:`CSV_COLUMNS`); list-valued metrics are
joined with ``;`` inside one cell. Figures are written next to the report
file, named ``<stem>_<what>.png``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from importlib import resources
from pathlib import Path

import numpy as np

CSV_COLUMNS = (
    "mode",
    "pipelined",
    "frames",
    "wall_time_s",
    "throughput_fps",
    "latency_ms_mean",
    "mean_utilization",
    "per_cluster_utilization",
    "per_layer_ms",
    "jobs_stolen",
    "seed",
    "output_digest",
)


def output_digest(outputs) -> str:
    h = hashlib.sha256()
    for vec in outputs:
        h.update(np.ascontiguousarray(vec, dtype="<f4").tobytes())
    return h.hexdigest()


def metrics_row(metrics, seed, outputs=None, mode=None):
    """Flat report record for one run (no output vectors)."""
    return {
        "mode": mode or metrics.mode,
        "pipelined": metrics.pipelined,
        "frames": metrics.frames,
        "wall_time_s": metrics.wall_time_s,
        "throughput_fps": metrics.throughput_fps,
        "latency_ms_mean": metrics.latency_ms_mean,
        "mean_utilization": metrics.mean_utilization,
        "per_cluster_utilization": list(metrics.per_cluster_utilization),
        "per_layer_ms": list(metrics.per_layer_ms),
        "jobs_stolen": metrics.jobs_stolen,
        "seed": seed,
        "output_digest": output_digest(outputs or []),
    }


def run_report(metrics, seed, outputs, net=None, hw=None):
    report = metrics_row(metrics, seed, outputs)
    report["accelerated"] = metrics.accelerated
    report["net"] = None if net is None else str(net)
    report["hw"] = None if hw is None else str(hw)
    report["outputs"] = [np.asarray(v, dtype=np.float32).tolist() for v in outputs]
    return report


def bench_report(rows, seed, frames, net=None, hw=None):
    return {
        "net": None if net is None else str(net),
        "hw": None if hw is None else str(hw),
        "seed": seed,
        "frames": frames,
        "rows": rows,
    }


def load_schema():
    text = resources.files("tilestream").joinpath("report.schema.json").read_text()
    return json.loads(text)


def to_json(report) -> str:
    return json.dumps(report, indent=2)


def _cell(value):
    if isinstance(value, (list, tuple)):
        return ";".join(f"{v:.6g}" for v in value)
    if isinstance(value, float):
        return f"{value:.6g}"
    return value


def to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_cell(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def write_report(report, fmt, out=None) -> str:
    """Serialize ``report`` as ``json`` or ``csv``; write to ``out`` when
    given. Returns the text."""
    if fmt == "json":
        text = to_json(report)
    elif fmt == "csv":
        text = to_csv(report["rows"] if "rows" in report else [report])
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if out is not None:
        Path(out).write_text(text if text.endswith("\n") else text + "\n")
    return text


# -- figures -------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _stem(out):
    out = Path(out)
    return out.with_name(out.stem)


def render_run_figures(report, out, layer_names=None):
    """Per-layer time bars and per-cluster utilization bars for one run."""
    plt = _pyplot()
    stem = _stem(out)
    paths = []

    layer_ms = report["per_layer_ms"]
    names = layer_names or [str(i) for i in range(len(layer_ms))]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(layer_ms)), layer_ms, color="tab:blue")
    ax.set_xticks(range(len(layer_ms)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("time per frame (ms)")
    ax.set_title(f"Layer execution time ({report['mode']})")
    fig.tight_layout()
    path = Path(f"{stem}_layers.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)

    util = report["per_cluster_utilization"]
    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.bar([f"Cluster-{i}" for i in range(len(util))], [100 * u for u in util], color="tab:green")
    ax.set_ylim(0, 100)
    ax.set_ylabel("utilization (%)")
    ax.set_title(f"Cluster utilization ({report['mode']})")
    fig.tight_layout()
    path = Path(f"{stem}_utilization.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)
    return paths


def render_bench_figures(report, out):
    """Throughput and mean utilization per scheduling mode."""
    plt = _pyplot()
    rows = report["rows"]
    labels = [r["mode"] for r in rows]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3.5))
    ax0.bar(labels, [r["throughput_fps"] for r in rows], color="tab:blue")
    ax0.set_ylabel("frames / s")
    ax0.set_title("Throughput")
    ax1.bar(labels, [100 * r["mean_utilization"] for r in rows], color="tab:green")
    ax1.set_ylim(0, 100)
    ax1.set_ylabel("mean cluster utilization (%)")
    ax1.set_title("Utilization")
    fig.tight_layout()
    path = Path(f"{_stem(out)}_modes.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]
