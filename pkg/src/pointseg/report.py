"""Report rendering: delimited metric tables plus matplotlib figures,
written side by side into a report directory."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _ensure_dir(outdir) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    return outdir


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def save_training_report(history: list, outdir) -> list:
    """Per-epoch curves and a CSV table of the training log."""
    outdir = _ensure_dir(outdir)
    csv_path = outdir / "training_log.csv"
    _write_csv(csv_path, ["epoch", "loss", "oa", "miou", "wall_ms"],
               [[r["epoch"], r["loss"], r["oa"], r["miou"], r["wall_ms"]]
                for r in history])

    epochs = [r["epoch"] for r in history]
    fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [r["loss"] for r in history])
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_metric.plot(epochs, [r["oa"] for r in history], label="OA")
    ax_metric.plot(epochs, [r["miou"] for r in history], label="mIoU")
    ax_metric.set_xlabel("epoch")
    ax_metric.set_ylim(0, 1.02)
    ax_metric.legend()
    fig.tight_layout()
    png_path = outdir / "training_curves.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]


def save_eval_report(report: dict, outdir, prefix: str = "eval") -> list:
    """Confusion heatmap, per-class IoU bars, and the metric table."""
    outdir = _ensure_dir(outdir)
    ious = report["per_class_iou"]
    csv_path = outdir / f"{prefix}_metrics.csv"
    rows = [["oa", "", report["oa"]], ["miou", "", report["miou"]]]
    rows += [["iou", c, "" if v is None else v] for c, v in enumerate(ious)]
    _write_csv(csv_path, ["metric", "class", "value"], rows)

    confusion = np.asarray(report["confusion"])
    fig, (ax_cm, ax_iou) = plt.subplots(1, 2, figsize=(9, 3.8))
    im = ax_cm.imshow(confusion, cmap="Blues")
    ax_cm.set_xlabel("predicted")
    ax_cm.set_ylabel("ground truth")
    fig.colorbar(im, ax=ax_cm, fraction=0.046)
    ax_iou.bar(range(len(ious)), [0.0 if v is None else v for v in ious])
    ax_iou.set_xlabel("class")
    ax_iou.set_ylabel("IoU")
    ax_iou.set_ylim(0, 1.02)
    fig.tight_layout()
    png_path = outdir / f"{prefix}_metrics.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]


def save_robustness_report(result: dict, outdir) -> list:
    outdir = _ensure_dir(outdir)
    rows = result["perturbations"]
    csv_path = outdir / "robustness.csv"
    _write_csv(csv_path, ["kind", "value", "oa", "delta"],
               [[r["kind"], r["value"], r["oa"], r["delta"]] for r in rows])

    labels = [f"{r['kind']} {r['value']:.3g}" for r in rows]
    fig, ax = plt.subplots(figsize=(1.2 * len(rows) + 2, 3.5))
    ax.bar(range(len(rows)), [r["oa"] for r in rows])
    ax.axhline(result["baseline_oa"], color="k", linestyle="--", linewidth=1,
               label="baseline")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("OA")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    png_path = outdir / "robustness.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]


def save_ablation_report(results: dict, outdir) -> list:
    outdir = _ensure_dir(outdir)
    csv_path = outdir / "ablation.csv"
    _write_csv(csv_path, ["variant", "oa", "miou"],
               [[name, r["oa"], r["miou"]] for name, r in results.items()])

    names = list(results)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1.4 * len(names) + 2, 3.5))
    ax.bar(x - 0.2, [results[n]["oa"] for n in names], width=0.4, label="OA")
    ax.bar(x + 0.2, [results[n]["miou"] for n in names], width=0.4, label="mIoU")
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    png_path = outdir / "ablation.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]


def save_bench_report(rows: list, outdir) -> list:
    """rows: [{"stage": str, "ms": float}, ...]"""
    outdir = _ensure_dir(outdir)
    csv_path = outdir / "bench.csv"
    _write_csv(csv_path, ["stage", "ms"], [[r["stage"], r["ms"]] for r in rows])

    fig, ax = plt.subplots(figsize=(1.2 * len(rows) + 2, 3.5))
    ax.bar(range(len(rows)), [r["ms"] for r in rows])
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([r["stage"] for r in rows], rotation=30, ha="right")
    ax.set_ylabel("ms")
    fig.tight_layout()
    png_path = outdir / "bench.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]
