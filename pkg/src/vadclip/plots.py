"""Static result artifacts: per-frame score CSV, PR-curve CSV and a PNG of
score curves with ground-truth shading."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .data import VideoDataset


def pr_curve(scores, labels):
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    y = np.asarray(labels)[order]
    tp = np.cumsum(y)
    precision = tp / np.arange(1, len(y) + 1)
    recall = tp / max(int(y.sum()), 1)
    return precision, recall


def write_artifacts(preds, dataset: VideoDataset, path: str, out_dir, max_videos: int = 6) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = {a.video_id: a.frame_labels(f.n) for f, a in zip(dataset.features, dataset.annotations)}

    scores_csv = out_dir / "frame_scores.csv"
    with open(scores_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["video_id", "frame", "score", "label"])
        for p in preds:
            for i, s in enumerate(p.scores[path]):
                w.writerow([p.video_id, i, f"{s:.6f}", int(labels[p.video_id][i])])

    flat_s = np.concatenate([p.scores[path] for p in preds])
    flat_y = np.concatenate([labels[p.video_id] for p in preds])
    precision, recall = pr_curve(flat_s, flat_y)
    pr_csv = out_dir / "pr_curve.csv"
    np.savetxt(pr_csv, np.c_[recall, precision], delimiter=",", header="recall,precision", comments="")

    shown = [p for p in preds if p.label == 1][:max_videos]
    fig, axes = plt.subplots(len(shown) or 1, 1, figsize=(8, 1.6 * max(len(shown), 1)), squeeze=False)
    for ax, p in zip(axes[:, 0], shown):
        y = labels[p.video_id]
        ax.fill_between(np.arange(len(y)), 0, y, step="post", color="tab:red", alpha=0.2, lw=0)
        ax.plot(p.scores[path], color="tab:blue", lw=1)
        ax.set_ylim(0, 1)
        ax.set_ylabel(p.video_id, fontsize=6)
    axes[-1, 0].set_xlabel("frame")
    fig.tight_layout()
    png = out_dir / "score_curves.png"
    fig.savefig(png, dpi=100)
    plt.close(fig)
    return [scores_csv, pr_csv, png]
