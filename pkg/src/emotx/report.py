"""Static report directory built from the files a run leaves behind.

Run directory inputs::

    eval_scene.csv, eval_char.csv            label, ap, n_pos (+ mAP row)
    cooccurrence_scene.csv,
    cooccurrence_character.csv               square matrix, header = labels
    label_histogram.csv                      level, n_labels, count
    expressiveness.csv  (optional)           label, score, count

Report layout (``<run>/report/``)::

    ap_scene.csv / ap_scene.png              per-label AP bars
    ap_character.csv / ap_character.png
    cooccurrence_scene.png, cooccurrence_character.png
    label_histogram.csv / label_histogram.png
    expressiveness.csv / expressiveness.png  (when the input exists)

Tables are copied value for value from the inputs, so regenerating a report
gives identical table files.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .annotations import SceneAnnotation, label_cooccurrence, label_count_histogram  # noqa: E402
from .evaluation import read_eval_table  # noqa: E402

REQUIRED = (
    "eval_scene.csv",
    "eval_char.csv",
    "cooccurrence_scene.csv",
    "cooccurrence_character.csv",
    "label_histogram.csv",
)
OPTIONAL = ("expressiveness.csv",)


class MissingArtifactError(FileNotFoundError):
    def __init__(self, run_dir: Path, missing: Sequence[str]):
        self.missing = list(missing)
        super().__init__(f"{run_dir}: missing run artifacts: {', '.join(self.missing)}")


def write_dataset_stats(run_dir: str | Path, scenes: Sequence[SceneAnnotation], label_names: Sequence[str]) -> None:
    """Co-occurrence matrices and label-count histograms for both levels."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    for level in ("scene", "character"):
        m = label_cooccurrence(scenes, level)
        with (run_dir / f"cooccurrence_{level}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", *label_names])
            for name, row in zip(label_names, m):
                w.writerow([name, *(repr(float(v)) for v in row)])
    with (run_dir / "label_histogram.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "n_labels", "count"])
        for level in ("scene", "character"):
            for n, c in label_count_histogram(scenes, level).items():
                w.writerow([level, n, c])


def write_expressiveness(path: str | Path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "score", "count"])
        for r in rows:
            w.writerow([r["label"], repr(float(r["score"])), r["count"]])
    return path


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _read_matrix(path: Path) -> tuple[list[str], np.ndarray]:
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    return names, np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)


def _bar(path: Path, labels, values, title: str, ylabel: str) -> None:
    fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * len(labels) + 1), 3.2))
    ax.bar(range(len(labels)), values, color="#4c72b0")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _heatmap(path: Path, names, m: np.ndarray, title: str) -> None:
    fig, ax = plt.subplots(figsize=(0.3 * len(names) + 2, 0.3 * len(names) + 1.5))
    im = ax.imshow(m, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(names)))
    ax.set_yticks(range(len(names)))
    ax.set_xticklabels(names, rotation=90, fontsize=6)
    ax.set_yticklabels(names, fontsize=6)
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def build_report(run_dir: str | Path, out_dir: str | Path | None = None) -> Path:
    """Render tables and plots for ``run_dir``; returns the report directory."""
    run_dir = Path(run_dir)
    missing = [name for name in REQUIRED if not (run_dir / name).is_file()]
    if missing:
        raise MissingArtifactError(run_dir, missing)
    out = Path(out_dir) if out_dir is not None else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)

    for src, level in (("eval_scene.csv", "scene"), ("eval_char.csv", "character")):
        rows, mAP = read_eval_table(run_dir / src)
        scored = [r for r in rows if r["ap"] is not None]
        with (out / f"ap_{level}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "ap"])
            for r in scored:
                w.writerow([r["label"], repr(r["ap"])])
            w.writerow(["mAP", repr(mAP)])
        _bar(out / f"ap_{level}.png", [r["label"] for r in scored], [r["ap"] for r in scored],
             f"{level} AP (mAP {mAP:.3f})", "AP")

    for level in ("scene", "character"):
        names, m = _read_matrix(run_dir / f"cooccurrence_{level}.csv")
        _heatmap(out / f"cooccurrence_{level}.png", names, m, f"{level} label co-occurrence")

    hist = _read_csv(run_dir / "label_histogram.csv")
    with (out / "label_histogram.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["level", "n_labels", "count"])
        w.writeheader()
        w.writerows(hist)
    fig, axes = plt.subplots(1, 2, figsize=(7, 3))
    for ax, level in zip(axes, ("scene", "character")):
        sel = [r for r in hist if r["level"] == level]
        ax.bar([int(r["n_labels"]) for r in sel], [int(r["count"]) for r in sel], color="#55a868")
        ax.set_xlabel("labels per sample")
        ax.set_title(level)
    axes[0].set_ylabel("count")
    fig.tight_layout()
    fig.savefig(out / "label_histogram.png", dpi=100, metadata={"Software": None})
    plt.close(fig)

    expr = run_dir / "expressiveness.csv"
    if expr.is_file():
        rows = _read_csv(expr)
        write_expressiveness(out / "expressiveness.csv",
                             [{"label": r["label"], "score": float(r["score"]), "count": int(r["count"])} for r in rows])
        _bar(out / "expressiveness.png", [r["label"] for r in rows], [float(r["score"]) for r in rows],
             "expressiveness", "score")
    return out
