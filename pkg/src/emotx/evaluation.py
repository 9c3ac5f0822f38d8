"""Average precision, mAP and the uniform-random baseline."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

EVAL_COLUMNS = ("label", "ap", "n_pos")


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float | None:
    """Mean of precision@r over the ranks r of the positives.

    Items are ranked by descending score; ties keep their input order. Returns
    None when there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    n_pos = int(np.count_nonzero(labels))
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = labels[order] != 0
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, n_pos + 1) / ranks
    return float(precision.sum() / n_pos)


def mean_ap(
    predictions: np.ndarray, targets: np.ndarray, label_names: Sequence[str] | None = None, level: str = "scene"
) -> tuple[float, list[dict]]:
    """mAP over the labels that have at least one positive, plus a per-label table.

    Each per-label row is ``{"label", "ap", "n_pos"}``; ``ap`` is None for
    labels without positives, and those labels are left out of the mean.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets)
    if predictions.shape != targets.shape or predictions.ndim != 2:
        raise ValueError(f"prediction table {predictions.shape} does not match targets {targets.shape}")
    K = targets.shape[1]
    names = list(label_names) if label_names is not None else [str(k) for k in range(K)]
    rows = []
    for k in range(K):
        ap = average_precision(predictions[:, k], targets[:, k])
        if ap is None:
            logger.info("%s-level label %r has no positives; excluded from mAP", level, names[k])
        rows.append({"label": names[k], "ap": ap, "n_pos": int(np.count_nonzero(targets[:, k]))})
    aps = [r["ap"] for r in rows if r["ap"] is not None]
    if not aps:
        raise ValueError(f"no {level}-level label has a positive sample")
    return float(np.mean(aps)), rows


def random_baseline(targets: np.ndarray, trials: int = 100, seed: int = 0) -> dict:
    """mAP of uniform [0, 1) scores, repeated ``trials`` times.

    Returns the mean and standard deviation of mAP and the per-label mean AP.
    """
    targets = np.asarray(targets)
    rng = np.random.default_rng(seed)
    maps, per_label = [], []
    for _ in range(trials):
        m, rows = mean_ap(rng.random(targets.shape), targets)
        maps.append(m)
        per_label.append([np.nan if r["ap"] is None else r["ap"] for r in rows])
    return {
        "mean": float(np.mean(maps)),
        "std": float(np.std(maps)),
        "per_label": np.nanmean(np.asarray(per_label), axis=0),
        "trials": trials,
    }


def geometric_mean(scene_map: float, char_map: float) -> float:
    return float(np.sqrt(scene_map * char_map))


def write_eval_table(path: str | Path, rows: list[dict], mAP: float) -> Path:
    """CSV with one row per label and a final ``mAP`` summary row.

    Floats are written with ``repr`` so they read back exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_COLUMNS)
        for r in rows:
            w.writerow([r["label"], "" if r["ap"] is None else repr(float(r["ap"])), r["n_pos"]])
        w.writerow(["mAP", repr(float(mAP)), sum(r["n_pos"] for r in rows)])
    return path


def read_eval_table(path: str | Path) -> tuple[list[dict], float]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or rows[-1]["label"] != "mAP":
        raise ValueError(f"{path}: missing mAP summary row")
    body = [
        {"label": r["label"], "ap": None if r["ap"] == "" else float(r["ap"]), "n_pos": int(r["n_pos"])}
        for r in rows[:-1]
    ]
    return body, float(rows[-1]["ap"])
