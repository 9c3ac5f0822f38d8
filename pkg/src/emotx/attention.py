"""Expressiveness scores and attention timelines from captured self-attention.

Rows are read from the final encoder layer averaged over heads by default
(``layer=-1``, ``heads="mean"``); both are arguments.

The score is a ratio of attention masses, so the head average never needs its
division: masses are summed exactly over every selected head and token and the
ratio is rounded once. Uniform attention therefore gives exactly N*T/(T+M).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .tokens import CHAR, CHAR_CLS, SCENE_CLS, UTT, VIDEO, collate
from .training import make_plan

ROLE_GROUPS = {"char": (CHAR,), "video": (VIDEO,), "utt": (UTT,), "cls": (SCENE_CLS, CHAR_CLS)}


@dataclass
class AttentionRecord:
    """Attention maps of one scene: per layer a (heads, L, L) array."""

    layers: list[np.ndarray]
    roles: np.ndarray
    mask: np.ndarray
    n_cls: int
    N: int
    scene_id: str = ""

    def reduced(self, layer: int = -1, heads: str | int = "mean") -> np.ndarray:
        a = self.layers[layer]
        return a.mean(axis=0) if heads == "mean" else a[int(heads)]

    def cls_slot(self, target: str = "scene", k: int = 0, char: int | None = None) -> int:
        k = k if self.n_cls > 1 else 0
        if not 0 <= k < self.n_cls:
            raise IndexError(f"classifier index {k} out of range")
        if target == "scene":
            return k
        if target != "character":
            raise ValueError("target must be 'scene' or 'character'")
        if char is None or not 0 <= char < self.N:
            raise IndexError(f"unknown character index {char}")
        slot = self.n_cls * (1 + char) + k
        if not self.mask[slot]:
            raise IndexError(f"character {char} is not present in scene {self.scene_id!r}")
        return slot

    def row(self, target: str = "scene", k: int = 0, char: int | None = None, layer: int = -1, heads="mean") -> np.ndarray:
        return self.reduced(layer, heads)[self.cls_slot(target, k, char)]


def exact_sum(x) -> Fraction:
    """Sum of float values with no rounding, as a Fraction."""
    x = np.asarray(x, dtype=np.float64).ravel()
    x = x[x != 0]
    if x.size == 0:
        return Fraction(0)
    m, e = np.frexp(x)
    mant = np.ldexp(m, 53).astype(np.int64)
    e = e - 53
    emin = int(e.min())
    total = 0
    for ex in np.unique(e):
        s = mant[e == ex]
        # 26-bit halves keep the int64 partial sums far from overflow
        part = (int((s >> 26).sum()) << 26) + int((s & ((1 << 26) - 1)).sum())
        total += part << int(ex - emin)
    return Fraction(total) * Fraction(2) ** emin


def role_masses(row: np.ndarray, roles: np.ndarray, mask: np.ndarray) -> dict[str, float]:
    """Split an attention row into char / video / utt / cls / pad masses."""
    kind = roles["kind"]
    out = {}
    for name, kinds in ROLE_GROUPS.items():
        sel = np.isin(kind, kinds) & mask
        out[name] = float(row[sel].sum())
    out["pad"] = float(row[~mask].sum())
    return out


def expressiveness_from_row(row: np.ndarray, roles: np.ndarray, mask: np.ndarray) -> float | None:
    """Character mass over video-plus-utterance mass; None if the denominator is 0.

    ``row`` is one attention row of length L, or a stack of rows (one per
    head) whose masses are pooled. Mass on classifier tokens enters neither side.
    """
    row = np.asarray(row).reshape(-1, len(mask))
    kind = roles["kind"]
    char = exact_sum(row[:, (kind == CHAR) & mask])
    denom = exact_sum(row[:, np.isin(kind, (VIDEO, UTT)) & mask])
    if denom <= 0:
        return None
    return float(char / denom)


def expressiveness(record: AttentionRecord, k: int, layer: int = -1, heads="mean") -> float | None:
    slot = record.cls_slot("scene", k)
    a = record.layers[layer]
    rows = a[:, slot] if heads == "mean" else a[int(heads), slot]
    return expressiveness_from_row(rows, record.roles, record.mask)


def expressiveness_profile(
    records: Iterable[tuple[AttentionRecord, np.ndarray]],
    label_names: Sequence[str],
    layer: int = -1,
    heads="mean",
) -> list[dict]:
    """Mean expressiveness per label over scenes where that label is positive.

    Returns rows ``{"label", "score", "count"}`` sorted by descending score;
    labels never positive (or always undefined) are left out.
    """
    K = len(label_names)
    sums = np.zeros(K)
    counts = np.zeros(K, dtype=int)
    for record, scene_labels in records:
        for k in np.flatnonzero(np.asarray(scene_labels)[:K]):
            e = expressiveness(record, int(k), layer, heads)
            if e is not None:
                sums[k] += e
                counts[k] += 1
    rows = [
        {"label": label_names[k], "score": float(sums[k] / counts[k]), "count": int(counts[k])}
        for k in range(K) if counts[k] > 0
    ]
    return sorted(rows, key=lambda r: (-r["score"], r["label"]))


def attention_timeline(
    record: AttentionRecord, target: str = "scene", k: int = 0, char: int | None = None,
    layer: int = -1, heads="mean",
) -> list[dict]:
    """Attention mass of one classifier row grouped by (role, time bin).

    Roles are ``video``, ``char<i>`` and ``utt`` over every bin from 0 to the
    last occupied bin (unoccupied bins carry 0), plus a ``cls`` row at bin -1.
    """
    row = record.row(target, k, char, layer, heads)
    roles, mask = record.roles, record.mask
    real_bins = roles["tbin"][mask & (roles["tbin"] >= 0)]
    n_bins = int(real_bins.max()) + 1 if len(real_bins) else 0
    groups = [("video", (roles["kind"] == VIDEO))]
    groups += [(f"char{i}", (roles["kind"] == CHAR) & (roles["char"] == i)) for i in range(record.N)]
    groups += [("utt", roles["kind"] == UTT)]
    out = []
    for name, sel in groups:
        sel = sel & mask
        masses = np.bincount(roles["tbin"][sel], weights=row[sel], minlength=n_bins)
        out += [{"bin": b, "role": name, "mass": float(masses[b])} for b in range(n_bins)]
    cls_sel = np.isin(roles["kind"], (SCENE_CLS, CHAR_CLS)) & mask
    out.append({"bin": -1, "role": "cls", "mass": float(row[cls_sel].sum())})
    return out


def write_timeline(path: str | Path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["bin", "role", "mass"])
        w.writeheader()
        for r in rows:
            w.writerow({"bin": r["bin"], "role": r["role"], "mass": repr(r["mass"])})
    return path


@torch.no_grad()
def capture_records(model, items, cfg) -> list[AttentionRecord]:
    """Run the model on prepared scenes one at a time and keep every layer's attention."""
    model.eval()
    dtype = next(model.parameters()).dtype
    records = []
    for item in items:
        batch = collate([make_plan(item, cfg, model.n_cls, "infer", 0)], dtype=dtype)
        out = model(batch, capture_attention=True)
        records.append(
            AttentionRecord(
                layers=[a[0].double().numpy() for a in out.attention],
                roles=batch.roles(0),
                mask=batch.mask[0].numpy(),
                n_cls=model.n_cls,
                N=model.N,
                scene_id=item.scene.scene_id,
            )
        )
    return records
