"""Scene/character annotation schema, label aggregation and dataset statistics.

Annotations are stored as line-delimited JSON, one scene per line::

    {"scene_id": "s0001", "duration": 41.7, "label_set": "top10", "split": "train",
     "characters": [{"char_id": "c0", "labels": [0, 1, ...], "box_seconds": 12.3}],
     "utterances": [{"text_id": "u0", "mid_time": 3.5}],
     "scene_labels": [0, 1, ...]}

``split`` and ``scene_labels`` are optional. When ``scene_labels`` is present it
must equal the elementwise OR of the character labels.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import jsonschema
import numpy as np

from .labels import LabelSet

logger = logging.getLogger(__name__)

WEIGHT_MIN = 1.0
WEIGHT_MAX = 100.0


class SchemaError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


SCENE_SCHEMA = {
    "type": "object",
    "required": ["scene_id", "duration", "label_set", "characters", "utterances"],
    "additionalProperties": False,
    "properties": {
        "scene_id": {"type": "string", "minLength": 1},
        "duration": {"type": "number", "exclusiveMinimum": 0},
        "label_set": {"type": "string"},
        "split": {"type": "string"},
        "characters": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["char_id", "labels"],
                "additionalProperties": False,
                "properties": {
                    "char_id": {"type": "string", "minLength": 1},
                    "name": {"type": ["string", "null"]},
                    "labels": {"type": "array", "items": {"enum": [0, 1]}},
                    "box_seconds": {"type": "number", "minimum": 0},
                },
            },
        },
        "utterances": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["text_id", "mid_time"],
                "additionalProperties": False,
                "properties": {
                    "text_id": {"type": "string"},
                    "mid_time": {"type": "number", "minimum": 0},
                },
            },
        },
        "scene_labels": {"type": "array", "items": {"enum": [0, 1]}},
    },
}


@dataclass(frozen=True, eq=False)
class CharacterAnnotation:
    char_id: str
    labels: np.ndarray
    box_seconds: float = 0.0
    name: str | None = None


@dataclass(frozen=True)
class Utterance:
    text_id: str
    mid_time: float


@dataclass(frozen=True, eq=False)
class SceneAnnotation:
    scene_id: str
    duration: float
    label_set: str
    characters: tuple[CharacterAnnotation, ...]
    utterances: tuple[Utterance, ...] = ()
    split: str | None = None
    # scene-level targets for scenes annotated without characters
    extra_scene_labels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.duration > 0:
            raise SchemaError(f"{self.scene_id}: duration must be > 0")
        for u in self.utterances:
            if not 0 <= u.mid_time <= self.duration:
                raise SchemaError(
                    f"{self.scene_id}: utterance {u.text_id} at {u.mid_time}s "
                    f"outside [0, {self.duration}]"
                )

    @property
    def char_labels(self) -> np.ndarray:
        """(n_chars, K) int8 matrix of character targets."""
        if not self.characters:
            k = 0 if self.extra_scene_labels is None else len(self.extra_scene_labels)
            return np.zeros((0, k), dtype=np.int8)
        return np.stack([c.labels for c in self.characters]).astype(np.int8)

    @property
    def scene_labels(self) -> np.ndarray:
        if not self.characters:
            if self.extra_scene_labels is None:
                raise SchemaError(f"{self.scene_id}: no characters and no scene labels")
            return np.asarray(self.extra_scene_labels, dtype=np.int8)
        return derive_scene_labels([c.labels for c in self.characters])


def derive_scene_labels(char_labels: Sequence[Sequence[int]]) -> np.ndarray:
    """Elementwise OR over character label vectors."""
    if len(char_labels) == 0:
        raise SchemaError("cannot derive scene labels from an empty character list")
    lengths = {len(v) for v in char_labels}
    if len(lengths) != 1:
        raise SchemaError(f"character label vectors have mismatched lengths {sorted(lengths)}")
    stacked = np.asarray(char_labels, dtype=np.int8)
    return (stacked != 0).any(axis=0).astype(np.int8)


def truncate_characters(scene: SceneAnnotation, n_max: int) -> SceneAnnotation:
    """Keep at most ``n_max`` characters.

    Characters are ranked by number of positive labels, then annotated
    box-seconds (both descending), then ``char_id``. The kept characters are
    returned in rank order.
    """
    if len(scene.characters) <= n_max:
        return scene
    ranked = sorted(
        scene.characters,
        key=lambda c: (-int(np.count_nonzero(c.labels)), -c.box_seconds, c.char_id),
    )
    return replace(scene, characters=tuple(ranked[:n_max]))


def _rows(dataset: Iterable[SceneAnnotation], level: str) -> np.ndarray:
    if level == "scene":
        rows = [s.scene_labels for s in dataset]
    elif level == "character":
        rows = [c.labels for s in dataset for c in s.characters]
    else:
        raise ValueError(f"level must be 'scene' or 'character', got {level!r}")
    if not rows:
        raise ValueError(f"no {level} rows in dataset")
    return np.asarray(rows, dtype=np.int64)


def compute_positive_weights(
    dataset: Sequence[SceneAnnotation], label_set: LabelSet, level: str = "scene"
) -> np.ndarray:
    """Positive-class weights ``n_samples / n_positives`` clipped to [1, 100].

    ``n_samples`` counts scene rows for ``level="scene"`` and character rows for
    ``level="character"``.
    """
    y = _rows(dataset, level)
    if y.shape[1] != label_set.K:
        raise SchemaError(f"labels have length {y.shape[1]}, label set has K={label_set.K}")
    n_pos = y.sum(axis=0)
    missing = [label_set.labels[k] for k in np.flatnonzero(n_pos == 0)]
    if missing:
        raise ConfigurationError(f"no positive {level} samples for labels: {', '.join(missing)}")
    return np.clip(len(y) / n_pos, WEIGHT_MIN, WEIGHT_MAX).astype(np.float64)


def label_cooccurrence(dataset: Sequence[SceneAnnotation], level: str = "scene") -> np.ndarray:
    """K x K co-occurrence counts, each row divided by its maximum.

    Rows of labels that never occur are left as zeros.
    """
    y = _rows(dataset, level).astype(np.float64)
    counts = y.T @ y
    row_max = counts.max(axis=1, keepdims=True)
    return np.divide(counts, row_max, out=np.zeros_like(counts), where=row_max > 0)


def label_count_histogram(dataset: Sequence[SceneAnnotation], level: str = "scene") -> dict[int, int]:
    """Map ``number of positive labels -> number of rows`` with that count."""
    y = _rows(dataset, level)
    return dict(sorted(Counter(int(c) for c in y.sum(axis=1)).items()))


# ---------------------------------------------------------------- I/O


def scene_to_record(scene: SceneAnnotation) -> dict:
    rec = {
        "scene_id": scene.scene_id,
        "duration": float(scene.duration),
        "label_set": scene.label_set,
        "characters": [
            {
                "char_id": c.char_id,
                "name": c.name,
                "labels": [int(v) for v in c.labels],
                "box_seconds": float(c.box_seconds),
            }
            for c in scene.characters
        ],
        "utterances": [{"text_id": u.text_id, "mid_time": float(u.mid_time)} for u in scene.utterances],
        "scene_labels": [int(v) for v in scene.scene_labels],
    }
    if scene.split is not None:
        rec["split"] = scene.split
    return rec


def scene_from_record(rec: dict, label_set: LabelSet | None = None) -> SceneAnnotation:
    try:
        jsonschema.validate(rec, SCENE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"{rec.get('scene_id', '?')}: {exc.message}") from None
    if label_set is not None and rec["label_set"] != label_set.name:
        raise SchemaError(
            f"{rec['scene_id']}: label set {rec['label_set']!r} != expected {label_set.name!r}"
        )
    chars = tuple(
        CharacterAnnotation(
            char_id=c["char_id"],
            labels=np.asarray(c["labels"], dtype=np.int8),
            box_seconds=float(c.get("box_seconds", 0.0)),
            name=c.get("name"),
        )
        for c in rec["characters"]
    )
    ids = [c.char_id for c in chars]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{rec['scene_id']}: duplicate char_id")
    extra = None
    if not chars:
        if "scene_labels" not in rec:
            raise SchemaError(f"{rec['scene_id']}: no characters and no scene_labels")
        extra = np.asarray(rec["scene_labels"], dtype=np.int8)
    scene = SceneAnnotation(
        scene_id=rec["scene_id"],
        duration=float(rec["duration"]),
        label_set=rec["label_set"],
        characters=chars,
        utterances=tuple(Utterance(u["text_id"], float(u["mid_time"])) for u in rec["utterances"]),
        split=rec.get("split"),
        extra_scene_labels=extra,
    )
    k = label_set.K if label_set is not None else None
    for c in chars:
        if k is not None and len(c.labels) != k:
            raise SchemaError(f"{scene.scene_id}/{c.char_id}: {len(c.labels)} labels, expected K={k}")
    derived = scene.scene_labels
    if k is not None and len(derived) != k:
        raise SchemaError(f"{scene.scene_id}: {len(derived)} scene labels, expected K={k}")
    if "scene_labels" in rec and not np.array_equal(derived, rec["scene_labels"]):
        raise SchemaError(f"{scene.scene_id}: scene_labels is not the OR of character labels")
    return scene


def write_scenes(path: str | Path, scenes: Iterable[SceneAnnotation]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene_to_record(scene), sort_keys=True) + "\n")


def read_scenes(path: str | Path, label_set: LabelSet | None = None) -> list[SceneAnnotation]:
    scenes = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
            scenes.append(scene_from_record(rec, label_set))
    ids = [s.scene_id for s in scenes]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{path}: duplicate scene_id")
    return scenes
