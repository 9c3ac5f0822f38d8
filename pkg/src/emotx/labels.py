"""Label sets used for scene and character emotion prediction.

Three named sets are supported: ``top10``, ``top25`` and ``emotic26``. The
Emotic set carries a mapping from raw free-text emotion strings to one of 26
groups; it is loaded from the bundled ``data/emotic_mapping.tsv`` table.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

logger = logging.getLogger(__name__)

TOP10 = (
    "worried", "calm", "happy", "curious", "confused",
    "serious", "excited", "surprise", "friendly", "polite",
)

TOP25 = TOP10 + (
    "determined", "helpful", "honest", "confident", "cheerful",
    "alarmed", "upset", "angry", "scared", "nervous",
    "sad", "annoyed", "amused", "shocked", "quiet",
)

LABEL_SET_NAMES = ("top10", "top25", "emotic26")
EXPECTED_SIZES = {"top10": 10, "top25": 25, "emotic26": 26}


class LabelSetError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSet:
    name: str
    labels: tuple[str, ...]
    mapping: dict[str, int] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.name in EXPECTED_SIZES and len(self.labels) != EXPECTED_SIZES[self.name]:
            raise LabelSetError(
                f"label set {self.name!r} must have {EXPECTED_SIZES[self.name]} labels, "
                f"got {len(self.labels)}"
            )
        if len(set(self.labels)) != len(self.labels):
            raise LabelSetError(f"duplicate labels in {self.name!r}")
        bad = {raw: idx for raw, idx in self.mapping.items() if not 0 <= idx < len(self.labels)}
        if bad:
            raise LabelSetError(f"mapping indices out of range: {bad}")

    @property
    def K(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        if label not in self.labels:
            raise LabelSetError(f"label {label!r} is not in label set {self.name!r}")
        return self.labels.index(label)


def parse_mapping(text: str) -> tuple[tuple[str, ...], dict[str, int]]:
    """Parse a ``group<TAB>raw, raw, ...`` table into groups and a raw->index map.

    A raw label listed under two groups is rejected so that the mapping stays a
    function.
    """
    groups: list[str] = []
    mapping: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            group, raw = line.split("\t", 1)
        except ValueError:
            raise LabelSetError(f"line {lineno}: expected '<group>\\t<labels>'") from None
        group = group.strip()
        if group in groups:
            raise LabelSetError(f"line {lineno}: group {group!r} listed twice")
        groups.append(group)
        for label in raw.split(","):
            label = label.strip().lower()
            if not label:
                continue
            if label in mapping:
                raise LabelSetError(
                    f"line {lineno}: {label!r} already mapped to {groups[mapping[label]]!r}"
                )
            mapping[label] = len(groups) - 1
    return tuple(groups), mapping


@lru_cache(maxsize=None)
def _emotic() -> LabelSet:
    text = resources.files("emotx").joinpath("data/emotic_mapping.tsv").read_text()
    groups, mapping = parse_mapping(text)
    return LabelSet("emotic26", groups, mapping)


def load_label_set(name: str) -> LabelSet:
    if name == "top10":
        return LabelSet("top10", TOP10)
    if name == "top25":
        return LabelSet("top25", TOP25)
    if name == "emotic26":
        return _emotic()
    raise LabelSetError(f"unknown label set {name!r}; expected one of {LABEL_SET_NAMES}")


def map_to_emotic(raw_label: str, label_set: LabelSet | None = None) -> int | None:
    """Return the Emotic group index for a raw emotion string, or None if unmapped."""
    label_set = label_set or _emotic()
    if not label_set.mapping:
        raise LabelSetError(f"label set {label_set.name!r} has no raw-label mapping")
    idx = label_set.mapping.get(raw_label.strip().lower())
    if idx is None:
        logger.info("unmapped emotion label %r", raw_label)
    return idx
