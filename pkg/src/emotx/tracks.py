"""Character track extension on precomputed detections.

Pipeline: pair faces with person boxes, track faces with greedy IoU
association against constant-velocity predictions, inherit names from sparse
ground-truth tracks, then cluster identity features with must-link (same
track) and cannot-link (co-occurring tracks) constraints. The partition with
the best cosine silhouette is used to name the remaining tracks.

File formats (line-delimited JSON):

detections
    ``{"frame": 12, "kind": "face", "box": [x1, y1, x2, y2], "score": 0.98, "feature": [...]}``
ground-truth tracks
    ``{"track_id": "gt0", "name": "Forrest", "detections": [{"frame": 12, "box": [...]}]}``
output tracks
    ``{"track_id": 0, "name": "Forrest", "confidence": 1.0, "detections": [{"frame", "box", "score", "person_box"}]}``
"""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.metrics import silhouette_score

logger = logging.getLogger(__name__)

IOU_GATE = 0.3
MAX_AGE = 3
NAME_IOU = 0.7
NAME_THRESHOLD = 0.7
MAX_CLUSTERS = 20
FACE_INSIDE = 0.9


@dataclass(frozen=True, eq=False)
class Detection:
    frame: int
    box: tuple[float, float, float, float]
    score: float = 1.0
    kind: str = "face"
    feature: np.ndarray | None = None
    person_box: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"malformed box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.kind not in ("face", "person"):
            raise ValueError(f"kind must be face or person, got {self.kind!r}")
        if self.feature is not None and abs(float(np.linalg.norm(self.feature)) - 1.0) > 1e-6:
            raise ValueError("identity feature must be unit-normalised")


@dataclass(eq=False)
class Track:
    track_id: int | str
    detections: list[Detection] = field(default_factory=list)
    name: str | None = None
    name_confidence: float = 0.0

    def __post_init__(self):
        frames = [d.frame for d in self.detections]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError(f"track {self.track_id}: frames must be strictly increasing")

    @property
    def frames(self) -> list[int]:
        return [d.frame for d in self.detections]


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def _inside_fraction(inner, outer) -> float:
    ix = max(0.0, min(inner[2], outer[2]) - max(inner[0], outer[0]))
    iy = max(0.0, min(inner[3], outer[3]) - max(inner[1], outer[1]))
    return ix * iy / ((inner[2] - inner[0]) * (inner[3] - inner[1]))


def map_face_to_person(faces: Sequence[Detection], persons: Sequence[Detection]) -> list[tuple[Detection, Detection]]:
    """Pair each person box with the highest-scoring face lying inside it.

    A face is inside a person box when at least 90% of its area is covered.
    Persons are served in descending score order and a face is used once.
    """
    by_frame = defaultdict(lambda: ([], []))
    for f in faces:
        by_frame[f.frame][0].append(f)
    for p in persons:
        by_frame[p.frame][1].append(p)
    pairs = []
    for frame in sorted(by_frame):
        fs, ps = by_frame[frame]
        used = set()
        for p in sorted(ps, key=lambda d: (-d.score, d.box)):
            cands = [
                (f.score, j) for j, f in enumerate(fs)
                if j not in used and _inside_fraction(f.box, p.box) >= FACE_INSIDE
            ]
            if cands:
                _, j = max(cands, key=lambda c: (c[0], -c[1]))
                used.add(j)
                pairs.append((fs[j], p))
    return pairs


@dataclass
class _Active:
    track: Track
    box: np.ndarray
    velocity: np.ndarray
    last_frame: int

    def predict(self, frame: int) -> np.ndarray:
        return self.box + self.velocity * (frame - self.last_frame)


def track(detections: Iterable[Detection], iou_gate: float = IOU_GATE, max_age: int = MAX_AGE) -> list[Track]:
    """Greedy IoU tracking against constant-velocity box predictions.

    Per frame, (track, detection) pairs are matched by descending IoU; pairs
    below ``iou_gate`` never match and unmatched detections start new tracks.
    A track that has missed more than ``max_age`` consecutive frames is closed.
    """
    by_frame = defaultdict(list)
    for d in detections:
        by_frame[d.frame].append(d)
    active: list[_Active] = []
    done: list[Track] = []
    next_id = 0
    for frame in sorted(by_frame):
        dets = sorted(by_frame[frame], key=lambda d: (d.box, -d.score))
        expired = [a for a in active if frame - a.last_frame - 1 > max_age]
        done += [a.track for a in expired]
        active = [a for a in active if frame - a.last_frame - 1 <= max_age]
        cand = []
        for ti, a in enumerate(active):
            pred = a.predict(frame)
            for di, d in enumerate(dets):
                v = iou(pred, d.box)
                if v >= iou_gate:
                    cand.append((-v, a.track.track_id, di, ti))
        cand.sort()
        t_used, d_used = set(), set()
        for _, _, di, ti in cand:
            if ti in t_used or di in d_used:
                continue
            t_used.add(ti)
            d_used.add(di)
            a, d = active[ti], dets[di]
            box = np.asarray(d.box, dtype=float)
            a.velocity = (box - a.box) / (frame - a.last_frame)
            a.box, a.last_frame = box, frame
            a.track.detections.append(d)
        for di, d in enumerate(dets):
            if di not in d_used:
                t = Track(next_id, [d])
                next_id += 1
                active.append(_Active(t, np.asarray(d.box, dtype=float), np.zeros(4), frame))
    done += [a.track for a in active]
    return sorted(done, key=lambda t: t.track_id)


def propagate_names(new_tracks: Sequence[Track], gt_tracks: Sequence[Track], iou_threshold: float = NAME_IOU) -> list[Track]:
    """Name tracks by majority vote over detections overlapping named ground truth.

    A detection votes for the name of the best-overlapping same-frame
    ground-truth detection when that IoU is at least ``iou_threshold``. Ties
    between the top names leave the track unnamed.
    """
    gt_by_frame = defaultdict(list)
    for gt in gt_tracks:
        if gt.name is None:
            continue
        for d in gt.detections:
            gt_by_frame[d.frame].append((d.box, gt.name))
    out = []
    for t in new_tracks:
        votes = Counter()
        for d in t.detections:
            best = max(((iou(d.box, box), name) for box, name in gt_by_frame.get(d.frame, ())), default=None)
            if best is not None and best[0] >= iou_threshold:
                votes[best[1]] += 1
        name, conf = None, 0.0
        if votes:
            ranked = votes.most_common()
            if len(ranked) == 1 or ranked[0][1] > ranked[1][1]:
                name = ranked[0][0]
                conf = ranked[0][1] / sum(votes.values())
        out.append(replace(t, name=name, name_confidence=conf))
    return out


@dataclass
class Partition:
    labels: np.ndarray  # cluster id per detection
    silhouette: float
    n_clusters: int
    sweep: dict[int, float] = field(default_factory=dict)


def cosine_silhouette(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean cosine silhouette; singleton clusters score 0, one cluster scores 0."""
    n_labels = len(np.unique(labels))
    if n_labels < 2:
        return 0.0
    if n_labels >= len(labels):
        return 0.0
    return float(silhouette_score(features, labels, metric="cosine"))


def constrained_partitions(
    features: np.ndarray, groups: np.ndarray, cannot_link: set[tuple[int, int]], max_clusters: int = MAX_CLUSTERS
) -> dict[int, np.ndarray]:
    """Complete-linkage agglomeration of detection groups under cannot-link pairs.

    ``groups`` gives the must-link group (track) of every detection; groups
    start as clusters. Returns ``{n_clusters: labels}`` for every count from
    ``min(max_clusters, n_groups)`` down to 2 that the constraints allow.
    """
    dist = np.clip(1.0 - features @ features.T, 0.0, 2.0)
    clusters = {g: {g} for g in np.unique(groups)}
    members = {g: np.flatnonzero(groups == g) for g in clusters}
    upper = min(max_clusters, len(clusters))

    def linkage(a, b):
        if any((min(x, y), max(x, y)) in cannot_link for x in clusters[a] for y in clusters[b]):
            return np.inf
        return dist[np.ix_(members[a], members[b])].max()

    def snapshot():
        labels = np.empty(len(groups), dtype=int)
        for cid, key in enumerate(sorted(clusters)):
            labels[members[key]] = cid
        return labels

    out = {}
    while len(clusters) >= 2:
        if len(clusters) <= upper:
            out[len(clusters)] = snapshot()
        if len(clusters) == 2:
            break
        keys = sorted(clusters)
        best = (np.inf, None, None)
        for i, a in enumerate(keys):
            for b in keys[i + 1 :]:
                d = linkage(a, b)
                if d < best[0]:
                    best = (d, a, b)
        if best[1] is None:
            break
        _, a, b = best
        clusters[a] |= clusters.pop(b)
        members[a] = np.concatenate([members[a], members.pop(b)])
    return out


def cluster_and_name(
    tracks: Sequence[Track],
    name_list: Sequence[str],
    threshold: float = NAME_THRESHOLD,
    max_clusters: int = MAX_CLUSTERS,
) -> tuple[list[Track], Partition | None]:
    """Name unnamed tracks from the best-silhouette constrained partition.

    Each cluster gets a name distribution from its named detections (names
    outside ``name_list`` are ignored), uniform over ``name_list`` if it has
    none. An unnamed track averages its detections' cluster distributions and
    takes the top name when its probability reaches ``threshold``.
    """
    tracks = list(tracks)
    if len(tracks) < 2:
        return tracks, None
    feats, groups = [], []
    for ti, t in enumerate(tracks):
        for d in t.detections:
            if d.feature is None:
                raise ValueError(f"track {t.track_id}: detection at frame {d.frame} has no identity feature")
            feats.append(d.feature)
            groups.append(ti)
    features = np.asarray(feats, dtype=np.float64)
    groups = np.asarray(groups)
    frames = [set(t.frames) for t in tracks]
    cannot = {(a, b) for a in range(len(tracks)) for b in range(a + 1, len(tracks)) if frames[a] & frames[b]}

    parts = constrained_partitions(features, groups, cannot, max_clusters)
    if not parts:
        logger.info("no feasible partition with >= 2 clusters; tracks left as they are")
        return tracks, None
    sweep = {k: cosine_silhouette(features, lab) for k, lab in sorted(parts.items())}
    best_k = max(sorted(sweep), key=lambda k: sweep[k])
    labels = parts[best_k]
    partition = Partition(labels, sweep[best_k], best_k, sweep)

    names = list(dict.fromkeys(name_list))
    n_clusters = labels.max() + 1
    dist = np.zeros((n_clusters, len(names)))
    for ti, t in enumerate(tracks):
        if t.name in names:
            for c in labels[groups == ti]:
                dist[c, names.index(t.name)] += 1
    empty = dist.sum(axis=1) == 0
    dist[empty] = 1.0
    dist /= dist.sum(axis=1, keepdims=True)

    out = []
    for ti, t in enumerate(tracks):
        if t.name is not None or not names:
            out.append(t)
            continue
        p = dist[labels[groups == ti]].mean(axis=0)
        best = int(np.argmax(p))
        if p[best] >= threshold:
            out.append(replace(t, name=names[best], name_confidence=float(p[best])))
        else:
            out.append(replace(t, name_confidence=float(p[best])))
    return out, partition


def run_pipeline(
    detections: Sequence[Detection], gt_tracks: Sequence[Track], name_list: Sequence[str] | None = None
) -> tuple[list[Track], Partition | None]:
    """Face/person pairing, face tracking, name propagation and cluster naming."""
    faces = [d for d in detections if d.kind == "face"]
    persons = [d for d in detections if d.kind == "person"]
    paired = {id(f): p for f, p in map_face_to_person(faces, persons)}
    faces = [replace(f, person_box=paired[id(f)].box) if id(f) in paired else f for f in faces]
    tracks = propagate_names(track(faces), gt_tracks)
    if name_list is None:
        name_list = sorted({t.name for t in gt_tracks if t.name is not None})
    return cluster_and_name(tracks, name_list)


# ---------------------------------------------------------------- I/O


def read_detections(path: str | Path) -> list[Detection]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        feat = r.get("feature")
        out.append(
            Detection(
                frame=int(r["frame"]),
                box=tuple(float(v) for v in r["box"]),
                score=float(r.get("score", 1.0)),
                kind=r.get("kind", "face"),
                feature=None if feat is None else np.asarray(feat, dtype=np.float64),
            )
        )
    return out


def read_gt_tracks(path: str | Path) -> list[Track]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        dets = [Detection(int(d["frame"]), tuple(float(v) for v in d["box"])) for d in r["detections"]]
        out.append(Track(r["track_id"], sorted(dets, key=lambda d: d.frame), r.get("name")))
    return out


def write_tracks(path: str | Path, tracks: Sequence[Track]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for t in tracks:
            fh.write(json.dumps({
                "track_id": t.track_id,
                "name": t.name,
                "confidence": t.name_confidence,
                "detections": [
                    {"frame": d.frame, "box": list(d.box), "score": d.score,
                     "person_box": None if d.person_box is None else list(d.person_box)}
                    for d in t.detections
                ],
            }) + "\n")
    return path
