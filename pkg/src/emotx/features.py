"""Per-scene precomputed features: container, on-disk format and a synthetic generator.

On-disk layout, one directory per scene under ``<feature_root>/<scene_id>/``:

``video.npz``
    ``duration`` (scalar float64), ``times`` (T_raw,) float64 seconds,
    ``feats`` (T_raw, D_V) little-endian float32, row-major.
``character.npz``
    ``char_ids`` (n,) unicode; for each position ``i``: ``times_i`` (n_i,) float64
    and ``feats_i`` (n_i, D_C) float32. A character only has rows for frames in
    which its box exists.
``dialog.npz``
    ``text_ids`` (M,) unicode, ``times`` (M,) float64 utterance mid-times,
    ``feats`` (M, D_U) float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .annotations import CharacterAnnotation, SceneAnnotation, Utterance
from .labels import LabelSet

FPS = 3
MODALITIES = ("video", "character", "dialog")
_FLOAT = np.dtype("<f4")
_TIME = np.dtype("<f8")


class FeatureError(ValueError):
    pass


class DimensionMismatchError(FeatureError):
    pass


class TimestampError(FeatureError):
    pass


@dataclass(frozen=True, eq=False)
class CharTrack:
    times: np.ndarray
    feats: np.ndarray

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True, eq=False)
class FeatureBundle:
    scene_id: str
    duration: float
    video_times: np.ndarray
    video_feats: np.ndarray
    char_feats: dict[str, CharTrack] = field(default_factory=dict)
    utt_ids: tuple[str, ...] = ()
    utt_times: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=_TIME))
    utt_feats: np.ndarray | None = None

    @property
    def dims(self) -> tuple[int, int | None, int | None]:
        d_c = next((t.feats.shape[1] for t in self.char_feats.values()), None)
        d_u = None if self.utt_feats is None else self.utt_feats.shape[1]
        return self.video_feats.shape[1], d_c, d_u

    def equals(self, other: "FeatureBundle") -> bool:
        """Bit-exact comparison of every array and id."""
        if (self.scene_id, self.duration, self.utt_ids) != (other.scene_id, other.duration, other.utt_ids):
            return False
        if set(self.char_feats) != set(other.char_feats):
            return False
        pairs = [
            (self.video_times, other.video_times),
            (self.video_feats, other.video_feats),
            (self.utt_times, other.utt_times),
            (_or_empty(self.utt_feats), _or_empty(other.utt_feats)),
        ]
        for cid, track in self.char_feats.items():
            pairs += [(track.times, other.char_feats[cid].times), (track.feats, other.char_feats[cid].feats)]
        return all(a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in pairs)

    def validate(self, dims: Sequence[int] | None = None) -> None:
        d_v, d_c, d_u = self.dims
        if dims is not None:
            for name, got, want in zip(("D_V", "D_C", "D_U"), (d_v, d_c, d_u), dims):
                if got is not None and got != want:
                    raise DimensionMismatchError(f"{self.scene_id}: {name}={got} but config expects {want}")
        stamps = [("video", self.video_times), ("dialog", self.utt_times)]
        stamps += [(f"character {cid}", t.times) for cid, t in self.char_feats.items()]
        for name, times in stamps:
            if len(times) and (times.min() < 0 or times.max() > self.duration + 1e-9):
                raise TimestampError(f"{self.scene_id}: {name} timestamp outside [0, {self.duration}]")
        for cid, track in self.char_feats.items():
            if track.feats.shape[0] != len(track.times):
                raise FeatureError(f"{self.scene_id}: character {cid} rows/timestamps mismatch")
        if self.video_feats.shape[0] != len(self.video_times):
            raise FeatureError(f"{self.scene_id}: video rows/timestamps mismatch")
        n_utt = 0 if self.utt_feats is None else self.utt_feats.shape[0]
        if n_utt != len(self.utt_times) or n_utt != len(self.utt_ids):
            raise FeatureError(f"{self.scene_id}: dialog rows/timestamps mismatch")


def _or_empty(a: np.ndarray | None) -> np.ndarray:
    return np.zeros((0, 0), dtype=_FLOAT) if a is None else a


def _sorted(times: np.ndarray, *arrays):
    order = np.argsort(times, kind="stable")
    return (times[order],) + tuple(a[order] for a in arrays)


def write_bundle(bundle: FeatureBundle, feature_root: str | Path) -> Path:
    out = Path(feature_root) / bundle.scene_id
    out.mkdir(parents=True, exist_ok=True)
    np.savez(
        out / "video.npz",
        duration=np.float64(bundle.duration),
        times=bundle.video_times.astype(_TIME),
        feats=bundle.video_feats.astype(_FLOAT),
    )
    char_arrays = {"char_ids": np.array(list(bundle.char_feats), dtype=np.str_)}
    for i, track in enumerate(bundle.char_feats.values()):
        char_arrays[f"times_{i}"] = track.times.astype(_TIME)
        char_arrays[f"feats_{i}"] = track.feats.astype(_FLOAT)
    np.savez(out / "character.npz", **char_arrays)
    d_u = 0 if bundle.utt_feats is None else bundle.utt_feats.shape[1]
    np.savez(
        out / "dialog.npz",
        text_ids=np.array(bundle.utt_ids, dtype=np.str_),
        times=bundle.utt_times.astype(_TIME),
        feats=(bundle.utt_feats if bundle.utt_feats is not None else np.zeros((0, d_u))).astype(_FLOAT),
    )
    return out


def load_bundle(scene_id: str, feature_root: str | Path, dims: Sequence[int] | None = None) -> FeatureBundle:
    """Read one scene's feature files, sort every modality by time and validate."""
    base = Path(feature_root) / scene_id
    paths = {m: base / f"{m}.npz" for m in MODALITIES}
    missing = [str(p) for p in paths.values() if not p.is_file()]
    if missing:
        raise FeatureError(f"missing feature files: {', '.join(missing)}")
    with np.load(paths["video"]) as z:
        duration = float(z["duration"])
        v_times, v_feats = _sorted(z["times"], z["feats"])
    chars = {}
    with np.load(paths["character"]) as z:
        for i, cid in enumerate(z["char_ids"].tolist()):
            t, f = _sorted(z[f"times_{i}"], z[f"feats_{i}"])
            chars[cid] = CharTrack(t, f)
    with np.load(paths["dialog"]) as z:
        u_times, u_feats, u_ids = _sorted(z["times"], z["feats"], z["text_ids"])
    bundle = FeatureBundle(
        scene_id=scene_id,
        duration=duration,
        video_times=v_times,
        video_feats=v_feats,
        char_feats=chars,
        utt_ids=tuple(u_ids.tolist()),
        utt_times=u_times,
        utt_feats=u_feats,
    )
    bundle.validate(dims)
    return bundle


def load_bundles(scenes: Sequence[SceneAnnotation], feature_root: str | Path, dims=None) -> dict[str, FeatureBundle]:
    return {s.scene_id: load_bundle(s.scene_id, feature_root, dims) for s in scenes}


# ------------------------------------------------------------ synthetic data


def label_directions(label_set: LabelSet, dims: Sequence[int], direction_seed: int = 0) -> list[np.ndarray]:
    """Unit direction per (modality, label): a list of three (K, D_m) arrays."""
    rng = np.random.default_rng(direction_seed)
    out = []
    for d in dims:
        v = rng.standard_normal((label_set.K, d))
        out.append(v / np.linalg.norm(v, axis=1, keepdims=True))
    return out


def modality_assignment(K: int, modalities: Sequence[str] = MODALITIES) -> list[str]:
    """Round-robin assignment of each label to the modality carrying its signal."""
    for m in modalities:
        if m not in MODALITIES:
            raise ValueError(f"unknown modality {m!r}")
    return [modalities[k % len(modalities)] for k in range(K)]


def generate_synthetic(
    seed: int,
    n_scenes: int,
    label_set: LabelSet,
    dims: Sequence[int] = (64, 64, 64),
    signal_strength: float = 1.0,
    *,
    n_max_chars: int = 4,
    duration_range: tuple[float, float] = (2.0, 8.0),
    prevalence: float = 0.25,
    modalities: Sequence[str] = MODALITIES,
    amplitude: float = 3.0,
    direction_seed: int = 0,
    split: str | None = None,
    id_prefix: str = "syn",
) -> tuple[list[SceneAnnotation], dict[str, FeatureBundle]]:
    """Generate scenes whose features carry a planted, label-specific signal.

    For every positive (character i, label k) pair, ``amplitude * signal_strength``
    times the unit direction of label k is added to the modality assigned to k:
    all of character i's box features, the video frames in which character i
    appears, or the utterances nearest those frames. Features are otherwise
    i.i.d. standard normal. Label directions depend on ``direction_seed`` only, so
    separately seeded splits share them.
    """
    if not 0.0 <= signal_strength <= 1.0:
        raise ValueError("signal_strength must be in [0, 1]")
    rng = np.random.default_rng(seed)
    K = label_set.K
    d_v, d_c, d_u = dims
    dirs = dict(zip(MODALITIES, label_directions(label_set, dims, direction_seed)))
    assign = modality_assignment(K, modalities)
    scale = amplitude * signal_strength

    skeletons = []
    for n in range(n_scenes):
        duration = float(rng.uniform(*duration_range))
        n_frames = max(1, int(np.floor(FPS * duration)))
        frame_times = np.arange(n_frames, dtype=_TIME) / FPS
        n_chars = int(rng.integers(1, n_max_chars + 1))
        present = []
        labels = []
        for _ in range(n_chars):
            p = rng.uniform(0.4, 1.0)
            on = rng.random(n_frames) < p
            if not on.any():
                on[rng.integers(n_frames)] = True
            present.append(on)
            labels.append((rng.random(K) < prevalence).astype(np.int8))
        n_utt = int(rng.integers(1, max(2, n_frames // 3) + 1))
        utt_times = np.sort(rng.uniform(0.0, duration, n_utt))
        skeletons.append((duration, frame_times, present, labels, utt_times))

    # every label needs at least one positive for the class weights
    counts = sum((lab for sk in skeletons for lab in sk[3]), np.zeros(K, dtype=np.int64))
    for k in np.flatnonzero(counts == 0):
        sk = skeletons[int(rng.integers(len(skeletons)))]
        sk[3][int(rng.integers(len(sk[3])))][k] = 1

    scenes, bundles = [], {}
    for n, (duration, frame_times, present, labels, utt_times) in enumerate(skeletons):
        sid = f"{id_prefix}{seed}_{n:05d}"
        n_frames = len(frame_times)
        video = rng.standard_normal((n_frames, d_v))
        utt = rng.standard_normal((len(utt_times), d_u))
        utt_frame = np.minimum(np.rint(utt_times * FPS).astype(int), n_frames - 1)
        char_tracks = {}
        chars = []
        for i, (on, lab) in enumerate(zip(present, labels)):
            cid = f"c{i}"
            cf = rng.standard_normal((int(on.sum()), d_c))
            for k in np.flatnonzero(lab):
                m = assign[k]
                if m == "character":
                    cf += scale * dirs[m][k]
                elif m == "video":
                    video[on] += scale * dirs[m][k]
                else:
                    hit = on[utt_frame]
                    if not hit.any():
                        hit = np.zeros(len(utt_times), dtype=bool)
                        hit[int(rng.integers(len(utt_times)))] = True
                    utt[hit] += scale * dirs[m][k]
            char_tracks[cid] = CharTrack(frame_times[on].copy(), cf.astype(_FLOAT))
            chars.append(CharacterAnnotation(cid, lab, box_seconds=float(on.sum()) / FPS))
        utt_ids = tuple(f"u{j}" for j in range(len(utt_times)))
        scenes.append(
            SceneAnnotation(
                scene_id=sid,
                duration=duration,
                label_set=label_set.name,
                characters=tuple(chars),
                utterances=tuple(Utterance(u, float(t)) for u, t in zip(utt_ids, utt_times)),
                split=split,
            )
        )
        bundles[sid] = FeatureBundle(
            scene_id=sid,
            duration=duration,
            video_times=frame_times,
            video_feats=video.astype(_FLOAT),
            char_feats=char_tracks,
            utt_ids=utt_ids,
            utt_times=utt_times.astype(_TIME),
            utt_feats=utt.astype(_FLOAT),
        )
    return scenes, bundles
