"""Frame sampling, training loop, checkpoint selection and inference.

Determinism: with a fixed ``Config.seed`` and a single torch thread, two
training runs produce bit-identical metric logs. Multi-threaded BLAS may
reorder reductions, so only the single-thread case is guaranteed.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .annotations import SceneAnnotation, compute_positive_weights, truncate_characters
from .checkpoint import build_model, save_checkpoint
from .config import Config
from .evaluation import mean_ap
from .features import FeatureBundle
from .labels import LabelSet
from .model import ModelOutput, emotion_loss
from .tokens import TokenPlan, build_plan, collate

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def sample_frame_times(
    duration: float, fps: int = 3, mode: str = "infer", seed: int | Sequence[int] = 0, T: int = 300
) -> np.ndarray:
    """One timestamp per ``1/fps`` interval, for at most ``T`` intervals.

    ``infer`` takes each interval's start; ``train`` draws uniformly inside each
    interval from a generator seeded by ``seed``.
    """
    if not duration > 0:
        raise ValueError("duration must be > 0")
    n = min(T, max(1, math.floor(duration * fps + 1e-9)))
    starts = np.arange(n, dtype=np.float64) / fps
    if mode == "infer":
        return starts
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    u = np.random.default_rng(seed).random(n)
    ends = np.arange(1, n + 1, dtype=np.float64) / fps
    return np.minimum(starts + u / fps, np.nextafter(ends, 0))


def select_checkpoint(history: Sequence[tuple[float, float]]) -> int:
    """Epoch index maximising sqrt(scene_mAP * char_mAP); the earliest wins ties."""
    if not history:
        raise ValueError("empty metric history")
    best, best_score = 0, -math.inf
    for i, (s, c) in enumerate(history):
        score = math.sqrt(s * c) if s >= 0 and c >= 0 else math.nan
        if not math.isnan(score) and score > best_score:
            best, best_score = i, score
    return best


@dataclass
class PreparedScene:
    scene: SceneAnnotation
    bundle: FeatureBundle
    scene_target: np.ndarray  # (K,)
    char_target: np.ndarray  # (N, K)

    @property
    def char_ids(self) -> list[str]:
        return [c.char_id for c in self.scene.characters]


def prepare(scenes: Sequence[SceneAnnotation], bundles: dict[str, FeatureBundle], cfg: Config, K: int) -> list[PreparedScene]:
    """Truncate characters to N, cap utterances at T and pad character targets."""
    out = []
    for s in scenes:
        s = truncate_characters(s, cfg.N)
        b = bundles[s.scene_id]
        if len(b.utt_times) > cfg.T:
            b = replace(b, utt_ids=b.utt_ids[: cfg.T], utt_times=b.utt_times[: cfg.T], utt_feats=b.utt_feats[: cfg.T])
        ct = np.zeros((cfg.N, K), dtype=np.float32)
        if s.characters:
            ct[: len(s.characters)] = s.char_labels
        st = s.scene_labels.astype(np.float32)
        if len(st) != K:
            raise TrainingError(f"{s.scene_id}: {len(st)} labels but model has K={K}")
        out.append(PreparedScene(s, b, st, ct))
    return out


def make_plan(item: PreparedScene, cfg: Config, n_cls: int, mode: str, seed) -> TokenPlan:
    times = sample_frame_times(item.scene.duration, cfg.fps, mode, seed, cfg.T)
    return build_plan(
        item.bundle, times, n_cls=n_cls, N=cfg.N, T=cfg.T, tau=cfg.tau,
        table_size=cfg.time_table_size, char_order=item.char_ids, drop=cfg.drop_modality,
    )


def _n_cls(model) -> int:
    return getattr(model, "n_cls", 1)


def _targets(items: Sequence[PreparedScene], dtype):
    return (
        torch.as_tensor(np.stack([i.scene_target for i in items]), dtype=dtype),
        torch.as_tensor(np.stack([i.char_target for i in items]), dtype=dtype),
    )


@dataclass
class Predictions:
    scene_ids: list[str]
    scene: np.ndarray  # (S, K)
    chars: np.ndarray  # (S, N, K)
    char_predicted: np.ndarray  # (S, N) bool
    char_ids: list[list[str]]

    def to_records(self) -> list[dict]:
        recs = []
        for n, sid in enumerate(self.scene_ids):
            recs.append({
                "scene_id": sid,
                "scene": self.scene[n].tolist(),
                "characters": {
                    cid: self.chars[n, i].tolist()
                    for i, cid in enumerate(self.char_ids[n]) if self.char_predicted[n, i]
                },
            })
        return recs


@torch.no_grad()
def predict_prepared(model, items: Sequence[PreparedScene], cfg: Config, batch_size: int | None = None) -> Predictions:
    """Deterministic forward pass with fixed (interval-start) frame sampling."""
    model.eval()
    bs = batch_size or cfg.batch_size
    dtype = next(model.parameters()).dtype
    scene, chars, present = [], [], []
    for start in range(0, len(items), bs):
        chunk = items[start : start + bs]
        batch = collate([make_plan(i, cfg, _n_cls(model), "infer", 0) for i in chunk], dtype=dtype)
        out: ModelOutput = model(batch)
        scene.append(out.scene.double().numpy())
        chars.append(out.chars.double().numpy())
        present.append(out.char_present.numpy())
    return Predictions(
        [i.scene.scene_id for i in items],
        np.concatenate(scene),
        np.concatenate(chars),
        np.concatenate(present),
        [i.char_ids for i in items],
    )


def evaluate_predictions(preds: Predictions, items: Sequence[PreparedScene], label_set: LabelSet | None = None) -> dict:
    names = label_set.labels if label_set is not None else None
    targets = np.stack([i.scene_target for i in items])
    scene_map, scene_rows = mean_ap(preds.scene, targets, names, "scene")
    ct = np.stack([i.char_target for i in items])
    sel = preds.char_predicted
    if sel.any():
        char_map, char_rows = mean_ap(preds.chars[sel], ct[sel], names, "character")
    else:
        char_map, char_rows = math.nan, []
    return {"scene_map": scene_map, "char_map": char_map, "scene_rows": scene_rows, "char_rows": char_rows}


def infer(model, scenes, bundles, cfg: Config, label_set: LabelSet | None = None) -> Predictions:
    K = model.K
    if label_set is not None and label_set.K != K:
        raise TrainingError(f"label set {label_set.name!r} has K={label_set.K}, model has K={K}")
    return predict_prepared(model, prepare(scenes, bundles, cfg, K), cfg)


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    checkpoint: Path | None = None


def _dump_nan(out_dir: Path | None, epoch: int, items, loss, model) -> str:
    info = {
        "epoch": epoch,
        "scene_ids": [i.scene.scene_id for i in items],
        "loss": repr(float(loss.detach())),
        "non_finite_params": [n for n, p in model.named_parameters() if not torch.isfinite(p).all()],
        "non_finite_inputs": [
            i.scene.scene_id for i in items
            if not (np.isfinite(i.bundle.video_feats).all()
                    and all(np.isfinite(t.feats).all() for t in i.bundle.char_feats.values())
                    and (i.bundle.utt_feats is None or np.isfinite(i.bundle.utt_feats).all()))
        ],
    }
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "nan_batch.json").write_text(json.dumps(info, indent=2))
    return json.dumps(info)


def train(
    train_scenes: Sequence[SceneAnnotation],
    train_bundles: dict[str, FeatureBundle],
    val_scenes: Sequence[SceneAnnotation],
    val_bundles: dict[str, FeatureBundle],
    cfg: Config,
    label_set: LabelSet,
    out_dir: str | Path | None = None,
    dtype: torch.dtype = torch.float32,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train with Adam and a reduce-on-plateau schedule on the validation
    geometric mean of scene and character mAP; keep the best epoch.

    Writes ``metrics.jsonl`` (one line per epoch) and ``checkpoint.pt`` to
    ``out_dir`` when given.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    K = label_set.K
    model = build_model(cfg, K).to(dtype)
    n_cls = _n_cls(model)
    tr = prepare(train_scenes, train_bundles, cfg, K)
    va = prepare(val_scenes, val_bundles, cfg, K)
    w_scene = compute_positive_weights([i.scene for i in tr], label_set, "scene")
    w_char = compute_positive_weights([i.scene for i in tr], label_set, "character")
    weights = (torch.as_tensor(w_scene, dtype=dtype), torch.as_tensor(w_char, dtype=dtype))

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="max", factor=0.1, patience=cfg.patience, threshold=cfg.min_delta, threshold_mode="abs"
    )
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = (out_dir / "metrics.jsonl").open("w")

    history, pairs = [], []
    best_state, best_score = None, -math.inf
    try:
        for epoch in range(cfg.epochs):
            model.train()
            order = rng.permutation(len(tr))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                items = [tr[j] for j in order[start : start + cfg.batch_size]]
                plans = [make_plan(it, cfg, n_cls, "train", (cfg.seed, epoch, int(j))) for it, j in zip(items, order[start:])]
                batch = collate(plans, dtype=dtype)
                out = model(batch)
                st, ct = _targets(items, dtype)
                loss = emotion_loss(out.scene, out.chars, st, ct, out.char_present, weights)
                if not torch.isfinite(loss):
                    dump = _dump_nan(out_dir, epoch, items, loss, model)
                    raise TrainingError(f"non-finite loss at epoch {epoch}: {dump}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
            preds = predict_prepared(model, va, cfg)
            ev = evaluate_predictions(preds, va)
            geo = math.sqrt(ev["scene_map"] * ev["char_map"]) if not math.isnan(ev["char_map"]) else math.nan
            row = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_scene_map": ev["scene_map"],
                "val_char_map": ev["char_map"],
                "val_geo": geo,
                "lr": opt.param_groups[0]["lr"],
            }
            history.append(row)
            pairs.append((ev["scene_map"], ev["char_map"]))
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()
            if on_epoch:
                on_epoch(row)
            logger.info("epoch %d loss %.4f scene %.4f char %.4f", epoch, row["train_loss"], ev["scene_map"], ev["char_map"])
            if not math.isnan(geo) and geo > best_score:
                best_score, best_state = geo, copy.deepcopy(model.state_dict())
            sched.step(geo if not math.isnan(geo) else -1.0)
    finally:
        if log_fh:
            log_fh.close()

    best_epoch = select_checkpoint(pairs)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(out_dir / "checkpoint.pt", model, cfg, label_set.name, {"best_epoch": best_epoch})
    return TrainResult(model, history, best_epoch, ckpt)
