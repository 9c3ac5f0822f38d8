"""Command line entry point: ``emotx <subcommand> [options]``.

Data layout under the data root (``--data-root``, else ``$EMOTX_DATA_ROOT``,
else ``./data``)::

    train.jsonl  val.jsonl  test.jsonl       scene annotations
    features/<scene_id>/{video,character,dialog}.npz
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import tracks as trk
from .annotations import ConfigurationError, SchemaError, read_scenes, write_scenes
from .attention import attention_timeline, capture_records, expressiveness_profile, write_timeline
from .checkpoint import CheckpointError, load_checkpoint
from .config import CLS_MODES, MODEL_KINDS, Config, load_config
from .evaluation import random_baseline, write_eval_table
from .features import MODALITIES, FeatureError, generate_synthetic, load_bundles, write_bundle
from .labels import LabelSetError, load_label_set
from .report import MissingArtifactError, build_report, write_dataset_stats, write_expressiveness
from .tokens import AssemblyError, check_drop
from .training import TrainingError, evaluate_predictions, infer, predict_prepared, prepare, train

logger = logging.getLogger("emotx")

SPLITS = ("train", "val", "test")
ABLATION_GRID = (
    ("video",),
    ("character",),
    ("dialog",),
    ("video", "character"),
    ("video", "dialog"),
    ("character", "dialog"),
    MODALITIES,
)


def _modalities(text: str) -> tuple[str, ...]:
    return tuple(m.strip() for m in text.split(",") if m.strip())


def _config(args) -> Config:
    cfg = load_config(
        args.config,
        label_set=args.label_set,
        cls_mode=args.cls_mode,
        model=args.model,
        seed=args.seed,
        data_root=args.data_root,
        drop_modality=args.drop_modality,
    )
    check_drop(cfg.drop_modality)
    return cfg


def _dataset_label_set(path: Path) -> str:
    with path.open() as fh:
        first = fh.readline()
    if not first.strip():
        raise SchemaError(f"{path}: empty annotation file")
    return json.loads(first)["label_set"]


def _load_split(root: Path, split: str, label_set, dims):
    path = root / f"{split}.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such annotation file (run `emotx generate` or set --data-root)")
    scenes = read_scenes(path, label_set)
    return scenes, load_bundles(scenes, root / "features", dims)


def _load_model(args, data_file: Path):
    model, cfg, payload = load_checkpoint(
        args.checkpoint, cls_mode=args.cls_mode, label_set=_dataset_label_set(data_file)
    )
    if args.drop_modality is not None:
        cfg = cfg.updated(drop_modality=check_drop(_modalities(args.drop_modality)))
    return model, cfg, load_label_set(payload["label_set"])


# ---------------------------------------------------------------- subcommands


def cmd_generate(args) -> int:
    cfg = _config(args)
    ls = load_label_set(cfg.label_set)
    root = Path(cfg.data_root)
    sizes = {"train": args.n_train or cfg.n_train, "val": args.n_val or cfg.n_val, "test": args.n_test or cfg.n_test}
    strength = cfg.signal_strength if args.signal_strength is None else args.signal_strength
    for offset, split in enumerate(SPLITS):
        scenes, bundles = generate_synthetic(
            cfg.seed * 1000 + offset, sizes[split], ls, cfg.dims, strength,
            n_max_chars=cfg.N, prevalence=cfg.prevalence, modalities=args.signal_modalities,
            direction_seed=cfg.seed, split=split, id_prefix=f"{split}-",
        )
        write_scenes(root / f"{split}.jsonl", scenes)
        for b in bundles.values():
            write_bundle(b, root / "features")
        print(f"{split}: {len(scenes)} scenes -> {root / (split + '.jsonl')}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.epochs:
        cfg = cfg.updated(epochs=args.epochs)
    ls = load_label_set(cfg.label_set)
    root = Path(cfg.data_root)
    tr_s, tr_b = _load_split(root, "train", ls, cfg.dims)
    va_s, va_b = _load_split(root, "val", ls, cfg.dims)
    out = Path(args.out)
    result = train(tr_s, tr_b, va_s, va_b, cfg, ls, out_dir=out)
    best = result.history[result.best_epoch]
    print(f"best epoch {result.best_epoch}: val scene mAP {best['val_scene_map']:.4f} "
          f"char mAP {best['val_char_map']:.4f} -> {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    root = Path(args.data_root or Config().data_root)
    data_file = root / f"{args.split}.jsonl"
    model, cfg, ls = _load_model(args, data_file)
    scenes, bundles = _load_split(root, args.split, ls, cfg.dims)
    items = prepare(scenes, bundles, cfg, ls.K)
    ev = evaluate_predictions(predict_prepared(model, items, cfg), items, ls)
    out = Path(args.out)
    write_eval_table(out / "eval_scene.csv", ev["scene_rows"], ev["scene_map"])
    write_eval_table(out / "eval_char.csv", ev["char_rows"], ev["char_map"])
    write_dataset_stats(out, scenes, ls.labels)
    base = random_baseline([i.scene_target for i in items], trials=100, seed=args.seed or 0)
    print(f"{args.split}: scene mAP {ev['scene_map']:.4f}  char mAP {ev['char_map']:.4f}  "
          f"random scene mAP {base['mean']:.4f} +- {base['std']:.4f}")
    return 0


def cmd_infer(args) -> int:
    root = Path(args.data_root or Config().data_root)
    model, cfg, ls = _load_model(args, root / f"{args.split}.jsonl")
    scenes, bundles = _load_split(root, args.split, ls, cfg.dims)
    preds = infer(model, scenes, bundles, cfg, ls)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w") as fh:
        for rec in preds.to_records():
            fh.write(json.dumps({**rec, "labels": list(ls.labels)}) + "\n")
    print(f"{len(scenes)} scenes -> {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    if args.epochs:
        cfg = cfg.updated(epochs=args.epochs)
    ls = load_label_set(cfg.label_set)
    root = Path(cfg.data_root)
    tr_s, tr_b = _load_split(root, "train", ls, cfg.dims)
    va_s, va_b = _load_split(root, "val", ls, cfg.dims)
    te_s, te_b = _load_split(root, "test", ls, cfg.dims)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for keep in ABLATION_GRID:
        drop = tuple(m for m in MODALITIES if m not in keep)
        run_cfg = cfg.updated(drop_modality=drop)
        result = train(tr_s, tr_b, va_s, va_b, run_cfg, ls, out_dir=out / "+".join(keep))
        items = prepare(te_s, te_b, run_cfg, ls.K)
        ev = evaluate_predictions(predict_prepared(result.model, items, run_cfg), items, ls)
        rows.append({"modalities": "+".join(keep), "scene_map": ev["scene_map"], "char_map": ev["char_map"]})
        print(f"{rows[-1]['modalities']:<24} scene {ev['scene_map']:.4f}  char {ev['char_map']:.4f}")
    with (out / "ablation.csv").open("w") as fh:
        fh.write("modalities,scene_map,char_map\n")
        for r in rows:
            fh.write(f"{r['modalities']},{r['scene_map']!r},{r['char_map']!r}\n")
    return 0


def cmd_analyze_attention(args) -> int:
    root = Path(args.data_root or Config().data_root)
    model, cfg, ls = _load_model(args, root / f"{args.split}.jsonl")
    if not hasattr(model, "n_cls") or not hasattr(model, "encoder"):
        raise CheckpointError("attention analysis needs an emotx or emotx-1cls checkpoint")
    scenes, bundles = _load_split(root, args.split, ls, cfg.dims)
    items = prepare(scenes, bundles, cfg, ls.K)
    if args.scene_id:
        items = [i for i in items if i.scene.scene_id == args.scene_id]
        if not items:
            raise SchemaError(f"scene {args.scene_id!r} not in split {args.split!r}")
    records = capture_records(model, items, cfg)
    out = Path(args.out)
    profile = expressiveness_profile(
        [(r, i.scene_target) for r, i in zip(records, items)], ls.labels, layer=args.layer, heads=args.heads
    )
    write_expressiveness(out / "expressiveness.csv", profile)
    k = ls.index(args.label) if args.label else 0
    for rec in records:
        rows = attention_timeline(rec, args.target, k, args.char, args.layer, args.heads)
        suffix = f"char{args.char}" if args.target == "character" else "scene"
        write_timeline(out / "timelines" / f"{rec.scene_id}_{suffix}_{ls.labels[k]}.csv", rows)
    print(f"expressiveness for {len(profile)} labels, {len(records)} timelines -> {out}")
    return 0


def cmd_tracks(args) -> int:
    dets = trk.read_detections(args.detections)
    gt = trk.read_gt_tracks(args.gt) if args.gt else []
    names = [n.strip() for n in args.names.split(",")] if args.names else None
    tracks, part = trk.run_pipeline(dets, gt, names)
    trk.write_tracks(args.out, tracks)
    named = sum(t.name is not None for t in tracks)
    extra = f", {part.n_clusters} clusters (silhouette {part.silhouette:.3f})" if part else ""
    print(f"{len(tracks)} tracks, {named} named{extra} -> {args.out}")
    return 0


def cmd_report(args) -> int:
    out = build_report(args.run, args.out)
    print(f"report -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--label-set", choices=("top10", "top25", "emotic26"))
    common.add_argument("--drop-modality", help="comma-separated subset of video,character,dialog")
    common.add_argument("--cls-mode", choices=CLS_MODES)
    common.add_argument("--model", choices=MODEL_KINDS)
    common.add_argument("--seed", type=int)
    common.add_argument("--data-root", help="data directory (default $EMOTX_DATA_ROOT or ./data)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="emotx", description="Multi-label scene and character emotion models.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--signal-strength", type=float)
    g.add_argument("--signal-modalities", type=_modalities, default=MODALITIES)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train and keep the best checkpoint")
    t.add_argument("--out", default="runs/train")
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "per-label AP tables for a split"),
        ("infer", cmd_infer, "write per-scene predictions"),
        ("analyze-attention", cmd_analyze_attention, "expressiveness scores and attention timelines"),
    ):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--split", default="test", choices=SPLITS)
        s.set_defaults(func=func)
        if name == "eval":
            s.add_argument("--out", default="runs/eval")
        elif name == "infer":
            s.add_argument("--out", default="runs/predictions.jsonl")
        else:
            s.add_argument("--out", default="runs/attention")
            s.add_argument("--scene-id")
            s.add_argument("--target", choices=("scene", "character"), default="scene")
            s.add_argument("--label", help="label whose classifier row is exported")
            s.add_argument("--char", type=int, help="character index for --target character")
            s.add_argument("--layer", type=int, default=-1)
            s.add_argument("--heads", default="mean", help="'mean' or a head index")

    a = sub.add_parser("ablate", parents=[common], help="train and test every modality combination")
    a.add_argument("--out", default="runs/ablate")
    a.add_argument("--epochs", type=int)
    a.set_defaults(func=cmd_ablate)

    k = sub.add_parser("tracks", parents=[common], help="character tracks from detection files")
    k.add_argument("--detections", required=True)
    k.add_argument("--gt", help="sparse named ground-truth tracks")
    k.add_argument("--names", help="comma-separated scene name list (default: names in --gt)")
    k.add_argument("--out", default="runs/tracks.jsonl")
    k.set_defaults(func=cmd_tracks)

    r = sub.add_parser("report", parents=[common], help="plots and tables from a run directory")
    r.add_argument("--run", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


USER_ERRORS = (
    AssemblyError, CheckpointError, ConfigurationError, FeatureError, FileNotFoundError,
    LabelSetError, MissingArtifactError, SchemaError, TrainingError, ValueError, IndexError,
)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "heads", None) not in (None, "mean"):
        args.heads = int(args.heads)
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
