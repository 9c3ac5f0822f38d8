"""Model construction from a :class:`Config` and the versioned checkpoint container.

A checkpoint is a ``torch.save`` dict holding only plain containers and tensors::

    {"format": "emotx-checkpoint", "version": 1, "model": "emotx",
     "cls_mode": "per-emotion", "label_set": "top10", "K": 10,
     "config": {...}, "state_dict": {...}, "meta": {...}}

It loads with ``weights_only=True``, and tensors round-trip bit-exactly.
"""

from __future__ import annotations

from pathlib import Path

import torch
from torch import nn

from .baselines import MaxPoolMLP, SingleTx
from .config import Config
from .model import EmoTx

FORMAT = "emotx-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def build_model(cfg: Config, K: int) -> nn.Module:
    common = dict(layers=cfg.layers, heads=cfg.heads, ffn_mult=cfg.ffn_mult, dropout=cfg.dropout, proj_bias=cfg.proj_bias)
    if cfg.model in ("emotx", "emotx-1cls"):
        return EmoTx(K, cfg.N, cfg.D, cfg.dims, cfg.time_table_size, cls_mode=cfg.cls_mode, **common)
    if cfg.model == "single-tx":
        return SingleTx(K, cfg.N, cfg.D, cfg.dims, cfg.time_table_size, **common)
    if cfg.model == "mlp":
        return MaxPoolMLP(K, cfg.N, cfg.D, cfg.dims, proj_bias=cfg.proj_bias)
    raise CheckpointError(f"unknown model kind {cfg.model!r}")


def save_checkpoint(path: str | Path, model: nn.Module, cfg: Config, label_set: str, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "model": cfg.model,
        "cls_mode": cfg.cls_mode,
        "label_set": label_set,
        "K": int(model.K),
        "config": cfg.to_dict(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "meta": meta or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(
    path: str | Path, *, cls_mode: str | None = None, label_set: str | None = None
) -> tuple[nn.Module, Config, dict]:
    """Rebuild the model stored at ``path``.

    ``cls_mode`` and ``label_set``, when given, must match what the checkpoint
    records; a mismatch raises :class:`CheckpointError`.
    """
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not an emotx checkpoint")
    if payload["version"] > VERSION:
        raise CheckpointError(f"{path}: checkpoint version {payload['version']} is newer than {VERSION}")
    if cls_mode is not None and payload["cls_mode"] != cls_mode:
        raise CheckpointError(
            f"{path}: checkpoint was trained with cls mode {payload['cls_mode']!r}, requested {cls_mode!r}"
        )
    if label_set is not None and payload["label_set"] != label_set:
        raise CheckpointError(
            f"{path}: checkpoint label set {payload['label_set']!r} does not match dataset {label_set!r}"
        )
    cfg = Config.from_dict(payload["config"])
    model = build_model(cfg, payload["K"])
    dtype = next(iter(payload["state_dict"].values())).dtype
    model.to(dtype)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, cfg, payload
