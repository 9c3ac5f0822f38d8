"""Encoder input assembly: projections, embeddings, classifier tokens, padding, mask.

A scene becomes a :class:`TokenPlan` (pure numpy: which feature rows become
tokens, their character index and time bin). Plans are collated into a padded
:class:`TokenBatch`, and :class:`TokenAssembler` turns a batch into embedded,
layer-normalised token vectors.

Every sequence uses the same slot layout::

    [scene cls x Kc][char 1 cls x Kc] ... [char N cls x Kc][video][char boxes][utterances][pad]

Classifier slots sit at fixed positions, so outputs can be tapped without an
index lookup. Slots of absent characters are masked like padding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .features import FeatureBundle

SCENE_CLS, CHAR_CLS, VIDEO, CHAR, UTT, PAD = 0, 1, 2, 3, 4, -1
KIND_NAMES = {SCENE_CLS: "scene_cls", CHAR_CLS: "char_cls", VIDEO: "video", CHAR: "char", UTT: "utt", PAD: "pad"}
MODALITY_KINDS = {"video": (VIDEO,), "character": (CHAR,), "dialog": (UTT,)}
# modality embedding row per kind: 0 video, 1 character, 2 dialog
_MODALITY_OF_KIND = torch.tensor([0, 1, 0, 1, 2, 0])

ROLE_DTYPE = np.dtype([("kind", "i1"), ("char", "i2"), ("k", "i2"), ("src", "i4"), ("tbin", "i4")])

_EPS = 1e-9


class AssemblyError(ValueError):
    pass


def time_bin(t: float, tau: float, table_size: int) -> int:
    """Index ``ceil(t / tau)`` clamped to ``[0, table_size - 1]``.

    A small tolerance absorbs float error so that exact multiples of ``tau``
    (e.g. ``10.0 / (1/3)``) land on their own bin.
    """
    if t < 0:
        raise AssemblyError(f"negative timestamp {t}")
    return int(min(max(math.ceil(t / tau - _EPS), 0), table_size - 1))


def time_bins(times: np.ndarray, tau: float, table_size: int) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    if len(times) and times.min() < 0:
        raise AssemblyError("negative timestamp")
    return np.clip(np.ceil(times / tau - _EPS), 0, table_size - 1).astype(np.int64)


def l_max(K: int, N: int, T: int) -> int:
    """Padded slot count ``K + T + N (K + T) + T``."""
    return K + T + N * (K + T) + T


@dataclass(frozen=True, eq=False)
class TokenPlan:
    """Which feature rows of one scene become tokens."""

    n_cls: int
    N: int
    char_present: np.ndarray  # (N,) bool
    video_feats: np.ndarray
    video_bins: np.ndarray
    video_src: np.ndarray  # row index into the bundle's video frames
    char_feats: np.ndarray
    char_idx: np.ndarray
    char_bins: np.ndarray
    char_src: np.ndarray  # row index into that character's track
    utt_feats: np.ndarray
    utt_bins: np.ndarray
    utt_src: np.ndarray

    @property
    def n_var(self) -> int:
        return len(self.video_bins) + len(self.char_bins) + len(self.utt_bins)

    @property
    def n_real(self) -> int:
        return self.n_cls * (1 + int(self.char_present.sum())) + self.n_var

    def without(self, drop: Iterable[str]) -> "TokenPlan":
        """Physically remove the token groups of the given modalities."""
        drop = set(drop)
        changes = {}
        if "video" in drop:
            changes.update(video_feats=self.video_feats[:0], video_bins=self.video_bins[:0], video_src=self.video_src[:0])
        if "character" in drop:
            changes.update(
                char_feats=self.char_feats[:0], char_idx=self.char_idx[:0],
                char_bins=self.char_bins[:0], char_src=self.char_src[:0],
            )
        if "dialog" in drop:
            changes.update(utt_feats=self.utt_feats[:0], utt_bins=self.utt_bins[:0], utt_src=self.utt_src[:0])
        return replace(self, **changes)


def check_drop(drop: Iterable[str]) -> tuple[str, ...]:
    drop = tuple(drop)
    unknown = set(drop) - set(MODALITY_KINDS)
    if unknown:
        raise ValueError(f"unknown modality {sorted(unknown)}; expected video/character/dialog")
    if set(drop) == set(MODALITY_KINDS):
        raise ValueError("cannot drop every modality")
    return drop


def build_plan(
    bundle: FeatureBundle,
    sampled_video_times: Sequence[float],
    *,
    n_cls: int,
    N: int,
    T: int,
    tau: float,
    table_size: int,
    char_order: Sequence[str] | None = None,
    drop: Iterable[str] = (),
) -> TokenPlan:
    """Select token rows for one scene.

    Each sampled time picks the latest video frame at or before it. A character
    contributes a token for a picked frame only if its box exists at that frame's
    timestamp. Time bins come from the frame timestamps, so video and character
    tokens of the same frame share a time embedding.
    """
    char_order = list(bundle.char_feats) if char_order is None else list(char_order)
    if len(char_order) > N:
        raise AssemblyError(f"{bundle.scene_id}: {len(char_order)} characters > N={N}")
    sampled = np.asarray(sampled_video_times, dtype=np.float64)
    if len(sampled) > T:
        raise AssemblyError(f"{bundle.scene_id}: {len(sampled)} video tokens > T={T}")
    if len(bundle.utt_times) > T:
        raise AssemblyError(f"{bundle.scene_id}: {len(bundle.utt_times)} utterances > T={T}")

    if len(bundle.video_times):
        frames = np.clip(np.searchsorted(bundle.video_times, sampled, side="right") - 1, 0, None)
    else:
        frames = np.zeros(0, dtype=np.int64)
    frame_times = bundle.video_times[frames]
    frame_bins = time_bins(frame_times, tau, table_size)

    c_feats, c_idx, c_bins, c_src = [], [], [], []
    present = np.zeros(N, dtype=bool)
    present[: len(char_order)] = True
    for i, cid in enumerate(char_order):
        track = bundle.char_feats.get(cid)
        if track is None or len(track) == 0 or len(frame_times) == 0:
            continue
        pos = np.clip(np.searchsorted(track.times, frame_times), 0, len(track) - 1)
        hit = np.abs(track.times[pos] - frame_times) < 1e-6
        rows = pos[hit]
        c_feats.append(track.feats[rows])
        c_idx.append(np.full(len(rows), i, dtype=np.int64))
        c_bins.append(frame_bins[hit])
        c_src.append(rows)

    d_c = next((t.feats.shape[1] for t in bundle.char_feats.values()), 0)
    utt = bundle.utt_feats if bundle.utt_feats is not None else np.zeros((0, 0), dtype=np.float32)
    plan = TokenPlan(
        n_cls=n_cls,
        N=N,
        char_present=present,
        video_feats=bundle.video_feats[frames],
        video_bins=frame_bins,
        video_src=frames.astype(np.int64),
        char_feats=np.concatenate(c_feats) if c_feats else np.zeros((0, d_c), dtype=np.float32),
        char_idx=np.concatenate(c_idx) if c_idx else np.zeros(0, dtype=np.int64),
        char_bins=np.concatenate(c_bins) if c_bins else np.zeros(0, dtype=np.int64),
        char_src=np.concatenate(c_src) if c_src else np.zeros(0, dtype=np.int64),
        utt_feats=utt,
        utt_bins=time_bins(bundle.utt_times, tau, table_size),
        utt_src=np.arange(len(bundle.utt_times), dtype=np.int64),
    )
    drop = check_drop(drop)
    return plan.without(drop) if drop else plan


@dataclass
class TokenBatch:
    kind: torch.Tensor  # (B, L) long, PAD for padding
    char: torch.Tensor  # (B, L) long, -1 where not a character slot
    k: torch.Tensor  # (B, L) long, classifier index or -1
    src: torch.Tensor  # (B, L) long, source row or -1
    tbin: torch.Tensor  # (B, L) long, -1 where no time
    mask: torch.Tensor  # (B, L) bool, True = real token
    char_present: torch.Tensor  # (B, N) bool
    video: tuple[torch.Tensor, torch.Tensor, torch.Tensor]  # feats, batch idx, position
    chars: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    utts: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    n_cls: int
    N: int

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.kind.shape)

    def roles(self, b: int = 0) -> np.ndarray:
        out = np.empty(self.kind.shape[1], dtype=ROLE_DTYPE)
        out["kind"] = self.kind[b].numpy()
        out["char"] = self.char[b].numpy()
        out["k"] = self.k[b].numpy()
        out["src"] = self.src[b].numpy()
        out["tbin"] = self.tbin[b].numpy()
        return out


def collate(plans: Sequence[TokenPlan], pad_to: int | None = None, dtype=torch.float32) -> TokenBatch:
    """Pad plans to a common length (the batch maximum unless ``pad_to`` is given)."""
    n_cls, N = plans[0].n_cls, plans[0].N
    n_fixed = n_cls * (N + 1)
    L = n_fixed + max(p.n_var for p in plans)
    if pad_to is not None:
        if pad_to < L:
            raise AssemblyError(f"pad_to={pad_to} < required length {L}")
        L = pad_to
    B = len(plans)
    kind = np.full((B, L), PAD, dtype=np.int64)
    char = np.full((B, L), -1, dtype=np.int64)
    k = np.full((B, L), -1, dtype=np.int64)
    src = np.full((B, L), -1, dtype=np.int64)
    tbin = np.full((B, L), -1, dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    present = np.zeros((B, N), dtype=bool)

    kind[:, :n_cls] = SCENE_CLS
    k[:, :n_cls] = np.arange(n_cls)
    kind[:, n_cls:n_fixed] = CHAR_CLS
    char[:, n_cls:n_fixed] = np.repeat(np.arange(N), n_cls)
    k[:, n_cls:n_fixed] = np.tile(np.arange(n_cls), N)

    groups = {VIDEO: ([], [], []), CHAR: ([], [], []), UTT: ([], [], [])}
    for b, p in enumerate(plans):
        if (p.n_cls, p.N) != (n_cls, N):
            raise AssemblyError("plans in a batch must share n_cls and N")
        present[b] = p.char_present
        mask[b, :n_cls] = True
        mask[b, n_cls:n_fixed] = np.repeat(p.char_present, n_cls)
        pos = n_fixed
        for g, feats, bins, srcs, cidx in (
            (VIDEO, p.video_feats, p.video_bins, p.video_src, None),
            (CHAR, p.char_feats, p.char_bins, p.char_src, p.char_idx),
            (UTT, p.utt_feats, p.utt_bins, p.utt_src, None),
        ):
            n = len(bins)
            if n == 0:
                continue
            sl = slice(pos, pos + n)
            kind[b, sl] = g
            tbin[b, sl] = bins
            src[b, sl] = srcs
            mask[b, sl] = True
            if cidx is not None:
                char[b, sl] = cidx
            groups[g][0].append(np.asarray(feats))
            groups[g][1].append(np.full(n, b))
            groups[g][2].append(np.arange(pos, pos + n))
            pos += n

    def _pack(g, width):
        feats, bidx, pidx = groups[g]
        if not feats:
            return (torch.zeros((0, width), dtype=dtype), torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long))
        return (
            torch.as_tensor(np.concatenate(feats), dtype=dtype),
            torch.as_tensor(np.concatenate(bidx), dtype=torch.long),
            torch.as_tensor(np.concatenate(pidx), dtype=torch.long),
        )

    t = torch.as_tensor
    return TokenBatch(
        kind=t(kind), char=t(char), k=t(k), src=t(src), tbin=t(tbin),
        mask=t(mask), char_present=t(present),
        video=_pack(VIDEO, plans[0].video_feats.shape[1]),
        chars=_pack(CHAR, plans[0].char_feats.shape[1]),
        utts=_pack(UTT, plans[0].utt_feats.shape[1]),
        n_cls=n_cls, N=N,
    )


def _uniform_(t: torch.Tensor, bound: float) -> torch.Tensor:
    with torch.no_grad():
        return t.uniform_(-bound, bound)


class TokenAssembler(nn.Module):
    """Projections, embedding tables, classifier tokens and the input LayerNorm.

    With ``use_embeddings=False`` the modality, character and time embeddings
    are left out (tokens are projected features or classifier vectors only).
    """

    def __init__(
        self, D: int, dims: Sequence[int], n_cls: int, N: int, time_table_size: int,
        proj_bias: bool = True, use_embeddings: bool = True,
    ):
        super().__init__()
        d_v, d_c, d_u = dims
        self.D, self.n_cls, self.N = D, n_cls, N
        self.use_embeddings = use_embeddings
        self.proj_video = nn.Linear(d_v, D, bias=proj_bias)
        self.proj_char = nn.Linear(d_c, D, bias=proj_bias)
        self.proj_utt = nn.Linear(d_u, D, bias=proj_bias)
        self.modality_emb = nn.Parameter(torch.empty(3, D))
        self.char_emb = nn.Parameter(torch.empty(N, D))
        self.time_emb = nn.Parameter(torch.empty(time_table_size, D))
        self.scene_cls = nn.Parameter(torch.empty(n_cls, D))
        self.char_cls = nn.Parameter(torch.empty(N, n_cls, D))
        self.norm = nn.LayerNorm(D)
        self.reset_parameters()

    def reset_parameters(self):
        bound = 1.0 / math.sqrt(self.D)
        for p in (self.modality_emb, self.char_emb, self.time_emb, self.scene_cls, self.char_cls):
            _uniform_(p, bound)
        for lin in (self.proj_video, self.proj_char, self.proj_utt):
            _uniform_(lin.weight, bound)
            if lin.bias is not None:
                _uniform_(lin.bias, bound)

    def forward(self, batch: TokenBatch) -> tuple[torch.Tensor, torch.Tensor]:
        B, L = batch.shape
        n_fixed = self.n_cls * (self.N + 1)
        dtype = self.scene_cls.dtype
        x = torch.zeros(B, L, self.D, dtype=dtype)
        for proj, (feats, bidx, pidx) in (
            (self.proj_video, batch.video), (self.proj_char, batch.chars), (self.proj_utt, batch.utts),
        ):
            if len(bidx):
                x = x.index_put((bidx, pidx), proj(feats.to(dtype)))
        cls_rows = torch.cat([self.scene_cls, self.char_cls.reshape(-1, self.D)])
        x = torch.cat([cls_rows.expand(B, -1, -1), x[:, n_fixed:]], dim=1)

        if self.use_embeddings:
            kind = batch.kind.clamp(min=0)
            x = x + self.modality_emb[_MODALITY_OF_KIND[kind]]
            has_char = (batch.char >= 0).unsqueeze(-1).to(dtype)
            x = x + self.char_emb[batch.char.clamp(min=0)] * has_char
            has_time = (batch.tbin >= 0).unsqueeze(-1).to(dtype)
            x = x + self.time_emb[batch.tbin.clamp(min=0)] * has_time
        x = self.norm(x) * batch.mask.unsqueeze(-1).to(dtype)
        return x, batch.mask


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (L, D)
    mask: torch.Tensor  # (L,) bool
    roles: np.ndarray  # (L,) ROLE_DTYPE

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_real(self) -> int:
        return int(self.mask.sum())

    def role_tags(self) -> list[tuple]:
        """Readable role per slot, e.g. ``("char", i, t)`` or ``("scene_cls", k)``."""
        tags = []
        for r in self.roles:
            name = KIND_NAMES[int(r["kind"])]
            if r["kind"] == SCENE_CLS:
                tags.append((name, int(r["k"])))
            elif r["kind"] == CHAR_CLS:
                tags.append((name, int(r["char"]), int(r["k"])))
            elif r["kind"] == CHAR:
                tags.append((name, int(r["char"]), int(r["src"])))
            elif r["kind"] == PAD:
                tags.append((name,))
            else:
                tags.append((name, int(r["src"])))
        return tags


def assemble(
    bundle: FeatureBundle,
    sampled_video_times: Sequence[float],
    assembler: TokenAssembler,
    *,
    T: int,
    tau: float,
    char_order: Sequence[str] | None = None,
    pad_to: int | None = None,
) -> TokenSequence:
    """Assemble one scene padded to ``l_max(n_cls, N, T)`` slots (or ``pad_to``)."""
    plan = build_plan(
        bundle, sampled_video_times, n_cls=assembler.n_cls, N=assembler.N, T=T, tau=tau,
        table_size=assembler.time_emb.shape[0], char_order=char_order,
    )
    L = l_max(assembler.n_cls, assembler.N, T) if pad_to is None else pad_to
    batch = collate([plan], pad_to=L, dtype=assembler.scene_cls.dtype)
    tokens, mask = assembler(batch)
    return TokenSequence(tokens[0], mask[0], batch.roles(0))


def modality_mask(seq: TokenSequence, drop: Iterable[str]) -> TokenSequence:
    """Mask out whole modalities; masked slots become indistinguishable from padding."""
    drop = check_drop(drop)
    if not drop:
        return seq
    kinds = [kd for m in drop for kd in MODALITY_KINDS[m]]
    hit = torch.as_tensor(np.isin(seq.roles["kind"], kinds))
    mask = seq.mask & ~hit
    tokens = seq.tokens * mask.unsqueeze(-1).to(seq.tokens.dtype)
    roles = seq.roles.copy()
    return TokenSequence(tokens, mask, roles)
