"""Comparison models: max-pooled MLP and a single-classifier-token transformer.

Both consume the same :class:`~emotx.tokens.TokenBatch` as :class:`~emotx.model.EmoTx`
and return a :class:`~emotx.model.ModelOutput`, so training and evaluation code
is shared. The 1-CLS variant of EmoTx is ``EmoTx(cls_mode="single")``.
"""

from __future__ import annotations

import torch
from torch import nn

from .model import Encoder, ModelOutput, _init_linear
from .tokens import CHAR, CHAR_CLS, SCENE_CLS, UTT, VIDEO, TokenAssembler, TokenBatch


def _mlp(D: int, K: int) -> nn.Sequential:
    net = nn.Sequential(nn.Linear(D, D), nn.ReLU(), nn.Linear(D, K))
    for m in net:
        if isinstance(m, nn.Linear):
            _init_linear(m)
    return net


def _segment_max(values: torch.Tensor, segment: torch.Tensor, n_segments: int):
    """Per-segment elementwise max; empty segments give zeros and count 0."""
    D = values.shape[-1]
    out = torch.full((n_segments, D), float("-inf"), dtype=values.dtype)
    if len(segment):
        out = out.scatter_reduce(0, segment[:, None].expand(-1, D), values, reduce="amax", include_self=True)
    counts = torch.bincount(segment, minlength=n_segments)
    out = torch.where((counts > 0)[:, None], out, torch.zeros_like(out))
    return out, counts


class MaxPoolMLP(nn.Module):
    """Two-layer MLPs on max-pooled projected features.

    The scene branch pools projected video and utterance features; the
    character branch pools each character's projected box features and has its
    own MLP. A character with no box features gets no prediction: it is reported
    as absent in the output's ``char_present``.
    """

    def __init__(self, K: int, N: int, D: int, dims, proj_bias: bool = True):
        super().__init__()
        d_v, d_c, d_u = dims
        self.K, self.N, self.D = K, N, D
        self.proj_video = nn.Linear(d_v, D, bias=proj_bias)
        self.proj_char = nn.Linear(d_c, D, bias=proj_bias)
        self.proj_utt = nn.Linear(d_u, D, bias=proj_bias)
        for lin in (self.proj_video, self.proj_char, self.proj_utt):
            _init_linear(lin)
        self.scene_mlp = _mlp(D, K)
        self.char_mlp = _mlp(D, K)

    def pool(self, batch: TokenBatch):
        """Max-pooled scene (B, D) and character (B, N, D) vectors plus token counts."""
        B = batch.shape[0]
        dtype = self.proj_video.weight.dtype
        vf, vb, _ = batch.video
        uf, ub, _ = batch.utts
        scene_vals = torch.cat([self.proj_video(vf.to(dtype)), self.proj_utt(uf.to(dtype))])
        scene, _ = _segment_max(scene_vals, torch.cat([vb, ub]), B)
        cf, cb, cp = batch.chars
        cidx = batch.char[cb, cp] if len(cb) else cb
        chars, counts = _segment_max(self.proj_char(cf.to(dtype)), cb * self.N + cidx, B * self.N)
        return scene, chars.view(B, self.N, self.D), counts.view(B, self.N)

    def forward(self, batch: TokenBatch, capture_attention: bool = False) -> ModelOutput:
        scene, chars, counts = self.pool(batch)
        return ModelOutput(
            torch.sigmoid(self.scene_mlp(scene)),
            torch.sigmoid(self.char_mlp(chars)),
            batch.char_present & (counts > 0),
        )


class SingleTx(nn.Module):
    """Transformer over projected features with one classifier token per target.

    No modality, character or time embeddings are added. The scene prediction
    comes from a pass over the scene classifier token and every feature token;
    each character's prediction comes from a separate pass over that character's
    classifier token and box tokens. Scene and character heads are separate
    K-way linear layers. ``layers=0`` reduces to the heads applied to the
    layer-normalised classifier tokens.
    """

    def __init__(
        self, K: int, N: int, D: int, dims, time_table_size: int, *,
        layers: int = 2, heads: int = 8, ffn_mult: int = 4, dropout: float = 0.1, proj_bias: bool = True,
    ):
        super().__init__()
        self.K, self.N, self.n_cls = K, N, 1
        self.assembler = TokenAssembler(D, dims, 1, N, time_table_size, proj_bias=proj_bias, use_embeddings=False)
        self.encoder = Encoder(D, layers, heads, ffn_mult * D, dropout)
        self.scene_head = nn.Linear(D, K)
        self.char_head = nn.Linear(D, K)
        _init_linear(self.scene_head)
        _init_linear(self.char_head)

    def pass_masks(self, batch: TokenBatch) -> torch.Tensor:
        """(B, N + 1, L) key masks: the scene pass, then one pass per character."""
        kind, mask = batch.kind, batch.mask
        feature = mask & ((kind == VIDEO) | (kind == CHAR) | (kind == UTT))
        scene = feature | (kind == SCENE_CLS)
        per_char = []
        for i in range(self.N):
            own = batch.char == i
            per_char.append((own & (kind == CHAR_CLS)) | (own & feature & (kind == CHAR)))
        return torch.stack([scene] + per_char, dim=1)

    def forward(self, batch: TokenBatch, capture_attention: bool = False) -> ModelOutput:
        x, _ = self.assembler(batch)
        B, L, D = x.shape
        masks = self.pass_masks(batch)
        h, attn = self.encoder(
            x.unsqueeze(1).expand(B, self.N + 1, L, D).reshape(-1, L, D),
            masks.reshape(-1, L),
            capture_attention,
        )
        h = h.view(B, self.N + 1, L, D)
        scene = torch.sigmoid(self.scene_head(h[:, 0, 0]))
        slots = torch.arange(1, self.N + 1)
        chars = torch.sigmoid(self.char_head(h[:, slots, slots]))
        return ModelOutput(scene, chars, batch.char_present, attn, masks[:, 0])
