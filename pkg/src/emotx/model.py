"""Masked transformer encoder, classifier-token head and the weighted BCE loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .tokens import TokenAssembler, TokenBatch

PROB_EPS = 1e-7


class InputError(ValueError):
    pass


@dataclass
class ModelOutput:
    scene: torch.Tensor  # (B, K) probabilities
    chars: torch.Tensor  # (B, N, K) probabilities
    char_present: torch.Tensor  # (B, N) bool
    attention: list[torch.Tensor] | None = None  # per layer (B, heads, L, L)
    mask: torch.Tensor | None = None  # (B, L)


def _init_linear(lin: nn.Linear) -> None:
    bound = 1.0 / math.sqrt(lin.in_features)
    with torch.no_grad():
        lin.weight.uniform_(-bound, bound)
        if lin.bias is not None:
            lin.bias.uniform_(-bound, bound)


class SelfAttention(nn.Module):
    def __init__(self, D: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if D % heads:
            raise ValueError(f"model dim {D} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(D, 3 * D)
        self.out = nn.Linear(D, D)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_mask, capture: bool = False):
        B, L, D = x.shape
        dh = D // self.heads
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        ctx = (self.drop(attn) @ v).transpose(1, 2).reshape(B, L, D)
        return self.out(ctx), (attn if capture else None)


class EncoderLayer(nn.Module):
    """Pre-norm residual block: attention then a GELU feed-forward."""

    def __init__(self, D: int, heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(D)
        self.attn = SelfAttention(D, heads, dropout)
        self.norm2 = nn.LayerNorm(D)
        self.ff1 = nn.Linear(D, ffn_dim)
        self.ff2 = nn.Linear(ffn_dim, D)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_mask, capture=False):
        h, attn = self.attn(self.norm1(x), key_mask, capture)
        x = x + self.drop(h)
        x = x + self.drop(self.ff2(self.drop(F.gelu(self.ff1(self.norm2(x))))))
        return x, attn


class Encoder(nn.Module):
    def __init__(self, D: int, layers: int, heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        if layers < 0:
            raise ValueError("layers must be >= 0")
        self.layers = nn.ModuleList(EncoderLayer(D, heads, ffn_dim, dropout) for _ in range(layers))
        self.norm = nn.LayerNorm(D) if layers else nn.Identity()
        for m in self.modules():
            if isinstance(m, nn.Linear):
                _init_linear(m)

    def forward(self, x, key_mask, capture: bool = False):
        if not bool(key_mask.any(dim=-1).all()):
            raise InputError("every sequence needs at least one unmasked token")
        maps = []
        for layer in self.layers:
            x, attn = layer(x, key_mask, capture)
            if capture:
                maps.append(attn)
        return self.norm(x), (maps if capture else None)


def predict(cls_out: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Sigmoid probabilities from classifier-token outputs and a shared K x D head.

    ``cls_out`` has shape ``(..., K, D)`` for per-emotion tokens (label k uses
    row k of the head on token k) or ``(..., 1, D)`` for a single token mapped to
    all K labels.
    """
    K = weight.shape[0]
    if cls_out.shape[-2] == K:
        logits = (cls_out * weight).sum(-1)
    elif cls_out.shape[-2] == 1:
        logits = cls_out[..., 0, :] @ weight.T
    else:
        raise InputError(f"expected {K} or 1 classifier outputs, got {cls_out.shape[-2]}")
    if bias is not None:
        logits = logits + bias
    return torch.sigmoid(logits)


def bce(weight, y, p, eps: float = PROB_EPS):
    p = p.clamp(eps, 1 - eps)
    return -(weight * y * torch.log(p) + (1 - y) * torch.log(1 - p))


def emotion_loss(
    scene_probs: torch.Tensor,
    char_probs: torch.Tensor,
    scene_targets: torch.Tensor,
    char_targets: torch.Tensor,
    char_present: torch.Tensor,
    weights,
    eps: float = PROB_EPS,
) -> torch.Tensor:
    """Scene BCE summed over labels plus character BCE summed over present characters
    and labels; averaged over the scenes of the batch.

    ``weights`` is either one K-vector or a ``(scene_weights, char_weights)`` pair.
    """
    if isinstance(weights, (tuple, list)):
        w_scene, w_char = weights
    else:
        w_scene = w_char = weights
    w_scene = torch.as_tensor(w_scene, dtype=scene_probs.dtype)
    w_char = torch.as_tensor(w_char, dtype=scene_probs.dtype)
    scene_term = bce(w_scene, scene_targets, scene_probs, eps).sum(-1)
    char_term = bce(w_char, char_targets, char_probs, eps).sum(-1)
    char_term = (char_term * char_present.to(char_term.dtype)).sum(-1)
    return (scene_term + char_term).mean()


class EmoTx(nn.Module):
    """Joint scene/character multi-label model over assembled multimodal tokens."""

    def __init__(
        self, K: int, N: int, D: int, dims, time_table_size: int, *,
        layers: int = 2, heads: int = 8, ffn_mult: int = 4, dropout: float = 0.1,
        cls_mode: str = "per-emotion", proj_bias: bool = True,
    ):
        super().__init__()
        if layers < 1:
            raise ValueError("EmoTx needs at least one encoder layer")
        self.K, self.N, self.cls_mode = K, N, cls_mode
        self.n_cls = K if cls_mode == "per-emotion" else 1
        self.assembler = TokenAssembler(D, dims, self.n_cls, N, time_table_size, proj_bias=proj_bias)
        self.encoder = Encoder(D, layers, heads, ffn_mult * D, dropout)
        self.head = nn.Linear(D, K)
        _init_linear(self.head)

    def encode(self, batch: TokenBatch, capture_attention: bool = False):
        """Contextualised classifier outputs, shape (B, N + 1, n_cls, D).

        Index 0 along dim 1 is the scene; index ``1 + i`` is character ``i``.
        """
        x, mask = self.assembler(batch)
        h, attn = self.encoder(x, mask, capture_attention)
        B = h.shape[0]
        z = h[:, : self.n_cls * (self.N + 1)].reshape(B, self.N + 1, self.n_cls, -1)
        return z, attn, mask

    def forward(self, batch: TokenBatch, capture_attention: bool = False) -> ModelOutput:
        z, attn, mask = self.encode(batch, capture_attention)
        probs = predict(z, self.head.weight, self.head.bias)
        return ModelOutput(probs[:, 0], probs[:, 1:], batch.char_present, attn, mask)
