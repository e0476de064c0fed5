"""Keyword-guided cue encoder.

A phoneme transformer turns the keyword cue into latents; a speech
transformer whose blocks carry an extra cross-attention sub-layer (speech
queries, keyword keys/values) encodes log-mel frames.  Every block output is
kept, fused with trainable layer weights and averaged over time into the
speaker embedding.  The last block's cross-attention weights form the
``(L_kw, T)`` map used for detection.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import autodiff as ad
from .autodiff import DTYPE, LayerNorm, Linear, MultiHeadAttention


@dataclass
class KceConfig:
    inventory_size: int
    speaker_count: int
    N: int = 4  # speech-encoder blocks
    D: int = 64
    D_kw: int = 32
    heads: int = 4
    keyword_layers: int = 2
    ffn_mult: int = 4
    feature_dim: int = 80

    def __post_init__(self) -> None:
        if self.N < 1:
            raise ValueError("the speech encoder needs at least one block")
        if self.D % self.heads:
            raise ValueError(f"D={self.D} is not divisible by heads={self.heads}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "KceConfig":
        return cls(**json.loads(text))


@dataclass
class KceOutput:
    layer_states: Tensor  # (B, N, T, D)
    attention_final: Tensor  # (B, L_kw, T), columns sum to 1 over valid phonemes
    speaker_embedding: Tensor  # (B, D)
    ctc_logits: Tensor  # (B, T, inventory_size + 1)
    frame_lengths: list[int]
    keyword_lengths: list[int]

    def attention_map(self, b: int = 0) -> np.ndarray:
        """Unpadded ``(L_kw, T)`` map of batch item ``b``."""
        return self.attention_final[b, : self.keyword_lengths[b], : self.frame_lengths[b]].detach().numpy()


def sinusoidal_positions(length: int, dim: int) -> Tensor:
    pos = torch.arange(length, dtype=DTYPE)[:, None]
    rate = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=DTYPE) / dim)
    pe = torch.zeros(length, dim, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(pos * rate)
    pe[:, 1::2] = torch.cos(pos * rate[: dim // 2])
    return pe


def lengths_to_mask(lengths: Sequence[int], size: int) -> Tensor:
    return torch.arange(size)[None, :] < torch.as_tensor(list(lengths))[:, None]


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.up = Linear(dim, hidden)
        self.down = Linear(hidden, dim)

    def forward(self, x: Tensor, name: str = "ffn") -> Tensor:
        return self.down(ad.gelu(self.up(x, name=f"{name}.up"), name=f"{name}.gelu"), name=f"{name}.down")


class SelfAttentionBlock(nn.Module):
    """Pre-norm self-attention + feed-forward, residual around both."""

    def __init__(self, dim: int, heads: int, ffn_mult: int):
        super().__init__()
        self.norm_attn = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm_ffn = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult * dim)

    def forward(self, x: Tensor, mask: Tensor, name: str) -> Tensor:
        h = self.norm_attn(x)
        a, _ = self.attn(h, h, key_mask=mask, name=f"{name}.self")
        x = ad.add(x, a, name=f"{name}.res_attn")
        return ad.add(x, self.ffn(self.norm_ffn(x), name=f"{name}.ffn"), name=f"{name}.res_ffn")


class CrossAttentionBlock(nn.Module):
    """Self-attention over speech, cross-attention to keyword latents, then feed-forward."""

    def __init__(self, dim: int, heads: int, ffn_mult: int):
        super().__init__()
        self.norm_self = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm_cross = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.norm_ffn = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult * dim)

    def forward(self, x: Tensor, keywords: Tensor, frame_mask: Tensor, kw_mask: Tensor, name: str):
        h = self.norm_self(x)
        a, _ = self.self_attn(h, h, key_mask=frame_mask, name=f"{name}.self")
        x = ad.add(x, a, name=f"{name}.res_self")
        c, weights = self.cross_attn(self.norm_cross(x), keywords, key_mask=kw_mask, name=f"{name}.cross")
        x = ad.add(x, c, name=f"{name}.res_cross")
        x = ad.add(x, self.ffn(self.norm_ffn(x), name=f"{name}.ffn"), name=f"{name}.res_ffn")
        return x, weights


class KeywordCueEncoder(nn.Module):
    def __init__(self, config: KceConfig):
        super().__init__()
        c = config
        self.config = c
        self.phoneme_table = ad.Embedding(c.inventory_size, c.D_kw)
        self.keyword_in = Linear(c.D_kw, c.D)
        self.keyword_blocks = nn.ModuleList(SelfAttentionBlock(c.D, c.heads, c.ffn_mult) for _ in range(c.keyword_layers))
        self.keyword_norm = LayerNorm(c.D)
        self.speech_in = Linear(c.feature_dim, c.D)
        self.speech_blocks = nn.ModuleList(CrossAttentionBlock(c.D, c.heads, c.ffn_mult) for _ in range(c.N))
        self.ctc_norm = LayerNorm(c.D)
        self.ctc_head = Linear(c.D, c.inventory_size + 1)
        self.layer_weights = nn.Parameter(torch.empty(c.N, dtype=DTYPE))
        self.speaker_head = nn.Parameter(torch.empty(c.speaker_count, c.D, dtype=DTYPE))

    def reset_special_parameters(self) -> None:
        with torch.no_grad():
            self.layer_weights.fill_(1.0 / math.sqrt(self.config.N))

    # -- stages -------------------------------------------------------------

    def encode_keywords(self, phonemes: Tensor, kw_mask: Tensor) -> Tensor:
        """Phoneme ids (B, L) -> keyword latents (B, L, D)."""
        c = self.config
        pe = self.phoneme_table(phonemes, name="phoneme_embedding")
        pe = ad.add(pe, sinusoidal_positions(phonemes.shape[1], c.D_kw), name="keyword_positions")
        x = self.keyword_in(pe, name="keyword_in")
        for n, block in enumerate(self.keyword_blocks):
            x = block(x, kw_mask, name=f"keyword{n}")
        return self.keyword_norm(x, name="keyword_norm")

    def encode_speech(
        self, features: Tensor, keywords: Tensor, frame_mask: Tensor, kw_mask: Tensor
    ) -> tuple[Tensor, Tensor]:
        """Features (B, T, F) -> layer states (B, N, T, D) and final map (B, L, T)."""
        c = self.config
        if keywords.shape[-1] != c.D:
            raise ad.ShapeError(f"keyword latents have width {keywords.shape[-1]}, expected {c.D}")
        if features.shape[-1] != c.feature_dim:
            raise ad.ShapeError(f"features have width {features.shape[-1]}, expected {c.feature_dim}")
        x = self.speech_in(features, name="speech_in")
        x = ad.add(x, sinusoidal_positions(features.shape[1], c.D), name="speech_positions")
        states, weights = [], None
        for n, block in enumerate(self.speech_blocks):
            x, weights = block(x, keywords, frame_mask, kw_mask, name=f"speech{n}")
            states.append(x)
        return torch.stack(states, dim=1), weights.transpose(1, 2)

    def forward(
        self,
        features: Tensor,
        phonemes: Tensor,
        frame_lengths: Sequence[int] | None = None,
        keyword_lengths: Sequence[int] | None = None,
    ) -> KceOutput:
        b, t, _ = features.shape
        frame_lengths = [t] * b if frame_lengths is None else list(frame_lengths)
        keyword_lengths = [phonemes.shape[1]] * b if keyword_lengths is None else list(keyword_lengths)
        frame_mask = lengths_to_mask(frame_lengths, t)
        kw_mask = lengths_to_mask(keyword_lengths, phonemes.shape[1])
        latents = self.encode_keywords(phonemes, kw_mask)
        states, attn = self.encode_speech(features, latents, frame_mask, kw_mask)
        emb = speaker_embedding(states, self.layer_weights, frame_mask)
        logits = self.ctc_head(self.ctc_norm(states[:, -1], name="ctc_norm"), name="ctc_head")
        return KceOutput(states, attn, emb, logits, frame_lengths, keyword_lengths)


def speaker_embedding(layer_states: Tensor, w: Tensor, frame_mask: Tensor | None = None) -> Tensor:
    """Weighted sum over layers, then mean over (valid) frames.

    ``layer_states`` is (N, T, D) or (B, N, T, D); returns (D,) or (B, D).
    """
    single = layer_states.dim() == 3
    states = layer_states[None] if single else layer_states
    if w.shape != (states.shape[1],):
        raise ad.ShapeError(f"layer weights of shape {tuple(w.shape)} for {states.shape[1]} layers")
    fused = (states * w[None, :, None, None]).sum(dim=1)  # (B, T, D)
    mask = None if frame_mask is None else frame_mask[..., None]
    emb = ad.mean(fused, axis=1, mask=mask, name="speaker_pooling")
    return emb[0] if single else emb


def normalize_features(frames: np.ndarray) -> np.ndarray:
    """Per-utterance mean/variance normalisation of log-mel frames."""
    mu = frames.mean(axis=0, keepdims=True)
    sd = frames.std(axis=0, keepdims=True)
    return (frames - mu) / np.maximum(sd, 1e-3)


def collate_features(feats: Sequence[np.ndarray]) -> tuple[Tensor, list[int]]:
    lengths = [len(f) for f in feats]
    out = torch.zeros(len(feats), max(lengths), feats[0].shape[1], dtype=DTYPE)
    for n, f in enumerate(feats):
        out[n, : len(f)] = torch.from_numpy(np.asarray(f, dtype=np.float64))
    return out, lengths


def collate_phonemes(seqs: Sequence[Sequence[int]]) -> tuple[Tensor, list[int]]:
    lengths = [len(s) for s in seqs]
    out = torch.zeros(len(seqs), max(lengths), dtype=torch.long)
    for n, s in enumerate(seqs):
        out[n, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out, lengths


def save_kce(model: KeywordCueEncoder, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ad.save_checkpoint(directory / "kce.ckpt", dict(model.named_parameters()))
    (directory / "kce_config.json").write_text(model.config.to_json(), encoding="utf-8")


def load_kce(directory: str | Path) -> KeywordCueEncoder:
    directory = Path(directory)
    config = KceConfig.from_json((directory / "kce_config.json").read_text(encoding="utf-8"))
    model = KeywordCueEncoder(config)
    ad.load_into(model, ad.load_checkpoint(directory / "kce.ckpt"))
    return model
