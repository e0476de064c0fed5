"""Band-split recurrent masking backbone conditioned on a speaker embedding."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from . import autodiff as ad
from .autodiff import DTYPE, GRU, LayerNorm, Linear
from .signal import Waveform, istft_tensor, stft_tensor


@dataclass
class BandSpec:
    widths: list[int]

    def __post_init__(self) -> None:
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError(f"band widths must be positive, got {self.widths}")

    @property
    def K_bands(self) -> int:
        return len(self.widths)

    @property
    def F(self) -> int:
        return sum(self.widths)

    @property
    def offsets(self) -> list[int]:
        return [int(x) for x in np.cumsum([0] + self.widths[:-1])]

    @classmethod
    def uniform(cls, n_bins: int, n_bands: int) -> "BandSpec":
        """``n_bands`` equal bands; the last absorbs the remainder."""
        base = n_bins // n_bands
        widths = [base] * n_bands
        widths[-1] += n_bins - base * n_bands
        return cls(widths)


@dataclass
class BackboneConfig:
    embedding_dim: int = 64
    feature_dim: int = 32
    num_blocks: int = 2
    fusion: str = "multiply"
    window_len: int = 512
    hop: int = 128
    bands: BandSpec = field(default_factory=lambda: BandSpec.uniform(257, 8))
    mask_hidden: int = 64

    def __post_init__(self) -> None:
        if isinstance(self.bands, dict):
            self.bands = BandSpec(**self.bands)
        if self.num_blocks < 1:
            raise ValueError("need at least one (time, band) block pair")
        if self.fusion not in ("multiply", "concat"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.bands.F != self.window_len // 2 + 1:
            raise ValueError(f"bands cover {self.bands.F} bins, STFT has {self.window_len // 2 + 1}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BackboneConfig":
        return cls(**json.loads(text))


class ResidualRNN(nn.Module):
    """LayerNorm -> bidirectional GRU -> projection, added back to the input."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = LayerNorm(dim)
        self.rnn = GRU(dim, dim, bidirectional=True)
        self.proj = Linear(2 * dim, dim)

    def forward(self, x: Tensor, name: str) -> Tensor:
        h = self.rnn(self.norm(x, name=f"{name}.norm"), axis=1, name=f"{name}.gru")
        return ad.add(x, self.proj(h, name=f"{name}.proj"), name=f"{name}.res")


class BandSplitExtractor(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = c = config
        n = c.feature_dim
        self.band_norms = nn.ModuleList(LayerNorm(2 * w) for w in c.bands.widths)
        self.band_proj = nn.ModuleList(Linear(2 * w, n) for w in c.bands.widths)
        self.speaker_proj = Linear(c.embedding_dim, n)
        self.concat_proj = Linear(2 * n, n) if c.fusion == "concat" else None
        self.time_rnns = nn.ModuleList(ResidualRNN(n) for _ in range(c.num_blocks))
        self.band_rnns = nn.ModuleList(ResidualRNN(n) for _ in range(c.num_blocks))
        self.mask_norms = nn.ModuleList(LayerNorm(n) for _ in c.bands.widths)
        self.mask_hidden = nn.ModuleList(Linear(n, c.mask_hidden) for _ in c.bands.widths)
        self.mask_out = nn.ModuleList(Linear(c.mask_hidden, 2 * w) for w in c.bands.widths)

    # -- stages -------------------------------------------------------------

    def band_split(self, X: Tensor) -> Tensor:
        """Complex (B, F, T) -> latents (B, K, T, N)."""
        bands = self.config.bands
        if X.shape[-2] != bands.F:
            raise ad.ShapeError(f"spectrogram has {X.shape[-2]} bins, band spec covers {bands.F}")
        out = []
        for s, (lo, w) in enumerate(zip(bands.offsets, bands.widths)):
            sub = X[:, lo:lo + w].transpose(1, 2)  # (B, T, w)
            feat = ad.concat([sub.real, sub.imag], axis=-1, name=f"band{s}.ri")
            feat = self.band_norms[s](feat, name=f"band{s}.norm")
            out.append(self.band_proj[s](feat, name=f"band{s}.proj"))
        return torch.stack(out, dim=1)

    def fuse_speaker(self, latents: Tensor, embedding: Tensor) -> Tensor:
        """Condition every band/frame latent on the projected speaker embedding."""
        e = self.speaker_proj(embedding, name="speaker_proj")[:, None, None, :]
        if self.config.fusion == "multiply":
            return ad.mul(latents, e, name="fusion")
        both = ad.concat([latents, e.expand_as(latents)], axis=-1, name="fusion.concat")
        return self.concat_proj(both, name="fusion.proj")

    def estimate_mask(self, latents: Tensor) -> Tensor:
        """Latents (B, K, T, N) -> complex mask (B, F, T)."""
        b, k, t, n = latents.shape
        x = latents
        for i in range(self.config.num_blocks):
            x = self.time_rnns[i](x.reshape(b * k, t, n), name=f"block{i}.time").reshape(b, k, t, n)
            x = x.transpose(1, 2).reshape(b * t, k, n)
            x = self.band_rnns[i](x, name=f"block{i}.band").reshape(b, t, k, n).transpose(1, 2)
        parts = []
        for s, w in enumerate(self.config.bands.widths):
            h = self.mask_norms[s](x[:, s], name=f"mask{s}.norm")
            h = ad.tanh(self.mask_hidden[s](h, name=f"mask{s}.hidden"), name=f"mask{s}.tanh")
            m = self.mask_out[s](h, name=f"mask{s}.out")  # (B, T, 2w)
            parts.append(torch.complex(m[..., :w], m[..., w:]).transpose(1, 2))
        return torch.cat(parts, dim=1)

    def forward(self, mixture: Tensor, embedding: Tensor, mask_override: Tensor | None = None) -> Tensor:
        """Waveforms (B, L) and embeddings (B, D) -> estimated waveforms (B, L)."""
        c = self.config
        X = stft_tensor(mixture, c.window_len, c.hop)
        if mask_override is None:
            M = self.estimate_mask(self.fuse_speaker(self.band_split(X), embedding))
        else:
            M = mask_override.to(X.dtype).expand_as(X)
        return istft_tensor(X * M, mixture.shape[-1], c.window_len, c.hop)

    def extract(self, x: Waveform, embedding) -> Waveform:
        with torch.no_grad():
            emb = torch.as_tensor(np.asarray(embedding, dtype=np.float64))[None]
            y = self(torch.from_numpy(x.samples)[None], emb)[0]
        return Waveform(y.numpy(), x.sample_rate)


def save_backbone(model: BandSplitExtractor, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ad.save_checkpoint(directory / "backbone.ckpt", dict(model.named_parameters()))
    (directory / "backbone_config.json").write_text(model.config.to_json(), encoding="utf-8")


def load_backbone(directory: str | Path) -> BandSplitExtractor:
    directory = Path(directory)
    config = BackboneConfig.from_json((directory / "backbone_config.json").read_text(encoding="utf-8"))
    model = BandSplitExtractor(config)
    ad.load_into(model, ad.load_checkpoint(directory / "backbone.ckpt"))
    return model
