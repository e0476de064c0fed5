"""Two-stage training (cue encoder, then frozen-encoder backbone) and detect-attend-extract inference."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import autodiff as ad
from .corpus import MixtureSample, SyntheticWorld, Utterance, make_mixture
from .detector import DEFAULT_TAU, DetectionResult, detect
from .extractor import BandSplitExtractor
from .kce import KceOutput, KeywordCueEncoder, collate_features, collate_phonemes, normalize_features
from .objectives import extraction_loss, kce_loss
from .signal import Waveform, fbank
from .textfront import KeywordCue


class TrainingDivergedError(RuntimeError):
    pass


class FreezeViolationError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "kce"
    epochs: int = 20
    steps_per_epoch: int = 100
    batch_size: int = 8
    lr_initial: float = 1e-3
    lr_final: float = 1e-3
    warmup_epochs: int = 2
    seed: int = 0
    grad_clip: float = 5.0
    drop_reg: bool = False
    drop_speaker: bool = False
    drop_ctc: bool = False

    def __post_init__(self) -> None:
        if self.stage not in ("kce", "tse"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0, steps_per_epoch and batch_size >= 1")
        if not 0 < self.lr_final <= self.lr_initial:
            raise ValueError(f"need 0 < lr_final <= lr_initial, got {self.lr_final} > {self.lr_initial}")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        """Stage defaults: warm-up then constant 1e-3 for the encoder, 1e-3 -> 2.5e-5 decay for the backbone."""
        base = dict(stage=stage)
        if stage == "tse":
            base.update(lr_initial=1e-3, lr_final=2.5e-5, warmup_epochs=0, batch_size=4)
        base.update(overrides)
        return cls(**base)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


def warmup_lr(step: int, config: TrainConfig) -> float:
    """Linear warm-up to ``lr_initial`` over ``warmup_epochs``, constant afterwards."""
    warm = config.warmup_epochs * config.steps_per_epoch
    if step >= warm:
        return config.lr_initial
    return config.lr_initial * (step + 1) / warm


def exponential_lr(epoch: float, config: TrainConfig) -> float:
    """``lr_initial * (lr_final / lr_initial) ** (epoch / epochs)``; exact at both ends."""
    if config.epochs == 0 or epoch <= 0:
        return config.lr_initial
    if epoch >= config.epochs:
        return config.lr_final
    return config.lr_initial * (config.lr_final / config.lr_initial) ** (epoch / config.epochs)


# ---------------------------------------------------------------------------
# Batching


def mixture_features(x: Waveform) -> np.ndarray:
    return normalize_features(fbank(x).frames)


def encode_batch(kce: KeywordCueEncoder, mixtures: Sequence[Waveform], cues: Sequence[KeywordCue]) -> KceOutput:
    feats, frame_lengths = collate_features([mixture_features(x) for x in mixtures])
    phonemes, kw_lengths = collate_phonemes([c.phoneme_ids for c in cues])
    return kce(feats, phonemes, frame_lengths, kw_lengths)


def transcript_phonemes(world: SyntheticWorld, words: Sequence[str]) -> list[int]:
    out: list[int] = []
    for w in words:
        out.extend(world.lexicon[w])
    return out


def _check_finite(step: int, parts: dict[str, float]) -> None:
    bad = {k: v for k, v in parts.items() if not math.isfinite(v)}
    if bad:
        raise TrainingDivergedError(f"non-finite loss at step {step}: {parts}")


class _JsonlLog:
    def __init__(self, path: str | Path | None):
        self.fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        if self.fh is not None:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def _clip(model: torch.nn.Module, limit: float) -> None:
    if limit and limit > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), limit)


# ---------------------------------------------------------------------------
# Stage 1: cue encoder


def train_kce(
    config: TrainConfig,
    world: SyntheticWorld,
    pool: Sequence[Utterance],
    kce: KeywordCueEncoder,
    log_path: str | Path | None = None,
    progress: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Adam on the joint CTC + speaker objective over online max-protocol mixtures.

    Batch ``s`` is drawn from an rng seeded by ``(config.seed, s)`` so a run is
    reproducible from the config alone.  Returns the per-step log records.
    """
    torch.manual_seed(config.seed)
    opt = torch.optim.Adam(kce.parameters(), lr=config.lr_initial)
    log = _JsonlLog(log_path)
    history = []
    try:
        for step in range(config.total_steps):
            rng = np.random.default_rng([config.seed, step])
            batch = [make_mixture(world, pool, rng, "max", "train") for _ in range(config.batch_size)]
            lr = warmup_lr(step, config)
            for group in opt.param_groups:
                group["lr"] = lr
            out = encode_batch(kce, [s.mixture for s in batch], [s.cue for s in batch])
            losses = kce_loss(
                out,
                [transcript_phonemes(world, s.transcript) for s in batch],
                [s.y_spk for s in batch],
                kce.layer_weights,
                kce.speaker_head,
                drop_reg=config.drop_reg,
                drop_speaker=config.drop_speaker,
                drop_ctc=config.drop_ctc,
            )
            parts = losses.as_dict()
            _check_finite(step, parts)
            opt.zero_grad()
            losses.total.backward()
            _clip(kce, config.grad_clip)
            opt.step()
            record = {"step": step, "epoch": step // config.steps_per_epoch, "lr": lr, **parts}
            history.append(record)
            log.write(record)
            if progress is not None:
                progress(record)
    finally:
        log.close()
    return history


# ---------------------------------------------------------------------------
# Stage 2: backbone with a frozen cue encoder


def train_backbone(
    config: TrainConfig,
    world: SyntheticWorld,
    pool: Sequence[Utterance],
    kce: KeywordCueEncoder,
    backbone: BandSplitExtractor,
    log_path: str | Path | None = None,
    progress: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Negative SI-SNR training over online min-protocol mixtures.

    Embeddings come from the full mixture; the waveforms of a batch are then
    cut to the shortest item so no padding enters the loss.
    """
    before = ad.parameter_digest(kce)
    for p in kce.parameters():
        p.requires_grad_(False)
    kce.eval()
    torch.manual_seed(config.seed)
    opt = torch.optim.Adam(backbone.parameters(), lr=config.lr_initial)
    log = _JsonlLog(log_path)
    history = []
    try:
        for step in range(config.total_steps):
            rng = np.random.default_rng([config.seed, step])
            batch = [make_mixture(world, pool, rng, "min", "train") for _ in range(config.batch_size)]
            lr = exponential_lr(step / config.steps_per_epoch, config)
            for group in opt.param_groups:
                group["lr"] = lr
            with torch.no_grad():
                emb = encode_batch(kce, [s.mixture for s in batch], [s.cue for s in batch]).speaker_embedding
            n = min(len(s.mixture) for s in batch)
            mix = torch.from_numpy(np.stack([s.mixture.samples[:n] for s in batch]))
            ref = torch.from_numpy(np.stack([s.target.samples[:n] for s in batch]))
            loss = extraction_loss(ref, backbone(mix, emb))
            _check_finite(step, {"loss": loss.item()})
            opt.zero_grad()
            loss.backward()
            _clip(backbone, config.grad_clip)
            opt.step()
            record = {"step": step, "epoch": step // config.steps_per_epoch, "lr": lr, "loss": loss.item()}
            history.append(record)
            log.write(record)
            if progress is not None:
                progress(record)
    finally:
        log.close()
        for p in kce.parameters():
            p.requires_grad_(True)
    if ad.parameter_digest(kce) != before:
        raise FreezeViolationError("cue encoder parameters changed during backbone training")
    return history


# ---------------------------------------------------------------------------
# Inference


@dataclass
class InferenceResult:
    waveform: Waveform
    detection: DetectionResult
    embedding: np.ndarray | None


def infer(
    mixture: Waveform,
    cue: KeywordCue,
    kce: KeywordCueEncoder,
    backbone: BandSplitExtractor,
    tau: float = DEFAULT_TAU,
    scoring: str = "normalized",
) -> InferenceResult:
    """Detect the cue in the final cross-attention map; extract if found, otherwise return silence."""
    with torch.no_grad():
        out = encode_batch(kce, [mixture], [cue])
        result = detect(out.attention_map(0), tau, scoring)
        if not result.detected:
            return InferenceResult(Waveform(np.zeros(len(mixture)), mixture.sample_rate), result, None)
        emb = out.speaker_embedding[0].numpy()
        return InferenceResult(backbone.extract(mixture, emb), result, emb)


def sample_to_json(sample: MixtureSample) -> dict:
    return {
        "transcript": sample.transcript,
        "cue": list(sample.cue.words),
        "keyword_present": sample.keyword_present,
        "target_speaker": sample.y_spk,
    }


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
