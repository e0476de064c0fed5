"""Assemble worlds, models and datasets from a :class:`Config` and run the toy study end to end."""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import autodiff as ad
from .config import Config
from .corpus import MixtureSample, SynthSpec, SyntheticWorld, make_eval_set
from .evaluation import (
    EvalReport,
    cosine_separation,
    extraction_scores,
    score_samples,
    si_snri_and_accuracy,
    sweep_thresholds,
)
from .extractor import BackboneConfig, BandSpec, BandSplitExtractor, save_backbone
from .kce import KceConfig, KeywordCueEncoder, save_kce
from .pipeline import TrainConfig, encode_batch, infer, train_backbone, train_kce

DENSE_TAUS = tuple(round(t, 2) for t in np.arange(0.05, 1.0, 0.01))


def build_world(cfg: Config) -> SyntheticWorld:
    return SyntheticWorld(SynthSpec(**cfg["world"], seed=cfg.seed))


def build_pools(cfg: Config, world: SyntheticWorld):
    """Training and held-out clean utterance pools (same speakers, disjoint recordings)."""
    d = cfg["data"]
    train = world.build_pool(d["train_per_speaker"], seed=1000 * cfg.seed + 1)
    held_out = world.build_pool(d["eval_per_speaker"], seed=1000 * cfg.seed + 2)
    return train, held_out


def kce_config(cfg: Config, world: SyntheticWorld) -> KceConfig:
    return KceConfig(inventory_size=world.lexicon.inventory_size, speaker_count=world.spec.speakers, **cfg["kce"])


def backbone_config(cfg: Config, kce: KceConfig) -> BackboneConfig:
    b = dict(cfg["backbone"])
    bands = BandSpec.uniform(b["window_len"] // 2 + 1, b.pop("n_bands"))
    return BackboneConfig(embedding_dim=kce.D, bands=bands, **b)


def train_config(cfg: Config, stage: str) -> TrainConfig:
    section = "train_kce" if stage == "kce" else "train_tse"
    return TrainConfig(stage=stage, seed=cfg.seed, **cfg[section])


def new_kce(cfg: Config, world: SyntheticWorld) -> KeywordCueEncoder:
    model = KeywordCueEncoder(kce_config(cfg, world))
    ad.init_parameters(model, cfg.seed)
    return model


def new_backbone(cfg: Config, kce: KceConfig) -> BandSplitExtractor:
    model = BandSplitExtractor(backbone_config(cfg, kce))
    ad.init_parameters(model, cfg.seed + 1)
    return model


def extraction_set(cfg: Config, world: SyntheticWorld, pool) -> list[MixtureSample]:
    return make_eval_set(world, pool, cfg["data"]["n_extraction"], seed=1000 * cfg.seed + 3,
                         protocol="min", negative_rate=0.0)


def detection_set(cfg: Config, world: SyntheticWorld, pool) -> list[MixtureSample]:
    return make_eval_set(world, pool, cfg["data"]["n_detection"], seed=1000 * cfg.seed + 4,
                         protocol="max", negative_rate=cfg["data"]["negative_rate"])


def extract_with_cue(kce: KeywordCueEncoder, backbone: BandSplitExtractor, samples, batch_size: int = 8):
    """Backbone outputs conditioned on the cue encoder's embedding, without the detection gate."""
    outputs, embeddings = [], []
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            emb = encode_batch(kce, [s.mixture for s in chunk], [s.cue for s in chunk]).speaker_embedding
            for s, e in zip(chunk, emb):
                embeddings.append(e.numpy().copy())
                outputs.append(backbone.extract(s.mixture, e.numpy()).samples)
    return outputs, embeddings


def evaluate_models(
    cfg: Config,
    kce: KeywordCueEncoder,
    backbone: BandSplitExtractor,
    extraction: list[MixtureSample],
    detection: list[MixtureSample],
) -> dict:
    kce.eval()
    backbone.eval()
    outputs, ext_embeddings = extract_with_cue(kce, backbone, extraction)
    improvements = extraction_scores(extraction, outputs)
    mean_i, accuracy = si_snri_and_accuracy(improvements)
    try:
        same, cross = cosine_separation(ext_embeddings, [s.y_spk for s in extraction])
    except ValueError:  # too few samples to form both kinds of pair
        same = cross = None

    scoring = cfg["eval"]["scoring"]
    scored, _ = score_samples(kce, detection)
    dense = sweep_thresholds(scored, DENSE_TAUS, scoring)
    best = max(dense, key=lambda r: (-1.0 if r.f1 is None else r.f1, -r.tau))
    grid = sweep_thresholds(scored, cfg["eval"]["taus"], scoring)

    # silence contract on every negative the best threshold rejects
    rejected = [s for s, sc in zip(detection, scored)
                if not s.keyword_present and sc.score(scoring) < best.tau]
    silent = 0
    for s in rejected:
        res = infer(s.mixture, s.cue, kce, backbone, best.tau, scoring)
        silent += int(not res.detection.detected and not np.any(res.waveform.samples))

    report = EvalReport(
        mean_si_snri=mean_i, accuracy=accuracy, precision=best.precision, recall=best.recall, f1=best.f1,
        mean_start_err_ms=best.start_err_ms, mean_end_err_ms=best.end_err_ms,
        embedding_cosine_same=same, embedding_cosine_cross=cross, n_samples=len(extraction) + len(detection),
        tau=best.tau, sweep=[r.__dict__ for r in grid],
    )
    return {
        "report": json.loads(report.to_json()),
        "si_snri": improvements,
        "best_tau": best.tau,
        "dense_sweep": [r.__dict__ for r in dense],
        "grid_sweep": [r.__dict__ for r in grid],
        "negatives_rejected": len(rejected),
        "negatives_silent": silent,
        "negatives_total": sum(not s.keyword_present for s in detection),
    }


def run_toy_experiment(
    cfg: Config, out_dir: str | Path, progress: Callable[[str], None] | None = None
) -> dict:
    """Train both stages and evaluate; writes checkpoints, logs and ``metrics.json`` under ``out_dir``."""
    say = progress or (lambda msg: None)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(cfg.snapshot(), encoding="utf-8")
    torch.manual_seed(cfg.seed)
    t0 = time.perf_counter()

    world = build_world(cfg)
    train_pool, held_out = build_pools(cfg, world)
    say(f"world ready: {len(train_pool)} training and {len(held_out)} held-out utterances")

    kce = new_kce(cfg, world)
    kce_log = train_kce(train_config(cfg, "kce"), world, train_pool, kce, out / "kce_log.jsonl",
                        _every(100, say, "kce"))
    save_kce(kce, out / "kce")
    t_kce = time.perf_counter() - t0

    backbone = new_backbone(cfg, kce.config)
    tse_log = train_backbone(train_config(cfg, "tse"), world, train_pool, kce, backbone, out / "tse_log.jsonl",
                             _every(100, say, "tse"))
    save_backbone(backbone, out / "backbone")
    t_tse = time.perf_counter() - t0 - t_kce

    metrics = evaluate_models(cfg, kce, backbone, extraction_set(cfg, world, held_out),
                              detection_set(cfg, world, held_out))
    totals = [r["total"] for r in kce_log]
    metrics.update({
        "kce_steps": len(kce_log),
        "tse_steps": len(tse_log),
        "kce_loss_first100": float(np.mean(totals[:100])) if totals else None,
        "kce_loss_last100": float(np.mean(totals[-100:])) if totals else None,
        "kce_digest": ad.parameter_digest(kce),
        "backbone_digest": ad.parameter_digest(backbone),
        "seconds_kce": t_kce,
        "seconds_tse": t_tse,
        "seconds_total": time.perf_counter() - t0,
    })
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True), encoding="utf-8")
    return metrics


def _every(n: int, say: Callable[[str], None], tag: str):
    window: list[float] = []

    def hook(record: dict) -> None:
        window.append(record.get("total", record.get("loss")))
        if (record["step"] + 1) % n == 0:
            say(f"{tag} step {record['step'] + 1}: mean loss {np.mean(window):.4f} lr {record['lr']:.2e}")
            window.clear()

    return hook
