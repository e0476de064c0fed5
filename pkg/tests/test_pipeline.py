import numpy as np
import pytest
import torch

from kwtse import autodiff as ad
from kwtse.config import load_config
from kwtse.corpus import make_eval_set
from kwtse.experiment import build_pools, build_world, new_backbone, new_kce, train_config
from kwtse.pipeline import (
    FreezeViolationError,
    TrainConfig,
    TrainingDivergedError,
    exponential_lr,
    infer,
    train_backbone,
    train_kce,
    warmup_lr,
)
from kwtse.signal import Waveform

TINY = [
    "world.speakers=4", "world.words_per_utterance=2,3",
    "data.train_per_speaker=3", "data.eval_per_speaker=2",
    "kce.N=1", "kce.D=16", "kce.D_kw=8", "kce.heads=2", "kce.keyword_layers=1", "kce.ffn_mult=1",
    "backbone.feature_dim=8", "backbone.num_blocks=1", "backbone.n_bands=4", "backbone.mask_hidden=8",
    "train_kce.epochs=1", "train_kce.steps_per_epoch=3", "train_kce.batch_size=2", "train_kce.warmup_epochs=1",
    "train_tse.epochs=1", "train_tse.steps_per_epoch=2", "train_tse.batch_size=2",
]


@pytest.fixture(scope="module")
def setup():
    cfg = load_config(None, 0, TINY)
    world = build_world(cfg)
    pool, held_out = build_pools(cfg, world)
    return cfg, world, pool, held_out


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_initial=1e-4, lr_final=1e-3)
    with pytest.raises(ValueError):
        TrainConfig(stage="asr")
    tse = TrainConfig.for_stage("tse")
    assert (tse.lr_initial, tse.lr_final, tse.warmup_epochs) == (1e-3, 2.5e-5, 0)


def test_warmup_schedule():
    cfg = TrainConfig(epochs=5, steps_per_epoch=10, warmup_epochs=2, lr_initial=1e-3)
    assert warmup_lr(0, cfg) == pytest.approx(1e-3 / 20)
    assert warmup_lr(19, cfg) == 1e-3
    assert warmup_lr(35, cfg) == 1e-3
    assert warmup_lr(0, TrainConfig(warmup_epochs=0)) == 1e-3


def test_exponential_schedule():
    cfg = TrainConfig.for_stage("tse", epochs=10)
    assert exponential_lr(0, cfg) == 1e-3
    assert exponential_lr(10, cfg) == 2.5e-5
    for e in (1, 2.5, 7):
        assert exponential_lr(e, cfg) == pytest.approx(1e-3 * (2.5e-2) ** (e / 10), rel=1e-12)


def test_zero_epochs_keeps_initialisation(setup):
    cfg, world, pool, _ = setup
    kce = new_kce(cfg, world)
    before = ad.parameter_digest(kce)
    tc = TrainConfig(epochs=0, seed=cfg.seed)
    assert train_kce(tc, world, pool, kce) == []
    assert ad.parameter_digest(kce) == before == ad.parameter_digest(new_kce(cfg, world))


def test_kce_training_is_deterministic_and_logged(setup, tmp_path):
    cfg, world, pool, _ = setup
    digests, logs = [], []
    for k in range(2):
        kce = new_kce(cfg, world)
        logs.append(train_kce(train_config(cfg, "kce"), world, pool, kce, tmp_path / f"log{k}.jsonl"))
        digests.append(ad.parameter_digest(kce))
    assert digests[0] == digests[1] != ad.parameter_digest(new_kce(cfg, world))
    assert logs[0] == logs[1] and len(logs[0]) == 3
    assert (tmp_path / "log0.jsonl").read_text() == (tmp_path / "log1.jsonl").read_text()
    assert set(logs[0][0]) >= {"step", "epoch", "lr", "ctc", "speaker_ce", "reg", "total"}


def test_drop_ctc_changes_training(setup):
    cfg, world, pool, _ = setup
    a, b = new_kce(cfg, world), new_kce(cfg, world)
    train_kce(train_config(cfg, "kce"), world, pool, a)
    log = train_kce(TrainConfig(**{**train_config(cfg, "kce").__dict__, "drop_ctc": True}), world, pool, b)
    assert ad.parameter_digest(a) != ad.parameter_digest(b)
    assert all(r["total"] != r["ctc"] for r in log)


def test_divergence_is_reported(setup):
    cfg, world, pool, _ = setup
    kce = new_kce(cfg, world)
    with torch.no_grad():
        kce.speaker_head.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError, match="step 0"):
        train_kce(train_config(cfg, "kce"), world, pool, kce)


def test_backbone_training_freezes_encoder(setup):
    cfg, world, pool, _ = setup
    kce = new_kce(cfg, world)
    backbone = new_backbone(cfg, kce.config)
    before = ad.parameter_digest(kce), ad.parameter_digest(backbone)
    log = train_backbone(train_config(cfg, "tse"), world, pool, kce, backbone)
    assert ad.parameter_digest(kce) == before[0]
    assert ad.parameter_digest(backbone) != before[1]
    tc = train_config(cfg, "tse")
    assert [r["lr"] for r in log] == [tc.lr_initial, exponential_lr(0.5, tc)]
    assert all(p.requires_grad for p in kce.parameters())


def test_freeze_violation_is_detected(setup, monkeypatch):
    cfg, world, pool, _ = setup
    kce = new_kce(cfg, world)
    backbone = new_backbone(cfg, kce.config)
    import kwtse.pipeline as pl

    real = pl.extraction_loss

    def tampering(ref, est):
        with torch.no_grad():
            kce.layer_weights.add_(1.0)
        return real(ref, est)

    monkeypatch.setattr(pl, "extraction_loss", tampering)
    with pytest.raises(FreezeViolationError):
        train_backbone(train_config(cfg, "tse"), world, pool, kce, backbone)


def test_infer_silence_and_length(setup):
    cfg, world, pool, held_out = setup
    kce = new_kce(cfg, world)
    backbone = new_backbone(cfg, kce.config)
    sample = make_eval_set(world, held_out, 2, seed=9, negative_rate=0.0)[0]
    rejected = infer(sample.mixture, sample.cue, kce, backbone, tau=float("inf"))
    assert not rejected.detection.detected and rejected.embedding is None
    assert len(rejected.waveform) == len(sample.mixture) and not np.any(rejected.waveform.samples)
    accepted = infer(sample.mixture, sample.cue, kce, backbone, tau=-float("inf"))
    assert accepted.detection.detected and len(accepted.waveform) == len(sample.mixture)
    assert np.any(accepted.waveform.samples)
    again = infer(sample.mixture, sample.cue, kce, backbone, tau=-float("inf"))
    assert np.array_equal(accepted.waveform.samples, again.waveform.samples)
    assert isinstance(accepted.waveform, Waveform)
