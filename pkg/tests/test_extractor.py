import numpy as np
import pytest
import torch

from kwtse.autodiff import DTYPE, ShapeError, init_parameters
from kwtse.extractor import BackboneConfig, BandSpec, BandSplitExtractor, load_backbone, save_backbone
from kwtse.gradsuite import run_check
from kwtse.signal import Waveform, stft_tensor


def tiny(fusion="multiply", widths=(4, 5), seed=0):
    cfg = BackboneConfig(embedding_dim=6, feature_dim=5, num_blocks=1, fusion=fusion, window_len=16, hop=4,
                         bands=BandSpec(list(widths)), mask_hidden=7)
    model = BandSplitExtractor(cfg)
    init_parameters(model, seed)
    return model


def spectrum(b=1, t=6, f=9, seed=0):
    rng = np.random.default_rng(seed)
    return torch.complex(torch.from_numpy(rng.normal(size=(b, f, t))), torch.from_numpy(rng.normal(size=(b, f, t))))


def test_band_spec_arithmetic():
    spec = BandSpec.uniform(257, 8)
    assert spec.widths == [32] * 7 + [33] and spec.F == 257
    assert BandSpec([4, 4]).offsets == [0, 4]
    with pytest.raises(ValueError):
        BandSpec([4, 0])
    with pytest.raises(ValueError):
        BackboneConfig(bands=BandSpec([100]))


def test_band_split_feeds_real_and_imag():
    m = tiny()
    assert [p.weight.shape[1] for p in m.band_proj] == [8, 10]
    assert m.band_split(spectrum()).shape == (1, 2, 6, 5)
    with pytest.raises(ShapeError):
        m.band_split(spectrum(f=8))


def test_zero_spectrum_gives_band_biases():
    m = tiny()
    with torch.no_grad():
        for proj in m.band_proj:
            proj.bias.normal_()
        latents = m.band_split(torch.zeros(1, 9, 3, dtype=torch.complex128))
    for s, proj in enumerate(m.band_proj):
        torch.testing.assert_close(latents[0, s], proj.bias.detach().expand(3, 5))


def test_single_band_is_full_band():
    m = tiny(widths=(9,))
    assert m.band_split(spectrum()).shape == (1, 1, 6, 5)
    assert m.estimate_mask(m.band_split(spectrum())).shape == (1, 9, 6)


def test_multiply_fusion_identity_and_zero():
    m = tiny()
    latents = m.band_split(spectrum())
    emb = torch.randn(1, 6, dtype=DTYPE)
    with torch.no_grad():
        m.speaker_proj.weight.zero_()
        m.speaker_proj.bias.fill_(1.0)
    torch.testing.assert_close(m.fuse_speaker(latents, emb), latents)
    with torch.no_grad():
        m.speaker_proj.bias.zero_()
    assert torch.all(m.fuse_speaker(latents, emb) == 0)


def test_concat_fusion_shape():
    m = tiny(fusion="concat")
    assert m.fuse_speaker(m.band_split(spectrum()), torch.randn(1, 6, dtype=DTYPE)).shape == (1, 2, 6, 5)


def test_mask_shape_and_embedding_sensitivity():
    m = tiny()
    x = torch.randn(1, 70, dtype=DTYPE)
    X = stft_tensor(x, 16, 4)
    latents = m.band_split(X)
    a = m.estimate_mask(m.fuse_speaker(latents, torch.randn(1, 6, dtype=DTYPE)))
    b = m.estimate_mask(m.fuse_speaker(latents, torch.randn(1, 6, dtype=DTYPE)))
    assert a.shape == X.shape and a.is_complex()
    assert not torch.allclose(a, b)


def test_identity_and_zero_masks():
    m = BandSplitExtractor(BackboneConfig(embedding_dim=6))
    init_parameters(m, 0)
    x = torch.from_numpy(np.random.default_rng(1).normal(size=(1, 3000)))
    emb = torch.zeros(1, 6, dtype=DTYPE)
    y = m(x, emb, mask_override=torch.ones(1, dtype=torch.complex128))
    assert torch.max(torch.abs(y - x)) < 1e-6
    z = m(x, emb, mask_override=torch.zeros(1, dtype=torch.complex128))
    assert torch.max(torch.abs(z)) < 1e-12


def test_extract_preserves_length_and_is_deterministic():
    m = BandSplitExtractor(BackboneConfig(embedding_dim=6, num_blocks=1))
    init_parameters(m, 3)
    for n in (600, 1001, 2048):
        x = Waveform(np.random.default_rng(n).normal(size=n), 8000)
        emb = np.ones(6)
        y = m.extract(x, emb)
        assert len(y) == n and y.sample_rate == 8000
        assert np.array_equal(y.samples, m.extract(x, emb).samples)


def test_gradients_match_finite_differences():
    report = run_check("extraction_loss", max_entries=None)
    assert report.passed, report.summary()


def test_checkpoint_round_trip(tmp_path):
    m = tiny(fusion="concat", seed=5)
    save_backbone(m, tmp_path / "bb")
    loaded = load_backbone(tmp_path / "bb")
    assert loaded.config == m.config
    x, e = torch.randn(1, 70, dtype=DTYPE), torch.randn(1, 6, dtype=DTYPE)
    assert torch.equal(m(x, e), loaded(x, e))
