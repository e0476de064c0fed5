import numpy as np
import pytest
import torch

from kwtse.autodiff import DTYPE, ShapeError, init_parameters
from kwtse.kce import KceConfig, KeywordCueEncoder, load_kce, save_kce, speaker_embedding


def small_model(seed=0, **kw):
    cfg = KceConfig(inventory_size=6, speaker_count=3, N=2, D=16, D_kw=8, heads=2, ffn_mult=2, feature_dim=10, **kw)
    model = KeywordCueEncoder(cfg)
    init_parameters(model, seed)
    return model


def feats(b, t, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=(b, t, 10)))


def test_config_invariants():
    with pytest.raises(ValueError):
        KceConfig(inventory_size=5, speaker_count=2, D=10, heads=4)
    with pytest.raises(ValueError):
        KceConfig(inventory_size=5, speaker_count=2, N=0)


def test_forward_shapes():
    m = small_model()
    out = m(feats(1, 5), torch.tensor([[0, 3, 5]]))
    assert out.layer_states.shape == (1, 2, 5, 16)
    assert out.attention_final.shape == (1, 3, 5)
    assert out.ctc_logits.shape == (1, 5, 7)
    assert out.speaker_embedding.shape == (1, 16)
    kw = m.encode_keywords(torch.tensor([[2]]), torch.tensor([[True]]))
    assert kw.shape == (1, 1, 16)


def test_attention_columns_sum_to_one_with_padding():
    m = small_model()
    out = m(feats(2, 7), torch.tensor([[0, 3, 5], [1, 2, 0]]), [7, 4], [3, 2])
    for b in range(2):
        amap = out.attention_map(b)
        np.testing.assert_allclose(amap.sum(axis=0), 1.0, atol=1e-6)
        assert np.all(amap >= 0)
    assert torch.all(out.attention_final[1, 2] == 0)
    assert torch.isfinite(out.speaker_embedding).all()


def test_padding_does_not_leak():
    m = small_model()
    x = feats(1, 6)
    alone = m(x, torch.tensor([[1, 4]]))
    padded = m(torch.cat([x, feats(1, 3, seed=9)], dim=1), torch.tensor([[1, 4, 0]]), [6], [2])
    torch.testing.assert_close(alone.speaker_embedding, padded.speaker_embedding)
    torch.testing.assert_close(alone.attention_final, padded.attention_final[:, :2, :6])


def test_forward_is_deterministic():
    a = small_model(seed=4)(feats(1, 6), torch.tensor([[1, 2]]))
    b = small_model(seed=4)(feats(1, 6), torch.tensor([[1, 2]]))
    assert torch.equal(a.speaker_embedding, b.speaker_embedding)


def test_swapping_phonemes_changes_keyword_latents():
    m = small_model()
    mask = torch.ones(1, 2, dtype=torch.bool)
    a = m.encode_keywords(torch.tensor([[1, 4]]), mask)
    b = m.encode_keywords(torch.tensor([[4, 1]]), mask)
    assert not torch.allclose(a, b[:, [1, 0]])


def test_keyword_latents_steer_the_embedding():
    m = small_model()
    x = feats(1, 6)
    mask = torch.ones(1, 6, dtype=torch.bool)
    kw_mask = torch.ones(1, 3, dtype=torch.bool)
    zero = torch.zeros(1, 3, 16, dtype=DTYPE)
    rand = torch.randn(1, 3, 16, dtype=DTYPE)
    s0, _ = m.encode_speech(x, zero, mask, kw_mask)
    s1, _ = m.encode_speech(x, rand, mask, kw_mask)
    w = m.layer_weights
    assert not torch.allclose(speaker_embedding(s0, w), speaker_embedding(s1, w))


def test_width_mismatch_and_bad_ids():
    m = small_model()
    with pytest.raises(ShapeError):
        m(torch.zeros(1, 4, 9, dtype=DTYPE), torch.tensor([[1]]))
    with pytest.raises(IndexError):
        m(feats(1, 4), torch.tensor([[6]]))


def test_speaker_embedding_examples():
    states = torch.stack([torch.full((5, 3), 2.0, dtype=DTYPE), torch.full((5, 3), 4.0, dtype=DTYPE)])
    emb = speaker_embedding(states, torch.tensor([0.5, 0.5], dtype=DTYPE))
    assert torch.all(emb == 3.0)
    rng = np.random.default_rng(0)
    states = torch.from_numpy(rng.normal(size=(3, 7, 4)))
    w = torch.tensor([1.0, 0.0, 0.0], dtype=DTYPE)
    torch.testing.assert_close(speaker_embedding(states, w), states[0].mean(dim=0))
    w = torch.from_numpy(rng.normal(size=3))
    assert torch.equal(speaker_embedding(states, 2 * w), 2 * speaker_embedding(states, w))


def test_speaker_embedding_ignores_frame_order():
    states = torch.from_numpy(np.random.default_rng(1).normal(size=(2, 9, 4)))
    w = torch.tensor([0.3, -1.2], dtype=DTYPE)
    perm = torch.randperm(9, generator=torch.Generator().manual_seed(0))
    torch.testing.assert_close(speaker_embedding(states[:, perm], w), speaker_embedding(states, w))


def test_speaker_embedding_checks_layer_count():
    with pytest.raises(ShapeError):
        speaker_embedding(torch.zeros(2, 3, 4, dtype=DTYPE), torch.ones(3, dtype=DTYPE))


def test_checkpoint_round_trip(tmp_path):
    m = small_model(seed=2)
    save_kce(m, tmp_path / "kce")
    loaded = load_kce(tmp_path / "kce")
    x, p = feats(1, 5), torch.tensor([[0, 1]])
    assert torch.equal(m(x, p).speaker_embedding, loaded(x, p).speaker_embedding)
