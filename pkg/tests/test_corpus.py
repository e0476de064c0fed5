import numpy as np
import pytest
from scipy import stats

from kwtse.corpus import (
    SynthSpec,
    SyntheticWorld,
    Utterance,
    load_utterance_pool,
    make_eval_set,
    make_mixture,
    mix_utterances,
    read_manifest,
    word_frame_spans,
    write_manifest,
)
from kwtse.signal import Waveform, write_wav
from kwtse.textfront import OOVError


@pytest.fixture(scope="module")
def world():
    return SyntheticWorld(SynthSpec(lexicon_size=12, words_per_utterance=(3, 5)))


@pytest.fixture(scope="module")
def pool(world):
    return world.build_pool(4, seed=11)


def pitch(x, sr):
    """Autocorrelation f0: first strong local maximum between 60 and 400 Hz."""
    x = x[np.abs(x) > 0]
    ac = np.correlate(x, x, "full")[len(x) - 1:]
    lo, hi = sr // 400, sr // 60
    top = ac[lo:hi].max()
    lag = next(k for k in range(lo, hi) if ac[k] > 0.8 * top and ac[k] >= ac[k - 1] and ac[k] >= ac[k + 1])
    return sr / lag


def two_phoneme_word(world):
    return next(w for w in world.lexicon.words if len(world.lexicon[w]) == 2)


def test_world_invariants(world):
    assert len(world.lexicon.words) == 12 and world.lexicon.inventory_size == 24
    params = {(s.f0, s.formant_scale) for s in world.speakers}
    assert len(params) == 8
    with pytest.raises(ValueError):
        SynthSpec(speakers=0)


def test_two_phoneme_word_duration(world):
    word = two_phoneme_word(world)
    wav, bounds = world.synthesize_utterance(0, [word], np.random.default_rng(0))
    (a, b), = bounds
    assert b - a == world.spec.samples(160)
    assert np.all(wav.samples[:a] == 0) and np.all(wav.samples[b:] == 0)
    assert np.sqrt(np.mean(wav.samples**2)) == pytest.approx(world.spec.rms)


def test_speakers_differ_in_f0(world):
    words = world.lexicon.words[:2]
    low, _ = world.synthesize_utterance(0, words, np.random.default_rng(0))
    high, _ = world.synthesize_utterance(7, words, np.random.default_rng(0))
    assert not np.array_equal(low.samples, high.samples)
    f_low, f_high = pitch(low.samples, 8000), pitch(high.samples, 8000)
    assert f_low == pytest.approx(world.speakers[0].f0, rel=0.06)
    assert f_high == pytest.approx(world.speakers[7].f0, rel=0.06)


def test_synthesis_is_deterministic(world):
    words = world.lexicon.words[3:6]
    a, ba = world.synthesize_utterance(2, words, np.random.default_rng(5))
    b, bb = world.synthesize_utterance(2, words, np.random.default_rng(5))
    assert a.samples.tobytes() == b.samples.tobytes() and ba == bb
    assert SyntheticWorld(world.spec).lexicon == world.lexicon


def test_synthesis_rejects_oov(world):
    with pytest.raises(OOVError):
        world.synthesize_utterance(0, ["nope"], np.random.default_rng(0))


def test_gammas_uniform_and_speakers_distinct(world, pool):
    rng = np.random.default_rng(1)
    gammas = []
    for _ in range(1000):
        s = make_mixture(world, pool, rng)
        assert s.y_spk != s.interferer_spk
        gammas += [s.gamma1, s.gamma2]
    gammas = np.array(gammas)
    assert gammas.min() >= 0.1 and gammas.max() <= 0.9
    assert stats.kstest(gammas, stats.uniform(0.1, 0.8).cdf).pvalue > 0.01


def test_protocol_lengths_and_linearity(world, pool):
    rng = np.random.default_rng(2)
    for protocol in ("min", "max"):
        for _ in range(50):
            s = make_mixture(world, pool, rng, protocol)
            src = [u for u in pool if u.words == s.transcript and u.speaker == s.y_spk][0]
            other = [u for u in pool if u.words == s.interferer_transcript and u.speaker == s.interferer_spk][0]
            pick = min if protocol == "min" else max
            assert len(s.mixture) == pick(len(src.waveform), len(other.waveform))
            rebuilt = s.gamma1 * s.target.samples + s.gamma2 * s.interferer.samples
            assert rebuilt.tobytes() == s.mixture.samples.tobytes()


def test_pair_needs_distinct_speakers(world, pool):
    with pytest.raises(ValueError):
        mix_utterances(world, pool[0], pool[1], np.random.default_rng(0))
    with pytest.raises(ValueError):
        make_mixture(world, pool[:4], np.random.default_rng(0))


def test_eval_set_negative_count_and_cues(world, pool):
    samples = make_eval_set(world, pool, 100, seed=3)
    negatives = [s for s in samples if not s.keyword_present]
    assert len(negatives) == 46  # seed-pinned
    assert 40 <= len(negatives) <= 60
    for s in samples:
        assert 1 <= len(s.cue.words) <= 4
        n = len(s.cue.words)
        in_target = any(s.transcript[i:i + n] == list(s.cue.words) for i in range(len(s.transcript)))
        in_other = any(s.interferer_transcript[i:i + n] == list(s.cue.words)
                       for i in range(len(s.interferer_transcript)))
        if s.keyword_present:
            assert in_target
            assert 0 <= s.true_start_frame <= s.true_end_frame < len(s.mixture) // 80 + 1
        else:
            assert not in_target and not in_other
            assert s.true_start_frame is None and s.true_end_frame is None


def test_eval_set_is_index_deterministic(world, pool):
    a = make_eval_set(world, pool, 6, seed=4)
    b = make_eval_set(world, pool, 10, seed=4)
    for x, y in zip(a, b):
        assert x.mixture.samples.tobytes() == y.mixture.samples.tobytes() and x.cue == y.cue


def test_ground_truth_frames_match_boundaries(world, pool):
    for s in make_eval_set(world, pool, 40, seed=5, negative_rate=0.0):
        u = next(u for u in pool if u.words == s.transcript and u.speaker == s.y_spk)
        a = u.word_bounds[s.cue.start_word][0]
        b = u.word_bounds[s.cue.stop_word - 1][1]
        assert abs(s.true_start_frame * 10 - a / 8) <= 10
        assert abs((s.true_end_frame + 1) * 10 - b / 8) <= 10


def test_word_frame_spans_are_inclusive():
    assert word_frame_spans([(0, 80), (80, 161)], 8000) == [(0, 0), (1, 2)]


def test_speaker_pools_are_disjoint(world):
    a, b = world.speaker_pools(5)
    assert not set(a) & set(b) and len(a) + len(b) == 8
    with pytest.raises(ValueError):
        world.speaker_pools(8)


def test_manifest_round_trip(tmp_path, world, pool):
    samples = make_eval_set(world, pool, 4, seed=6)
    path = write_manifest(samples, tmp_path)
    loaded = read_manifest(path)
    for s, r in zip(samples, loaded):
        assert r.cue == s.cue and r.keyword_present == s.keyword_present
        assert r.true_start_frame == s.true_start_frame and r.transcript == s.transcript
        assert np.max(np.abs(r.mixture.samples - s.mixture.samples)) < 1e-4
    again = read_manifest(path, world.lexicon)
    assert [s.cue.phoneme_ids for s in again] == [s.cue.phoneme_ids for s in samples]


def test_real_utterance_loader(tmp_path):
    write_wav(tmp_path / "a.wav", Waveform(np.zeros(800), 8000))
    (tmp_path / "pool.jsonl").write_text(
        '{"wav": "a.wav", "speaker": 3, "words": ["hi", "yo"], "word_bounds_s": [[0.01, 0.04], [0.05, 0.09]]}\n',
        encoding="utf-8")
    (u,) = load_utterance_pool(tmp_path / "pool.jsonl")
    assert isinstance(u, Utterance) and u.speaker == 3 and u.word_bounds == [(80, 320), (400, 720)]
