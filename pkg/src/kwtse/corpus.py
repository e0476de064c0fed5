"""Synthetic two-speaker speech world and dataset assembly.

Each phoneme is a harmonic complex whose spectral envelope peaks at two
phoneme-specific formants (scaled per speaker); each speaker has its own
fundamental frequency.  Content is therefore recoverable from the envelope
and identity from the pitch, which is enough for a small cue encoder to
learn both tasks.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .signal import Waveform, align_lengths, read_wav, write_wav
from .textfront import KeywordCue, Lexicon, OOVError, phonemize, sample_span

FRAME_SHIFT_MS = 10.0


@dataclass
class SynthSpec:
    phoneme_count: int = 24
    lexicon_size: int = 40
    speakers: int = 8
    phoneme_duration_ms: float = 80.0
    word_gap_ms: float = 20.0
    crossfade_ms: float = 20.0
    sample_rate: int = 8000
    words_per_utterance: tuple[int, int] = (3, 6)
    phonemes_per_word: tuple[int, int] = (2, 3)
    f0_range: tuple[float, float] = (90.0, 280.0)
    f1_range: tuple[float, float] = (300.0, 800.0)
    f2_range: tuple[float, float] = (1000.0, 2600.0)
    formant_scale_range: tuple[float, float] = (0.9, 1.1)
    lead_silence_ms: tuple[float, float] = (20.0, 150.0)
    tail_silence_ms: float = 50.0
    rms: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("phoneme_count", "lexicon_size", "speakers", "phoneme_duration_ms", "sample_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        self.words_per_utterance = tuple(self.words_per_utterance)
        self.phonemes_per_word = tuple(self.phonemes_per_word)
        self.f0_range = tuple(self.f0_range)
        self.f1_range = tuple(self.f1_range)
        self.f2_range = tuple(self.f2_range)
        self.formant_scale_range = tuple(self.formant_scale_range)
        self.lead_silence_ms = tuple(self.lead_silence_ms)

    def samples(self, ms: float) -> int:
        return int(round(self.sample_rate * ms / 1000.0))


@dataclass(frozen=True)
class Speaker:
    id: int
    f0: float
    formant_scale: float


@dataclass
class Utterance:
    speaker: int
    words: list[str]
    waveform: Waveform
    word_bounds: list[tuple[int, int]]  # [start, stop) in samples


@dataclass
class MixtureSample:
    mixture: Waveform
    target: Waveform  # aligned to the mixture, unscaled
    interferer: Waveform
    gamma1: float
    gamma2: float
    transcript: list[str]
    word_frames: list[tuple[int, int]]  # inclusive frame span of each target word
    y_spk: int
    interferer_spk: int
    cue: KeywordCue
    keyword_present: bool
    true_start_frame: int | None = None
    true_end_frame: int | None = None
    protocol: str = "max"
    interferer_transcript: list[str] = field(default_factory=list)


class SyntheticWorld:
    """Phoneme inventory, speakers and lexicon derived deterministically from ``spec.seed``."""

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 1])
        n = spec.phoneme_count
        cols = int(np.ceil(np.sqrt(n * 1.5)))
        rows = int(np.ceil(n / cols))
        f1_levels = np.linspace(*spec.f1_range, rows)
        f2_levels = np.linspace(*spec.f2_range, cols)
        grid = [(f1, f2) for f1 in f1_levels for f2 in f2_levels][:n]
        jitter = rng.uniform(-0.03, 0.03, size=(n, 2))
        self.formants = np.array(grid) * (1.0 + jitter)

        f0s = np.geomspace(*spec.f0_range, spec.speakers)
        scales = rng.permutation(np.linspace(*spec.formant_scale_range, spec.speakers))
        self.speakers = [Speaker(i, float(f0s[i]), float(scales[i])) for i in range(spec.speakers)]

        lo, hi = spec.phonemes_per_word
        prons: dict[str, tuple[int, ...]] = {}
        while len(prons) < spec.lexicon_size:
            pron = tuple(int(p) for p in rng.integers(0, n, size=rng.integers(lo, hi + 1)))
            if pron not in prons.values():
                prons[f"w{len(prons):02d}"] = pron
        self.lexicon = Lexicon(prons, tuple(f"p{i:02d}" for i in range(n)))

    # -- synthesis ----------------------------------------------------------

    def _envelope(self, phoneme: int, speaker: Speaker, freqs: np.ndarray) -> np.ndarray:
        f1, f2 = self.formants[phoneme] * speaker.formant_scale
        peak1 = 1.0 / (1.0 + ((freqs - f1) / 90.0) ** 2)
        peak2 = 0.7 / (1.0 + ((freqs - f2) / 140.0) ** 2)
        return peak1 + peak2 + 0.02

    def synthesize_word(self, word: str, speaker: Speaker, f0: float, rng: np.random.Generator) -> np.ndarray:
        spec = self.spec
        pron = self.lexicon[word]
        sr = spec.sample_rate
        seg = spec.samples(spec.phoneme_duration_ms)
        n = seg * len(pron)
        t = np.arange(n)
        # slow pitch movement inside the word
        contour = f0 * (1.0 + 0.02 * np.sin(2 * np.pi * t / n * rng.uniform(0.5, 1.5) + rng.uniform(0, 2 * np.pi)))
        phase = 2 * np.pi * np.cumsum(contour) / sr
        n_harm = int((0.95 * sr / 2) // (f0 * 1.03))
        h = np.arange(1, n_harm + 1)
        amps = np.stack([self._envelope(p, speaker, h * f0) for p in pron])  # (P, H)
        # blend amplitude vectors linearly across each boundary over the cross-fade
        cf = max(spec.samples(spec.crossfade_ms), 1)
        A = np.repeat(amps[:1], n, axis=0)
        for k in range(1, len(pron)):
            lam = np.clip((t - (k * seg - cf / 2)) / cf, 0.0, 1.0)[:, None]
            A += lam * (amps[k] - amps[k - 1])
        y = np.einsum("th,th->t", A, np.sin(np.outer(phase, h) + rng.uniform(0, 2 * np.pi, n_harm)))
        ramp = min(spec.samples(10.0), n // 2)
        edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        y[:ramp] *= edge
        y[n - ramp:] *= edge[::-1]
        return y

    def synthesize_utterance(
        self, speaker_id: int, words: Sequence[str], rng: np.random.Generator
    ) -> tuple[Waveform, list[tuple[int, int]]]:
        """Render ``words`` for one speaker; returns the waveform and per-word sample bounds."""
        spec = self.spec
        for w in words:
            if w not in self.lexicon:
                raise OOVError(w)
        speaker = self.speakers[speaker_id]
        f0 = speaker.f0 * (1.0 + rng.uniform(-0.03, 0.03))
        pieces: list[np.ndarray] = [np.zeros(spec.samples(rng.uniform(*spec.lead_silence_ms)))]
        bounds = []
        pos = len(pieces[0])
        gap = np.zeros(spec.samples(spec.word_gap_ms))
        for n, w in enumerate(words):
            if n:
                pieces.append(gap)
                pos += len(gap)
            y = self.synthesize_word(w, speaker, f0, rng)
            bounds.append((pos, pos + len(y)))
            pieces.append(y)
            pos += len(y)
        pieces.append(np.zeros(spec.samples(spec.tail_silence_ms)))
        y = np.concatenate(pieces)
        y *= spec.rms / np.sqrt(np.mean(y**2))
        return Waveform(y, spec.sample_rate), bounds

    def random_transcript(self, rng: np.random.Generator) -> list[str]:
        lo, hi = self.spec.words_per_utterance
        n = min(int(rng.integers(lo, hi + 1)), len(self.lexicon.words))
        return [str(w) for w in rng.choice(self.lexicon.words, size=n, replace=False)]

    def make_utterance(self, speaker_id: int, rng: np.random.Generator) -> Utterance:
        words = self.random_transcript(rng)
        wav, bounds = self.synthesize_utterance(speaker_id, words, rng)
        return Utterance(speaker_id, words, wav, bounds)

    def build_pool(self, per_speaker: int, seed: int, speakers: Iterable[int] | None = None) -> list[Utterance]:
        speakers = list(range(self.spec.speakers)) if speakers is None else list(speakers)
        pool = []
        for s in speakers:
            for k in range(per_speaker):
                pool.append(self.make_utterance(s, np.random.default_rng([seed, s, k])))
        return pool

    def speaker_pools(self, n_pretrain: int) -> tuple[list[int], list[int]]:
        """Disjoint speaker sets for cue-encoder pre-training and backbone training."""
        ids = list(range(self.spec.speakers))
        if not 0 < n_pretrain < len(ids):
            raise ValueError("pre-training pool must leave speakers for the backbone")
        return ids[:n_pretrain], ids[n_pretrain:]


# ---------------------------------------------------------------------------
# Mixtures


def samples_to_frame(sample: int, sample_rate: int) -> int:
    return int(sample // (sample_rate * FRAME_SHIFT_MS / 1000.0))


def word_frame_spans(bounds: Sequence[tuple[int, int]], sample_rate: int) -> list[tuple[int, int]]:
    return [(samples_to_frame(a, sample_rate), samples_to_frame(b - 1, sample_rate)) for a, b in bounds]


def _contains_run(transcript: Sequence[str], words: Sequence[str]) -> bool:
    n = len(words)
    return any(list(transcript[i:i + n]) == list(words) for i in range(len(transcript) - n + 1))


def mix_utterances(
    world: SyntheticWorld,
    target: Utterance,
    interferer: Utterance,
    rng: np.random.Generator,
    protocol: str = "max",
    mode: str = "train",
    negative_source: Utterance | None = None,
    cue_words: int | None = None,
) -> MixtureSample:
    """Scale and combine two utterances and attach a keyword cue.

    The cue comes from the target's words that survive the protocol, or, for
    a negative, from ``negative_source``, re-drawn until it is not a run of
    either mixture transcript.
    """
    if target.speaker == interferer.speaker:
        raise ValueError("target and interferer must be different speakers")
    sr = world.spec.sample_rate
    g1, g2 = (float(g) for g in rng.uniform(0.1, 0.9, size=2))
    y, n = align_lengths(target.waveform.samples, interferer.waveform.samples, protocol)
    mixture = Waveform(g1 * y + g2 * n, sr)
    length = len(y)
    visible = [k for k, (_, b) in enumerate(target.word_bounds) if b <= length]
    frames = word_frame_spans(target.word_bounds, sr)

    if negative_source is None:
        start, stop = sample_span(len(visible), mode, rng, cue_words)
        cue = phonemize(world.lexicon, target.words[start:stop], start_word=start)
        present, s_frame, e_frame = True, frames[start][0], frames[stop - 1][1]
    else:
        for _ in range(1000):
            a, b = sample_span(len(negative_source.words), mode, rng, cue_words)
            words = negative_source.words[a:b]
            if not _contains_run(target.words, words) and not _contains_run(interferer.words, words):
                break
        else:
            raise RuntimeError("could not draw a keyword absent from both transcripts")
        cue = phonemize(world.lexicon, words)
        present, s_frame, e_frame = False, None, None

    return MixtureSample(
        mixture=mixture,
        target=Waveform(y, sr),
        interferer=Waveform(n, sr),
        gamma1=g1,
        gamma2=g2,
        transcript=list(target.words),
        word_frames=frames,
        y_spk=target.speaker,
        interferer_spk=interferer.speaker,
        cue=cue,
        keyword_present=present,
        true_start_frame=s_frame,
        true_end_frame=e_frame,
        protocol=protocol,
        interferer_transcript=list(interferer.words),
    )


def _pick_pair(pool: Sequence[Utterance], rng: np.random.Generator) -> tuple[Utterance, Utterance]:
    while True:
        a, b = rng.choice(len(pool), size=2, replace=False)
        if pool[a].speaker != pool[b].speaker:
            return pool[a], pool[b]


def make_mixture(
    world: SyntheticWorld,
    pool: Sequence[Utterance],
    rng: np.random.Generator,
    protocol: str = "max",
    mode: str = "train",
) -> MixtureSample:
    """Online mixing: two utterances of different speakers drawn from ``pool``."""
    if len({u.speaker for u in pool}) < 2:
        raise ValueError("pool needs at least two speakers")
    target, interferer = _pick_pair(pool, rng)
    return mix_utterances(world, target, interferer, rng, protocol, mode)


def make_eval_set(
    world: SyntheticWorld,
    pool: Sequence[Utterance],
    n_samples: int,
    seed: int,
    protocol: str = "max",
    negative_rate: float = 0.5,
    cue_words: int | None = None,
) -> list[MixtureSample]:
    """Fixed evaluation mixtures; each is negative with probability ``negative_rate``.

    Sample ``k`` depends only on ``(seed, k)`` and the pool.
    """
    if n_samples < 2:
        raise ValueError("an evaluation set needs at least two samples")
    out = []
    for k in range(n_samples):
        rng = np.random.default_rng([seed, k])
        target, interferer = _pick_pair(pool, rng)
        negative = rng.random() < negative_rate
        source = None
        if negative:
            # a source needs a word neither speaker says, or no absent span can exist
            spoken = set(target.words) | set(interferer.words)
            others = [u for u in pool if u.speaker not in (target.speaker, interferer.speaker)
                      and not spoken.issuperset(u.words)]
            if not others:
                raise ValueError("negatives need utterances from a third speaker")
            source = others[int(rng.integers(len(others)))]
        out.append(mix_utterances(world, target, interferer, rng, protocol, "eval", source, cue_words))
    return out


# ---------------------------------------------------------------------------
# Manifests: one JSON object per line, WAV paths relative to the manifest.


def write_manifest(samples: Sequence[MixtureSample], directory: str | Path, name: str = "manifest.jsonl") -> Path:
    directory = Path(directory)
    (directory / "wav").mkdir(parents=True, exist_ok=True)
    lines = []
    for k, s in enumerate(samples):
        paths = {}
        for role in ("mixture", "target", "interferer"):
            rel = f"wav/{k:05d}_{role}.wav"
            write_wav(directory / rel, getattr(s, role))
            paths[role] = rel
        lines.append(json.dumps({
            "id": k,
            **paths,
            "sample_rate": s.mixture.sample_rate,
            "protocol": s.protocol,
            "gamma1": s.gamma1,
            "gamma2": s.gamma2,
            "transcript": s.transcript,
            "word_frames": [list(f) for f in s.word_frames],
            "interferer_transcript": s.interferer_transcript,
            "target_speaker": s.y_spk,
            "interferer_speaker": s.interferer_spk,
            "cue_words": list(s.cue.words),
            "cue_phonemes": list(s.cue.phoneme_ids),
            "cue_start_word": s.cue.start_word,
            "keyword_present": s.keyword_present,
            "true_start_frame": s.true_start_frame,
            "true_end_frame": s.true_end_frame,
        }, sort_keys=True))
    path = directory / name
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path: str | Path, lexicon: Lexicon | None = None) -> list[MixtureSample]:
    """Load a manifest written by :func:`write_manifest` (or real data in the same schema)."""
    path = Path(path)
    root = path.parent
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        wavs = {r: read_wav(root / d[r]) for r in ("mixture", "target", "interferer")}
        if lexicon is not None:
            cue = phonemize(lexicon, d["cue_words"], d.get("cue_start_word"))
        else:
            cue = KeywordCue(tuple(d["cue_words"]), tuple(d["cue_phonemes"]), d.get("cue_start_word"))
        out.append(MixtureSample(
            mixture=wavs["mixture"], target=wavs["target"], interferer=wavs["interferer"],
            gamma1=d["gamma1"], gamma2=d["gamma2"], transcript=d["transcript"],
            word_frames=[tuple(f) for f in d.get("word_frames", [])],
            y_spk=d["target_speaker"], interferer_spk=d["interferer_speaker"], cue=cue,
            keyword_present=d["keyword_present"], true_start_frame=d.get("true_start_frame"),
            true_end_frame=d.get("true_end_frame"), protocol=d.get("protocol", "max"),
            interferer_transcript=d.get("interferer_transcript", []),
        ))
    return out


def load_utterance_pool(path: str | Path) -> list[Utterance]:
    """Real clean utterances from JSON-lines ``{"wav", "speaker", "words", "word_bounds_s"}``.

    ``word_bounds_s`` holds ``[start, end]`` seconds per word.
    """
    path = Path(path)
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        wav = read_wav(path.parent / d["wav"])
        bounds = [(int(round(a * wav.sample_rate)), int(round(b * wav.sample_rate))) for a, b in d["word_bounds_s"]]
        out.append(Utterance(int(d["speaker"]), list(d["words"]), wav, bounds))
    return out


def spec_to_json(spec: SynthSpec) -> str:
    return json.dumps(asdict(spec), indent=1, sort_keys=True)
