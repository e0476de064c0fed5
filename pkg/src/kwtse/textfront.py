"""Lexicon-based phonemization and keyword-span sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

TRAIN_SPAN = (2, 6)
EVAL_SPAN = (1, 4)


class OOVError(KeyError):
    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self) -> str:
        return f"word {self.word!r} is not in the lexicon"


@dataclass(frozen=True)
class Lexicon:
    pronunciations: dict[str, tuple[int, ...]]
    symbols: tuple[str, ...]

    def __post_init__(self) -> None:
        n = len(self.symbols)
        for word, pron in self.pronunciations.items():
            if not pron:
                raise ValueError(f"empty pronunciation for {word!r}")
            if any(not 0 <= p < n for p in pron):
                raise ValueError(f"phoneme id out of range in {word!r}: {pron}")

    @property
    def inventory_size(self) -> int:
        return len(self.symbols)

    @property
    def blank_id(self) -> int:
        return len(self.symbols)

    @property
    def words(self) -> list[str]:
        return list(self.pronunciations)

    def __contains__(self, word: str) -> bool:
        return word in self.pronunciations

    def __getitem__(self, word: str) -> tuple[int, ...]:
        try:
            return self.pronunciations[word]
        except KeyError:
            raise OOVError(word) from None


@dataclass(frozen=True)
class KeywordCue:
    words: tuple[str, ...]
    phoneme_ids: tuple[int, ...]
    # word offset of the span inside its source transcript, when known
    start_word: int | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not self.words:
            raise ValueError("a keyword cue needs at least one word")
        if not self.phoneme_ids:
            raise ValueError("a keyword cue needs at least one phoneme")

    @property
    def L_kw(self) -> int:
        return len(self.phoneme_ids)

    @property
    def stop_word(self) -> int | None:
        return None if self.start_word is None else self.start_word + len(self.words)


def phonemize(lexicon: Lexicon, words: Sequence[str], start_word: int | None = None) -> KeywordCue:
    ids: list[int] = []
    for w in words:
        ids.extend(lexicon[w])
    return KeywordCue(tuple(words), tuple(ids), start_word)


def sample_span(n_words: int, mode: str, rng: np.random.Generator, length: int | None = None) -> tuple[int, int]:
    """Draw a ``[start, stop)`` word span.

    Train mode draws the span length uniformly from 2..6, eval mode from 1..4;
    either is clipped to the transcript length.  ``length`` fixes it instead.
    """
    if n_words < 1:
        raise ValueError("cannot sample keywords from an empty transcript")
    if length is None:
        if mode == "train":
            lo, hi = TRAIN_SPAN
        elif mode == "eval":
            lo, hi = EVAL_SPAN
        else:
            raise ValueError(f"unknown mode {mode!r}")
        length = int(rng.integers(lo, hi + 1))
    length = max(1, min(int(length), n_words))
    start = int(rng.integers(0, n_words - length + 1))
    return start, start + length


def sample_keywords(
    lexicon: Lexicon,
    transcript: Sequence[str],
    mode: str,
    rng: np.random.Generator,
    length: int | None = None,
) -> KeywordCue:
    start, stop = sample_span(len(transcript), mode, rng, length)
    return phonemize(lexicon, transcript[start:stop], start_word=start)


# ---------------------------------------------------------------------------
# Files: ``word<TAB>p1 p2 ...`` plus a JSON sidecar fixing symbol -> id.


def load_lexicon(path: str | Path, symbols_path: str | Path | None = None) -> Lexicon:
    path = Path(path)
    symbols_path = Path(symbols_path) if symbols_path else path.with_suffix(".symbols.json")
    table: dict[str, int] = {}
    if symbols_path.exists():
        table = {s: int(i) for s, i in json.loads(symbols_path.read_text(encoding="utf-8")).items()}
    prons: dict[str, tuple[int, ...]] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        word, _, rest = line.partition("\t")
        phones = rest.split()
        if not phones:
            raise ValueError(f"{path}:{lineno}: empty pronunciation for {word!r}")
        for p in phones:
            table.setdefault(p, len(table))
        prons[word] = tuple(table[p] for p in phones)
    symbols = [""] * len(table)
    for s, i in table.items():
        symbols[i] = s
    return Lexicon(prons, tuple(symbols))


def save_lexicon(lexicon: Lexicon, path: str | Path, symbols_path: str | Path | None = None) -> None:
    path = Path(path)
    symbols_path = Path(symbols_path) if symbols_path else path.with_suffix(".symbols.json")
    lines = [f"{w}\t{' '.join(lexicon.symbols[p] for p in pron)}" for w, pron in lexicon.pronunciations.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    symbols_path.write_text(
        json.dumps({s: i for i, s in enumerate(lexicon.symbols)}, indent=1), encoding="utf-8"
    )
