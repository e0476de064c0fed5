"""Run configuration: ``section.key = value`` files with a fixed schema.

Precedence, lowest first: built-in defaults, the config file, ``--seed``,
then ``--set section.key=value`` overrides in command-line order.

Schema (section: keys)::

    run:        seed
    world:      phoneme_count lexicon_size speakers phoneme_duration_ms word_gap_ms
                crossfade_ms sample_rate words_per_utterance phonemes_per_word
                f0_range f1_range f2_range formant_scale_range lead_silence_ms
                tail_silence_ms rms
    data:       train_per_speaker eval_per_speaker n_extraction n_detection
                n_simulate simulate_protocol negative_rate
    kce:        N D D_kw heads keyword_layers ffn_mult
    backbone:   feature_dim num_blocks fusion window_len hop n_bands mask_hidden
    train_kce:  epochs steps_per_epoch batch_size lr_initial lr_final warmup_epochs
                grad_clip drop_reg drop_speaker drop_ctc
    train_tse:  same keys as train_kce
    eval:       tau scoring taus

Values are parsed by the type of the default: integers, floats, booleans
(``true``/``false``), strings, or comma-separated lists.
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Iterable

TAU_GRID = (0.23, 0.30, 0.33, 0.36, 0.48)

_TRAIN_KEYS = ("epochs", "steps_per_epoch", "batch_size", "lr_initial", "lr_final", "warmup_epochs",
               "grad_clip", "drop_reg", "drop_speaker", "drop_ctc")

DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {"seed": 0},
    "world": {
        "phoneme_count": 24,
        "lexicon_size": 12,
        "speakers": 8,
        "phoneme_duration_ms": 80.0,
        "word_gap_ms": 20.0,
        "crossfade_ms": 20.0,
        "sample_rate": 8000,
        "words_per_utterance": (3, 5),
        "phonemes_per_word": (2, 3),
        "f0_range": (90.0, 280.0),
        "f1_range": (300.0, 800.0),
        "f2_range": (1000.0, 2600.0),
        "formant_scale_range": (0.9, 1.1),
        "lead_silence_ms": (20.0, 150.0),
        "tail_silence_ms": 50.0,
        "rms": 0.1,
    },
    "data": {
        "train_per_speaker": 40,
        "eval_per_speaker": 10,
        "n_extraction": 200,
        "n_detection": 200,
        "n_simulate": 10,
        "simulate_protocol": "max",
        "negative_rate": 0.5,
    },
    "kce": {"N": 4, "D": 64, "D_kw": 32, "heads": 4, "keyword_layers": 2, "ffn_mult": 2},
    "backbone": {
        "feature_dim": 32,
        "num_blocks": 2,
        "fusion": "multiply",
        "window_len": 512,
        "hop": 128,
        "n_bands": 8,
        "mask_hidden": 64,
    },
    "train_kce": {
        "epochs": 30, "steps_per_epoch": 100, "batch_size": 6, "lr_initial": 3e-3, "lr_final": 3e-3,
        "warmup_epochs": 1, "grad_clip": 5.0, "drop_reg": False, "drop_speaker": False, "drop_ctc": False,
    },
    "train_tse": {
        "epochs": 24, "steps_per_epoch": 100, "batch_size": 4, "lr_initial": 3e-3, "lr_final": 1e-4,
        "warmup_epochs": 0, "grad_clip": 5.0, "drop_reg": False, "drop_speaker": False, "drop_ctc": False,
    },
    "eval": {"tau": 0.33, "scoring": "normalized", "taus": TAU_GRID},
}


class ConfigError(ValueError):
    """A configuration key or value failed validation; ``key`` names the culprit."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _parse_bool(key: str, text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ConfigError(key, f"expected true/false, got {text!r}")


def _parse_value(key: str, text: str, default: Any) -> Any:
    text = text.strip()
    try:
        if isinstance(default, bool):
            return _parse_bool(key, text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t for t in text.replace(" ", "").split(",") if t]
            kind = type(default[0]) if default else float
            return tuple(kind(t) for t in items)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {type(default).__name__}") from None
    return text


class Config:
    def __init__(self, values: dict[str, dict[str, Any]] | None = None):
        self.values = copy.deepcopy(DEFAULTS if values is None else values)

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def get(self, dotted: str) -> Any:
        section, key = _split(dotted)
        return self.values[section][key]

    def set(self, dotted: str, text: str) -> None:
        section, key = _split(dotted)
        self.values[section][key] = _parse_value(dotted, text, DEFAULTS[section][key])

    @property
    def seed(self) -> int:
        return int(self.values["run"]["seed"])

    def snapshot(self) -> str:
        """Effective configuration in the file format; loading it reproduces this object."""
        lines = []
        for section, entries in self.values.items():
            for key, value in entries.items():
                lines.append(f"{section}.{key} = {_format(value)}")
        return "\n".join(lines) + "\n"


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _split(dotted: str) -> tuple[str, str]:
    section, _, key = dotted.strip().partition(".")
    if section not in DEFAULTS:
        raise ConfigError(dotted, f"unknown section {section!r}")
    if key not in DEFAULTS[section]:
        raise ConfigError(dotted, f"unknown key {key!r} in section {section!r}")
    return section, key


def parse_lines(lines: Iterable[str], config: Config, origin: str = "<config>") -> Config:
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(key.strip() or f"{origin}:{n}", f"line {n} is not 'section.key = value'")
        config.set(key.strip(), value)
    return config


def load_config(path: str | Path | None = None, seed: int | None = None, overrides: Iterable[str] = ()) -> Config:
    config = Config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(str(path), "config file does not exist")
        parse_lines(p.read_text(encoding="utf-8").splitlines(), config, str(path))
    if seed is not None:
        config.values["run"]["seed"] = int(seed)
    for item in overrides:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(item, "override must look like section.key=value")
        config.set(key, value)
    return config
