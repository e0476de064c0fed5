"""Keyword-cued target speaker extraction: detect a spoken keyword, attend to its speaker, extract them."""

from .corpus import MixtureSample, SynthSpec, SyntheticWorld, make_eval_set, make_mixture
from .detector import DetectionResult, detect, keyword_max_path
from .extractor import BackboneConfig, BandSpec, BandSplitExtractor
from .kce import KceConfig, KeywordCueEncoder
from .pipeline import TrainConfig, infer, train_backbone, train_kce
from .signal import Waveform
from .textfront import KeywordCue, Lexicon

__all__ = [
    "BackboneConfig", "BandSpec", "BandSplitExtractor", "DetectionResult", "KceConfig", "KeywordCue",
    "KeywordCueEncoder", "Lexicon", "MixtureSample", "SynthSpec", "SyntheticWorld", "TrainConfig", "Waveform",
    "detect", "infer", "keyword_max_path", "make_eval_set", "make_mixture", "train_backbone", "train_kce",
]
