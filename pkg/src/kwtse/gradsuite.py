"""Finite-difference gradient checks for every primitive and both training losses."""

from __future__ import annotations

from typing import Callable

import torch
from torch import nn

from . import autodiff as ad
from .autodiff import DTYPE, Graph, GradCheckReport, grad_check
from .extractor import BackboneConfig, BandSpec, BandSplitExtractor
from .kce import KceConfig, KeywordCueEncoder
from .objectives import extraction_loss, kce_loss

PRIMITIVE_TOLERANCE = 1e-5
ISTFT_TOLERANCE = 1e-4


class _Params(nn.Module):
    def __init__(self, **shapes):
        super().__init__()
        for name, shape in shapes.items():
            setattr(self, name, nn.Parameter(torch.empty(*shape, dtype=DTYPE)))


def _weights(shape, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=DTYPE)


def _projected(out: torch.Tensor, seed: int = 99) -> torch.Tensor:
    # a random linear functional, so outputs with constant sums still carry gradient
    return (out * _weights(out.shape, seed)).sum()


def _primitive_graph(op: str, seed: int = 0) -> tuple[Graph, dict]:
    g = torch.Generator().manual_seed(seed)

    def rand(*shape):
        return torch.randn(*shape, generator=g, dtype=DTYPE)

    if op == "matmul":
        m = _Params(a=(3, 4), b=(4, 2))
        fwd = lambda m: {"loss": _projected(ad.matmul(m.a, m.b))}
    elif op in ("add", "mul"):
        m = _Params(a=(3, 4), b=(4,))
        f = getattr(ad, op)
        fwd = lambda m: {"loss": _projected(f(m.a, m.b))}
    elif op in ("softmax", "log_softmax", "gelu", "tanh", "sigmoid"):
        m = _Params(x=(3, 5))
        f = getattr(ad, op)
        fwd = lambda m: {"loss": _projected(f(m.x))}
    elif op == "relu":
        m = _Params(x=(3, 5))
        fwd = lambda m: {"loss": _projected(ad.relu(m.x))}
    elif op == "layer_norm":
        m = _Params(x=(3, 6), gain=(6,), bias=(6,))
        fwd = lambda m: {"loss": _projected(ad.layer_norm(m.x, m.gain, m.bias))}
    elif op == "embedding":
        m = _Params(table=(5, 3))
        ids = torch.tensor([[0, 3, 3], [4, 1, 0]])
        fwd = lambda m: {"loss": _projected(ad.embedding(m.table, ids))}
    elif op == "mean":
        m = _Params(x=(2, 5, 3))
        mask = torch.tensor([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=torch.bool)[..., None]
        fwd = lambda m: {"loss": _projected(ad.mean(m.x, axis=1, mask=mask))}
    elif op == "concat":
        m = _Params(a=(2, 3), b=(2, 2))
        fwd = lambda m: {"loss": _projected(ad.concat([m.a, m.b], axis=-1))}
    elif op == "gru":
        m = ad.GRU(3, 2, bidirectional=True)
        x = rand(2, 4, 3)
        fwd = lambda m: {"loss": _projected(m(x, axis=1))}
    else:
        raise KeyError(f"no gradient check defined for {op!r}")

    graph = Graph(m, fwd, seed=seed)
    with torch.no_grad():
        for name, p in m.named_parameters():
            p.copy_(rand(*p.shape) * 0.8)
            if op == "relu":  # keep away from the kink
                p.copy_(torch.where(p.abs() < 0.1, p.sign() * 0.1 + p, p))
    return graph, {}


def tiny_kce_graph(seed: int = 0) -> tuple[Graph, dict]:
    """Joint CTC + speaker loss through a two-block cue encoder on random features."""
    cfg = KceConfig(inventory_size=4, speaker_count=3, N=2, D=8, D_kw=4, heads=2, keyword_layers=1,
                    ffn_mult=2, feature_dim=6)
    model = KeywordCueEncoder(cfg)
    gen = torch.Generator().manual_seed(seed + 7)
    feats = torch.randn(2, 12, 6, generator=gen, dtype=DTYPE)
    phon = torch.tensor([[0, 2, 1], [3, 1, 0]])
    targets = [[0, 2, 1, 1], [3, 0]]

    def fwd(m, features, phonemes):
        out = m(features, phonemes, [12, 10], [3, 2])
        losses = kce_loss(out, targets, [2, 0], m.layer_weights, m.speaker_head)
        return {"loss": losses.total}

    return Graph(model, fwd, {"features": (2, 12, 6), "phonemes": (2, 3)}, seed=seed), {
        "features": feats, "phonemes": phon}


def tiny_extraction_graph(seed: int = 0) -> tuple[Graph, dict]:
    """Negative SI-SNR through STFT, a one-block band-split extractor and ISTFT."""
    cfg = BackboneConfig(embedding_dim=5, feature_dim=4, num_blocks=1, window_len=32, hop=8,
                         bands=BandSpec.uniform(17, 3), mask_hidden=6)
    model = BandSplitExtractor(cfg)
    gen = torch.Generator().manual_seed(seed + 11)
    mix = torch.randn(2, 64, generator=gen, dtype=DTYPE)
    ref = torch.randn(2, 64, generator=gen, dtype=DTYPE)
    emb = torch.randn(2, 5, generator=gen, dtype=DTYPE)

    def fwd(m, mixture, reference, embedding):
        return {"loss": extraction_loss(reference, m(mixture, embedding))}

    graph = Graph(model, fwd, {"mixture": (2, 64), "reference": (2, 64), "embedding": (2, 5)}, seed=seed)
    return graph, {"mixture": mix, "reference": ref, "embedding": emb}


CHECKS: dict[str, tuple[Callable[[], tuple[Graph, dict]], float]] = {
    **{op: ((lambda op=op: _primitive_graph(op)), PRIMITIVE_TOLERANCE) for op in ad.PRIMITIVES},
    "kce_loss": (tiny_kce_graph, PRIMITIVE_TOLERANCE),
    "extraction_loss": (tiny_extraction_graph, ISTFT_TOLERANCE),
}


def run_check(name: str, max_entries: int | None = 12) -> GradCheckReport:
    build, tol = CHECKS[name]
    graph, inputs = build()
    return grad_check(graph, inputs, tolerance=tol, max_entries=max_entries)


def run_suite(max_entries: int | None = 12) -> dict[str, GradCheckReport]:
    return {name: run_check(name, max_entries) for name in CHECKS}
