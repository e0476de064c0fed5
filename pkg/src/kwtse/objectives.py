"""Training objectives: CTC, speaker loss with layer-weight regulariser, joint cue-encoder loss, SI-SNR."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor

from . import autodiff as ad
from .signal import si_snr_tensor

ALPHA = 0.5
BETA = 0.01
_NEG = -1e30  # finite "log 0": keeps logsumexp gradients NaN-free


class CTCInfeasibleError(ValueError):
    """The label sequence cannot be aligned to the given number of frames."""


def ctc_min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_loss(
    log_probs: Tensor,
    targets,
    input_lengths: Sequence[int] | None = None,
    blank: int | None = None,
) -> Tensor:
    """Negative log-likelihood of ``targets`` under CTC, by the forward recursion in log space.

    ``log_probs`` is (T, C) with a 1-D target, or (B, T, C) with a list of
    targets; the blank defaults to the last class.  Returns a scalar or a
    (B,) tensor of per-sequence losses.
    """
    single = log_probs.dim() == 2
    if single:
        log_probs = log_probs[None]
        targets = [targets]
    b, t_max, n_classes = log_probs.shape
    blank = n_classes - 1 if blank is None else blank
    targets = [[int(v) for v in (y.tolist() if isinstance(y, Tensor) else y)] for y in targets]
    lengths = [t_max] * b if input_lengths is None else [int(n) for n in input_lengths]
    if len(targets) != b or len(lengths) != b:
        raise ValueError("batch size mismatch between log-probs, targets and lengths")

    for y, n in zip(targets, lengths):
        if any(not 0 <= v < n_classes or v == blank for v in y):
            raise ValueError(f"target ids must be non-blank classes in [0, {n_classes}), got {y}")
        if ctc_min_frames(y) > n:
            raise CTCInfeasibleError(f"target of length {len(y)} needs {ctc_min_frames(y)} frames, only {n} available")

    n_states = 2 * max((len(y) for y in targets), default=0) + 1
    ext = torch.full((b, n_states), blank, dtype=torch.long)
    skip = torch.zeros((b, n_states), dtype=torch.bool)
    for i, y in enumerate(targets):
        for j, label in enumerate(y):
            s = 2 * j + 1
            ext[i, s] = label
            skip[i, s] = j > 0 and y[j - 1] != label
    lp = log_probs.gather(2, ext[:, None, :].expand(b, t_max, n_states))

    neg = log_probs.new_full((b, 1), _NEG)
    # start in the leading blank or the first label (absent for empty targets)
    start = torch.zeros((b, n_states), dtype=torch.bool)
    start[:, 0] = True
    for i, y in enumerate(targets):
        if y:
            start[i, 1] = True
    alpha = torch.where(start, lp[:, 0], log_probs.new_full((b, n_states), _NEG))
    lengths_t = torch.tensor(lengths)
    for t in range(1, t_max):
        shift1 = torch.cat([neg, alpha[:, :-1]], dim=1)
        shift2 = torch.cat([neg, neg, alpha[:, :-2]], dim=1)[:, :n_states]
        shift2 = torch.where(skip, shift2, torch.full_like(shift2, _NEG))
        step = torch.logsumexp(torch.stack([alpha, shift1, shift2]), dim=0) + lp[:, t]
        alpha = torch.where((t < lengths_t)[:, None], step, alpha)

    losses = []
    for i, y in enumerate(targets):
        last = 2 * len(y)
        ends = alpha[i, last:last + 1] if not y else alpha[i, last - 1:last + 1]
        losses.append(-torch.logsumexp(ends, dim=0))
    out = torch.stack(losses)
    return out[0] if single else out


def ctc_greedy_decode(log_probs: Tensor, blank: int | None = None) -> list[int]:
    """Best-path decoding (diagnostics only)."""
    blank = log_probs.shape[-1] - 1 if blank is None else blank
    best = log_probs.argmax(-1).tolist()
    out, prev = [], None
    for p in best:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def layer_weight_reg(w: Tensor) -> Tensor:
    """``(||w|| - 1)^2``."""
    return (torch.linalg.vector_norm(w) - 1.0) ** 2


def speaker_ce(embedding: Tensor, classifier: Tensor, y_spk) -> Tensor:
    """Mean cross-entropy of the bias-free linear head ``embedding @ classifier.T``."""
    emb = embedding if embedding.dim() == 2 else embedding[None]
    y = torch.as_tensor(y_spk, dtype=torch.long).reshape(-1)
    n_classes = classifier.shape[0]
    if y.numel() != emb.shape[0]:
        raise ValueError(f"{y.numel()} labels for {emb.shape[0]} embeddings")
    if bool(((y < 0) | (y >= n_classes)).any()):
        raise ValueError(f"speaker label out of range [0, {n_classes}): {y.tolist()}")
    logp = ad.log_softmax(ad.matmul(emb, classifier.transpose(0, 1), name="speaker_head"), axis=-1)
    return -logp.gather(1, y[:, None]).mean()


@dataclass
class LossBreakdown:
    ctc: Tensor
    speaker_ce: Tensor
    reg: Tensor
    total: Tensor
    alpha: float = ALPHA
    beta: float = BETA

    def as_dict(self) -> dict[str, float]:
        return {
            "ctc": float(self.ctc.detach()),
            "speaker_ce": float(self.speaker_ce.detach()),
            "reg": float(self.reg.detach()),
            "total": float(self.total.detach()),
        }


def speaker_loss(
    embedding: Tensor,
    w: Tensor,
    y_spk,
    classifier: Tensor,
    beta: float = BETA,
    drop_reg: bool = False,
) -> tuple[Tensor, dict[str, Tensor]]:
    ce = speaker_ce(embedding, classifier, y_spk)
    reg = layer_weight_reg(w)
    total = ce if drop_reg else ce + beta * reg
    return total, {"speaker_ce": ce, "reg": reg}


def combine_kce_loss(
    ctc: Tensor,
    ce: Tensor,
    reg: Tensor,
    alpha: float = ALPHA,
    beta: float = BETA,
    drop_reg: bool = False,
    drop_speaker: bool = False,
    drop_ctc: bool = False,
) -> LossBreakdown:
    """``total = ctc + alpha * (ce + beta * reg)`` with ablation switches."""
    speaker = ce if drop_reg else ce + beta * reg
    total = ctc.new_zeros(())
    if not drop_ctc:
        total = total + ctc
    if not drop_speaker:
        total = total + alpha * speaker
    return LossBreakdown(ctc=ctc, speaker_ce=ce, reg=reg, total=total, alpha=alpha, beta=beta)


def kce_loss(
    kce_out,
    y_trans,
    y_spk,
    w: Tensor,
    classifier: Tensor,
    alpha: float = ALPHA,
    beta: float = BETA,
    drop_reg: bool = False,
    drop_speaker: bool = False,
    drop_ctc: bool = False,
) -> LossBreakdown:
    """Joint cue-encoder loss from a :class:`kwtse.kce.KceOutput` (batched)."""
    logp = ad.log_softmax(kce_out.ctc_logits, axis=-1, name="ctc_log_softmax")
    per_seq = ctc_loss(logp, y_trans, kce_out.frame_lengths)
    # per-label normalisation keeps the CTC term on the scale of the speaker term
    ctc = (per_seq / per_seq.new_tensor([max(len(y), 1) for y in y_trans])).mean()
    _, parts = speaker_loss(kce_out.speaker_embedding, w, y_spk, classifier, beta)
    return combine_kce_loss(ctc, parts["speaker_ce"], parts["reg"], alpha, beta, drop_reg, drop_speaker, drop_ctc)


def extraction_loss(reference: Tensor, estimate: Tensor) -> Tensor:
    """Negative epsilon-stabilised SI-SNR, averaged over a batch."""
    return -si_snr_tensor(reference, estimate).mean()
