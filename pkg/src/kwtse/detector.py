"""Keyword detection and localisation by dynamic programming over a cross-attention map.

The map ``M`` is ``(K, T)``: one row per keyword phoneme, one column per
10 ms frame.  A path visits row 0 once (its start frame), then moves one
frame per step while the row index stays or advances by one, and ends
anywhere in the last row.  :func:`keyword_max_path` finds the highest-sum
path in O(K*T).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FRAME_MS = 10.0
DEFAULT_TAU = 0.33


class EmptyMapError(ValueError):
    pass


class NoPathError(ValueError):
    """The map has fewer frames than keyword rows, so no complete path exists."""


@dataclass
class DetectionResult:
    raw_score: float
    normalized_score: float
    start_frame: int | None
    trigger_frame: int | None
    detected: bool
    path: list[tuple[int, int]] = field(default_factory=list)
    scoring: str = "normalized"
    threshold: float = DEFAULT_TAU

    @property
    def score(self) -> float:
        return self.normalized_score if self.scoring == "normalized" else self.raw_score

    def to_json(self) -> dict:
        d = asdict(self)
        d["path"] = [list(c) for c in self.path]
        for k in ("raw_score", "normalized_score", "threshold"):
            if not math.isfinite(d[k]):
                d[k] = str(d[k])
        return d


def keyword_max_path(M) -> tuple[float, int, int, list[tuple[int, int]]]:
    """Return ``(S, i, j, path)``: best path score, start frame, trigger frame, cells.

    ``j`` is the frame at which the path first enters the last row.  For a
    single-row map the path is the single best cell ``t`` and ``(i, j) =
    (t, t + 1)``.  Ties between advancing and staying resolve to staying.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.size == 0:
        raise EmptyMapError(f"attention map must be a non-empty 2-D array, got shape {M.shape}")
    K, T = M.shape
    if K > T:
        raise NoPathError(f"{K} keyword rows cannot be traversed in {T} frames")

    dp = np.full((K, T), -np.inf)
    came_diag = np.zeros((K, T), dtype=bool)
    dp[0] = M[0]
    for k in range(1, K):
        prev_row, row = dp[k - 1], dp[k]
        for t in range(1, T):
            if prev_row[t - 1] > row[t - 1]:
                row[t] = prev_row[t - 1] + M[k, t]
                came_diag[k, t] = True
            else:
                row[t] = row[t - 1] + M[k, t]

    t_end = int(np.argmax(dp[K - 1]))
    S = float(dp[K - 1, t_end])
    path = [(K - 1, t_end)]
    k, t = K - 1, t_end
    j = None
    while k > 0:
        if came_diag[k, t]:
            k -= 1
        t -= 1
        if j is None and k < K - 1:
            j = t + 1
        path.append((k, t))
    i = t
    if j is None:  # single-row map: the path is one cell
        j = i + 1
    path.reverse()
    return S, i, j, path


def detect(M, tau: float = DEFAULT_TAU, scoring: str = "normalized") -> DetectionResult:
    """Run the max-path search and threshold the chosen score (``>=`` is inclusive)."""
    if scoring not in ("raw", "normalized"):
        raise ValueError(f"unknown scoring mode {scoring!r}")
    if not isinstance(tau, (int, float)) or math.isnan(tau):
        raise ValueError(f"threshold must be a number, got {tau!r}")
    try:
        S, i, j, path = keyword_max_path(M)
    except NoPathError:
        return DetectionResult(-math.inf, -math.inf, None, None, False, [], scoring, tau)
    norm = S / len(path)
    score = norm if scoring == "normalized" else S
    return DetectionResult(S, norm, i, j, bool(score >= tau), path, scoring, tau)


def frames_to_ms(frame_index: int | float) -> float:
    if frame_index < 0:
        raise ValueError(f"negative frame index {frame_index}")
    return float(frame_index) * FRAME_MS


def localization(result: DetectionResult) -> tuple[int, int]:
    """Map a detection to ``(start_frame, end_frame)``; the end is the frame before the trigger."""
    if result.start_frame is None or result.trigger_frame is None:
        raise ValueError("no path to localise")
    return result.start_frame, result.trigger_frame - 1


# ---------------------------------------------------------------------------
# Attention-map exchange format: {"shape": [K, T], "data": [[...], ...]}


def save_attention_map(path: str | Path, M) -> None:
    M = np.asarray(M, dtype=np.float64)
    Path(path).write_text(json.dumps({"shape": list(M.shape), "data": M.tolist()}), encoding="utf-8")


def load_attention_map(path: str | Path) -> np.ndarray:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    M = np.asarray(obj["data"], dtype=np.float64)
    if list(M.shape) != list(obj["shape"]):
        raise ValueError(f"{path}: declared shape {obj['shape']} but data has shape {list(M.shape)}")
    return M
