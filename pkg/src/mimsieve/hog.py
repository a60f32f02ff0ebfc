"""Per-patch oriented-gradient energy: the scalar behind all token ranking.

Each patch is scored independently (no cross-patch reads), so scores are
stable under cropping and can be computed per patch in parallel.  The score
is the L1 or L2 norm of a single magnitude-weighted orientation histogram
per patch; deliberately no block contrast normalization, which would erase
the energy ordering the selection rules rank by.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .imaging import LUMA_WEIGHTS, PatchGrid


@dataclass
class SemanticScores:
    """Non-negative per-patch scores aligned with PatchGrid patch order."""

    scores: np.ndarray
    reduction: str

    def __len__(self) -> int:
        return len(self.scores)


def hog_score(grid: PatchGrid, bins: int = 9, reduction: str = "l2") -> SemanticScores:
    """Score every patch by its oriented-gradient histogram norm.

    Gradients use centered differences in the interior and one-sided
    differences at patch borders.  Orientations are unsigned in [0, 180);
    each magnitude vote is split linearly between the two nearest bins
    (bin centers at (k + 0.5) * 180/bins).  A constant patch scores 0.
    """
    if bins < 2:
        raise ContractError(f"hog_score: bins must be >= 2, got {bins}")
    if reduction not in ("l1", "l2"):
        raise ContractError(f"hog_score: unknown reduction {reduction!r}")
    if grid.n == 0:
        raise ContractError("hog_score: empty patch grid")

    p, c, n = grid.patch_size, grid.channels, grid.n
    patches = grid.patches.astype(np.float64, copy=False).reshape(n, p, p, c)
    if c == 3:
        gray = patches @ LUMA_WEIGHTS
    else:
        gray = patches[:, :, :, 0]

    # np.gradient: centered interior, one-sided (first-order) at borders
    gy, gx = np.gradient(gray, axis=(1, 2))
    magnitude = np.hypot(gx, gy)
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0

    width = 180.0 / bins
    position = angle / width - 0.5
    lower = np.floor(position)
    frac = position - lower
    lo_bin = lower.astype(np.int64) % bins
    hi_bin = (lo_bin + 1) % bins

    patch_idx = np.repeat(np.arange(n), p * p)
    flat_mag = magnitude.reshape(n, -1).ravel()
    flat_frac = frac.reshape(n, -1).ravel()
    hist = np.bincount(
        patch_idx * bins + lo_bin.reshape(n, -1).ravel(),
        weights=flat_mag * (1.0 - flat_frac),
        minlength=n * bins,
    )
    hist += np.bincount(
        patch_idx * bins + hi_bin.reshape(n, -1).ravel(),
        weights=flat_mag * flat_frac,
        minlength=n * bins,
    )
    hist = hist.reshape(n, bins)

    if reduction == "l1":
        scores = hist.sum(axis=1)
    else:
        scores = np.sqrt((hist * hist).sum(axis=1))
    return SemanticScores(scores=scores, reduction=reduction)


def top_k_by_score(scores, candidates, k: int) -> list[int]:
    """Indices of the k largest scores among ``candidates``.

    Ties break by ascending index; the result is ordered by descending
    score, then ascending index.  ``scores`` may be a SemanticScores or any
    indexable array of per-token values.
    """
    if isinstance(scores, SemanticScores):
        scores = scores.scores
    cand = np.fromiter(candidates, dtype=np.int64) if not isinstance(candidates, np.ndarray) else candidates.astype(np.int64, copy=False)
    if k > cand.size:
        raise ContractError(f"top_k_by_score: k={k} exceeds candidate count {cand.size}")
    if k < 0:
        raise ContractError(f"top_k_by_score: k must be non-negative, got {k}")
    if k == 0:
        return []
    vals = np.asarray(scores)[cand]
    order = np.lexsort((cand, -vals))
    return cand[order[:k]].tolist()
