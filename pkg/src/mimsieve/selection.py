"""Encode-set and reconstruction-target planning.

Given per-patch gradient-energy scores and patch embeddings, a plan for one
sample at one epoch picks:

* an init set: the highest-scoring ``floor(init_ratio * N)`` tokens,
* a staged growth set from the unselected pool, ranked by distance to the
  init set under a stage-dependent criterion (nearest first, then farthest,
  then random), and
* reconstruction targets: the highest-scoring ``floor(recon_ratio * N)``
  tokens among the masked complement.

All cardinalities use plain floor arithmetic.  Plans are pure functions of
(scores, embeddings, config, epoch, seed).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import ContractError
from .hog import SemanticScores, top_k_by_score

logger = logging.getLogger(__name__)

_EPS = 1e-12

PATTERNS = ("near_far_random", "far_near_random")
MEASURES = ("cosine", "euclidean", "manhattan")


def floor_count(ratio: float, n: int) -> int:
    """floor(ratio * n) with plain float arithmetic, as used everywhere."""
    return int(math.floor(ratio * n))


@dataclass
class SelectionConfig:
    """Knobs of the selection rules.

    ``init_ratio`` defaults to its upper bound (1 - mask_ratio) / 2.
    """

    mask_ratio: float = 0.85
    recon_ratio: float = 0.25
    init_ratio: float | None = None
    num_stages: int = 3
    total_epochs: int = 800
    pattern: str = "near_far_random"
    measure: str = "cosine"

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ContractError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")
        if self.init_ratio is None:
            self.init_ratio = (1.0 - self.mask_ratio) / 2.0
        if not 0.0 <= self.recon_ratio <= self.mask_ratio + _EPS:
            raise ContractError(
                f"recon_ratio must be in [0, mask_ratio], got recon_ratio={self.recon_ratio} "
                f"with mask_ratio={self.mask_ratio}"
            )
        if not 0.0 <= self.init_ratio <= (1.0 - self.mask_ratio) / 2.0 + _EPS:
            raise ContractError(
                f"init_ratio must be in [0, (1 - mask_ratio)/2], got {self.init_ratio}"
            )
        if self.num_stages < 1:
            raise ContractError(f"num_stages must be >= 1, got {self.num_stages}")
        if self.total_epochs < self.num_stages:
            raise ContractError(
                f"total_epochs ({self.total_epochs}) must be >= num_stages ({self.num_stages})"
            )
        if self.pattern not in PATTERNS:
            raise ContractError(f"pattern must be one of {PATTERNS}, got {self.pattern!r}")
        if self.measure not in MEASURES:
            raise ContractError(f"measure must be one of {MEASURES}, got {self.measure!r}")


@dataclass
class SelectionPlan:
    """Outcome of planning one sample at one epoch.

    ``encode_set`` = init_set ∪ psts_set (ascending); ``masked_set`` is its
    complement; ``reconstruction_targets`` ⊆ masked_set.  For uniform-random
    baseline plans ``stage`` is 0 and init/psts hold the whole visible set.
    """

    epoch: int
    stage: int
    encode_set: list[int]
    init_set: list[int]
    psts_set: list[int]
    reconstruction_targets: list[int]
    masked_set: list[int]

    def __post_init__(self):
        enc = set(self.encode_set)
        if not set(self.init_set) <= enc:
            raise ContractError("SelectionPlan: init_set must be a subset of encode_set")
        if enc & set(self.masked_set):
            raise ContractError("SelectionPlan: encode_set and masked_set must be disjoint")
        if not set(self.reconstruction_targets) <= set(self.masked_set):
            raise ContractError("SelectionPlan: reconstruction targets must be masked tokens")


def stage_of(epoch: int, num_stages: int, total_epochs: int) -> int:
    """Curriculum stage index: ceil(num_stages * epoch / total_epochs)."""
    if not 1 <= epoch <= total_epochs:
        raise ContractError(f"epoch {epoch} outside [1, {total_epochs}]")
    return -((-num_stages * epoch) // total_epochs)


def init_token_set(scores: SemanticScores, cfg: SelectionConfig, n: int) -> list[int]:
    """Top floor(init_ratio * N) tokens by score, over all N tokens."""
    if len(scores) != n:
        raise ContractError(f"init_token_set: got {len(scores)} scores for N={n}")
    k = floor_count(cfg.init_ratio, n)
    if k == 0 and cfg.init_ratio > 0:
        logger.warning("init_token_set: init_ratio %.4f floors to an empty set at N=%d", cfg.init_ratio, n)
    return top_k_by_score(scores, np.arange(n), k)


def distance_matrix(unselected: np.ndarray, init: np.ndarray, measure: str = "cosine") -> np.ndarray:
    """Pairwise distances between unselected-token and init-token embeddings.

    cosine: 1 - u.v/(|u||v|), in [0, 2]; zero-norm rows are treated as
    distance 1 to everything (orthogonal convention, logged once per call).
    euclidean / manhattan are the plain L2 / L1 differences.
    """
    u = np.asarray(unselected, dtype=np.float64)
    v = np.asarray(init, dtype=np.float64)
    if u.ndim != 2 or v.ndim != 2 or (u.size and v.size and u.shape[1] != v.shape[1]):
        raise ContractError(f"distance_matrix: bad shapes {u.shape} and {v.shape}")
    if measure == "cosine":
        nu = np.linalg.norm(u, axis=1)
        nv = np.linalg.norm(v, axis=1)
        zero_u, zero_v = nu == 0.0, nv == 0.0
        if zero_u.any() or zero_v.any():
            logger.warning("distance_matrix: %d zero-norm rows treated as distance 1", int(zero_u.sum() + zero_v.sum()))
        denom = np.outer(np.where(zero_u, 1.0, nu), np.where(zero_v, 1.0, nv))
        d = 1.0 - (u @ v.T) / denom
        if zero_u.any():
            d[zero_u, :] = 1.0
        if zero_v.any():
            d[:, zero_v] = 1.0
        return np.clip(d, 0.0, 2.0)
    if measure == "euclidean":
        diff = u[:, None, :] - v[None, :, :]
        return np.sqrt((diff * diff).sum(axis=2))
    if measure == "manhattan":
        return np.abs(u[:, None, :] - v[None, :, :]).sum(axis=2)
    raise ContractError(f"distance_matrix: unknown measure {measure!r}")


def stage_scores(
    d: np.ndarray,
    stage: int,
    pattern: str,
    rng_seed: int,
    token_indices: np.ndarray | None = None,
) -> np.ndarray:
    """Per-token ranking scores over the unselected pool for one stage.

    near_far_random: stage 1 prefers tokens nearest to the init set
    (score = -min distance), stage 2 prefers farthest (score = max
    distance), stage >= 3 scores uniformly at random, keyed by
    (rng_seed, token index).  far_near_random swaps stages 1 and 2.
    """
    if stage < 1:
        raise ContractError(f"stage_scores: stage must be >= 1, got {stage}")
    if pattern not in PATTERNS:
        raise ContractError(f"stage_scores: unknown pattern {pattern!r}")
    rows = d.shape[0]
    if token_indices is None:
        token_indices = np.arange(rows)
    if stage >= 3:
        return rng.uniform_array(rng_seed, np.asarray(token_indices))
    nearest_first = (stage == 1) == (pattern == "near_far_random")
    if d.shape[1] == 0:
        # no init tokens: no distance signal, rank ties by index
        return np.zeros(rows)
    if nearest_first:
        return -d.min(axis=1)
    return d.max(axis=1)


def select_psts(scores_over_pool: np.ndarray, pool: np.ndarray, cfg: SelectionConfig, n: int) -> list[int]:
    """Top floor(N * (1 - mask_ratio - init_ratio)) pool tokens by stage score."""
    k = floor_count(1.0 - cfg.mask_ratio - cfg.init_ratio, n)
    pool = np.asarray(pool, dtype=np.int64)
    if pool.size < k:
        raise ContractError(f"select_psts: pool of {pool.size} cannot supply {k} tokens")
    if k == 0:
        return []
    order = np.lexsort((pool, -np.asarray(scores_over_pool)))
    return pool[order[:k]].tolist()


def select_reconstruction_targets(
    scores: SemanticScores, masked_set, cfg: SelectionConfig, n: int
) -> list[int]:
    """Top floor(recon_ratio * N) masked tokens by score."""
    masked = np.asarray(sorted(masked_set), dtype=np.int64)
    k = floor_count(cfg.recon_ratio, n)
    if k > masked.size:
        raise ContractError(
            f"select_reconstruction_targets: floor(recon_ratio*N) = {k} exceeds masked pool "
            f"{masked.size} (mask_ratio={cfg.mask_ratio}, recon_ratio={cfg.recon_ratio}, N={n})"
        )
    return top_k_by_score(scores, masked, k)


def plan_epoch_selection(
    embeddings: np.ndarray,
    scores: SemanticScores,
    cfg: SelectionConfig,
    epoch: int,
    rng_seed: int,
) -> SelectionPlan:
    """Compose a full plan for one sample at one epoch.

    ``embeddings`` are the (N, d) patch-embedding rows (projection plus
    positional term) used for the distance criterion.
    """
    n = embeddings.shape[0]
    if len(scores) != n:
        raise ContractError(f"plan_epoch_selection: {len(scores)} scores for N={n} embeddings")
    stage = stage_of(epoch, cfg.num_stages, cfg.total_epochs)
    init = init_token_set(scores, cfg, n)
    init_arr = np.asarray(init, dtype=np.int64)
    pool = np.setdiff1d(np.arange(n), init_arr, assume_unique=False)
    d = distance_matrix(embeddings[pool], embeddings[init_arr], cfg.measure)
    st_scores = stage_scores(d, stage, cfg.pattern, rng_seed, token_indices=pool)
    grown = select_psts(st_scores, pool, cfg, n)
    encode = sorted(set(init) | set(grown))
    masked = sorted(set(range(n)) - set(encode))
    targets = select_reconstruction_targets(scores, masked, cfg, n)
    return SelectionPlan(
        epoch=epoch,
        stage=stage,
        encode_set=encode,
        init_set=init,
        psts_set=grown,
        reconstruction_targets=targets,
        masked_set=masked,
    )


def uniform_random_plan(n: int, visible_ratio: float, rng_seed: int, reconstruct_all: bool = True) -> SelectionPlan:
    """Baseline plan: floor(visible_ratio * N) uniformly random visible tokens.

    All masked tokens become reconstruction targets (the conventional
    reconstruct-everything objective).  ``stage`` is 0: no curriculum.
    """
    if not 0.0 < visible_ratio < 1.0:
        raise ContractError(f"uniform_random_plan: visible_ratio must be in (0, 1), got {visible_ratio}")
    k = floor_count(visible_ratio, n)
    perm = rng.generator(rng_seed, "baseline").permutation(n)
    visible = sorted(int(i) for i in perm[:k])
    masked = sorted(set(range(n)) - set(visible))
    return SelectionPlan(
        epoch=0,
        stage=0,
        encode_set=visible,
        init_set=[],
        psts_set=list(visible),
        reconstruction_targets=list(masked) if reconstruct_all else [],
        masked_set=masked,
    )
