"""Pre-training loop: schedules, AdamW, divergence watch, throughput bench.

Determinism contract: batch composition, augmentation, and plan seeds are
pure functions of (seed, epoch, batch index, sample id), so the worker count
used to prepare batches never changes the math.  The optimizer is the only
parameter writer.
"""

from __future__ import annotations

import logging
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import rng
from .errors import ContractError, DivergenceError
from .imaging import Image, augment, decode, patchify
from .model import MimModel, ModelConfig, flop_breakdown
from .hog import SemanticScores, hog_score
from .selection import SelectionConfig, SelectionPlan, plan_epoch_selection, uniform_random_plan
from .tensor import backward, take_rows

logger = logging.getLogger(__name__)

EXPLOSION_PATIENCE = 3  # consecutive bad steps before the run is declared diverged

MODES = ("selective", "mae_baseline")


@dataclass
class TrainConfig:
    """Optimization knobs.  Defaults carry the reference recipe; see
    ``desk_scale`` for a laptop-sized variant with proportional warmup."""

    base_lr: float = 1.5e-4
    batch_size: int = 1024
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    warmup_epochs: float = 60.0
    total_epochs: int = 800
    lr_scale_mode: str = "mask_over_recon"  # or "none"
    grad_clip: float | None = None
    mode: str = "selective"
    seed: int = 0
    visible_ratio: float = 0.25  # mae_baseline visible fraction
    explosion_threshold: float = 1e3
    checkpoint_every: int = 0  # epochs; 0 = final checkpoint only
    workers: int = 1

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ContractError(f"base_lr must be positive, got {self.base_lr}")
        if self.warmup_epochs >= self.total_epochs:
            raise ContractError(
                f"warmup_epochs ({self.warmup_epochs}) must be < total_epochs ({self.total_epochs})"
            )
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr_scale_mode not in ("none", "mask_over_recon"):
            raise ContractError(f"unknown lr_scale_mode {self.lr_scale_mode!r}")
        if self.workers < 1:
            raise ContractError(f"workers must be >= 1, got {self.workers}")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """Small-batch defaults with the warmup fraction (60/800) preserved."""
        defaults = dict(batch_size=64, total_epochs=50, warmup_epochs=50 * 60 / 800)
        defaults.update(overrides)
        return cls(**defaults)


@dataclass
class TrainLogRecord:
    """One optimizer step, as logged."""

    epoch: int
    step: int
    loss: float
    grad_norm: float
    lr: float
    stage: int
    tokens_encoded: int
    tokens_reconstructed: int
    images_per_minute: float

    FIELDS = (
        "epoch",
        "step",
        "loss",
        "grad_norm",
        "lr",
        "stage",
        "tokens_encoded",
        "tokens_reconstructed",
        "images_per_minute",
    )

    def render(self, fmt: str = "kv", suppress_timing: bool = False) -> str:
        vals = {name: getattr(self, name) for name in self.FIELDS}
        if suppress_timing:
            vals["images_per_minute"] = 0.0
        parts = []
        for name in self.FIELDS:
            v = vals[name]
            text = f"{v:.9g}" if isinstance(v, float) else str(v)
            parts.append(f"{name}={text}" if fmt == "kv" else text)
        return " ".join(parts) if fmt == "kv" else ",".join(parts)

    @staticmethod
    def csv_header() -> str:
        return ",".join(TrainLogRecord.FIELDS)


class LrSchedule:
    """Linear warmup to peak, then cosine decay to zero at the final step.

    peak = base_lr * (batch/256) * (mask_ratio/recon_ratio when
    lr_scale_mode is mask_over_recon and the mode is selective).
    """

    def __init__(self, cfg: TrainConfig, sel_cfg: SelectionConfig, steps_per_epoch: int):
        if steps_per_epoch < 1:
            raise ContractError("steps_per_epoch must be >= 1")
        self.warmup_steps = cfg.warmup_epochs * steps_per_epoch
        self.total_steps = cfg.total_epochs * steps_per_epoch
        scale = 1.0
        if cfg.lr_scale_mode == "mask_over_recon" and cfg.mode == "selective":
            if sel_cfg.recon_ratio <= 0:
                raise ContractError("mask_over_recon scaling requires recon_ratio > 0")
            scale = sel_cfg.mask_ratio / sel_cfg.recon_ratio
        self.peak = cfg.base_lr * (cfg.batch_size / 256.0) * scale

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ContractError(f"step must be >= 0, got {step}")
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.peak * step / self.warmup_steps
        span = self.total_steps - self.warmup_steps
        progress = min((step - self.warmup_steps) / span, 1.0) if span > 0 else 1.0
        return self.peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight decay Adam with bias correction (eps 1e-8).

    ``step`` returns False and leaves parameters untouched when any gradient
    is non-finite, raising the caller's divergence flag.
    """

    def __init__(self, params: dict, betas=(0.9, 0.95), weight_decay=0.05, eps=1e-8):
        self.params = params
        self.beta1, self.beta2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> bool:
        grads = {}
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                logger.warning("adamw: non-finite gradient in %s, step aborted", name)
                return False
            grads[name] = g
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            update = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update.astype(p.data.dtype, copy=False)
        return True


def grad_norm(params: dict) -> float:
    """Global L2 norm across all parameter gradients (fp64 accumulate)."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.square(p.grad.astype(np.float64)).sum())
    return math.sqrt(total)


def clip_grads(params: dict, max_norm: float) -> float:
    norm = grad_norm(params)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


# -- data ------------------------------------------------------------------


class TrainDataset:
    """Decoded-on-demand image collection with stable per-sample ids."""

    def __init__(self, paths: list[Path] | None = None, images: list[Image] | None = None):
        if (paths is None) == (images is None):
            raise ContractError("TrainDataset: provide exactly one of paths or images")
        self.paths = paths
        self.images = images

    def __len__(self) -> int:
        return len(self.paths) if self.paths is not None else len(self.images)

    def load(self, index: int) -> Image:
        if self.images is not None:
            return self.images[index]
        path = self.paths[index]
        fmt = path.suffix.lstrip(".").lower()
        return decode(path.read_bytes(), fmt)

    @classmethod
    def from_manifest(cls, manifest_path: Path) -> "TrainDataset":
        from .curation import read_manifest

        records = read_manifest(manifest_path)
        paths = [Path(r.path) for r in records if r.status == "kept"]
        if not paths:
            raise ContractError(f"manifest {manifest_path} has no kept records")
        return cls(paths=paths)

    @classmethod
    def from_directory(cls, directory: Path) -> "TrainDataset":
        exts = (".pgm", ".ppm", ".png")
        paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in exts)
        if not paths:
            raise ContractError(f"no supported images under {directory}")
        return cls(paths=paths)


@dataclass
class PreparedBatch:
    """Pure function of (seed, epoch, batch_index): pixels ready for the model."""

    epoch: int
    batch_index: int
    sample_ids: np.ndarray
    patches: np.ndarray  # (B, N, p*p*C) float32
    scores: np.ndarray  # (B, N) gradient-energy scores


def epoch_batches(n_samples: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Deterministic shuffled batch composition for one epoch."""
    perm = rng.generator(seed, "shuffle", epoch).permutation(n_samples)
    return [perm[i : i + batch_size] for i in range(0, n_samples, batch_size)]


def prepare_batch(
    dataset: TrainDataset,
    sample_ids: np.ndarray,
    epoch: int,
    batch_index: int,
    seed: int,
    model_cfg: ModelConfig,
) -> PreparedBatch:
    patches = np.empty((len(sample_ids), model_cfg.tokens, model_cfg.patch_values), dtype=np.float32)
    scores = np.empty((len(sample_ids), model_cfg.tokens))
    for row, sid in enumerate(sample_ids):
        img = dataset.load(int(sid)).to_channels(model_cfg.channels)
        img = augment(img, rng.derive_seed(seed, "augment", epoch, int(sid)), model_cfg.image_size)
        grid = patchify(img, model_cfg.patch_size)
        patches[row] = grid.patches
        scores[row] = hog_score(grid).scores
    return PreparedBatch(epoch, batch_index, np.asarray(sample_ids), patches, scores)


def _batch_stream(dataset, cfg: TrainConfig, model_cfg: ModelConfig, start_epoch: int, end_epoch: int):
    """Bounded producer/consumer stream of prepared batches.

    Batches are submitted to a worker pool in order and consumed in order;
    each is a pure function of its key, so worker count is irrelevant to
    the values produced.
    """
    jobs: list[tuple[int, int, np.ndarray]] = []
    for epoch in range(start_epoch, end_epoch + 1):
        for b, ids in enumerate(epoch_batches(len(dataset), cfg.batch_size, cfg.seed, epoch)):
            jobs.append((epoch, b, ids))
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        pending = deque()
        depth = max(2, 2 * cfg.workers)
        it = iter(jobs)
        try:
            while True:
                while len(pending) < depth:
                    job = next(it, None)
                    if job is None:
                        break
                    epoch, b, ids = job
                    pending.append(pool.submit(prepare_batch, dataset, ids, epoch, b, cfg.seed, model_cfg))
                if not pending:
                    return
                yield pending.popleft().result()
        finally:
            for fut in pending:
                fut.cancel()


# -- the loop ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: MimModel
    records: list[TrainLogRecord]
    final_checkpoint: Path | None


def _plan_batch(
    batch: PreparedBatch,
    embeddings: np.ndarray,
    cfg: TrainConfig,
    sel_cfg: SelectionConfig,
) -> list[SelectionPlan]:
    plans = []
    for row, sid in enumerate(batch.sample_ids):
        if cfg.mode == "selective":
            plan = plan_epoch_selection(
                embeddings[row],
                SemanticScores(scores=batch.scores[row], reduction="l2"),
                sel_cfg,
                batch.epoch,
                rng.derive_seed(cfg.seed, "plan", batch.epoch, int(sid)),
            )
        else:
            plan = uniform_random_plan(
                embeddings.shape[1],
                cfg.visible_ratio,
                rng.derive_seed(cfg.seed, "plan", batch.epoch, int(sid)),
            )
        plans.append(plan)
    return plans


def train(
    dataset: TrainDataset,
    cfg: TrainConfig,
    sel_cfg: SelectionConfig,
    model_cfg: ModelConfig,
    *,
    model: MimModel | None = None,
    start_epoch: int = 1,
    end_epoch: int | None = None,
    checkpoint_path: Path | None = None,
    on_record=None,
    grad_norm_fn=None,
) -> TrainResult:
    """Run the pre-training loop.

    Per batch: augment -> patchify -> score -> embed -> plan -> encode ->
    decode -> loss -> backward -> AdamW.  Raises DivergenceError after
    EXPLOSION_PATIENCE consecutive steps with non-finite loss or gradient
    norm above ``cfg.explosion_threshold``.  ``grad_norm_fn`` exists for
    fault-injection in tests.

    ``start_epoch``/``end_epoch`` select a segment of the schedule horizon
    (cfg.total_epochs), so a run resumed from a checkpoint sees the same
    learning rates and stages as an uninterrupted one.
    """
    if end_epoch is None:
        end_epoch = cfg.total_epochs
    if not 1 <= start_epoch <= end_epoch <= cfg.total_epochs:
        raise ContractError(
            f"train: bad epoch segment [{start_epoch}, {end_epoch}] of {cfg.total_epochs}"
        )
    if len(dataset) == 0:
        raise ContractError("train: dataset is empty")
    if cfg.mode == "selective" and sel_cfg.recon_ratio <= 0:
        raise ContractError(
            "train: selective mode needs recon_ratio > 0 (the decoder would have no targets)"
        )
    if sel_cfg.total_epochs != cfg.total_epochs:
        sel_cfg = replace(sel_cfg, total_epochs=cfg.total_epochs)
    if model is None:
        model = MimModel(model_cfg, seed=cfg.seed)
    optimizer = AdamW(model.trainable_params(), betas=cfg.betas, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    schedule = LrSchedule(cfg, sel_cfg, steps_per_epoch)
    measure_norm = grad_norm_fn or grad_norm

    records: list[TrainLogRecord] = []
    global_step = (start_epoch - 1) * steps_per_epoch
    bad_streak = 0
    t_start = time.monotonic()
    images_done = 0

    for batch in _batch_stream(dataset, cfg, model_cfg, start_epoch, end_epoch):
        lr = schedule.lr_at(global_step)
        model.zero_grads()
        embedded = model.embed_all(batch.patches)
        plans = _plan_batch(batch, embedded.data, cfg, sel_cfg)
        encode_idx = np.array([p.encode_set for p in plans])
        token_r = np.array([p.reconstruction_targets for p in plans])
        visible = take_rows(embedded, encode_idx)
        latents = model.encode(visible)
        pred = model.decode(latents, token_r)
        loss = model.reconstruction_loss(pred, batch.patches, token_r)
        loss_val = loss.item()
        backward(loss)

        if cfg.grad_clip is not None:
            norm = clip_grads(model.trainable_params(), cfg.grad_clip)
        else:
            norm = measure_norm(model.trainable_params())

        exploded = not math.isfinite(loss_val) or not math.isfinite(norm) or norm > cfg.explosion_threshold
        if exploded:
            bad_streak += 1
            logger.warning(
                "step %d: unstable (loss=%s grad_norm=%.3g), streak %d/%d",
                global_step, loss_val, norm, bad_streak, EXPLOSION_PATIENCE,
            )
            if bad_streak >= EXPLOSION_PATIENCE:
                raise DivergenceError(
                    f"training diverged at epoch {batch.epoch} step {global_step}: "
                    f"{EXPLOSION_PATIENCE} consecutive unstable steps "
                    f"(last loss={loss_val}, grad_norm={norm:.4g}, threshold={cfg.explosion_threshold})",
                    epoch=batch.epoch,
                    step=global_step,
                )
        else:
            bad_streak = 0
            if not optimizer.step(lr):
                raise DivergenceError(
                    f"training diverged at epoch {batch.epoch} step {global_step}: non-finite gradients",
                    epoch=batch.epoch,
                    step=global_step,
                )

        images_done += len(batch.sample_ids)
        elapsed = time.monotonic() - t_start
        record = TrainLogRecord(
            epoch=batch.epoch,
            step=global_step,
            loss=loss_val,
            grad_norm=norm,
            lr=lr,
            stage=plans[0].stage,
            tokens_encoded=len(plans[0].encode_set),
            tokens_reconstructed=len(plans[0].reconstruction_targets),
            images_per_minute=images_done / elapsed * 60.0 if elapsed > 0 else 0.0,
        )
        records.append(record)
        if on_record is not None:
            on_record(record)
        global_step += 1

        if (
            checkpoint_path is not None
            and cfg.checkpoint_every > 0
            and batch.batch_index == steps_per_epoch - 1
            and batch.epoch % cfg.checkpoint_every == 0
        ):
            model.save(checkpoint_path)

    if checkpoint_path is not None:
        model.save(checkpoint_path)
    return TrainResult(model=model, records=records, final_checkpoint=checkpoint_path)


# -- throughput bench ---------------------------------------------------------


@dataclass
class BenchModeReport:
    mode: str
    images_per_minute: float
    tokens_encoded: int
    tokens_reconstructed: int
    steps: int


@dataclass
class BenchReport:
    selective: BenchModeReport
    baseline: BenchModeReport
    throughput_ratio: float
    flop_ratio: float
    encoder_attention_flop_ratio: float
    peak_resident_bytes: int


def _bench_one_mode(dataset, cfg, sel_cfg, model_cfg, steps, warmup_steps):
    """Images/minute over `steps` steady-state steps after `warmup_steps`."""
    model = MimModel(model_cfg, seed=cfg.seed)
    optimizer = AdamW(model.trainable_params(), betas=cfg.betas, weight_decay=cfg.weight_decay)
    schedule = LrSchedule(cfg, sel_cfg, steps_per_epoch=max(1, len(dataset) // cfg.batch_size))
    done = 0
    images = 0
    t0 = None
    plan0 = None
    for batch in _batch_stream(dataset, cfg, model_cfg, 1, cfg.total_epochs):
        if done == warmup_steps:
            t0 = time.monotonic()
            images = 0
        if done >= warmup_steps + steps:
            break
        model.zero_grads()
        embedded = model.embed_all(batch.patches)
        plans = _plan_batch(batch, embedded.data, cfg, sel_cfg)
        plan0 = plans[0]
        encode_idx = np.array([p.encode_set for p in plans])
        token_r = np.array([p.reconstruction_targets for p in plans])
        visible = take_rows(embedded, encode_idx)
        loss = model.reconstruction_loss(
            model.decode(model.encode(visible), token_r), batch.patches, token_r
        )
        backward(loss)
        optimizer.step(schedule.lr_at(done))
        if done >= warmup_steps:
            images += len(batch.sample_ids)
        done += 1
    if t0 is None or plan0 is None:
        raise ContractError(
            f"bench: dataset/epochs supply too few batches for {warmup_steps}+{steps} steps"
        )
    elapsed = time.monotonic() - t0
    return BenchModeReport(
        mode=cfg.mode,
        images_per_minute=images / elapsed * 60.0 if elapsed > 0 else 0.0,
        tokens_encoded=len(plan0.encode_set),
        tokens_reconstructed=len(plan0.reconstruction_targets),
        steps=steps,
    )


def bench_throughput(
    dataset: TrainDataset,
    cfg: TrainConfig,
    sel_cfg: SelectionConfig,
    model_cfg: ModelConfig,
    steps: int = 200,
    warmup_steps: int = 20,
) -> BenchReport:
    """A/B selective vs uniform-random baseline on identical model/data/seed."""
    sel = _bench_one_mode(dataset, replace(cfg, mode="selective"), sel_cfg, model_cfg, steps, warmup_steps)
    base = _bench_one_mode(dataset, replace(cfg, mode="mae_baseline"), sel_cfg, model_cfg, steps, warmup_steps)
    f_sel = flop_breakdown(model_cfg, sel.tokens_encoded, sel.tokens_reconstructed)
    f_base = flop_breakdown(model_cfg, base.tokens_encoded, base.tokens_reconstructed)
    try:
        import resource

        peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    except ImportError:
        peak = 0
    return BenchReport(
        selective=sel,
        baseline=base,
        throughput_ratio=sel.images_per_minute / base.images_per_minute if base.images_per_minute else 0.0,
        flop_ratio=f_sel.total / f_base.total,
        encoder_attention_flop_ratio=f_sel.encoder_attention / f_base.encoder_attention,
        peak_resident_bytes=peak,
    )
