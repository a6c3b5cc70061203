"""Desk-scale pre-training: synthetic corpora, AdamW, warmup + cosine
schedule, and a deterministic training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as M
from .checkpoint import Checkpoint
from .imaging import center_resize, random_resized_crop
from .masking import STREAM_AUGMENT, STREAM_SHUFFLE, counter_rng, sample_mask
from .specs import ImageSpec, MaskPlan

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 8
    base_lr: float = 1.5e-4
    warmup_epochs: float | None = None  # None -> 5% of epochs
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    seed: int = 0
    crop: str = "random_resized_crop"  # or "none"
    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip: bool = True
    log_every: int = 1
    max_steps: int | None = None
    fixed_masks: bool = False
    record_wall_time: bool = False

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.log_every <= 0:
            raise ValueError("epochs, batch_size and log_every must be positive")
        if not 0 <= self.warmup <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if self.crop not in ("none", "random_resized_crop"):
            raise ValueError(f"unknown crop mode {self.crop!r}")

    @property
    def warmup(self) -> float:
        return 0.05 * self.epochs if self.warmup_epochs is None else self.warmup_epochs

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256.0


# ---------------------------------------------------------------- schedule


def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    return int(round(total_steps * cfg.warmup / cfg.epochs))


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to the peak, then half-cosine down to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    peak = cfg.peak_lr
    warm = warmup_steps(total_steps, cfg)
    if step < warm:
        return peak * step / warm
    if total_steps == warm:
        return peak
    progress = (step - warm) / (total_steps - warm)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- optimizer


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay applies to matrices and filters only (not norms, biases,
    or the cls/mask tokens, which are all 1-D)."""
    return value.ndim > 1


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """In-place AdamW update with bias-corrected moments."""
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"{name}: optimizer state {m.shape} vs parameter {p.shape}")
        m = (b1 * m + (1.0 - b1) * g).astype(p.dtype)
        v = (b2 * v + (1.0 - b2) * g * g).astype(p.dtype)
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if cfg.weight_decay and decays(name, p):
            update = update + cfg.weight_decay * p
        p -= (lr * update).astype(p.dtype)


# ---------------------------------------------------------------- data


def make_synthetic_corpus(kind: str, n: int, side: int, seed: int = 0) -> list[np.ndarray]:
    """Deterministic structured images in ``[0, 1]``, shape ``(side, side, 3)``.

    ``checkers`` images are fine two-colour checker textures (cell side of one
    or two ``side/32`` units, random phase), so every hidden region can be
    filled in from the visible ones.
    """
    if n <= 0 or side <= 0:
        raise ValueError("n and side must be positive")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    out = []
    for _ in range(n):
        if kind == "checkers":
            cell = max(1, side // 32) * int(rng.choice([1, 2]))
            oy, ox = rng.integers(0, cell, size=2)
            a, b = rng.random(3), rng.random(3)
            sel = ((((yy + oy) // cell) + ((xx + ox) // cell)) % 2).astype(bool)
            img = np.where(sel[..., None], a, b)
        elif kind == "gradients":
            theta = rng.uniform(0, 2 * np.pi, size=3)
            t = (np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy) / side
            lo, span = rng.random(3) * 0.5, rng.random(3) * 0.5
            img = np.moveaxis(lo[:, None, None] + span[:, None, None] * (t - t.min()) / np.ptp(t), 0, -1)
        elif kind == "gaussian-blobs":
            img = np.full((side, side, 3), 0.1) * rng.random(3)
            for _ in range(int(rng.integers(1, 4))):
                cy, cx = rng.uniform(0, side, size=2)
                sigma = rng.uniform(side / 10, side / 4)
                blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
                img = img + blob[..., None] * rng.random(3)
        else:
            raise ValueError(f"unknown corpus kind {kind!r}")
        out.append(np.clip(img, 0.0, 1.0).astype(np.float32))
    return out


def prepare_image(img: np.ndarray, size: int, cfg: TrainConfig, epoch: int, sample_id: int):
    if cfg.crop == "none" and not cfg.flip:
        return center_resize(img, size)
    rng = counter_rng(cfg.seed, epoch, sample_id, STREAM_AUGMENT)
    if cfg.crop == "random_resized_crop":
        out = random_resized_crop(img, size, rng, scale=cfg.crop_scale)
    else:
        out = center_resize(img, size)
    if cfg.flip and rng.random() < 0.5:
        out = out[:, ::-1]
    return np.ascontiguousarray(out, dtype=np.float32)


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class MetricRecord:
    step: int
    epoch: int
    lr: float
    loss: float
    wall_ms: int
    masked_tokens: int = 0

    def line(self) -> str:
        return (
            f"step={self.step} epoch={self.epoch} lr={np.float32(self.lr)!s} "
            f"loss={np.float32(self.loss)!s} wall_ms={self.wall_ms}"
        )

    @classmethod
    def parse(cls, line: str) -> "MetricRecord":
        fields = dict(part.split("=", 1) for part in line.split())
        return cls(
            step=int(fields["step"]),
            epoch=int(fields["epoch"]),
            lr=float(fields["lr"]),
            loss=float(fields["loss"]),
            wall_ms=int(fields["wall_ms"]),
        )


@dataclass
class MetricsLog:
    records: list[MetricRecord] = field(default_factory=list)

    def append(self, rec: MetricRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("metric steps must be strictly increasing")
        self.records.append(rec)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def text(self) -> str:
        return "".join(r.line() + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.text())

    @classmethod
    def read(cls, path) -> "MetricsLog":
        log = cls()
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    log.append(MetricRecord.parse(line))
        return log


# ---------------------------------------------------------------- loop


def plan_meta(plan: MaskPlan) -> dict[str, str]:
    return {
        "spec.I": str(plan.spec.image_size),
        "spec.p": str(plan.spec.patch_size),
        "spec.L": str(plan.spec.seq_len),
        "mask.m": str(plan.mask_size),
        "mask.ratio": repr(plan.mask_ratio),
        "mask.U": str(plan.total_units),
        "mask.L_e": str(plan.enc_len),
        "mask.L_d": str(plan.dec_len),
    }


def expected_masked_tokens(plan: MaskPlan, cfg: M.ViTMAEConfig, batch: int) -> int | None:
    if not cfg.decoder_downsample:
        return batch * plan.masked_patches
    if plan.mask_size % 2 == 0:
        return batch * plan.masked_patches // 4
    return None  # depends on the sampled layout


def pretrain(
    corpus: Sequence[np.ndarray],
    spec: ImageSpec,
    plan: MaskPlan,
    cfg: M.ViTMAEConfig,
    tcfg: TrainConfig,
    init: Checkpoint | None = None,
    model_seed: int | None = None,
) -> tuple[Checkpoint, MetricsLog]:
    """Optimize the masked reconstruction loss over ``corpus``.

    Masks are drawn per ``(seed, epoch, sample)``; with ``fixed_masks`` every
    epoch reuses the epoch-0 masks. ``init`` warm-starts parameters and
    optimizer moments (for resuming); the schedule always spans this run.
    """
    if len(corpus) == 0:
        raise TrainingError("corpus is empty")
    if spec != cfg.spec or plan.spec != spec:
        raise TrainingError(f"inconsistent geometry: spec {spec}, plan {plan.spec}, model {cfg.spec}")
    if plan.decoder_downsample != cfg.decoder_downsample:
        raise TrainingError("mask plan and model disagree on decoder downsampling")
    n = len(corpus)
    bs = tcfg.batch_size
    if n < bs:
        raise TrainingError(f"corpus has {n} images, fewer than one batch of {bs}")
    steps_per_epoch = n // bs
    total = tcfg.epochs * steps_per_epoch
    if tcfg.max_steps is not None:
        total = min(total, tcfg.max_steps)

    params = M.init_params(cfg, tcfg.seed if model_seed is None else model_seed)
    state = AdamState()
    if init is not None:
        _warm_start(params, state, init)
    tensors = M.as_tensors(params, requires_grad=True)
    for k, t in tensors.items():
        t.data = params[k]  # share storage so in-place updates are seen

    static = tcfg.crop == "none" and not tcfg.flip
    cache: dict[int, np.ndarray] = {}
    log = MetricsLog()
    expected = expected_masked_tokens(plan, cfg, bs)
    step = 0
    lr = 0.0
    for epoch in range(tcfg.epochs):
        order = counter_rng(tcfg.seed, epoch, 0, STREAM_SHUFFLE).permutation(n)
        for b in range(steps_per_epoch):
            if step >= total:
                break
            t0 = time.perf_counter()
            ids = order[b * bs : (b + 1) * bs]
            mask_epoch = 0 if tcfg.fixed_masks else epoch
            images = []
            for i in ids:
                i = int(i)
                if static:
                    if i not in cache:
                        cache[i] = prepare_image(corpus[i], spec.image_size, tcfg, 0, i)
                    images.append(cache[i])
                else:
                    images.append(prepare_image(corpus[i], spec.image_size, tcfg, epoch, i))
            masks = [sample_mask(plan, tcfg.seed, int(i), mask_epoch) for i in ids]

            step += 1
            lr = lr_at(step, total, tcfg)
            loss, _, n_masked = M.mae_forward_loss(np.stack(images), masks, tensors, cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step} (lr={lr:.3g})")
            if expected is not None and n_masked != expected:
                raise TrainingError(f"loss denominator {n_masked} != expected {expected}")
            loss.backward()
            grads = {k: t.grad for k, t in tensors.items()}
            adamw_step(params, grads, state, lr, tcfg)

            wall = int((time.perf_counter() - t0) * 1000) if tcfg.record_wall_time else 0
            if step % tcfg.log_every == 0 or step == total:
                log.append(MetricRecord(step, epoch, lr, value, wall, n_masked))
                logger.debug("step %d loss %.5f lr %.3g", step, value, lr)

    meta = {**cfg.to_meta(), **plan_meta(plan), "seed": str(tcfg.seed), "step": str(step),
            "opt.step": str(state.step)}
    if init is not None:
        meta["resumed_from_step"] = init.meta.get("step", "0")
    return make_checkpoint(params, state, meta), log


def make_checkpoint(params: dict[str, np.ndarray], state: AdamState, meta: dict[str, str]) -> Checkpoint:
    tensors = {k: v.copy() for k, v in params.items()}
    for k in params:
        if k in state.m:
            tensors[f"opt/m/{k}"] = state.m[k].copy()
            tensors[f"opt/v/{k}"] = state.v[k].copy()
    return Checkpoint(tensors, dict(meta))


def _warm_start(params: dict[str, np.ndarray], state: AdamState, ckpt: Checkpoint) -> None:
    for k in params:
        if k not in ckpt.tensors:
            raise TrainingError(f"checkpoint lacks parameter {k!r}")
        if ckpt.tensors[k].shape != params[k].shape:
            raise TrainingError(
                f"{k}: checkpoint shape {ckpt.tensors[k].shape} vs model {params[k].shape}; "
                "resample the checkpoint to this geometry first"
            )
        params[k][...] = ckpt.tensors[k]
    for k in params:
        m, v = ckpt.tensors.get(f"opt/m/{k}"), ckpt.tensors.get(f"opt/v/{k}")
        if m is not None and v is not None and m.shape == params[k].shape:
            state.m[k], state.v[k] = m.copy(), v.copy()
    state.step = int(ckpt.meta.get("opt.step", "0"))
