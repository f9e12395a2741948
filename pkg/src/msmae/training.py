"""Pretraining loop: AdamW, warmup + cosine schedule, augmentation,
deterministic batching, metrics, checkpoint/resume.

Reproducibility model: no generator state is ever serialized. Every random
draw comes from a stream derived as SeedSequence([seed, role, *indices]),
so the shuffle of epoch e, the augmentation of sample i in epoch e, and
the mask of sample i in epoch e are all reconstructible from the config
alone. Resuming from an epoch-boundary checkpoint therefore continues the
interrupted run bit-for-bit.

Per-sample gradients are reduced in fixed sample order regardless of the
thread count, so --threads only changes wall time, never results.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, NumericError
from .model import forward_pretrain, param_shapes
from .rng import derive_rng


@dataclass
class Schedule:
    """Linear warmup to base_lr, then cosine decay to min_lr."""

    base_lr: float
    total_epochs: int
    steps_per_epoch: int
    warmup_epochs: int = 0
    min_lr: float = 1e-6

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError(
                f"warmup_epochs {self.warmup_epochs} must lie in [0, total_epochs={self.total_epochs})"
            )
        if self.min_lr > self.base_lr:
            raise ConfigError(f"min_lr {self.min_lr} exceeds base_lr {self.base_lr}")
        if self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")

    @property
    def total_steps(self):
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self):
        return self.warmup_epochs * self.steps_per_epoch


def lr_at(step, sched):
    """Learning rate at a step position in [0, total_steps].

    Ramps linearly 0 -> base over the warmup steps, then follows
    min + (base - min) * (1 + cos(pi * t)) / 2 down to exactly min_lr.
    Both pieces meet at base_lr, so the curve is continuous.
    """
    total, warm = sched.total_steps, sched.warmup_steps
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    if step < warm:
        return sched.base_lr * step / warm
    if total == warm:
        return sched.base_lr
    t = (step - warm) / (total - warm)
    return sched.min_lr + 0.5 * (sched.base_lr - sched.min_lr) * (1.0 + math.cos(math.pi * t))


@dataclass
class OptimizerState:
    """AdamW moments plus the step counter and hyperparameters."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05

    @classmethod
    def init(cls, params, **hyper):
        zeros = lambda: {n: np.zeros_like(p.data) for n, p in params.items()}
        return cls(m=zeros(), v=zeros(), **hyper)


def _decays(name):
    # decoupled weight decay skips normalization params and the mask token
    return ".ln" not in name and name != "mask_token"


def adamw_step(params, grads, state, lr):
    """One decoupled-weight-decay Adam update, in place, fixed param order."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ContractError(f"grad shape {g.shape} mismatches param {name} {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay and _decays(name):
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def augment(points, rng, scale_range=(0.8, 1.25), shift_range=0.1):
    """Random global scaling then random translation.

    Draw order is fixed: one shared scale factor first, then a 3-vector
    shift, so a given generator state always produces the same transform.
    """
    pts = np.asarray(points, dtype=np.float64)
    s = rng.uniform(scale_range[0], scale_range[1])
    shift = rng.uniform(-shift_range, shift_range, size=3)
    return pts * s + shift


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    base_lr: float = 1e-4
    min_lr: float = 1e-6
    warmup_epochs: int = 10
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables clipping
    seed: int = 0
    threads: int = 1
    test_mode: bool = False  # zero wall_ms in metrics so runs diff clean
    augment: bool = True
    scale_range: tuple = (0.8, 1.25)
    shift_range: float = 0.1
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    out_dir: str = "run"

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.warmup_epochs >= self.epochs:
            raise ConfigError(f"warmup_epochs {self.warmup_epochs} must be < epochs {self.epochs}")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")
        return self


def _sample_grads(model, pts, mask_rng, names):
    with T.Tape() as tape:
        loss = forward_pretrain(model.params, model.config, pts, mask_rng)
    grads = tape.gradients(loss, [model.params[n] for n in names])
    return float(loss.data), grads


def train(model, records, tc, resume=None):
    """Pretrain on DatasetRecord-like items (need .points and .id).

    Emits one JSON metric line per optimizer step to out_dir/metrics.jsonl
    and writes checkpoints under out_dir. Returns (opt_state, last_loss).
    Records are sorted by id first, so shard order never matters. A
    non-finite batch loss aborts with the failing step in the message.
    """
    tc.validate()
    model.config.validate()
    records = sorted(records, key=lambda r: r.id)
    if len(records) < tc.batch_size:
        raise ConfigError(f"batch_size {tc.batch_size} exceeds dataset size {len(records)}")
    steps_per_epoch = len(records) // tc.batch_size
    sched = Schedule(base_lr=tc.base_lr, min_lr=tc.min_lr, warmup_epochs=tc.warmup_epochs,
                     total_epochs=tc.epochs, steps_per_epoch=steps_per_epoch)
    names = list(param_shapes(model.config))
    opt = OptimizerState.init(model.params, beta1=tc.beta1, beta2=tc.beta2,
                              eps=tc.eps, weight_decay=tc.weight_decay)
    start_epoch = 0
    if resume is not None:
        config, params, packed, _ = load_checkpoint(resume)
        if config != model.config:
            raise ConfigError(f"checkpoint config in {resume} differs from the active config")
        if packed is None:
            raise ConfigError(f"{resume} has no optimizer state; cannot resume training")
        for n in names:
            model.params[n].data = params[n].data
        opt.m, opt.v, opt.step = packed["m"], packed["v"], int(packed["step"])
        start_epoch = int(packed["epoch"])
        if start_epoch >= tc.epochs:
            raise ConfigError(f"checkpoint already at epoch {start_epoch} of {tc.epochs}")
    os.makedirs(tc.out_dir, exist_ok=True)
    metrics_path = os.path.join(tc.out_dir, "metrics.jsonl")
    mode = "a" if resume is not None else "w"
    step = opt.step
    last_loss = math.nan
    pool = ThreadPoolExecutor(max_workers=tc.threads) if tc.threads > 1 else None
    try:
        with open(metrics_path, mode) as metrics:
            for epoch in range(start_epoch, tc.epochs):
                order = derive_rng(tc.seed, "shuffle", epoch).permutation(len(records))
                for b in range(steps_per_epoch):
                    t0 = time.monotonic()
                    batch = order[b * tc.batch_size:(b + 1) * tc.batch_size]
                    jobs = []
                    for i in batch:
                        i = int(i)
                        pts = records[i].points
                        if tc.augment:
                            pts = augment(pts, derive_rng(tc.seed, "augment", epoch, i),
                                          tc.scale_range, tc.shift_range)
                        jobs.append((pts, derive_rng(tc.seed, "mask", epoch, i)))
                    if pool is None:
                        results = [_sample_grads(model, p, r, names) for p, r in jobs]
                    else:
                        results = list(pool.map(lambda j: _sample_grads(model, j[0], j[1], names), jobs))
                    # reduce in batch order: bit-stable under any thread count
                    loss_sum = 0.0
                    grad_sum = None
                    for loss_i, grads_i in results:
                        loss_sum += loss_i
                        if grad_sum is None:
                            grad_sum = [g.copy() for g in grads_i]
                        else:
                            for acc, g in zip(grad_sum, grads_i):
                                acc += g
                    batch_loss = loss_sum / tc.batch_size
                    if not math.isfinite(batch_loss):
                        raise NumericError(f"non-finite training loss at step {step} (epoch {epoch})")
                    grads = {n: g / tc.batch_size for n, g in zip(names, grad_sum)}
                    if tc.grad_clip > 0.0:
                        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                        if norm > tc.grad_clip:
                            scale = tc.grad_clip / norm
                            for g in grads.values():
                                g *= scale
                    lr = lr_at(step + 1, sched)  # step s applies the rate at position s+1
                    adamw_step(model.params, grads, opt, lr)
                    last_loss = batch_loss
                    wall = 0 if tc.test_mode else int((time.monotonic() - t0) * 1000)
                    metrics.write(json.dumps({"step": step, "epoch": epoch, "loss": batch_loss,
                                              "lr": lr, "wall_ms": wall}) + "\n")
                    step += 1
                if tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0 and epoch + 1 < tc.epochs:
                    _save(model, opt, epoch + 1, os.path.join(tc.out_dir, f"checkpoint_epoch{epoch + 1:04d}.pm2a"))
            _save(model, opt, tc.epochs, os.path.join(tc.out_dir, "checkpoint_final.pm2a"))
    finally:
        if pool is not None:
            pool.shutdown()
    return opt, last_loss


def _save(model, opt, next_epoch, path):
    packed = {"step": opt.step, "epoch": next_epoch, "m": opt.m, "v": opt.v}
    save_checkpoint(path, model.config, model.params, optimizer=packed)
