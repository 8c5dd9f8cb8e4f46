"""Adamax with parameter groups, warmup + step-decay schedule, training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .model import Batch, ModelConfig, ModelParams, batch_loss, init_params, save_checkpoint
from .numkernel import reverse_gradients

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 0.002
    peak_lr: float = 0.01
    warmup_iters: int = 1000
    first_decay_iter: int = 5000
    decay_every: int = 2000
    decay_factor: float = 0.1
    stop_iter: int = 12000

    def __post_init__(self):
        if not 0 < self.base_lr <= self.peak_lr:
            raise ValueError("need 0 < base_lr <= peak_lr")
        if not 0 < self.warmup_iters < self.first_decay_iter < self.stop_iter:
            raise ValueError("need 0 < warmup_iters < first_decay_iter < stop_iter")
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.decay_every < 1:
            raise ValueError("decay_every must be positive")

    @classmethod
    def challenge(cls) -> "LrSchedule":
        return cls()

    @classmethod
    def augmented(cls) -> "LrSchedule":
        return cls(first_decay_iter=15000, stop_iter=22000)

    def scaled(self, factor: float) -> "LrSchedule":
        """Same shape with every iteration count multiplied by ``factor``."""
        return replace(
            self,
            warmup_iters=max(1, round(self.warmup_iters * factor)),
            first_decay_iter=max(2, round(self.first_decay_iter * factor)),
            decay_every=max(1, round(self.decay_every * factor)),
            stop_iter=max(3, round(self.stop_iter * factor)),
        )

    def decay_points(self) -> list[int]:
        return list(range(self.first_decay_iter, self.stop_iter, self.decay_every))


def lr_at(iteration: int, s: LrSchedule) -> float:
    if iteration < 0:
        raise ValueError("negative iteration")
    if iteration >= s.stop_iter:
        raise ValueError("past end of schedule")
    if iteration <= s.warmup_iters:
        return s.base_lr + (s.peak_lr - s.base_lr) * iteration / s.warmup_iters
    if iteration < s.first_decay_iter:
        return s.peak_lr
    n = 1 + (iteration - s.first_decay_iter) // s.decay_every
    # dividing by the reciprocal keeps 0.01 -> 0.001 -> 1e-4 exact in binary
    return s.peak_lr / (1.0 / s.decay_factor) ** n


@dataclass
class AdamaxState:
    m: dict[str, np.ndarray]
    u: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays: Mapping[str, np.ndarray]) -> "AdamaxState":
        return cls({k: np.zeros_like(v) for k, v in arrays.items()},
                   {k: np.zeros_like(v) for k, v in arrays.items()})


DEFAULT_MULTIPLIERS = {"default": 1.0, "finetune": 0.1}


def adamax_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamaxState,
    lr: float,
    groups: Mapping[str, str] | None = None,
    group_multipliers: Mapping[str, float] = DEFAULT_MULTIPLIERS,
) -> None:
    """In-place Adamax update of ``params`` and ``state``.

    ``m <- b1 m + (1 - b1) g``; ``u <- max(b2 u, |g|)``;
    ``theta <- theta - lr_group / (1 - b1^t) * m / (u + eps)``.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"diverged gradient in {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name} {params[name].shape}")
    state.t += 1
    bias = 1.0 - state.beta1 ** state.t
    for name, g in grads.items():
        group = groups.get(name, "default") if groups else "default"
        if group not in group_multipliers:
            raise KeyError(f"unknown parameter group {group!r}")
        m = state.m[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        u = state.u[name]
        np.maximum(state.beta2 * u, np.abs(g), out=u)
        step = lr * group_multipliers[group] / bias
        params[name] -= step * m / (u + state.eps)


@dataclass(frozen=True)
class TrainRunConfig:
    seed: int = 0
    batch_size: int = 32
    schedule: LrSchedule = field(default_factory=LrSchedule)
    finetune_lr_multiplier: float = 0.1
    grad_clip: float = 0.0  # 0 disables global-norm clipping
    log_every: int = 1
    eval_every: int = 0
    checkpoint_path: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.finetune_lr_multiplier <= 1:
            raise ValueError("finetune_lr_multiplier must lie in (0, 1]")


@dataclass
class LogRecord:
    iteration: int
    lr: float
    loss: float
    accuracy: float | None = None

    def format(self) -> str:
        cols = [str(self.iteration), f"{self.lr:.17g}", repr(self.loss)]
        if self.accuracy is not None:
            cols.append(repr(self.accuracy))
        return "\t".join(cols)


@dataclass
class TrainResult:
    params: ModelParams
    log: list[LogRecord]

    def log_text(self) -> str:
        return "".join(r.format() + "\n" for r in self.log)


def batch_order(n: int, batch_size: int, steps: int, seed: int) -> list[np.ndarray]:
    """Index batches for ``steps`` iterations; each epoch is a fresh seeded shuffle."""
    rng = np.random.default_rng([seed, 1])
    out: list[np.ndarray] = []
    while len(out) < steps:
        perm = rng.permutation(n)
        out.extend(perm[i:i + batch_size] for i in range(0, n, batch_size))
    return out[:steps]


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / total


def train(
    run: TrainRunConfig,
    config: ModelConfig,
    data: Sequence,
    collate: Callable[[Sequence], Batch],
    params: ModelParams | None = None,
    evaluate: Callable[[ModelParams], float] | None = None,
    checkpoint_extra: Mapping | None = None,
) -> TrainResult:
    """Run exactly ``schedule.stop_iter`` Adamax steps over seeded mini-batches."""
    if len(data) == 0:
        raise ValueError("empty training set")
    if params is None:
        params = init_params(config, np.random.default_rng([run.seed, 0]))
    else:
        params = params.copy()
    state = AdamaxState.zeros_like(params.arrays)
    multipliers = {"default": 1.0, "finetune": run.finetune_lr_multiplier}
    records: list[LogRecord] = []
    order = batch_order(len(data), run.batch_size, run.schedule.stop_iter, run.seed)

    last_good = params
    for it, idx in enumerate(order):
        lr = lr_at(it, run.schedule)
        batch = collate([data[i] for i in idx])
        tape, P, loss = batch_loss(batch, params, config)
        loss_value = float(loss.data)
        if not math.isfinite(loss_value):
            _abort(run, last_good, config, checkpoint_extra, records, it)
        reverse_gradients(tape, loss)
        grads = {k: t.grad for k, t in P.items()}
        if run.grad_clip > 0:
            _clip(grads, run.grad_clip)
        last_good = params.copy()
        try:
            adamax_step(params.arrays, grads, state, lr, params.groups, multipliers)
        except FloatingPointError:
            _abort(run, last_good, config, checkpoint_extra, records, it)

        acc = None
        if evaluate is not None and run.eval_every and (it + 1) % run.eval_every == 0:
            acc = evaluate(params)
        if acc is not None or it % run.log_every == 0 or it == len(order) - 1:
            records.append(LogRecord(it, lr, loss_value, acc))
        if it % 500 == 0:
            log.debug("iter %d lr %.3g loss %.5f", it, lr, loss_value)

    result = TrainResult(params, records)
    _write_outputs(run, params, config, checkpoint_extra, result)
    return result


def _write_outputs(run, params, config, extra, result):
    if run.checkpoint_path:
        save_checkpoint(run.checkpoint_path, params, config, extra)
    if run.log_path:
        Path(run.log_path).write_text(result.log_text())


def _abort(run, params, config, extra, records, it):
    _write_outputs(run, params, config, extra, TrainResult(params, records))
    raise TrainingDiverged(f"training diverged at iteration {it}")
