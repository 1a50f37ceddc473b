"""Optimization: Adam with bias correction, a warmup + linear-decay
learning-rate schedule, and the seeded epoch driver used by both the
prior classifier and the transformer.

Determinism contract: (seed, data, config) fully determine every weight
after training.  Batch order comes from a Philox counter-based
generator, so loss trajectories are reproducible across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .data import Dataset
from .errors import ShapeError, TrainingError
from .rng import philox
from .tensor import Tape, Tensor, backward

ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    base_lr: float = 3e-4
    warmup_epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ShapeError(f"warmup_epochs {self.warmup_epochs} exceeds epochs {self.epochs}")
        if self.batch_size < 1:
            raise ShapeError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ShapeError("base_lr must be positive")


@dataclass
class OptimizerState:
    """Per-parameter first/second moment accumulators and the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    config: TrainConfig,
) -> None:
    """One bias-corrected Adam update, in place.

    Weight decay is decoupled: parameters shrink by (1 - lr * decay)
    before the gradient step.  Non-finite gradients abort training.
    """
    if lr <= 0:
        raise ShapeError(f"adam_step needs lr > 0, got {lr}")
    state.t += 1
    correction1 = 1.0 - config.beta1**state.t
    correction2 = 1.0 - config.beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter is {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name!r} at step {state.t}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        if config.weight_decay:
            p.data *= 1.0 - lr * config.weight_decay
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Piecewise-linear schedule: 0 to base_lr over the warmup span, then
    base_lr back to 0 at ``total_steps``.

    The warmup span is the warmup-epoch fraction of ``total_steps``.
    """
    if not 0 <= step <= total_steps:
        raise ShapeError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = (total_steps * config.warmup_epochs) // config.epochs
    if step <= warmup_steps and warmup_steps > 0:
        return config.base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return config.base_lr
    return config.base_lr * (total_steps - step) / (total_steps - warmup_steps)


@dataclass
class CurvePoint:
    step: int
    epoch: int
    lr: float
    loss: float
    accuracy: float  # cumulative training accuracy within the epoch


@dataclass
class TrainResult:
    curve: list[CurvePoint]
    epoch_accuracy: list[float]
    final_step: int
    # Adam moments keyed opt.m.<param> / opt.v.<param>, for checkpointing
    optimizer_tensors: dict[str, np.ndarray] = field(default_factory=dict)


def loss_curve_csv(curve: Iterable[CurvePoint]) -> str:
    lines = ["step,epoch,lr,loss,accuracy"]
    for pt in curve:
        lines.append(f"{pt.step},{pt.epoch},{pt.lr!r},{pt.loss!r},{pt.accuracy!r}")
    return "\n".join(lines) + "\n"


def run_training(
    trainable,
    dataset: Dataset,
    config: TrainConfig,
    priors_for: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    start_step: int = 0,
    optimizer_tensors: Optional[dict[str, np.ndarray]] = None,
    on_step: Optional[Callable[[CurvePoint], None]] = None,
) -> TrainResult:
    """Seeded epoch driver shared by the prior classifier and the transformer.

    ``trainable`` exposes ``parameters()``, ``zero_grad()`` and
    ``batch_loss(images, labels, priors)``; ``priors_for`` maps an index
    array to a (B, K) prior-logits block (None for models that take no
    priors).  ``start_step`` and ``optimizer_tensors`` resume a previous
    run: the step counter continues monotonically and the Adam moments
    are restored.  Returns the per-step loss curve; aborts on non-finite
    loss.
    """
    if dataset.labels is None:
        raise TrainingError("training needs a labeled dataset")
    n = len(dataset)
    if n == 0:
        raise TrainingError("training needs a nonempty dataset")
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs + start_step
    gen = philox(config.seed, 0x5EED)
    state = OptimizerState(t=start_step)
    params = trainable.parameters()
    if optimizer_tensors:
        for name in params:
            if f"opt.m.{name}" in optimizer_tensors:
                state.m[name] = np.ascontiguousarray(optimizer_tensors[f"opt.m.{name}"])
                state.v[name] = np.ascontiguousarray(optimizer_tensors[f"opt.v.{name}"])
    curve: list[CurvePoint] = []
    epoch_accuracy: list[float] = []
    step = start_step
    for epoch in range(config.epochs):
        order = gen.permutation(n)
        seen = correct_total = 0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            images = dataset.images[idx]
            labels = dataset.labels[idx]
            priors = None if priors_for is None else priors_for(idx)
            trainable.zero_grad()
            tape = Tape()
            with tape:
                if priors is None:
                    loss, correct = trainable.batch_loss(images, labels)
                else:
                    loss, correct = trainable.batch_loss(images, labels, priors)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise TrainingError(f"non-finite loss {loss_value} at step {step + 1}")
            backward(loss)
            step += 1
            lr = lr_at(step, total_steps, config)
            grads = {name: p.grad for name, p in params.items() if p.grad is not None}
            if lr > 0:
                adam_step(params, grads, state, lr, config)
            # the schedule hits exactly 0 on the final step; that update
            # would be a no-op, so it is skipped rather than applied
            seen += len(idx)
            correct_total += correct
            point = CurvePoint(step, epoch, lr, loss_value, correct_total / seen)
            curve.append(point)
            if on_step is not None:
                on_step(point)
        epoch_accuracy.append(correct_total / seen)
    moments: dict[str, np.ndarray] = {}
    for name in params:
        if name in state.m:
            moments[f"opt.m.{name}"] = state.m[name]
            moments[f"opt.v.{name}"] = state.v[name]
    return TrainResult(curve=curve, epoch_accuracy=epoch_accuracy, final_step=step,
                       optimizer_tensors=moments)


def train(model, dataset: Dataset, prior_source, config: TrainConfig, start_step: int = 0,
          optimizer_tensors: Optional[dict[str, np.ndarray]] = None) -> TrainResult:
    """Train the prior-token transformer on a labeled dataset.

    Each batch element gets the prior logits resolved for its own sample
    id (or computed from its pixels, for model-backed sources).
    """
    from .priors import priors_for_indices  # local import to avoid a cycle

    return run_training(
        model,
        dataset,
        config,
        priors_for=lambda idx: priors_for_indices(prior_source, dataset, idx),
        start_step=start_step,
        optimizer_tensors=optimizer_tensors,
    )
