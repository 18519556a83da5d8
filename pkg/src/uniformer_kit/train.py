"""Toy training: a seeded stripe-orientation task, AdamW with decoupled decay, and a loop.

Stripe generator, per sample with label ``y`` (0 horizontal, 1 vertical)::

    f   ~ U[2, 6)            cycles across the image
    phi ~ U[0, 2*pi)         phase
    d   ~ U[-0.5, 0.5)       phase drift per frame (clips only)
    u   = row index if y == 0 else column index
    x[c, t, i, j] = sin(2*pi*f*u/size + phi + d*t) + 0.3 * n,  n ~ N(0, 1)

Labels are a seeded permutation of an equal number of zeros and ones.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, backward
from .model import UniFormer
from .rng import SplitMix64

NOISE_STD = 0.3


@dataclass(frozen=True)
class SyntheticTask:
    """Balanced two-class stripe-orientation dataset."""

    seed: int = 0
    num_samples: int = 512
    channels: int = 3
    frames: int = 1
    size: int = 32
    classes: int = 2
    noise_std: float = NOISE_STD

    def __post_init__(self):
        if self.classes != 2:
            raise ValueError("the stripe task has exactly two classes")
        if self.num_samples < 2 or self.num_samples % 2:
            raise ValueError("num_samples must be a positive even number")

    @property
    def input_spec(self) -> Tuple[int, int, int, int]:
        return (self.channels, self.frames, self.size, self.size)

    def generate(self) -> Tuple[np.ndarray, np.ndarray]:
        """``(x, y)`` with ``x`` of shape ``(N, C, T, S, S)`` float32 and ``y`` int64."""
        rng = SplitMix64(self.seed)
        n, s, t = self.num_samples, self.size, self.frames
        labels = np.repeat(np.arange(2), n // 2)[rng.permutation(n)]
        freq = rng.uniform(2.0, 6.0, n)
        phase = rng.uniform(0.0, 2 * math.pi, n)
        drift = rng.uniform(-0.5, 0.5, n) if t > 1 else np.zeros(n)
        idx = np.arange(s, dtype=np.float64)
        rows = np.broadcast_to(idx[:, None], (s, s))
        cols = np.broadcast_to(idx[None, :], (s, s))
        coord = np.where(labels[:, None, None] == 0, rows[None], cols[None])
        arg = (2 * math.pi * freq[:, None, None, None] * coord[:, None] / s
               + phase[:, None, None, None] + drift[:, None, None, None] * np.arange(t)[None, :, None, None])
        clean = np.sin(arg)[:, None]
        noise = rng.normal((n, self.channels, t, s, s)) * self.noise_std
        x = (np.broadcast_to(clean, noise.shape) + noise).astype(np.float32)
        return x, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def optimizer_step(params: Dict[str, Tensor], state: OptimizerState, hyper: AdamWConfig,
                   lr: Optional[float] = None) -> OptimizerState:
    """One AdamW update in place: ``p *= 1 - lr*wd`` then the bias-corrected Adam step."""
    lr = hyper.lr if lr is None else lr
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"missing gradient for trainable parameter {name}")
    state.step += 1
    b1, b2 = hyper.betas
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * hyper.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return state


class AdamW:
    def __init__(self, named_params, hyper: AdamWConfig = AdamWConfig()):
        self.params = dict(named_params)
        self.hyper = hyper
        self.state = OptimizerState()

    def step(self, lr: Optional[float] = None) -> None:
        optimizer_step(self.params, self.state, self.hyper, lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def lr_schedule(step: int, total: int, warmup: int, base_lr: float) -> float:
    """Linear warm-up to ``base_lr`` then cosine decay to zero at ``total``."""
    if warmup > total:
        raise ValueError(f"warmup {warmup} exceeds total steps {total}")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return base_lr * step / warmup
    if total == warmup:
        return base_lr
    progress = (step - warmup) / (total - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# loop


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 16
    warmup: int = 25
    eval_interval: int = 25
    aux_weight: float = 0.5
    optimizer: AdamWConfig = AdamWConfig()
    seed: int = 0


@dataclass
class MetricRow:
    step: int
    lr: float
    loss: float
    train_acc: float


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = logits.log_softmax(-1)
    return -logp[np.arange(labels.shape[0]), labels].mean()


def train(model: UniFormer, task: SyntheticTask, hyper: TrainConfig = TrainConfig(),
          rng: Optional[SplitMix64] = None) -> List[MetricRow]:
    """Train ``model`` on ``task``; one metrics row per ``eval_interval`` steps.

    ``loss`` and ``train_acc`` are averages over the training batches of the
    interval. Hourglass models with an auxiliary head add ``aux_weight`` times
    the cross-entropy of the score-token logits.
    """
    if model.config.num_classes != task.classes:
        raise ValueError(f"model predicts {model.config.num_classes} classes, task has {task.classes}")
    if tuple(model.config.input_spec) != task.input_spec:
        raise ValueError(f"model input {model.config.input_spec} does not match task {task.input_spec}")
    rng = SplitMix64(hyper.seed) if rng is None else rng
    data_rng, path_rng = rng.spawn(), rng.spawn()
    x_all, y_all = task.generate()
    opt = AdamW(model.named_parameters(), hyper.optimizer)
    model.train()
    order, cursor = data_rng.permutation(len(y_all)), 0
    trace: List[MetricRow] = []
    loss_sum = correct = seen = 0.0
    for step in range(1, hyper.steps + 1):
        if cursor + hyper.batch_size > len(order):
            order, cursor = data_rng.permutation(len(y_all)), 0
        idx = order[cursor:cursor + hyper.batch_size]
        cursor += hyper.batch_size
        xb, yb = x_all[idx], y_all[idx]

        lr = lr_schedule(step - 1, hyper.steps, hyper.warmup, hyper.optimizer.lr)
        logits, aux = model(xb, rng=path_rng, return_aux=True)
        loss = cross_entropy(logits, yb)
        if aux is not None:
            loss = loss + cross_entropy(aux, yb) * hyper.aux_weight
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        opt.zero_grad()
        backward(loss)
        opt.step(lr)

        loss_sum += value * len(idx)
        correct += float(np.sum(np.argmax(logits.data, axis=1) == yb))
        seen += len(idx)
        if step % hyper.eval_interval == 0 or step == hyper.steps:
            trace.append(MetricRow(step, lr, loss_sum / seen, correct / seen))
            loss_sum = correct = seen = 0.0
    return trace


def write_metrics(trace: Sequence[MetricRow], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "lr", "loss", "train_acc"])
        for r in trace:
            writer.writerow([r.step, repr(r.lr), repr(r.loss), repr(r.train_acc)])


def first_batch_loss(model: UniFormer, task: SyntheticTask, batch_size: int = 16) -> float:
    x, y = task.generate()
    return float(cross_entropy(model(x[:batch_size]), y[:batch_size]).data)


__all__ = ["AdamW", "AdamWConfig", "MetricRow", "OptimizerState", "SyntheticTask", "TrainConfig",
           "TrainingDiverged", "cross_entropy", "first_batch_loss", "lr_schedule", "optimizer_step",
           "train", "write_metrics"]
