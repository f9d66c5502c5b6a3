"""Training, attention training, statistics collection and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import attention as attn
from ..autodiff import SGD, Tape, ops
from ..errors import DivergenceError, InvalidInputError, InvalidStateError
from ..netgraph import NetworkGraph, forward, save_model, unfreeze
from ..stats import AttentionStats
from .data import AugmentFlags, Dataset, augment


@dataclass
class TrainConfig:
    epochs: int = 5
    lr: float = 1e-2
    # lr(epoch) = lr * lr_decay ** (epoch // decay_every); decay_every=0 keeps it constant
    lr_decay: float = 0.1
    decay_every: int = 0
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    hflip: bool = False
    crop: int | None = None
    pad: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidInputError("epochs must be >= 0")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.lr < 0:
            raise InvalidInputError("learning rate must be non-negative")

    def lr_at(self, epoch: int) -> float:
        if self.decay_every <= 0:
            return self.lr
        return self.lr * self.lr_decay ** (epoch // self.decay_every)

    @property
    def flags(self) -> AugmentFlags:
        return AugmentFlags(self.hflip, self.crop, self.pad)

    def steps_per_epoch(self, n: int) -> int:
        return -(-n // self.batch_size)


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    epoch_lr: list[float] = field(default_factory=list)
    alphas: list[float] = field(default_factory=list)


def _run(graph: NetworkGraph, dataset: Dataset, cfg: TrainConfig, params, schedule=None) -> TrainLog:
    log = TrainLog()
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        log.epoch_lr.append(opt.lr)
        for xb, yb in dataset.batches(cfg.batch_size, rng):
            xb = augment(xb, cfg.flags, rng)
            alpha = None
            if schedule is not None:
                alpha = schedule.current()
                log.alphas.append(alpha)
            with Tape() as tape:
                loss = ops.cross_entropy_loss(forward(graph, xb, mode="train", alpha=alpha), yb)
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}, step {len(log.losses)} (lr={opt.lr})")
            tape.backward(loss)
            opt.step()
            if schedule is not None:
                schedule.advance()
            log.losses.append(value)
    return log


def train_base(graph: NetworkGraph, dataset: Dataset, cfg: TrainConfig, checkpoint=None) -> TrainLog:
    """Plain supervised training of every base parameter."""
    if graph.shape_only:
        raise InvalidStateError("shape-only graphs cannot be trained")
    if graph.attachments:
        raise InvalidStateError("detach attention modules before training the base network")
    unfreeze(graph)
    log = _run(graph, dataset, cfg, graph.base_parameters())
    if checkpoint is not None:
        save_model(graph, checkpoint)
    return log


def attention_schedule(cfg: TrainConfig, n: int, alpha_target: float, warmup_epochs: int | None = None) -> attn.MitigationSchedule:
    """Alpha ramps over the first-rate phase (``decay_every`` epochs), then holds."""
    per = cfg.steps_per_epoch(n)
    phase1 = cfg.decay_every if cfg.decay_every > 0 else cfg.epochs
    warm = phase1 if warmup_epochs is None else warmup_epochs
    return attn.MitigationSchedule(alpha_target, warm * per, max(cfg.epochs - warm, 0) * per)


def train_attention(graph: NetworkGraph, dataset: Dataset, cfg: TrainConfig, schedule: attn.MitigationSchedule) -> TrainLog:
    """Train the attention modules only; the frozen base is never updated.

    One loop covers both phases: the learning rate switches at ``decay_every``
    while alpha follows ``schedule``, advancing once per optimizer step.
    """
    if not graph.attachments:
        raise InvalidStateError("no attention modules are attached")
    if not graph.base_frozen or any(p.requires_grad for p in graph.base_parameters()):
        raise InvalidStateError("base network is not frozen; call freeze_base first")
    phase1 = (cfg.decay_every if cfg.decay_every > 0 else cfg.epochs) * cfg.steps_per_epoch(len(dataset))
    if schedule.warmup_steps > phase1:
        raise InvalidInputError(f"alpha warmup ({schedule.warmup_steps} steps) exceeds the first phase ({phase1} steps)")
    return _run(graph, dataset, cfg, graph.attention_parameters(), schedule)


def collect_stats(graph: NetworkGraph, dataset: Dataset, alpha: float, batch_size: int = 256) -> AttentionStats:
    """One eval-mode pass accumulating the gate softmax of every module."""
    if not graph.attachments:
        raise InvalidStateError("no attention modules are attached")
    layout = {lid: s.channels for lid, s in graph.attachments.items()}
    stats = AttentionStats(layout, dataset.num_classes)
    for xb, yb in dataset.batches(batch_size):
        cap: dict[str, np.ndarray] = {}
        forward(graph, xb, mode="eval", alpha=alpha, capture=cap)
        for lid, s in cap.items():
            stats.accumulate(lid, s, yb)
    return stats


def finetune(graph: NetworkGraph, dataset: Dataset, cfg: TrainConfig, checkpoint=None) -> TrainLog:
    """Resume ordinary training on the (pruned) topology."""
    if graph.attachments:
        raise InvalidStateError("attention modules must be detached before fine-tuning")
    return train_base(graph, dataset, cfg, checkpoint)


def predict(graph: NetworkGraph, images, alpha=None, batch_size: int = 256) -> np.ndarray:
    out = [forward(graph, images[i : i + batch_size], mode="eval", alpha=alpha).data for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def evaluate(graph: NetworkGraph, dataset: Dataset, alpha=None, batch_size: int = 256) -> dict:
    """Top-1 accuracy, plus top-5 when there are at least 5 classes."""
    logits = predict(graph, dataset.images, alpha, batch_size)
    return accuracy(logits, dataset.labels)


def accuracy(logits, labels) -> dict:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    out = {"top1": float((logits.argmax(axis=1) == labels).mean())}
    if logits.shape[1] >= 5:
        top5 = np.argsort(-logits, axis=1, kind="stable")[:, :5]
        out["top5"] = float((top5 == labels[:, None]).any(axis=1).mean())
    return out
