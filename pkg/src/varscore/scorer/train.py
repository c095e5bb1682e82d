"""Cross-entropy objective and the RES training loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..structio import MaskedGraph
from .model import (
    NUM_CLASSES,
    FeatureSpec,
    GraphFeatures,
    GVPScorer,
    build_scorer,
    collate,
    forward_many,
    model_dtype,
    prepare,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    scheduler_patience: int = 10
    decay_rate: float = 0.75
    dropout: float = 0.1
    batch_size: int = 64
    epochs: int = 40
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size <= 0 or self.epochs < 0 or self.learning_rate < 0:
            raise ValueError(f"invalid training configuration: {self}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    learning_rate: float


def _labels(graphs: Sequence[MaskedGraph]) -> torch.Tensor:
    return torch.as_tensor([g.true_label.index for g in graphs], dtype=torch.long)


def _batch_logits(model: GVPScorer, feats: Sequence[GraphFeatures]) -> torch.Tensor:
    batch, targets = collate(feats)
    return model(batch, targets)


def loss_and_grad(model: GVPScorer, batch: Sequence[MaskedGraph]) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over ``batch`` and its gradient for every parameter.

    Dropout is disabled so the result is a deterministic function of the
    parameters.
    """
    if not batch:
        raise ValueError("empty batch")
    dtype = model_dtype(model)
    feats = [prepare(g, model.spec, dtype) for g in batch]
    was_training = model.training
    model.eval()
    try:
        model.zero_grad(set_to_none=True)
        loss = F.cross_entropy(_batch_logits(model, feats), _labels(batch))
        loss.backward()
        grads = {
            name: (p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(p.shape))
            for name, p in model.named_parameters()
        }
        model.zero_grad(set_to_none=True)
    finally:
        model.train(was_training)
    return float(loss.detach()), grads


def _evaluate(model, feats, labels, batch_size=256) -> tuple[float, float]:
    model.eval()
    total, correct = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(feats), batch_size):
            logits = _batch_logits(model, feats[start : start + batch_size])
            y = labels[start : start + batch_size]
            total += float(F.cross_entropy(logits, y, reduction="sum"))
            correct += int((logits.argmax(dim=1) == y).sum())
    return total / len(feats), correct / len(feats)


def train_res(
    train: Sequence[MaskedGraph],
    val: Sequence[MaskedGraph] = (),
    config: TrainConfig = TrainConfig(),
    spec: FeatureSpec = FeatureSpec(),
    model: GVPScorer | None = None,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> tuple[GVPScorer, list[EpochMetrics]]:
    """Train a scorer on masked graphs and return the best-validation checkpoint.

    The learning rate is multiplied by ``decay_rate`` whenever the validation
    loss has not improved for ``scheduler_patience`` epochs.  Without a
    validation set the training loss drives both the scheduler and the
    checkpoint choice.
    """
    if not train:
        raise ValueError("empty training set")
    if model is None:
        model = build_scorer(spec, seed=config.seed)
    spec = model.spec
    dtype = model_dtype(model)
    train_feats = [prepare(g, spec, dtype) for g in train]
    val_feats = [prepare(g, spec, dtype) for g in val]
    y_train, y_val = _labels(train), _labels(val)

    if config.optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    else:
        opt = torch.optim.SGD(model.parameters(), lr=config.learning_rate)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=config.decay_rate, patience=config.scheduler_patience
    )

    history: list[EpochMetrics] = []
    best_loss, best_state = math.inf, copy.deepcopy(model.state_dict())
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        gen = torch.Generator().manual_seed(config.seed)
        for epoch in range(1, config.epochs + 1):
            model.train()
            model.set_dropout(config.dropout)
            order = torch.randperm(len(train_feats), generator=gen).tolist()
            running, seen = 0.0, 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                opt.zero_grad(set_to_none=True)
                loss = F.cross_entropy(_batch_logits(model, [train_feats[i] for i in idx]), y_train[idx])
                loss.backward()
                opt.step()
                running += float(loss.detach()) * len(idx)
                seen += len(idx)
            model.set_dropout(0.0)
            train_loss = running / seen
            if val_feats:
                val_loss, val_acc = _evaluate(model, val_feats, y_val)
            else:
                val_loss, val_acc = train_loss, float("nan")
            sched.step(val_loss)
            row = EpochMetrics(epoch, train_loss, val_loss, val_acc, opt.param_groups[0]["lr"])
            history.append(row)
            log.info("epoch %d train %.4f val %.4f acc %.3f", epoch, train_loss, val_loss, val_acc)
            if on_epoch is not None:
                on_epoch(row)
            if val_loss < best_loss:
                best_loss, best_state = val_loss, copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.set_dropout(0.0)
    model.eval()
    return model, history


def evaluate_accuracy(model: GVPScorer, dataset: Sequence[MaskedGraph]) -> float:
    if not dataset:
        raise ValueError("empty dataset")
    logits = forward_many(model, dataset)
    return float(np.mean(logits.argmax(axis=1) == _labels(dataset).numpy()))


def predictions(model: GVPScorer, dataset: Sequence[MaskedGraph]) -> np.ndarray:
    return forward_many(model, dataset).argmax(axis=1)


__all__ = [
    "TrainConfig",
    "EpochMetrics",
    "loss_and_grad",
    "train_res",
    "evaluate_accuracy",
    "predictions",
    "NUM_CLASSES",
]
