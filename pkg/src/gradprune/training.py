"""Mini-batch SGD with momentum, and the attacker's backdoor training run."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autograd as ag
from .data import LabeledDataset, TriggerSpec, poison_training_set
from .errors import DimensionError, InputError, NumericDivergenceError
from .models import Model, build_model, mask_gradients


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InputError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise InputError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")


def check_compatible(model: Model, data: LabeledDataset) -> None:
    if len(data) == 0:
        raise InputError("dataset is empty")
    if tuple(data.image_shape) != model.input_shape:
        raise DimensionError(f"data images {data.image_shape} do not match model input {model.input_shape}")
    if data.num_classes > model.num_classes:
        raise DimensionError(f"data has {data.num_classes} classes, model only {model.num_classes}")


def loss_and_grads(model: Model, images: np.ndarray, labels: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    logits, leaves = model.forward(images, record=True)
    loss = ag.softmax_cross_entropy(logits, labels)
    grads = ag.backward(loss, params=leaves.values())
    return float(loss.data), grads


def mean_loss(model: Model, data: LabeledDataset, batch_size: int = 512) -> float:
    """Mean cross-entropy over ``data``, accumulated batch by batch in order."""
    total = 0.0
    for start in range(0, len(data), batch_size):
        x = data.images[start:start + batch_size]
        y = data.labels[start:start + batch_size]
        total += float(ag.softmax_cross_entropy(model.forward(x), y).data) * len(y)
    return total / len(data)


class SgdOptimizer:
    """Heavy-ball SGD: ``v = momentum * v + g``; ``p -= lr * v``.

    Gradients of pruned filters are zeroed before the update, so those
    parameters never move away from zero.
    """

    def __init__(self, model: Model, learning_rate: float, momentum: float):
        self.model = model
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(value) for name, value in model.params.items()}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        mask_gradients(self.model, grads)
        for name, param in self.model.params.items():
            v = self.velocity[name]
            v *= self.momentum
            v += grads[name]
            param -= self.learning_rate * v


def run_epoch(model: Model, opt: SgdOptimizer, data: LabeledDataset, batch_size: int,
              rng: np.random.Generator, epoch: int) -> float:
    order = rng.permutation(len(data))
    total = 0.0
    for b, start in enumerate(range(0, len(data), batch_size)):
        idx = order[start:start + batch_size]
        loss, grads = loss_and_grads(model, data.images[idx], data.labels[idx])
        if not np.isfinite(loss):
            raise NumericDivergenceError(epoch, b, loss)
        opt.step(grads)
        total += loss * len(idx)
    return total / len(data)


def train(model: Model, data: LabeledDataset, cfg: SgdConfig) -> Tuple[Model, List[float]]:
    """Train a copy of ``model``; returns it with the per-epoch mean training loss."""
    check_compatible(model, data)
    trained = model.copy()
    opt = SgdOptimizer(trained, cfg.learning_rate, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    history = [run_epoch(trained, opt, data, cfg.batch_size, rng, epoch) for epoch in range(cfg.epochs)]
    return trained, history


def train_backdoored(arch: str, clean: LabeledDataset, trig: TriggerSpec, poison_ratio: float,
                     cfg: SgdConfig, model: Optional[Model] = None) -> Model:
    """Poison ``clean`` and train a fresh ``arch`` model on it, all seeded by ``cfg.seed``."""
    poisoned = poison_training_set(clean, trig, poison_ratio, cfg.seed)
    if model is None:
        model = build_model(arch, clean.num_classes, clean.image_shape, cfg.seed)
    trained, _ = train(model, poisoned, cfg)
    return trained
