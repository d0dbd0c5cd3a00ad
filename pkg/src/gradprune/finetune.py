"""Masked fine-tuning with early stopping on a held-out validation loss."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np

from .data import DefenderDataset, LabeledDataset
from .errors import ConfigError, InputError
from .training import SgdConfig, SgdOptimizer, check_compatible, mean_loss, run_epoch


@dataclass(frozen=True)
class FineTuneConfig:
    sgd: SgdConfig = SgdConfig(learning_rate=0.01, momentum=0.9, batch_size=16, epochs=100)
    patience_t: int = 5
    improvement_tol: float = 1e-4

    def __post_init__(self):
        if self.patience_t < 1:
            raise ConfigError("patience_t must be >= 1")
        if self.improvement_tol < 0:
            raise ConfigError("improvement_tol must be >= 0")

    @property
    def max_epochs(self) -> int:
        return self.sgd.epochs


@dataclass
class FineTuneHistory:
    """Per-epoch losses; index 0 of ``val_loss`` is the starting model."""

    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_jsonl(self) -> str:
        rows = [{"epoch": 0, "train_loss": None, "val_loss": self.val_loss[0]}]
        rows += [{"epoch": e + 1, "train_loss": t, "val_loss": v}
                 for e, (t, v) in enumerate(zip(self.train_loss, self.val_loss[1:]))]
        rows.append({"best_epoch": self.best_epoch})
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def fit_with_early_stopping(model, train_set: LabeledDataset, val_set: LabeledDataset,
                            cfg: FineTuneConfig) -> Tuple[object, FineTuneHistory]:
    """Train a copy of ``model``; return the lowest-validation-loss checkpoint.

    The starting model counts as epoch 0.  Training stops once ``patience_t``
    consecutive epochs fail to beat the best loss by more than
    ``improvement_tol``, or after ``cfg.sgd.epochs`` epochs.  Ties keep the
    earliest epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise InputError("fine-tuning needs non-empty training and validation sets")
    check_compatible(model, train_set)
    check_compatible(model, val_set)
    current = model.copy()
    opt = SgdOptimizer(current, cfg.sgd.learning_rate, cfg.sgd.momentum)
    rng = np.random.default_rng(cfg.sgd.seed)
    history = FineTuneHistory(val_loss=[mean_loss(current, val_set)])
    best_model, best_loss, stale = current.copy(), history.val_loss[0], 0
    for epoch in range(1, cfg.sgd.epochs + 1):
        history.train_loss.append(run_epoch(current, opt, train_set, cfg.sgd.batch_size, rng, epoch))
        loss = mean_loss(current, val_set)
        history.val_loss.append(loss)
        if loss < best_loss - cfg.improvement_tol:
            best_model, best_loss, stale = current.copy(), loss, 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience_t:
                break
    return best_model, history


def fine_tune(model, defender: DefenderDataset, cfg: FineTuneConfig = FineTuneConfig()):
    """Retrain on clean and triggered defender samples, all with their true labels.

    Validation loss is the unweighted mean over ``clean_val`` plus
    ``backdoor_val``.  Pruned filters stay exactly zero.
    """
    train_set = defender.clean_train.concat(defender.backdoor_train)
    val_set = defender.clean_val.concat(defender.backdoor_val)
    return fit_with_early_stopping(model, train_set, val_set, cfg)
