"""Comparison defenses: clean-only fine-tuning and activation-based fine-pruning."""
from __future__ import annotations

import math
from typing import List, Tuple

import numpy as np

from .data import DefenderDataset, LabeledDataset
from .errors import InputError
from .finetune import FineTuneConfig, FineTuneHistory, fit_with_early_stopping
from .models import Conv2d, FilterId, Model, ReLU, prune_filter


def ft_defense(model: Model, defender: DefenderDataset,
               cfg: FineTuneConfig = FineTuneConfig()) -> Tuple[Model, FineTuneHistory]:
    """Fine-tune on ``clean_train`` only, early-stopping on ``clean_val`` loss."""
    return fit_with_early_stopping(model, defender.clean_train, defender.clean_val, cfg)


def _last_conv_activation_layer(model: Model) -> Tuple[int, int]:
    """(conv index, layer index whose output is the last conv's post-ReLU activation)."""
    conv_positions = [i for i, layer in enumerate(model.layers) if isinstance(layer, Conv2d)]
    if not conv_positions:
        raise InputError("model has no convolutional layer")
    pos = conv_positions[-1]
    if pos + 1 < len(model.layers) and isinstance(model.layers[pos + 1], ReLU):
        pos += 1
    return len(conv_positions) - 1, pos


def last_conv_activations(model: Model, data: LabeledDataset, batch_size: int = 256) -> np.ndarray:
    """Mean absolute activation of every filter of the last conv layer over ``data``."""
    if len(data) == 0:
        raise InputError("activation ranking needs a non-empty dataset")
    _, pos = _last_conv_activation_layer(model)
    total = None
    for start in range(0, len(data), batch_size):
        taps = {pos: None}
        model.forward(data.images[start:start + batch_size], taps=taps)
        part = np.abs(taps[pos]).sum(axis=(0, 2, 3))
        total = part if total is None else total + part
    spatial = int(np.prod(taps[pos].shape[2:]))
    return total / (len(data) * spatial)


def activation_ranking(model: Model, data: LabeledDataset) -> List[FilterId]:
    """Unpruned filters of the last conv layer, least active first (ties: lower index)."""
    layer, _ = _last_conv_activation_layer(model)
    act = last_conv_activations(model, data)
    candidates = [i for i in range(act.size) if FilterId(layer, i) not in model.mask]
    candidates.sort(key=lambda i: (act[i], i))
    return [FilterId(layer, i) for i in candidates]


def activation_prune(model: Model, data: LabeledDataset, prune_fraction: float) -> Tuple[Model, List[FilterId]]:
    """Prune the floor(fraction * n) least-active unpruned filters of the last conv layer."""
    if not 0.0 <= prune_fraction < 1.0:
        raise InputError(f"prune_fraction must lie in [0, 1), got {prune_fraction}")
    ranking = activation_ranking(model, data)
    chosen = ranking[:math.floor(prune_fraction * len(ranking))]
    pruned = model
    for fid in chosen:
        pruned = prune_filter(pruned, fid)
    return pruned, chosen


def fine_pruning_defense(model: Model, defender: DefenderDataset, prune_fraction: float = 0.3,
                         cfg: FineTuneConfig = FineTuneConfig()) -> Tuple[Model, List[FilterId], FineTuneHistory]:
    """Activation-based pruning on ``clean_train`` followed by :func:`ft_defense`."""
    pruned, chosen = activation_prune(model, defender.clean_train, prune_fraction)
    tuned, history = ft_defense(pruned, defender, cfg)
    return tuned, chosen, history
