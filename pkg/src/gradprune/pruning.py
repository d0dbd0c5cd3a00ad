"""Backdoor unlearning by gradient-guided filter pruning.

Filters are scored by the mean absolute gradient of the unlearning loss
(cross-entropy of triggered inputs against their *true* labels) over the
filter's parameters.  The highest-scoring filter is zeroed, one per round,
until validation accuracy drops past the allowed threshold or the
validation unlearning loss stops improving.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import autograd as ag
from .data import DefenderDataset, LabeledDataset
from .errors import ConfigError, InputError, StateError
from .metrics import eval_acc
from .models import FilterId, Model, prune_filter

ACC_TOLERANCE = 1e-12


@dataclass(frozen=True)
class PruneConfig:
    """Stopping rules of the prune loop.

    ``alpha_mode="drop"`` allows validation accuracy to fall at most
    ``alpha`` below its pre-pruning value; ``"absolute"`` makes ``alpha`` a
    floor.  ``patience_p`` rounds without the validation unlearning loss
    improving by more than ``improvement_tol`` end the loop.
    """

    alpha_mode: str = "drop"
    alpha: float = 0.10
    patience_p: int = 10
    improvement_tol: float = 1e-4
    include_bias: bool = True

    def __post_init__(self):
        if self.alpha_mode not in ("drop", "absolute"):
            raise ConfigError(f"alpha_mode must be 'drop' or 'absolute', got {self.alpha_mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.patience_p < 1:
            raise ConfigError("patience_p must be >= 1")
        if self.improvement_tol < 0:
            raise ConfigError("improvement_tol must be >= 0")


def _unlearning_graph(model: Model, backdoor_set: LabeledDataset, scale: float = 1.0):
    if len(backdoor_set) == 0:
        raise InputError("unlearning loss needs a non-empty backdoor set")
    logits, leaves = model.forward(backdoor_set.images, record=True)
    loss = ag.softmax_cross_entropy(logits, backdoor_set.labels)
    if scale != 1.0:
        loss = ag.scale(loss, scale)
    return loss, leaves


def unlearning_loss(model: Model, backdoor_set: LabeledDataset, scale: float = 1.0) -> float:
    """Mean cross-entropy of the triggered images against their original labels."""
    if len(backdoor_set) == 0:
        raise InputError("unlearning loss needs a non-empty backdoor set")
    logits = model.forward(backdoor_set.images)
    return scale * float(ag.softmax_cross_entropy(logits, backdoor_set.labels).data)


def unlearning_gradients(model: Model, backdoor_set: LabeledDataset, scale: float = 1.0) -> Dict[str, np.ndarray]:
    loss, leaves = _unlearning_graph(model, backdoor_set, scale)
    return ag.backward(loss, params=leaves.values())


def scores_from_gradients(model: Model, grads: Mapping[str, np.ndarray],
                          include_bias: bool = True) -> Dict[FilterId, float]:
    """Mean absolute gradient per unpruned conv filter."""
    scores: Dict[FilterId, float] = {}
    for layer, conv in enumerate(model.conv_layers):
        gw = grads[f"conv{layer}.weight"]
        gb = grads[f"conv{layer}.bias"]
        l1 = np.abs(gw).reshape(conv.out_channels, -1).sum(axis=1)
        count = gw[0].size
        if include_bias:
            l1 = l1 + np.abs(gb)
            count += 1
        for i in range(conv.out_channels):
            fid = FilterId(layer, i)
            if fid not in model.mask:
                scores[fid] = float(l1[i] / count)
    return scores


def filter_scores(model: Model, backdoor_set: LabeledDataset, include_bias: bool = True,
                  scale: float = 1.0) -> Dict[FilterId, float]:
    """Score every unpruned filter with one backward pass over ``backdoor_set``."""
    if not model.unpruned_filters():
        raise StateError("every conv filter is already pruned")
    grads = unlearning_gradients(model, backdoor_set, scale)
    return scores_from_gradients(model, grads, include_bias)


def select_filter(scores: Mapping[FilterId, float]) -> FilterId:
    """Highest score; ties go to the lowest (layer, filter)."""
    if not scores:
        raise InputError("no filter scores to select from")
    return min(scores, key=lambda f: (-scores[f], f.layer, f.filter))


def prune_round(model: Model, scores: Mapping[FilterId, float]) -> Tuple[FilterId, Model]:
    fid = select_filter(scores)
    return fid, prune_filter(model, fid)


@dataclass(frozen=True)
class PruneRecord:
    round: int
    layer: int
    filter: int
    xi: float
    val_loss: float
    val_acc: float
    reverted: bool = False


@dataclass
class PruneTrace:
    initial_val_loss: float
    initial_val_acc: float
    acc_threshold: float
    records: List[PruneRecord] = field(default_factory=list)
    stop_reason: str = ""
    returned_round: int = 0

    @property
    def pruned(self) -> List[FilterId]:
        """Filters pruned in the returned model, in pruning order."""
        kept = [r for r in self.records if not r.reverted and r.round <= self.returned_round]
        return [FilterId(r.layer, r.filter) for r in kept]

    def to_jsonl(self) -> str:
        header = {
            "type": "header",
            "initial_val_loss": self.initial_val_loss,
            "initial_val_acc": self.initial_val_acc,
            "acc_threshold": self.acc_threshold,
        }
        footer = {"type": "summary", "stop_reason": self.stop_reason, "returned_round": self.returned_round,
                  "pruned": [[f.layer, f.filter] for f in self.pruned]}
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps({"type": "round", **asdict(r)}, sort_keys=True) for r in self.records]
        lines.append(json.dumps(footer, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "PruneTrace":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        head = rows[0]
        trace = cls(head["initial_val_loss"], head["initial_val_acc"], head["acc_threshold"])
        for row in rows[1:]:
            if row["type"] == "round":
                row.pop("type")
                trace.records.append(PruneRecord(**row))
            elif row["type"] == "summary":
                trace.stop_reason = row["stop_reason"]
                trace.returned_round = row["returned_round"]
        return trace


def prune_loop(model: Model, defender: DefenderDataset, cfg: PruneConfig = PruneConfig(),
               scale: float = 1.0) -> Tuple[Model, PruneTrace]:
    """Iteratively prune the highest-scoring filter.

    Each round scores filters on ``defender.backdoor_train``, prunes the
    argmax, then measures accuracy on ``clean_val`` and unlearning loss on
    ``backdoor_val``.  Stop reasons:

    * ``accuracy_floor``: the round broke the accuracy threshold; it is
      reverted and the model from the previous round is returned.
    * ``loss_plateau``: ``patience_p`` rounds in a row failed to beat the
      best validation loss by more than ``improvement_tol``; the model is
      rolled back to the best round.
    * ``exhausted``: no unpruned filter is left; rolled back to the best round.
    """
    for name in ("backdoor_train", "clean_val", "backdoor_val"):
        if len(getattr(defender, name)) == 0:
            raise InputError(f"defender {name} is empty")
    acc0 = eval_acc(model, defender.clean_val)
    loss0 = unlearning_loss(model, defender.backdoor_val, scale)
    threshold = acc0 - cfg.alpha if cfg.alpha_mode == "drop" else cfg.alpha
    trace = PruneTrace(loss0, acc0, threshold)

    current = model
    best_model, best_loss = model, loss0
    stale = 0
    round_no = 0
    while True:
        if not current.unpruned_filters():
            trace.stop_reason = "exhausted"
            current = best_model
            break
        round_no += 1
        scores = filter_scores(current, defender.backdoor_train, cfg.include_bias, scale)
        fid, candidate = prune_round(current, scores)
        acc = eval_acc(candidate, defender.clean_val)
        loss = unlearning_loss(candidate, defender.backdoor_val, scale)
        if acc < threshold - ACC_TOLERANCE:
            trace.records.append(PruneRecord(round_no, fid.layer, fid.filter, scores[fid], loss, acc, reverted=True))
            trace.stop_reason = "accuracy_floor"
            trace.returned_round = round_no - 1
            return current, trace
        trace.records.append(PruneRecord(round_no, fid.layer, fid.filter, scores[fid], loss, acc))
        current = candidate
        if loss < best_loss - cfg.improvement_tol:
            best_model, best_loss = candidate, loss
            trace.returned_round = round_no
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience_p:
                trace.stop_reason = "loss_plateau"
                current = best_model
                break
    return current, trace
