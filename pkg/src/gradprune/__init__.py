"""Backdoor mitigation by gradient-guided filter pruning, on a small numpy CNN stack."""

__version__ = "0.1.0"

from .data import (DefenderDataset, LabeledDataset, TriggerSpec, apply_trigger, generate_synthetic, load_idx,
                   make_defender_split, poison_training_set)
from .estimators import CNNClassifier, FinePruningDefense, FineTuningDefense, GradientPruningDefense
from .finetune import FineTuneConfig, fine_tune
from .metrics import MetricsReport, eval_acc, eval_asr, eval_ra, evaluate
from .models import FilterId, Model, PruneMask, build_model, load_checkpoint, prune_filter, save_checkpoint
from .pruning import PruneConfig, PruneTrace, filter_scores, prune_loop, prune_round, unlearning_loss
from .training import SgdConfig, train, train_backdoored

__all__ = [
    "CNNClassifier", "DefenderDataset", "FilterId", "FinePruningDefense", "FineTuneConfig", "FineTuningDefense",
    "GradientPruningDefense", "LabeledDataset", "MetricsReport", "Model", "PruneConfig", "PruneMask", "PruneTrace",
    "SgdConfig", "TriggerSpec", "apply_trigger", "build_model", "eval_acc", "eval_asr", "eval_ra", "evaluate",
    "filter_scores", "fine_tune", "generate_synthetic", "load_checkpoint", "load_idx", "make_defender_split",
    "poison_training_set", "prune_filter", "prune_loop", "prune_round", "save_checkpoint", "train",
    "train_backdoored", "unlearning_loss",
]
