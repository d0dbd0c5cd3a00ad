"""scikit-learn style wrappers around training and the defenses.

``CNNClassifier`` trains a model (optionally with a poisoned training set);
the defense estimators take an already trained model and are fitted on the
defender's clean samples, e.g.::

    victim = CNNClassifier(trigger=trig, poison_ratio=0.1).fit(X_train, y_train)
    defense = GradientPruningDefense(model=victim, trigger=trig).fit(X_spc, y_spc)
    defense.score(X_test, y_test)
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import autograd as ag
from ._validation import as_dataset, check_images, check_labels
from .baselines import activation_prune, ft_defense
from .data import LabeledDataset, TriggerSpec, poison_training_set, split_defender_samples
from .errors import InputError
from .finetune import FineTuneConfig, fine_tune
from .models import Model, build_model
from .pruning import PruneConfig, prune_loop
from .training import SgdConfig, train


class _ModelPredictor(ClassifierMixin, BaseEstimator):
    """predict / predict_proba / decision_function on a fitted ``model_``."""

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.input_shape)
        return np.concatenate([self.model_.forward(X[i:i + 512]) for i in range(0, len(X), 512)])

    def predict_proba(self, X) -> np.ndarray:
        return np.exp(ag.log_softmax(self.decision_function(X)))

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


class CNNClassifier(_ModelPredictor):
    """Small CNN trained with SGD + momentum.

    When ``trigger`` is given the training set is poisoned first (a
    ``poison_ratio`` share relabelled to ``trigger.target``), which is how
    the attacker produces a backdoored model.
    """

    def __init__(self, arch="cnn-small", learning_rate=0.05, momentum=0.9, batch_size=32, epochs=30,
                 trigger=None, poison_ratio=0.1, n_classes=None, random_state=0):
        self.arch = arch
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.trigger = trigger
        self.poison_ratio = poison_ratio
        self.n_classes = n_classes
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, X.shape[0], self.n_classes)
        n_classes = self.n_classes if self.n_classes is not None else int(y.max()) + 1
        data = LabeledDataset(X, y, max(n_classes, 2))
        cfg = SgdConfig(self.learning_rate, self.momentum, self.batch_size, self.epochs, self.random_state)
        if self.trigger is not None:
            data = poison_training_set(data, self.trigger, self.poison_ratio, self.random_state)
        model = build_model(self.arch, data.num_classes, data.image_shape, self.random_state)
        self.model_, self.loss_history_ = train(model, data, cfg)
        self.classes_ = np.arange(data.num_classes)
        return self

    @classmethod
    def from_model(cls, model: Model) -> "CNNClassifier":
        est = cls(arch=model.arch, n_classes=model.num_classes, random_state=model.seed)
        est.model_ = model
        est.classes_ = np.arange(model.num_classes)
        est.loss_history_ = []
        return est


def _unwrap(model) -> Model:
    if isinstance(model, Model):
        return model
    if isinstance(model, BaseEstimator) and hasattr(model, "model_"):
        return model.model_
    raise InputError("model must be a gradprune Model or a fitted CNNClassifier")


class _DefenseBase(_ModelPredictor):
    def _finetune_config(self) -> FineTuneConfig:
        sgd = SgdConfig(self.learning_rate, self.momentum, self.batch_size, self.max_epochs, self.random_state)
        return FineTuneConfig(sgd, self.patience_t, self.finetune_tol)

    def _defender_data(self, X, y):
        if self.trigger is None:
            raise InputError("a trigger is required to build the defender's backdoor samples")
        victim = _unwrap(self.model)
        data = as_dataset(X, y, victim.num_classes, victim.input_shape)
        return victim, split_defender_samples(data, self.trigger, self.random_state)


class GradientPruningDefense(_DefenseBase):
    """Prune filters by unlearning-loss gradient, then fine-tune on clean + corrected backdoor data.

    ``fit(X, y)`` takes the defender's clean samples (balanced per class);
    10% per class is held out for validation and every sample gets a
    triggered twin that keeps its true label.
    """

    def __init__(self, model=None, trigger=None, alpha_mode="drop", alpha=0.10, patience_p=10, prune_tol=1e-4,
                 include_bias=True, learning_rate=0.01, momentum=0.9, batch_size=16, max_epochs=100,
                 patience_t=5, finetune_tol=1e-4, random_state=0):
        self.model = model
        self.trigger = trigger
        self.alpha_mode = alpha_mode
        self.alpha = alpha
        self.patience_p = patience_p
        self.prune_tol = prune_tol
        self.include_bias = include_bias
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience_t = patience_t
        self.finetune_tol = finetune_tol
        self.random_state = random_state

    def fit(self, X, y):
        victim, defender = self._defender_data(X, y)
        prune_cfg = PruneConfig(self.alpha_mode, self.alpha, self.patience_p, self.prune_tol, self.include_bias)
        self.pruned_model_, self.prune_trace_ = prune_loop(victim, defender, prune_cfg)
        self.model_, self.finetune_history_ = fine_tune(self.pruned_model_, defender, self._finetune_config())
        self.classes_ = np.arange(victim.num_classes)
        return self


class FineTuningDefense(_DefenseBase):
    """Fine-tune on the defender's clean samples only."""

    def __init__(self, model=None, trigger=None, learning_rate=0.01, momentum=0.9, batch_size=16, max_epochs=100,
                 patience_t=5, finetune_tol=1e-4, random_state=0):
        self.model = model
        self.trigger = trigger
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience_t = patience_t
        self.finetune_tol = finetune_tol
        self.random_state = random_state

    def _defender_data(self, X, y):
        victim = _unwrap(self.model)
        data = as_dataset(X, y, victim.num_classes, victim.input_shape)
        if self.trigger is None:
            # only the clean split is used; any patch keeps the split logic identical
            trig = TriggerSpec.badnets(data.image_shape, size=1)
        else:
            trig = self.trigger
        return victim, split_defender_samples(data, trig, self.random_state)

    def fit(self, X, y):
        victim, defender = self._defender_data(X, y)
        self.model_, self.finetune_history_ = ft_defense(victim, defender, self._finetune_config())
        self.classes_ = np.arange(victim.num_classes)
        return self


class FinePruningDefense(FineTuningDefense):
    """Prune the least-active filters of the last conv layer, then fine-tune on clean data."""

    def __init__(self, model=None, trigger=None, prune_fraction=0.3, learning_rate=0.01, momentum=0.9,
                 batch_size=16, max_epochs=100, patience_t=5, finetune_tol=1e-4, random_state=0):
        super().__init__(model, trigger, learning_rate, momentum, batch_size, max_epochs, patience_t,
                         finetune_tol, random_state)
        self.prune_fraction = prune_fraction

    def fit(self, X, y):
        victim, defender = self._defender_data(X, y)
        self.pruned_model_, self.pruned_filters_ = activation_prune(victim, defender.clean_train, self.prune_fraction)
        self.model_, self.finetune_history_ = ft_defense(self.pruned_model_, defender, self._finetune_config())
        self.classes_ = np.arange(victim.num_classes)
        return self
