"""Scikit-learn style estimators wrapping the training and adaptation loops.

Both estimators keep constructor arguments verbatim (so ``get_params`` /
``set_params`` / ``clone`` behave), expose fitted state through
trailing-underscore attributes, and validate array inputs through the
helpers in :mod:`multiscene.validation`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .accumulation import CycleTrainingConfig, run_accumulation
from .adaptation import AdaptationConfig, Pools, pools_from_bundle, run_adaptation
from .errors import ContractError
from .losses import evaluate_accuracy, predict_labels
from .network import EncoderConfig, ModelBundle, predict_all
from .synthetic import DatasetBundle
from .tensor import Tensor, no_grad
from .validation import check_images, check_is_fitted, check_label_matrix


class _SceneModelMixin:
    """predict/predict_proba/score over a fitted ModelBundle in ``model_``."""

    model_: ModelBundle | None

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.config.image_size)
        return predict_labels(self.model_, X)

    def predict_proba(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.config.image_size)
        with no_grad():
            probs, _ = predict_all(Tensor(X), self.model_)
        return [p.data.copy() for p in probs]

    def score(self, X, y) -> float:
        """Unweighted mean per-task accuracy; -1 labels are ignored."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.config.image_size)
        y = check_label_matrix(y, self.model_.n_tasks, self.model_.class_counts)
        _, avg = evaluate_accuracy(self.model_, X, y)
        if avg is None:
            raise ContractError("every label is masked; nothing to score")
        return avg


class CyclicDistillationClassifier(_SceneModelMixin, BaseEstimator):
    """Multi-head classifier trained cyclically across single-label subsets.

    ``fit`` consumes a :class:`~multiscene.synthetic.DatasetBundle` and runs
    the full accumulation loop; the fitted model combines the consolidated
    teacher encoder with the final task heads.
    """

    def __init__(self, cycles: int = 40, batch_size: int = 32,
                 peak_lr: float = 5e-4, start_lr: float = 1e-6,
                 final_lr: float = 1e-5, warmup_frac: float = 0.1,
                 weight_decay: float = 0.01,
                 stage_weights: tuple = (1.0, 1.0, 1.0, 1.0),
                 indicator_shape: float = 4.0, smoothing: float = 0.9,
                 acquisition_override: float | None = None,
                 early_stop: bool = False, seed: int = 0):
        self.cycles = cycles
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.start_lr = start_lr
        self.final_lr = final_lr
        self.warmup_frac = warmup_frac
        self.weight_decay = weight_decay
        self.stage_weights = stage_weights
        self.indicator_shape = indicator_shape
        self.smoothing = smoothing
        self.acquisition_override = acquisition_override
        self.early_stop = early_stop
        self.seed = seed

    def _config(self, image_size: int) -> CycleTrainingConfig:
        return CycleTrainingConfig(
            cycles=self.cycles, batch_size=self.batch_size, start_lr=self.start_lr,
            peak_lr=self.peak_lr, final_lr=self.final_lr,
            warmup_frac=self.warmup_frac, weight_decay=self.weight_decay,
            stage_weights=tuple(self.stage_weights),
            indicator_shape=self.indicator_shape, smoothing=self.smoothing,
            acquisition_override=self.acquisition_override,
            early_stop=self.early_stop,
            encoder=EncoderConfig(image_size=image_size))

    def fit(self, bundle: DatasetBundle, y=None):
        if not isinstance(bundle, DatasetBundle):
            raise ContractError("fit expects a DatasetBundle")
        result = run_accumulation(bundle, self._config(bundle.config.image_size),
                                  seed=self.seed)
        self.model_ = result.foundation
        self.student_ = result.student
        self.history_ = result.history
        self.traces_ = result.traces
        self.stopped_cycle_ = result.stopped_cycle
        self.n_tasks_ = result.foundation.n_tasks
        return self


class ConsistencyActiveLearner(_SceneModelMixin, BaseEstimator):
    """Adapts a fitted foundation model to joint multi-label data.

    ``fit`` takes the foundation bundle plus either prepared
    :class:`~multiscene.adaptation.Pools` or a DatasetBundle (pools are
    then built with ``kappa``), and an oracle with an
    ``annotate(ids, images=...)`` method.
    """

    def __init__(self, iterations: int = 5, budget_fraction: float = 0.01,
                 budgets: tuple | None = None, kappa: int = 10,
                 sampler: str = "consistency", finetune_epochs: int = 20,
                 peak_lr: float = 1e-4, start_lr: float = 1e-7,
                 final_lr: float = 1e-6, warmup_frac: float = 0.1,
                 weight_decay: float = 0.01, focal_gamma: float = 1.0,
                 rescore_each_iteration: bool = True, seed: int = 0):
        self.iterations = iterations
        self.budget_fraction = budget_fraction
        self.budgets = budgets
        self.kappa = kappa
        self.sampler = sampler
        self.finetune_epochs = finetune_epochs
        self.peak_lr = peak_lr
        self.start_lr = start_lr
        self.final_lr = final_lr
        self.warmup_frac = warmup_frac
        self.weight_decay = weight_decay
        self.focal_gamma = focal_gamma
        self.rescore_each_iteration = rescore_each_iteration
        self.seed = seed

    def _config(self) -> AdaptationConfig:
        return AdaptationConfig(
            iterations=self.iterations, budget_fraction=self.budget_fraction,
            budgets=tuple(self.budgets) if self.budgets is not None else None,
            kappa=self.kappa, sampler=self.sampler,
            rescore_each_iteration=self.rescore_each_iteration,
            finetune_epochs=self.finetune_epochs, start_lr=self.start_lr,
            peak_lr=self.peak_lr, final_lr=self.final_lr,
            warmup_frac=self.warmup_frac, weight_decay=self.weight_decay,
            focal_gamma=self.focal_gamma)

    def fit(self, foundation: ModelBundle, data, oracle):
        if not isinstance(foundation, ModelBundle):
            raise ContractError("fit expects a fitted ModelBundle as the starting model")
        if isinstance(data, Pools):
            pools = data
        elif isinstance(data, DatasetBundle):
            pools = pools_from_bundle(data, self.kappa, oracle, seed=self.seed)
        else:
            raise ContractError("fit expects Pools or a DatasetBundle")
        result = run_adaptation(foundation, pools, oracle, self._config(),
                                seed=self.seed)
        self.model_ = result.model
        self.history_ = result.history
        self.curves_ = result.curves
        self.pools_ = result.pools
        self.n_tasks_ = result.model.n_tasks
        return self
