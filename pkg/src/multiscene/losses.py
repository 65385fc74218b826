"""Loss functions, accuracy metrics, and the task-performance estimator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeMismatchError
from .network import ModelBundle, predict_all
from .tensor import Tensor, no_grad

LOG_CLAMP = 1e-12  # floor applied to probabilities before log


def cross_entropy(y_onehot, probs) -> Tensor:
    """-y . log(p) for a one-hot target and a probability vector."""
    y = np.asarray(y_onehot, dtype=np.float64)
    if not isinstance(probs, Tensor):
        probs = Tensor(probs)
    if y.shape != probs.shape:
        raise ShapeMismatchError(f"target {y.shape} vs prediction {probs.shape}")
    if not (np.isin(y, (0.0, 1.0)).all() and y.sum() == 1.0):
        raise ContractError("target must be one-hot")
    logp = probs.clip_min(LOG_CLAMP).log()
    return -(Tensor(y.astype(probs.dtype)) * logp).sum()


def batch_cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean cross-entropy over a batch, labels given as class indices."""
    labels = np.asarray(labels)
    k = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k}), got range "
                            f"[{labels.min()}, {labels.max()}]")
    picked = T.take_per_row(probs, labels)
    return -(picked.clip_min(LOG_CLAMP).log().mean())


def stage_consistency(d: Tensor, d_ref: Tensor) -> Tensor:
    """Mean squared error between two stage embeddings."""
    if d.shape != d_ref.shape:
        raise ShapeMismatchError(f"embedding shapes differ: {d.shape} vs {d_ref.shape}")
    diff = d - d_ref
    return (diff * diff).mean()


def consistency_total(stage_losses: Sequence[Tensor],
                      weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0)) -> Tensor:
    """Weighted sum over the four stage losses; zero-weight terms are dropped."""
    if len(stage_losses) != len(weights):
        raise ContractError(f"expected {len(weights)} stage losses, got {len(stage_losses)}")
    total = None
    for loss, w in zip(stage_losses, weights):
        if w == 0.0:
            continue
        term = loss if w == 1.0 else loss * w
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros(()))
    return total


def acquisition_weight(estimated_accuracy: float, shape: float = 4.0) -> float:
    """Blend weight for the prediction loss: (1 - p^shape)^(1/shape).

    Monotonically decreasing in the estimated accuracy: a task the model
    already performs well on shifts weight toward the retention term.
    """
    p = float(estimated_accuracy)
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"estimated accuracy must lie in [0, 1], got {p}")
    if shape <= 1.0:
        raise ContractError("shape parameter must exceed 1")
    return (1.0 - p ** shape) ** (1.0 / shape)


def update_accuracy_estimate(previous: float, observed: float,
                             smoothing: float = 0.9) -> float:
    """EMA of observed task accuracy: s*previous + (1-s)*observed."""
    return smoothing * previous + (1.0 - smoothing) * observed


def combined_loss(cls_loss: Tensor, cst_loss: Tensor, beta: float) -> Tensor:
    """beta-weighted blend of prediction and consistency losses."""
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"beta must lie in [0, 1], got {beta}")
    return cls_loss * beta + cst_loss * (1.0 - beta)


def focal_multitask_loss(probs: Sequence[Tensor], labels,
                         gammas: Sequence[float] | float = 1.0,
                         reduction: str = "mean") -> Tensor:
    """Masked focal loss summed over tasks: -(1-p)^gamma * log p.

    ``labels`` is (B, M) with -1 marking entries excluded from both the
    value and the gradient. The batch reduction divides by the full batch
    size so masked entries contribute exactly zero.
    """
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[None, :]
        probs = [p if p.data.ndim == 2 else p.reshape((1, -1)) for p in probs]
    n_tasks = labels.shape[1]
    if len(probs) != n_tasks:
        raise ContractError(f"{len(probs)} probability tensors for {n_tasks} tasks")
    if np.isscalar(gammas):
        gammas = [float(gammas)] * n_tasks
    batch = labels.shape[0]
    total = None
    for m in range(n_tasks):
        col = labels[:, m]
        mask = col >= 0
        if not mask.any():
            continue
        k = probs[m].shape[1]
        if col[mask].max() >= k:
            raise ContractError(
                f"task {m + 1} label {col[mask].max()} out of range for {k} classes")
        rows = np.nonzero(mask)[0]
        p_m = probs[m] if mask.all() else T.take_rows(probs[m], rows)
        p_true = T.take_per_row(p_m, col[mask])
        logp = p_true.clip_min(LOG_CLAMP).log()
        term = -(((1.0 - p_true) ** gammas[m]) * logp).sum()
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros(()))
    if reduction == "mean":
        return total / batch
    if reduction == "sum":
        return total
    raise ContractError(f"unknown reduction '{reduction}'")


# -- accuracy ---------------------------------------------------------


def task_accuracies(predicted, labels,
                    tasks: Sequence[int] | None = None
                    ) -> tuple[dict[int, float], float | None]:
    """Per-task accuracy over labeled entries; tasks with none are absent.

    Tasks are keyed 1-based; ``tasks`` restricts which are scored. The
    average is the unweighted mean over the tasks present, or None when
    every requested task is fully masked.
    """
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if predicted.shape != labels.shape:
        raise ShapeMismatchError(f"predictions {predicted.shape} vs labels {labels.shape}")
    wanted = range(1, labels.shape[1] + 1) if tasks is None else tasks
    per_task: dict[int, float] = {}
    for m in wanted:
        mask = labels[:, m - 1] >= 0
        if not mask.any():
            continue
        per_task[m] = float((predicted[mask, m - 1] == labels[mask, m - 1]).mean())
    average = float(np.mean(list(per_task.values()))) if per_task else None
    return per_task, average


def predict_labels(bundle: ModelBundle, images: np.ndarray,
                   use_teacher: bool = False, batch_size: int = 256) -> np.ndarray:
    """Argmax labels per task, (n, M), computed without graph recording."""
    n = images.shape[0]
    out = np.zeros((n, bundle.n_tasks), dtype=np.int64)
    with no_grad():
        for start in range(0, n, batch_size):
            x = Tensor(images[start:start + batch_size])
            probs, _ = predict_all(x, bundle, use_teacher=use_teacher)
            for m, p in enumerate(probs):
                out[start:start + batch_size, m] = p.data.argmax(axis=1)
    return out


def evaluate_accuracy(bundle: ModelBundle, images: np.ndarray, labels: np.ndarray,
                      tasks: Sequence[int] | None = None,
                      use_teacher: bool = False, batch_size: int = 256
                      ) -> tuple[dict[int, float], float | None]:
    if images.shape[0] == 0:
        raise ContractError("cannot evaluate accuracy on an empty dataset")
    predicted = predict_labels(bundle, images, use_teacher=use_teacher,
                               batch_size=batch_size)
    return task_accuracies(predicted, labels, tasks=tasks)


@dataclass
class TaskPerformanceTracker:
    """Per-task accuracy estimate smoothed over cycles.

    The estimate for a task is refreshed from the observation recorded on
    the task's previous visit (one full cycle earlier); the first visit
    uses the chance-level default.
    """

    class_counts: Sequence[int]
    smoothing: float = 0.9
    estimates: dict[int, float] = field(default_factory=dict)
    observations: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for m, k in enumerate(self.class_counts, start=1):
            self.estimates.setdefault(m, 1.0 / k)

    def refresh(self, task: int) -> float:
        """Fold in the previous cycle's observation; returns the estimate."""
        observed = self.observations.get(task)
        if observed is not None:
            self.estimates[task] = update_accuracy_estimate(
                self.estimates[task], observed, self.smoothing)
        return self.estimates[task]

    def record(self, task: int, observed: float) -> None:
        if not 0.0 <= observed <= 1.0:
            raise ContractError(f"observed accuracy must lie in [0, 1], got {observed}")
        self.observations[task] = float(observed)
