"""Cyclical sequential training with teacher consolidation.

One cycle visits every task once, training the student for a full epoch
on that task's single-label subset. The per-batch objective blends the
prediction loss with a stage-wise consistency penalty against the frozen
teacher's embeddings; the blend weight falls as the task's estimated
accuracy rises. At the end of each cycle the teacher absorbs the student
encoder and projectors through an exponential moving average whose
stability coefficient rises on a cosine ramp from 0.9 to 1.

The run's output combines the teacher's encoder/projectors with the
final student heads, plus the full per-cycle metric history.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import losses, network
from .errors import ConfigurationError, ContractError, NumericError, ShapeMismatchError
from .metrics import MetricsRow
from .network import ModelBundle
from .optim import AdamW, WarmupCosineSchedule
from .synthetic import DatasetBundle
from .tensor import Tensor, no_grad, zero_grads
from .utils import TAG_SHUFFLE, TAG_TASK_ORDER, rng_for


def cycle_task_from_iteration(i: int, n_tasks: int) -> tuple[int, int]:
    """Map the 1-based global iteration to its (cycle, task) pair."""
    if i < 1:
        raise ContractError(f"iteration index must be >= 1, got {i}")
    if n_tasks < 1:
        raise ContractError(f"task count must be >= 1, got {n_tasks}")
    t = (i + n_tasks - 1) // n_tasks
    m = i - (t - 1) * n_tasks
    return t, m


def iteration_from_cycle_task(t: int, m: int, n_tasks: int) -> int:
    if not 1 <= m <= n_tasks:
        raise ContractError(f"task index {m} outside 1..{n_tasks}")
    if t < 1:
        raise ContractError(f"cycle index must be >= 1, got {t}")
    return (t - 1) * n_tasks + m


def stability_coefficient(t: int, total_cycles: int) -> float:
    """Teacher retention weight: 0.9 + 0.05 * (1 - cos(t*pi/T))."""
    if total_cycles <= 0:
        raise ContractError("total_cycles must be positive")
    if not 0 <= t <= total_cycles:
        raise ContractError(f"cycle {t} outside [0, {total_cycles}]")
    return 0.9 + 0.05 * (1.0 - math.cos(t * math.pi / total_cycles))


def ema_consolidate(teacher: Mapping[str, Tensor], student: Mapping[str, Tensor],
                    alpha: float) -> None:
    """Blend student values into the teacher in place, coordinate-wise."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    for name, t in teacher.items():
        s = student[name]
        if t.data.shape != s.data.shape:
            raise ShapeMismatchError(f"teacher/student shape mismatch at '{name}'")
        t.data = alpha * t.data + (1.0 - alpha) * s.data


@dataclass(frozen=True)
class CycleTrainingConfig:
    cycles: int = 40
    batch_size: int = 32
    start_lr: float = 1e-6
    peak_lr: float = 5e-4
    final_lr: float = 1e-5
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    stage_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    indicator_shape: float = 4.0
    smoothing: float = 0.9
    acquisition_override: float | None = None  # pin beta, e.g. 1.0 disables retention
    accuracy_source: str = "train"             # "train" | "val"
    early_stop: bool = False
    early_stop_delta: float = 0.001            # 0.1 accuracy points
    early_stop_patience: int = 3
    shuffle_tasks: bool = False
    force_teacher_forward: bool = False        # debug: run the teacher pass even if unused
    encoder: network.EncoderConfig = field(default_factory=network.EncoderConfig)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "cycles", "batch_size", "start_lr", "peak_lr", "final_lr", "warmup_frac",
            "weight_decay", "indicator_shape", "smoothing", "acquisition_override",
            "accuracy_source", "early_stop", "early_stop_delta", "early_stop_patience",
            "shuffle_tasks")}
        d["stage_weights"] = list(self.stage_weights)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CycleTrainingConfig":
        d = dict(d)
        if "stage_weights" in d:
            d["stage_weights"] = tuple(d["stage_weights"])
        if "encoder" in d:
            d["encoder"] = network.EncoderConfig.from_dict(d["encoder"])
        return cls(**d)


@dataclass
class AccumulationResult:
    foundation: ModelBundle
    student: ModelBundle
    history: list[MetricsRow]
    traces: dict
    stopped_cycle: int


def _epoch_batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def run_accumulation(data: DatasetBundle, config: CycleTrainingConfig | None = None,
                     seed: int = 0) -> AccumulationResult:
    """Train across all single-label subsets cyclically; see module docstring."""
    config = config or CycleTrainingConfig()
    n_tasks = data.n_tasks
    if n_tasks < 1:
        raise ConfigurationError("at least one task subset required")
    for subset in data.subsets:
        if len(subset.train) == 0 or len(subset.val) == 0:
            raise ConfigurationError(
                f"subset {subset.attribute + 1} has an empty train or val split")

    bundle = network.init_params(config.encoder, data.class_counts, seed)
    optimizer = AdamW(weight_decay=config.weight_decay)
    batches_per_cycle = sum(
        math.ceil(len(s.train) / config.batch_size) for s in data.subsets)
    total_steps = config.cycles * batches_per_cycle
    schedule = WarmupCosineSchedule(
        warmup_steps=int(round(config.warmup_frac * total_steps)),
        start_lr=config.start_lr, peak_lr=config.peak_lr, final_lr=config.final_lr,
        total_steps=total_steps)
    tracker = losses.TaskPerformanceTracker(data.class_counts, config.smoothing)
    run_distillation = config.force_teacher_forward or any(
        w != 0.0 for w in config.stage_weights)

    history: list[MetricsRow] = []
    traces: dict = {"alpha": [], "beta": {m: [] for m in range(1, n_tasks + 1)},
                    "p_hat": {m: [] for m in range(1, n_tasks + 1)},
                    "p_obs": {m: [] for m in range(1, n_tasks + 1)},
                    "val_acc": {m: [] for m in range(1, n_tasks + 1)},
                    "avg_val": []}
    global_step = 0
    stopped_cycle = config.cycles
    best_avg = -np.inf
    stall = 0

    for t in range(1, config.cycles + 1):
        task_order = list(range(1, n_tasks + 1))
        if config.shuffle_tasks:
            rng_for(seed, TAG_TASK_ORDER, t).shuffle(task_order)
        cycle_lr = schedule.at(global_step)
        beta_by_task: dict[int, float] = {}

        for m in task_order:
            i = iteration_from_cycle_task(t, m, n_tasks)
            subset = data.subsets[m - 1]
            p_hat = tracker.refresh(m)
            if config.acquisition_override is not None:
                beta = float(config.acquisition_override)
            else:
                beta = losses.acquisition_weight(p_hat, config.indicator_shape)
            beta_by_task[m] = beta
            traces["p_hat"][m].append(p_hat)
            traces["beta"][m].append(beta)

            shuffle_rng = rng_for(seed, TAG_SHUFFLE, i)
            correct = 0
            seen = 0
            loss_sum = 0.0
            n_batches = 0
            for idx in _epoch_batches(len(subset.train), config.batch_size, shuffle_rng):
                x = Tensor(subset.train.images[idx])
                labels_m = subset.train.labels[idx, m - 1]
                embeddings = network.forward_embeddings(x, bundle.params, config.encoder)
                probs = network.classify(embeddings[-1], bundle.params, m)
                l_cls = losses.batch_cross_entropy(probs, labels_m)
                if run_distillation:
                    with no_grad():
                        refs = network.forward_embeddings(x, bundle.teacher, config.encoder)
                    stage_losses = [losses.stage_consistency(d, r)
                                    for d, r in zip(embeddings, refs)]
                    l_cst = losses.consistency_total(stage_losses, config.stage_weights)
                else:
                    l_cst = Tensor(np.zeros((), dtype=l_cls.dtype))
                loss = losses.combined_loss(l_cls, l_cst, beta)
                if not np.isfinite(loss.data):
                    raise NumericError(
                        f"non-finite loss at cycle {t}, task {m}, step {global_step + 1}")
                zero_grads(bundle.params.values())
                loss.backward()
                global_step += 1
                cycle_lr = schedule.at(global_step)
                optimizer.step(bundle.params, cycle_lr)
                correct += int((probs.data.argmax(axis=1) == labels_m).sum())
                seen += len(idx)
                loss_sum += float(loss.data)
                n_batches += 1

            if config.accuracy_source == "val":
                per_task, _ = losses.evaluate_accuracy(
                    bundle, subset.val.images, subset.val.labels, tasks=[m])
                observed = per_task[m]
            else:
                observed = correct / seen
            tracker.record(m, observed)
            traces["p_obs"][m].append(observed)
            history.append(MetricsRow(
                phase="kaa", cycle_or_iter=t, task=str(m), split="train",
                accuracy=observed, loss=loss_sum / n_batches, lr=cycle_lr,
                alpha=None, beta=beta, seed=seed))

        alpha = stability_coefficient(t, config.cycles)
        ema_consolidate(bundle.teacher, bundle.params, alpha)
        traces["alpha"].append(alpha)

        val_accs = []
        for m in range(1, n_tasks + 1):
            subset = data.subsets[m - 1]
            per_task, _ = losses.evaluate_accuracy(
                bundle, subset.val.images, subset.val.labels, tasks=[m])
            acc = per_task[m]
            val_accs.append(acc)
            traces["val_acc"][m].append(acc)
            history.append(MetricsRow(
                phase="kaa", cycle_or_iter=t, task=str(m), split="val",
                accuracy=acc, lr=cycle_lr, alpha=alpha, beta=beta_by_task[m],
                seed=seed))
        avg_val = float(np.mean(val_accs))
        traces["avg_val"].append(avg_val)

        if config.early_stop:
            if avg_val >= best_avg + config.early_stop_delta:
                stall = 0
            else:
                stall += 1
                if stall >= config.early_stop_patience:
                    stopped_cycle = t
                    best_avg = max(best_avg, avg_val)
                    break
        best_avg = max(best_avg, avg_val)
    else:
        stopped_cycle = config.cycles

    foundation = assemble_foundation(bundle)
    return AccumulationResult(foundation=foundation, student=bundle,
                              history=history, traces=traces,
                              stopped_cycle=stopped_cycle)


def assemble_foundation(bundle: ModelBundle) -> ModelBundle:
    """Teacher encoder/projectors combined with the student's heads."""
    params = {}
    for name, p in bundle.params.items():
        source = bundle.teacher[name] if name in bundle.teacher else p
        params[name] = Tensor(source.data.copy(), requires_grad=True, name=name,
                              dtype=source.data.dtype)
    teacher = {name: Tensor(t.data.copy(), name=name, dtype=t.data.dtype)
               for name, t in bundle.teacher.items()}
    return ModelBundle(bundle.config, bundle.class_counts, params, teacher)
