"""Consistency-driven active learning: pools, selection, and fine-tuning.

The adaptation loop scores every unlabeled pool item by embedding
proximity to a fully annotated multi-label test set, annotates the
closest items through an oracle, and fine-tunes the model's last stage
and heads on the growing labeled set with a masked focal loss. Two
baseline samplers (stratified random and k-center greedy) share the same
loop so budget-matched comparisons are straightforward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import losses, network
from .errors import (BudgetError, ConfigurationError, ContractError, NumericError,
                     NoSignalError, PoolError)
from .metrics import MetricsRow
from .network import ModelBundle
from .optim import AdamW, WarmupCosineSchedule
from .tensor import Tensor, no_grad, zero_grads
from .utils import TAG_FINETUNE, TAG_SELECT, TAG_TEST_SET, rng_for


@dataclass
class AnnotatedSet:
    """Items carrying full label vectors (entries may be -1)."""

    ids: np.ndarray
    images: np.ndarray
    labels: np.ndarray

    @classmethod
    def empty(cls, n_tasks: int, image_shape: tuple[int, ...]) -> "AnnotatedSet":
        return cls(ids=np.zeros(0, dtype=np.int64),
                   images=np.zeros((0,) + image_shape, dtype=np.float32),
                   labels=np.zeros((0, n_tasks), dtype=np.int64))

    def __len__(self):
        return len(self.ids)

    def extend(self, ids, images, labels) -> None:
        self.ids = np.concatenate([self.ids, np.asarray(ids, dtype=np.int64)])
        self.images = np.concatenate([self.images, images])
        self.labels = np.concatenate([self.labels, np.asarray(labels, dtype=np.int64)])


@dataclass
class UnlabeledPool:
    """Candidate items, kept sorted by id so tie-breaks are well defined."""

    ids: np.ndarray
    images: np.ndarray
    source_subset: np.ndarray  # 1-based subset index each item came from

    def __post_init__(self):
        order = np.argsort(self.ids)
        self.ids = self.ids[order]
        self.images = self.images[order]
        self.source_subset = self.source_subset[order]
        if len(np.unique(self.ids)) != len(self.ids):
            raise PoolError("duplicate ids in the unlabeled pool")

    def __len__(self):
        return len(self.ids)

    def index_of(self, ids) -> np.ndarray:
        pos = np.searchsorted(self.ids, ids)
        if (pos >= len(self.ids)).any() or (self.ids[pos] != ids).any():
            raise PoolError("selection references ids not present in the pool")
        return pos

    def remove(self, ids) -> None:
        keep = np.ones(len(self.ids), dtype=bool)
        keep[self.index_of(np.asarray(ids, dtype=np.int64))] = False
        self.ids = self.ids[keep]
        self.images = self.images[keep]
        self.source_subset = self.source_subset[keep]


@dataclass
class Pools:
    test: AnnotatedSet
    unlabeled: UnlabeledPool
    labeled: AnnotatedSet

    def __post_init__(self):
        self._initial_total = len(self.unlabeled) + len(self.labeled)
        self.check()

    def check(self) -> None:
        overlap = np.intersect1d(self.unlabeled.ids, self.labeled.ids)
        if overlap.size:
            raise PoolError(f"ids present in both pools: {overlap[:5]}")
        if len(self.unlabeled) + len(self.labeled) != self._initial_total:
            raise PoolError("pool conservation violated")


def pools_from_bundle(data, kappa: int, oracle, seed: int = 0) -> Pools:
    """Standard pool setup: joint-sourced test set, train-split union pool."""
    test = build_test_set(data.joint.ids, data.joint.images, data.joint.labels,
                          kappa, oracle, data.class_counts, seed)
    ids, images, source = [], [], []
    for m, subset in enumerate(data.subsets, start=1):
        ids.append(subset.train.ids)
        images.append(subset.train.images)
        source.append(np.full(len(subset.train), m, dtype=np.int64))
    pool = UnlabeledPool(ids=np.concatenate(ids), images=np.concatenate(images),
                         source_subset=np.concatenate(source))
    labeled = AnnotatedSet.empty(data.n_tasks, data.joint.images.shape[1:])
    return Pools(test=test, unlabeled=pool, labeled=labeled)


def build_test_set(source_ids, source_images, source_labels, kappa: int, oracle,
                   class_counts: Sequence[int], seed: int = 0) -> AnnotatedSet:
    """Stratified sample: kappa items per class of every attribute, deduplicated,
    then fully annotated by the oracle."""
    if kappa <= 0:
        raise ConfigurationError(f"kappa must be positive, got {kappa}")
    source_ids = np.asarray(source_ids)
    source_labels = np.asarray(source_labels)
    rng = rng_for(seed, TAG_TEST_SET)
    chosen: list[int] = []
    for m, k in enumerate(class_counts):
        for c in range(k):
            members = np.nonzero(source_labels[:, m] == c)[0]
            if len(members) < kappa:
                raise ConfigurationError(
                    f"class {c} of attribute {m + 1} has only {len(members)} "
                    f"test images, need {kappa}")
            chosen.extend(rng.choice(members, size=kappa, replace=False))
    unique_rows = np.unique(np.asarray(chosen))
    ids = source_ids[unique_rows]
    images = source_images[unique_rows]
    labels = oracle.annotate(ids, images=images)
    return AnnotatedSet(ids=ids.astype(np.int64), images=images,
                        labels=np.asarray(labels, dtype=np.int64))


# -- scoring and selection ----------------------------------------------


def consistency_score(v: np.ndarray, u: np.ndarray) -> float:
    """Negative Euclidean distance between two final-stage embeddings."""
    v = np.asarray(v, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if v.shape != u.shape:
        raise ContractError(f"embedding shapes differ: {v.shape} vs {u.shape}")
    return -float(np.sqrt(((v - u) ** 2).sum()))


def final_embeddings(bundle: ModelBundle, images: np.ndarray,
                     batch_size: int = 256) -> np.ndarray:
    """Last-stage embeddings for a stack of images, float64, no recording."""
    chunks = []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = Tensor(images[start:start + batch_size])
            d4 = network.final_stage_embedding(x, bundle.params, bundle.config)
            chunks.append(d4.data.astype(np.float64))
    return np.concatenate(chunks) if chunks else np.zeros((0, bundle.config.projector_dims[-1]))


@dataclass(frozen=True)
class SelectionEntry:
    pool_id: int
    score: float
    test_id: int | None = None


@dataclass
class SelectionBatch:
    entries: list[SelectionEntry]

    def __post_init__(self):
        ids = [e.pool_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise PoolError("selection batch contains duplicate pool ids")
        scores = [e.score for e in self.entries]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ContractError("selection scores must be non-increasing")

    @property
    def pool_ids(self) -> np.ndarray:
        return np.array([e.pool_id for e in self.entries], dtype=np.int64)

    def __len__(self):
        return len(self.entries)


def _pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # exact elementwise formula so a scalar loop oracle reproduces it bitwise
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))


def select_batch(test_ids, test_emb, pool_ids, pool_emb, budget: int) -> SelectionBatch:
    """Nearest-neighbor consistency selection.

    Each test item nominates its closest pool item; nominations are ranked
    by score (ties toward the smaller pool id) and taken while distinct.
    If nominations run out before the budget, remaining pool items are
    ranked by their best score against the test set. The returned batch is
    ordered by score descending.
    """
    test_ids = np.asarray(test_ids)
    pool_ids = np.asarray(pool_ids)
    if budget < 0:
        raise ContractError("budget must be non-negative")
    if budget > len(pool_ids):
        raise BudgetError(f"budget {budget} exceeds pool size {len(pool_ids)}")
    order = np.argsort(pool_ids)
    pool_ids = pool_ids[order]
    pool_emb = np.asarray(pool_emb, dtype=np.float64)[order]
    test_emb = np.asarray(test_emb, dtype=np.float64)

    dist = _pairwise_distances(test_emb, pool_emb)
    nn_col = dist.argmin(axis=1)  # first occurrence = smallest pool id on ties
    # (distance, pool id, test id): ascending distance == descending score
    pairs = sorted(
        (float(dist[r, nn_col[r]]), int(pool_ids[nn_col[r]]), int(test_ids[r]))
        for r in range(len(test_ids)))

    selected: dict[int, SelectionEntry] = {}
    for d, pid, tid in pairs:
        if len(selected) == budget:
            break
        if pid not in selected:
            selected[pid] = SelectionEntry(pool_id=pid, score=-d, test_id=tid)

    if len(selected) < budget:
        best_dist = dist.min(axis=0)
        best_test = dist.argmin(axis=0)
        fill = sorted(
            ((float(best_dist[c]), int(pool_ids[c]), int(test_ids[best_test[c]]))
             for c in range(len(pool_ids)) if int(pool_ids[c]) not in selected),
            key=lambda p: (p[0], p[1]))
        for d, pid, tid in fill:
            if len(selected) == budget:
                break
            selected[pid] = SelectionEntry(pool_id=pid, score=-d, test_id=tid)

    entries = sorted(selected.values(), key=lambda e: (-e.score, e.pool_id))
    return SelectionBatch(entries)


def stratified_random_selection(pool: UnlabeledPool, budget: int, rng) -> SelectionBatch:
    """Uniform without-replacement draws balanced across source subsets.

    Allocation is round-robin over subsets in index order, so any remainder
    lands on the lower-numbered subsets; exhausted subsets drop out.
    """
    if budget > len(pool):
        raise BudgetError(f"budget {budget} exceeds pool size {len(pool)}")
    remaining = {int(s): list(pool.ids[pool.source_subset == s])
                 for s in np.unique(pool.source_subset)}
    chosen: list[int] = []
    while len(chosen) < budget:
        active = [s for s in sorted(remaining) if remaining[s]]
        if not active:
            break
        for s in active:
            if len(chosen) == budget:
                break
            items = remaining[s]
            pick = int(rng.integers(len(items)))
            chosen.append(int(items.pop(pick)))
    entries = [SelectionEntry(pool_id=pid, score=0.0) for pid in chosen]
    return SelectionBatch(entries)


def kcenter_greedy_selection(pool_ids, pool_emb, center_emb, budget: int) -> SelectionBatch:
    """Greedy max-min-distance picks against the given centers.

    Each pick maximizes the distance to its nearest center (ties toward the
    smaller pool id) and immediately becomes a center itself. Recorded
    scores are those max-min distances, which are non-increasing.
    """
    pool_ids = np.asarray(pool_ids)
    center_emb = np.asarray(center_emb, dtype=np.float64)
    if center_emb.ndim != 2 or center_emb.shape[0] == 0:
        raise ContractError("k-center selection requires at least one existing center")
    if budget > len(pool_ids):
        raise BudgetError(f"budget {budget} exceeds pool size {len(pool_ids)}")
    order = np.argsort(pool_ids)
    pool_ids = pool_ids[order]
    pool_emb = np.asarray(pool_emb, dtype=np.float64)[order]

    min_dist = _pairwise_distances(pool_emb, center_emb).min(axis=1)
    entries = []
    for _ in range(budget):
        pick = int(np.argmax(min_dist))  # first occurrence = smallest id on ties
        entries.append(SelectionEntry(pool_id=int(pool_ids[pick]),
                                      score=float(min_dist[pick])))
        new_dist = _pairwise_distances(pool_emb, pool_emb[pick:pick + 1])[:, 0]
        min_dist = np.minimum(min_dist, new_dist)
        min_dist[pick] = -np.inf
    return SelectionBatch(entries)


def annotate_and_move(selection: SelectionBatch, oracle, pools: Pools,
                      suggest_with: ModelBundle | None = None) -> None:
    """Annotate the selection and move it from the unlabeled to the labeled pool.

    The oracle is consulted before any mutation so a failure leaves the
    pools untouched. ``suggest_with`` provides argmax suggestions shown to
    a human oracle.
    """
    if len(selection) == 0:
        return
    ids = selection.pool_ids
    rows = pools.unlabeled.index_of(ids)
    images = pools.unlabeled.images[rows]
    suggestions = (losses.predict_labels(suggest_with, images)
                   if suggest_with is not None else None)
    labels = np.asarray(oracle.annotate(ids, images=images,
                                        suggestions=suggestions), dtype=np.int64)
    if labels.shape != (len(ids), pools.test.labels.shape[1]):
        raise ContractError(f"oracle returned labels of shape {labels.shape}")
    pools.labeled.extend(ids, images, labels)
    pools.unlabeled.remove(ids)
    pools.check()


# -- fine-tuning ----------------------------------------------------------


@dataclass(frozen=True)
class AdaptationConfig:
    iterations: int = 5
    budgets: tuple[int, ...] | None = None   # explicit per-iteration budgets
    budget_fraction: float = 0.01            # else this fraction of the initial pool
    kappa: int = 10
    sampler: str = "consistency"             # "consistency" | "random" | "kcenter"
    rescore_each_iteration: bool = True      # False pins scoring to the starting model
    finetune_epochs: int = 20
    batch_size: int = 32
    # the 1e-6 -> 1e-3 -> 1e-5 ramp scaled by 0.1: the full-scale peak wrecks
    # a model fine-tuned on a few dozen samples
    start_lr: float = 1e-7
    peak_lr: float = 1e-4
    final_lr: float = 1e-6
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    focal_gamma: float = 1.0
    plateau_stop: bool = False
    plateau_delta: float = 0.005             # 0.5 accuracy points

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "iterations", "budget_fraction", "kappa", "sampler",
            "rescore_each_iteration", "finetune_epochs", "batch_size", "start_lr",
            "peak_lr", "final_lr", "warmup_frac", "weight_decay", "focal_gamma",
            "plateau_stop", "plateau_delta")}
        d["budgets"] = list(self.budgets) if self.budgets is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationConfig":
        d = dict(d)
        if d.get("budgets") is not None:
            d["budgets"] = tuple(d["budgets"])
        return cls(**d)


def finetune_multitask(bundle: ModelBundle, labeled: AnnotatedSet,
                       config: AdaptationConfig, seed: int, iteration: int) -> float:
    """Fine-tune stage IV, projector IV, and all heads on the labeled set.

    Stages I-III and projectors I-III stay bit-identical. Returns the mean
    focal loss of the final epoch.
    """
    if len(labeled) == 0:
        raise ConfigurationError("labeled training set is empty")
    if (labeled.labels == -1).all():
        raise NoSignalError("every label in the training set is masked")
    freeze = network.validate_freeze_mask(
        network.adaptation_freeze_names(bundle.params), bundle.params)
    # frozen parameters need no gradients at all; restore flags afterwards
    for name in freeze:
        bundle.params[name].requires_grad = False
    try:
        optimizer = AdamW(weight_decay=config.weight_decay)
        steps_per_epoch = -(-len(labeled) // config.batch_size)
        total_steps = config.finetune_epochs * steps_per_epoch
        schedule = WarmupCosineSchedule(
            warmup_steps=int(round(config.warmup_frac * total_steps)),
            start_lr=config.start_lr, peak_lr=config.peak_lr,
            final_lr=config.final_lr, total_steps=total_steps)
        step = 0
        epoch_loss = 0.0
        for epoch in range(config.finetune_epochs):
            rng = rng_for(seed, TAG_FINETUNE, iteration, epoch)
            order = rng.permutation(len(labeled))
            epoch_loss = 0.0
            n_batches = 0
            for start in range(0, len(labeled), config.batch_size):
                idx = order[start:start + config.batch_size]
                x = Tensor(labeled.images[idx])
                probs, _ = network.predict_all(x, bundle)
                loss = losses.focal_multitask_loss(probs, labeled.labels[idx],
                                                   config.focal_gamma)
                if not np.isfinite(loss.data):
                    raise NumericError(
                        f"non-finite loss in adaptation iteration {iteration}, epoch {epoch}")
                zero_grads(bundle.params.values())
                loss.backward()
                step += 1
                optimizer.step(bundle.params, schedule.at(step), freeze=freeze)
                epoch_loss += float(loss.data)
                n_batches += 1
        return epoch_loss / max(n_batches, 1)
    finally:
        for name in freeze:
            bundle.params[name].requires_grad = True


@dataclass
class AdaptationResult:
    model: ModelBundle
    history: list[MetricsRow]
    curves: dict
    pools: Pools


def _evaluate_rows(bundle, pools, iteration, seed, loss=None) -> tuple[list[MetricsRow], float]:
    per_task, avg = losses.evaluate_accuracy(bundle, pools.test.images,
                                             pools.test.labels)
    rows = [MetricsRow(phase="cal", cycle_or_iter=iteration, task=str(m), split="test",
                       accuracy=acc, labeled_count=len(pools.labeled), seed=seed)
            for m, acc in sorted(per_task.items())]
    rows.append(MetricsRow(phase="cal", cycle_or_iter=iteration, task="avg",
                           split="test", accuracy=avg, loss=loss,
                           labeled_count=len(pools.labeled), seed=seed))
    return rows, avg


def run_adaptation(foundation: ModelBundle, pools: Pools, oracle,
                   config: AdaptationConfig | None = None,
                   seed: int = 0, on_iteration=None) -> AdaptationResult:
    """Iterate select -> annotate -> fine-tune -> evaluate; see Pools for state.

    The starting model is copied, never mutated. On a budget overrun the
    raised BudgetError carries the history and model accumulated so far.
    ``on_iteration(j, history, avg)`` is invoked after each evaluation.
    """
    config = config or AdaptationConfig()
    if config.sampler not in ("consistency", "random", "kcenter"):
        raise ConfigurationError(f"unknown sampler '{config.sampler}'")
    model = foundation.copy()
    initial_pool = len(pools.unlabeled)
    if config.budgets is not None:
        budgets = list(config.budgets)
    else:
        budgets = [max(1, round(config.budget_fraction * initial_pool))] * config.iterations

    history: list[MetricsRow] = []
    curves: dict = {"budget": [0], "avg": [], "per_task": {}}
    rows, avg = _evaluate_rows(model, pools, 0, seed)
    history.extend(rows)
    curves["avg"].append(avg)
    previous_avg = avg
    if on_iteration is not None:
        on_iteration(0, history, avg)

    scoring_model = model if config.rescore_each_iteration else foundation
    for j, budget in enumerate(budgets, start=1):
        if budget > len(pools.unlabeled):
            raise BudgetError(
                f"iteration {j} budget {budget} exceeds remaining pool "
                f"{len(pools.unlabeled)}", history=history, model=model)
        if config.sampler == "consistency":
            test_emb = final_embeddings(scoring_model, pools.test.images)
            pool_emb = final_embeddings(scoring_model, pools.unlabeled.images)
            selection = select_batch(pools.test.ids, test_emb,
                                     pools.unlabeled.ids, pool_emb, budget)
        elif config.sampler == "random":
            rng = rng_for(seed, TAG_SELECT, j)
            selection = stratified_random_selection(pools.unlabeled, budget, rng)
        else:  # kcenter: random seeding round, then greedy against labeled centers
            if len(pools.labeled) == 0:
                rng = rng_for(seed, TAG_SELECT, j)
                selection = stratified_random_selection(pools.unlabeled, budget, rng)
            else:
                pool_emb = final_embeddings(scoring_model, pools.unlabeled.images)
                center_emb = final_embeddings(scoring_model, pools.labeled.images)
                selection = kcenter_greedy_selection(pools.unlabeled.ids, pool_emb,
                                                     center_emb, budget)
        annotate_and_move(selection, oracle, pools, suggest_with=model)
        mean_loss = finetune_multitask(model, pools.labeled, config, seed, j)
        rows, avg = _evaluate_rows(model, pools, j, seed, loss=mean_loss)
        history.extend(rows)
        curves["avg"].append(avg)
        curves["budget"].append(curves["budget"][-1] + budget)
        if on_iteration is not None:
            on_iteration(j, history, avg)
        if config.plateau_stop and avg - previous_avg < config.plateau_delta:
            break
        previous_avg = avg

    for row in history:
        if row.task != "avg":
            curves["per_task"].setdefault(int(row.task), []).append(row.accuracy)
    return AdaptationResult(model=model, history=history, curves=curves, pools=pools)
