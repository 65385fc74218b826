import numpy as np
import pytest

from multiscene import adaptation, losses, network, synthetic
from multiscene.adaptation import (AdaptationConfig, AnnotatedSet, Pools,
                                   SelectionBatch, SelectionEntry, UnlabeledPool,
                                   annotate_and_move, build_test_set,
                                   consistency_score, finetune_multitask,
                                   kcenter_greedy_selection, pools_from_bundle,
                                   run_adaptation, select_batch,
                                   stratified_random_selection)
from multiscene.errors import (BudgetError, ConfigurationError, ContractError,
                               NoSignalError, PoolError)
from multiscene.synthetic import GroundTruthOracle
from multiscene.utils import rng_for


def brute_force_select(test_ids, test_emb, pool_ids, pool_emb, budget):
    """Independent oracle for the nearest-neighbor selection rule."""
    scores = {}
    for r, tid in enumerate(test_ids):
        best = None
        for c, pid in enumerate(pool_ids):
            d = float(np.sqrt(((np.asarray(test_emb[r], dtype=np.float64)
                                - np.asarray(pool_emb[c], dtype=np.float64)) ** 2).sum()))
            if best is None or d < best[0] or (d == best[0] and pid < best[1]):
                best = (d, int(pid), int(tid))
        scores[int(tid)] = best
    pairs = sorted(scores.values())
    picked = {}
    for d, pid, tid in pairs:
        if len(picked) == budget:
            break
        if pid not in picked:
            picked[pid] = -d
    if len(picked) < budget:
        rest = []
        for c, pid in enumerate(pool_ids):
            if int(pid) in picked:
                continue
            best = min(float(np.sqrt(((np.asarray(test_emb[r], dtype=np.float64)
                                       - np.asarray(pool_emb[c], dtype=np.float64)) ** 2).sum()))
                       for r in range(len(test_ids)))
            rest.append((best, int(pid)))
        for d, pid in sorted(rest):
            if len(picked) == budget:
                break
            picked[pid] = -d
    return sorted(picked.items(), key=lambda kv: (-kv[1], kv[0]))


def brute_force_kcenter(pool_ids, pool_emb, center_emb, budget):
    pool_ids = [int(p) for p in pool_ids]
    pool_emb = [np.asarray(e, dtype=np.float64) for e in pool_emb]
    centers = [np.asarray(e, dtype=np.float64) for e in center_emb]
    available = dict(zip(pool_ids, pool_emb))
    picks = []
    for _ in range(budget):
        best = None
        for pid in sorted(available):
            d = min(float(np.sqrt(((available[pid] - c) ** 2).sum())) for c in centers)
            if best is None or d > best[0]:
                best = (d, pid)
        picks.append(best[1])
        centers.append(available.pop(best[1]))
    return picks


class TestConsistencyScore:
    def test_identical_is_zero(self):
        assert consistency_score([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_three_four_five(self):
        assert consistency_score([0.0, 0.0], [3.0, 4.0]) == pytest.approx(-5.0)

    def test_symmetric(self, rng):
        v, u = rng.random(8), rng.random(8)
        assert consistency_score(v, u) == consistency_score(u, v)

    def test_translation_invariant(self, rng):
        v, u = rng.random(8), rng.random(8)
        shift = rng.random(8)
        assert consistency_score(v + shift, u + shift) == pytest.approx(
            consistency_score(v, u), rel=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            consistency_score([1.0], [1.0, 2.0])


class TestSelectBatch:
    def test_spec_example_nearest_pair_wins(self):
        batch = select_batch([100, 101], np.array([[0.0], [10.0]]),
                             [0, 1, 2], np.array([[2.0], [9.0], [50.0]]), 1)
        assert batch.pool_ids.tolist() == [1]
        assert batch.entries[0].score == pytest.approx(-1.0)

    def test_spec_example_dedupe_then_fill(self):
        batch = select_batch([0, 1], np.array([[0.0], [0.5]]),
                             [10, 11], np.array([[1.0], [40.0]]), 2)
        assert batch.pool_ids.tolist() == [10, 11]

    def test_budget_equals_pool_selects_everything(self, rng):
        pool_ids = np.arange(7)
        batch = select_batch([0], rng.random((1, 3)), pool_ids, rng.random((7, 3)), 7)
        assert sorted(batch.pool_ids.tolist()) == pool_ids.tolist()

    def test_budget_error(self, rng):
        with pytest.raises(BudgetError):
            select_batch([0], rng.random((1, 2)), [1, 2], rng.random((2, 2)), 3)

    @pytest.mark.parametrize("trial", range(100))
    def test_matches_brute_force_oracle(self, trial):
        rng = np.random.default_rng(trial)
        n_test = int(rng.integers(1, 20))
        n_pool = int(rng.integers(1, 21))
        dim = int(rng.integers(1, 5))
        budget = int(rng.integers(1, n_pool + 1))
        test_ids = rng.choice(1000, size=n_test, replace=False)
        pool_ids = rng.choice(1000, size=n_pool, replace=False)
        test_emb = rng.standard_normal((n_test, dim))
        pool_emb = rng.standard_normal((n_pool, dim))
        batch = select_batch(test_ids, test_emb, pool_ids, pool_emb, budget)
        expected = brute_force_select(test_ids, test_emb, pool_ids, pool_emb, budget)
        assert [(e.pool_id, pytest.approx(e.score)) for e in batch.entries] == \
            [(pid, pytest.approx(s)) for pid, s in expected]

    def test_scores_nonincreasing_enforced(self):
        with pytest.raises(ContractError):
            SelectionBatch([SelectionEntry(1, -2.0), SelectionEntry(2, -1.0)])

    def test_duplicate_ids_rejected(self):
        with pytest.raises(PoolError):
            SelectionBatch([SelectionEntry(1, -1.0), SelectionEntry(1, -2.0)])


class TestKCenter:
    def test_spec_example(self):
        batch = kcenter_greedy_selection(
            [0, 1, 2, 3], np.array([[0.0], [1.0], [2.0], [10.0]]),
            np.array([[0.0]]), 2)
        assert [e.pool_id for e in batch.entries] == [3, 2]

    def test_coincident_points_tie_by_id(self):
        batch = kcenter_greedy_selection(
            [5, 3, 9], np.zeros((3, 2)), np.zeros((1, 2)), 2)
        assert [e.pool_id for e in batch.entries] == [3, 5]

    def test_empty_centers_rejected(self):
        with pytest.raises(ContractError):
            kcenter_greedy_selection([1], np.zeros((1, 2)), np.zeros((0, 2)), 1)

    @pytest.mark.parametrize("trial", range(100))
    def test_matches_brute_force_greedy(self, trial):
        rng = np.random.default_rng(1000 + trial)
        n_pool = int(rng.integers(1, 13))
        n_centers = int(rng.integers(1, 5))
        dim = int(rng.integers(1, 4))
        budget = int(rng.integers(1, n_pool + 1))
        pool_ids = rng.choice(100, size=n_pool, replace=False)
        pool_emb = rng.standard_normal((n_pool, dim))
        center_emb = rng.standard_normal((n_centers, dim))
        batch = kcenter_greedy_selection(pool_ids, pool_emb, center_emb, budget)
        expected = brute_force_kcenter(pool_ids, pool_emb, center_emb, budget)
        assert [e.pool_id for e in batch.entries] == expected


class TestPools:
    @pytest.fixture
    def pools(self, small_data):
        oracle = GroundTruthOracle(small_data)
        return pools_from_bundle(small_data, kappa=5, oracle=oracle, seed=0)

    def test_disjoint_and_conserved(self, pools, small_data):
        total = len(pools.unlabeled) + len(pools.labeled)
        oracle = GroundTruthOracle(small_data)
        sel = stratified_random_selection(pools.unlabeled, 10, rng_for(0, 99))
        annotate_and_move(sel, oracle, pools)
        assert len(pools.unlabeled) + len(pools.labeled) == total
        assert len(pools.labeled) == 10
        assert not np.intersect1d(pools.unlabeled.ids, pools.labeled.ids).size

    def test_move_unknown_id_rejected(self, pools, small_data):
        oracle = GroundTruthOracle(small_data)
        bogus = SelectionBatch([SelectionEntry(10 ** 9, 0.0)])
        with pytest.raises(PoolError):
            annotate_and_move(bogus, oracle, pools)

    def test_empty_selection_is_noop(self, pools, small_data):
        oracle = GroundTruthOracle(small_data)
        before = len(pools.unlabeled)
        annotate_and_move(SelectionBatch([]), oracle, pools)
        assert len(pools.unlabeled) == before and len(pools.labeled) == 0

    def test_declined_labels_propagate(self, small_data):
        oracle = GroundTruthOracle(small_data, decline_rate=0.4, seed=3)
        pools = pools_from_bundle(small_data, kappa=5, oracle=oracle, seed=0)
        sel = stratified_random_selection(pools.unlabeled, 30, rng_for(0, 98))
        annotate_and_move(sel, oracle, pools)
        assert (pools.labeled.labels == -1).any()


class TestBuildTestSet:
    def test_counts_before_dedup(self, small_data):
        oracle = GroundTruthOracle(small_data)
        built = build_test_set(small_data.joint.ids, small_data.joint.images,
                               small_data.joint.labels, 2, oracle,
                               small_data.class_counts, seed=0)
        # 2 per class over 3+3+4 classes, minus duplicates
        assert 0 < len(built) <= 20
        assert len(np.unique(built.ids)) == len(built)

    def test_kappa_zero_rejected(self, small_data):
        oracle = GroundTruthOracle(small_data)
        with pytest.raises(ConfigurationError):
            build_test_set(small_data.joint.ids, small_data.joint.images,
                           small_data.joint.labels, 0, oracle,
                           small_data.class_counts)

    def test_insufficient_class_members_names_class(self, small_data):
        oracle = GroundTruthOracle(small_data)
        with pytest.raises(ConfigurationError, match="class"):
            build_test_set(small_data.joint.ids, small_data.joint.images,
                           small_data.joint.labels, 10 ** 6, oracle,
                           small_data.class_counts)

    def test_same_seed_same_ids(self, small_data):
        oracle = GroundTruthOracle(small_data)
        a = build_test_set(small_data.joint.ids, small_data.joint.images,
                           small_data.joint.labels, 3, oracle,
                           small_data.class_counts, seed=5)
        b = build_test_set(small_data.joint.ids, small_data.joint.images,
                           small_data.joint.labels, 3, oracle,
                           small_data.class_counts, seed=5)
        assert np.array_equal(a.ids, b.ids)


@pytest.fixture(scope="module")
def tiny_foundation(small_data_module):
    from multiscene.accumulation import CycleTrainingConfig, run_accumulation

    return run_accumulation(small_data_module,
                            CycleTrainingConfig(cycles=2), seed=0).foundation


@pytest.fixture(scope="module")
def small_data_module():
    cfg = synthetic.GeneratorConfig(train_size=96, val_size=48, test_size=96,
                                    joint_size=160)
    return synthetic.generate_bundle(cfg, seed=0)


class TestFinetune:
    def make_labeled(self, data, n=12):
        ids = data.joint.ids[:n]
        return AnnotatedSet(ids=ids.copy(), images=data.joint.images[:n].copy(),
                            labels=data.joint.labels[:n].copy())

    def test_frozen_tensors_bit_identical(self, tiny_foundation, small_data_module):
        model = tiny_foundation.copy()
        labeled = self.make_labeled(small_data_module)
        frozen = network.adaptation_freeze_names(model.params)
        before = {n: model.params[n].data.copy() for n in frozen}
        finetune_multitask(model, labeled, AdaptationConfig(finetune_epochs=3),
                           seed=0, iteration=1)
        for n in frozen:
            assert np.array_equal(model.params[n].data, before[n])

    def test_single_example_converges(self, tiny_foundation, small_data_module):
        model = tiny_foundation.copy()
        labeled = self.make_labeled(small_data_module, n=1)
        config = AdaptationConfig(finetune_epochs=300, peak_lr=3e-3)
        finetune_multitask(model, labeled, config, seed=0, iteration=1)
        from multiscene.losses import focal_multitask_loss
        from multiscene.network import predict_all
        from multiscene.tensor import Tensor, no_grad
        with no_grad():
            probs, _ = predict_all(Tensor(labeled.images), model)
        loss = float(focal_multitask_loss(probs, labeled.labels).data)
        assert loss < 0.01

    def test_all_masked_raises_no_signal(self, tiny_foundation, small_data_module):
        model = tiny_foundation.copy()
        labeled = self.make_labeled(small_data_module)
        labeled.labels[:] = -1
        with pytest.raises(NoSignalError):
            finetune_multitask(model, labeled, AdaptationConfig(), seed=0, iteration=1)

    def test_empty_set_rejected(self, tiny_foundation, small_data_module):
        model = tiny_foundation.copy()
        empty = AnnotatedSet.empty(3, small_data_module.joint.images.shape[1:])
        with pytest.raises(ConfigurationError):
            finetune_multitask(model, empty, AdaptationConfig(), seed=0, iteration=1)


class TestRunAdaptation:
    def test_zero_iterations_returns_foundation_point(self, tiny_foundation,
                                                      small_data_module):
        oracle = GroundTruthOracle(small_data_module)
        pools = pools_from_bundle(small_data_module, kappa=5, oracle=oracle, seed=0)
        config = AdaptationConfig(iterations=0, budgets=())
        result = run_adaptation(tiny_foundation, pools, oracle, config, seed=0)
        assert len(result.curves["avg"]) == 1
        for n in tiny_foundation.params:
            assert np.array_equal(result.model.params[n].data,
                                  tiny_foundation.params[n].data)

    def test_budget_overrun_preserves_prior_results(self, tiny_foundation,
                                                    small_data_module):
        oracle = GroundTruthOracle(small_data_module)
        pools = pools_from_bundle(small_data_module, kappa=5, oracle=oracle, seed=0)
        config = AdaptationConfig(budgets=(10, 10 ** 6), finetune_epochs=2)
        with pytest.raises(BudgetError) as excinfo:
            run_adaptation(tiny_foundation, pools, oracle, config, seed=0)
        assert excinfo.value.history
        iterations = {row.cycle_or_iter for row in excinfo.value.history}
        assert iterations == {0, 1}

    def test_same_seed_identical_curves(self, tiny_foundation, small_data_module):
        from multiscene.metrics import render_metrics_csv

        def once():
            oracle = GroundTruthOracle(small_data_module)
            pools = pools_from_bundle(small_data_module, kappa=5, oracle=oracle, seed=0)
            config = AdaptationConfig(iterations=2, budgets=(8, 8), finetune_epochs=2)
            return run_adaptation(tiny_foundation, pools, oracle, config, seed=0)

        assert render_metrics_csv(once().history) == render_metrics_csv(once().history)

    def test_frozen_stages_match_foundation_after_run(self, tiny_foundation,
                                                      small_data_module):
        oracle = GroundTruthOracle(small_data_module)
        pools = pools_from_bundle(small_data_module, kappa=5, oracle=oracle, seed=0)
        config = AdaptationConfig(iterations=2, budgets=(8, 8), finetune_epochs=2)
        result = run_adaptation(tiny_foundation, pools, oracle, config, seed=0)
        for n in network.adaptation_freeze_names(tiny_foundation.params):
            assert np.array_equal(result.model.params[n].data,
                                  tiny_foundation.params[n].data)

    @pytest.mark.parametrize("sampler", ["consistency", "random", "kcenter"])
    def test_all_samplers_complete(self, sampler, tiny_foundation, small_data_module):
        oracle = GroundTruthOracle(small_data_module)
        pools = pools_from_bundle(small_data_module, kappa=5, oracle=oracle, seed=0)
        config = AdaptationConfig(iterations=2, budgets=(6, 6), finetune_epochs=2,
                                  sampler=sampler)
        result = run_adaptation(tiny_foundation, pools, oracle, config, seed=0)
        assert len(result.curves["avg"]) == 3
        assert len(result.pools.labeled) == 12


class TestStratifiedRandom:
    def test_whole_pool_when_budget_equals_size(self, small_data):
        oracle = GroundTruthOracle(small_data)
        pools = pools_from_bundle(small_data, kappa=5, oracle=oracle, seed=0)
        n = len(pools.unlabeled)
        batch = stratified_random_selection(pools.unlabeled, n, rng_for(0, 1))
        assert len(batch) == n

    def test_seed_determined(self, small_data):
        oracle = GroundTruthOracle(small_data)
        pools = pools_from_bundle(small_data, kappa=5, oracle=oracle, seed=0)
        a = stratified_random_selection(pools.unlabeled, 9, rng_for(3, 1))
        b = stratified_random_selection(pools.unlabeled, 9, rng_for(3, 1))
        assert a.pool_ids.tolist() == b.pool_ids.tolist()

    def test_balanced_across_subsets(self, small_data):
        oracle = GroundTruthOracle(small_data)
        pools = pools_from_bundle(small_data, kappa=5, oracle=oracle, seed=0)
        batch = stratified_random_selection(pools.unlabeled, 9, rng_for(0, 2))
        rows = pools.unlabeled.index_of(np.sort(batch.pool_ids))
        counts = np.bincount(pools.unlabeled.source_subset[rows])[1:]
        assert counts.tolist() == [3, 3, 3]
