import numpy as np
import pytest

from multiscene import losses, network, optim
from multiscene.errors import (ConfigurationError, ContractError,
                               ShapeMismatchError)
from multiscene.tensor import Tensor, zero_grads


class TestEncoderConfig:
    def test_default_shape_chain(self):
        cfg = network.EncoderConfig()
        assert cfg.stage_sizes == (16, 8, 4, 2)
        assert cfg.projector_dims == (32, 64, 128, 256)

    def test_channels_must_double(self):
        with pytest.raises(ConfigurationError):
            network.EncoderConfig(stage_channels=(16, 32, 64, 100))

    def test_tiny_input_saturates_at_one(self):
        cfg = network.EncoderConfig(image_size=4, stage_channels=(4, 8, 16, 32))
        assert cfg.stage_sizes == (2, 1, 1, 1)


class TestInit:
    def test_xavier_bound_value(self):
        assert network.xavier_bound(3, 3) == 1.0

    def test_same_seed_bitwise_identical(self, toy_config):
        a = network.init_params(toy_config, (3, 4), seed=11)
        b = network.init_params(toy_config, (3, 4), seed=11)
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)

    def test_teacher_equals_student_at_init(self, toy_bundle):
        for name, t in toy_bundle.teacher.items():
            assert np.array_equal(t.data, toy_bundle.params[name].data)

    def test_biases_zero_weights_bounded(self, toy_bundle, toy_config):
        for name, p in toy_bundle.params.items():
            if name.endswith(".bias"):
                assert not p.data.any()
            else:
                fan_in, fan_out = p.data.shape
                assert np.abs(p.data).max() <= network.xavier_bound(fan_in, fan_out)


class TestForward:
    def test_stage_shapes_default_config(self):
        cfg = network.EncoderConfig()
        bundle = network.init_params(cfg, (3,), seed=0)
        x = Tensor(np.zeros((2, 3, 32, 32), dtype=np.float32))
        features = network.encode_stages(x, bundle.params, cfg)
        shapes = [f.shape for f in features]
        assert shapes == [(2, 16, 16, 16), (2, 32, 8, 8), (2, 64, 4, 4), (2, 128, 2, 2)]

    def test_zero_input_zero_biases_zero_features(self, toy_bundle, toy_config):
        x = Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32))
        for f in network.encode_stages(x, toy_bundle.params, toy_config):
            assert not f.data.any()

    def test_single_pixel_change_is_local_in_stage_one(self, toy_bundle, toy_config, rng):
        base = rng.random((1, 3, 4, 4)).astype(np.float32)
        poked = base.copy()
        poked[0, 1, 3, 0] += 0.5  # patch row 1, col 0
        f_base = network.encode_stages(Tensor(base), toy_bundle.params, toy_config)[0]
        f_poked = network.encode_stages(Tensor(poked), toy_bundle.params, toy_config)[0]
        diff = np.abs(f_base.data - f_poked.data).sum(axis=1)  # over channels
        changed = np.argwhere(diff[0] > 0)
        assert changed.tolist() == [[1, 0]]

    def test_gap_means_values(self):
        f = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32))
        assert float(f.mean(axis=(2, 3)).data[0, 0]) == pytest.approx(2.5)

    def test_constant_map_gap_is_constant(self, rng):
        c = rng.random()
        f = Tensor(np.full((1, 5, 4, 4), c, dtype=np.float32))
        assert np.allclose(f.mean(axis=(2, 3)).data, c, atol=1e-6)

    def test_projector_output_dim(self, toy_bundle, toy_config, toy_batch):
        d4 = network.final_stage_embedding(toy_batch, toy_bundle.params, toy_config)
        assert d4.shape == (3, toy_config.projector_dims[-1])

    def test_default_d4_is_256(self):
        cfg = network.EncoderConfig()
        bundle = network.init_params(cfg, (3,), seed=0)
        x = Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32))
        d4 = network.final_stage_embedding(x, bundle.params, cfg)
        assert d4.shape == (1, 256)

    def test_wrong_input_shape(self, toy_bundle, toy_config):
        with pytest.raises(ShapeMismatchError):
            network.encode_stages(Tensor(np.zeros((1, 3, 8, 8), dtype=np.float32)),
                                  toy_bundle.params, toy_config)


class TestClassify:
    def test_zero_head_uniform(self, toy_bundle, toy_config, toy_batch):
        d4 = network.final_stage_embedding(toy_batch, toy_bundle.params, toy_config)
        probs = network.classify(d4, toy_bundle.params, 1)  # zero-init head? no
        # heads are Xavier for weights but bias zero; force zero weights:
        toy_bundle.params["head1.weight"].data[:] = 0.0
        probs = network.classify(d4, toy_bundle.params, 1)
        assert np.allclose(probs.data, 1 / 3, atol=1e-6)

    def test_sums_to_one(self, toy_bundle, toy_config, toy_batch):
        d4 = network.final_stage_embedding(toy_batch, toy_bundle.params, toy_config)
        probs = network.classify(d4, toy_bundle.params, 2)
        assert probs.shape == (3, 4)
        assert np.allclose(probs.data.sum(axis=1), 1.0, atol=1e-6)

    def test_unknown_head(self, toy_bundle, toy_config, toy_batch):
        d4 = network.final_stage_embedding(toy_batch, toy_bundle.params, toy_config)
        with pytest.raises(ContractError):
            network.classify(d4, toy_bundle.params, 9)


class TestPredictAll:
    def test_task_count_and_determinism(self, toy_bundle, toy_batch):
        probs1, emb1 = network.predict_all(toy_batch, toy_bundle)
        probs2, _ = network.predict_all(toy_batch, toy_bundle)
        assert len(probs1) == 2 and len(emb1) == 4
        for p1, p2 in zip(probs1, probs2):
            assert np.array_equal(p1.data, p2.data)

    def test_forward_is_pure(self, toy_bundle, toy_batch):
        before = {n: p.data.copy() for n, p in toy_bundle.params.items()}
        network.predict_all(toy_batch, toy_bundle)
        for n, p in toy_bundle.params.items():
            assert np.array_equal(p.data, before[n])

    def test_teacher_equals_student_at_init(self, toy_bundle, toy_batch):
        student, _ = network.predict_all(toy_batch, toy_bundle)
        teacher, _ = network.predict_all(toy_batch, toy_bundle, use_teacher=True)
        for s, t in zip(student, teacher):
            assert np.array_equal(s.data, t.data)


class TestFreeze:
    def _one_step(self, bundle, config, batch, freeze):
        emb = network.forward_embeddings(batch, bundle.params, config)
        probs = network.classify(emb[-1], bundle.params, 1)
        loss = losses.batch_cross_entropy(probs, np.array([0, 1, 2]))
        zero_grads(bundle.params.values())
        loss.backward()
        optim.AdamW().step(bundle.params, lr=1e-3, freeze=freeze)

    def test_freeze_all_leaves_model_bit_unchanged(self, toy_bundle, toy_config, toy_batch):
        before = {n: p.data.copy() for n, p in toy_bundle.params.items()}
        self._one_step(toy_bundle, toy_config, toy_batch, frozenset(toy_bundle.params))
        for n, p in toy_bundle.params.items():
            assert np.array_equal(p.data, before[n])

    def test_empty_mask_behaves_as_plain_step(self, toy_config, toy_batch):
        a = network.init_params(toy_config, (3, 4), seed=5)
        b = network.init_params(toy_config, (3, 4), seed=5)
        self._one_step(a, toy_config, toy_batch, frozenset())
        emb = network.forward_embeddings(toy_batch, b.params, toy_config)
        probs = network.classify(emb[-1], b.params, 1)
        loss = losses.batch_cross_entropy(probs, np.array([0, 1, 2]))
        zero_grads(b.params.values())
        loss.backward()
        optim.AdamW().step(b.params, lr=1e-3)
        for n in a.params:
            assert np.array_equal(a.params[n].data, b.params[n].data)

    def test_adaptation_mask_is_stable_across_steps(self, toy_bundle, toy_config, rng):
        freeze = network.adaptation_freeze_names(toy_bundle.params)
        before = {n: toy_bundle.params[n].data.copy() for n in freeze}
        for _ in range(100):
            batch = Tensor(rng.random((3, 3, 4, 4)).astype(np.float32))
            self._one_step(toy_bundle, toy_config, batch, freeze)
        for n in freeze:
            assert np.array_equal(toy_bundle.params[n].data, before[n])

    def test_unknown_name_rejected(self, toy_bundle):
        with pytest.raises(ConfigurationError):
            network.validate_freeze_mask({"enc9.weight"}, toy_bundle.params)

    def test_gradients_reach_every_unfrozen_parameter(self, toy_bundle, toy_config, toy_batch):
        emb = network.forward_embeddings(toy_batch, toy_bundle.params, toy_config)
        probs = [network.classify(emb[-1], toy_bundle.params, m) for m in (1, 2)]
        loss = losses.batch_cross_entropy(probs[0], np.array([0, 1, 2])) \
            + losses.batch_cross_entropy(probs[1], np.array([3, 0, 1]))
        loss = loss + losses.consistency_total(
            [losses.stage_consistency(e, Tensor(np.zeros(e.shape, dtype=np.float32)))
             for e in emb])
        zero_grads(toy_bundle.params.values())
        loss.backward()
        for n, p in toy_bundle.params.items():
            assert p.grad is not None and p.grad.any(), f"no gradient reached {n}"
