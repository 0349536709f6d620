import os
import tempfile
import unittest

import numpy as np
from parameterized import parameterized
from pydantic import ValidationError

from pcefusion import tensor as T
from pcefusion.dataset import DeviceBatchBuilder, DeviceRecord, corpus_of
from pcefusion.errors import ContractError, DimensionError
from pcefusion.model import (
    ModelConfig,
    PCEFusionModel,
    baseline_concat_mlp,
    baseline_text_mlp,
    forward,
    loss_fn,
    mse_loss,
    nll_loss,
)
from pcefusion.optim import AdamW
from pcefusion.structure import CrystalStructure
from pcefusion.tensor import Tensor
from pcefusion.text_encoder import build_vocab
from pcefusion.trainer import load_model, save_model
from pcefusion.utils import check_gradients
from tests.fixtures import GRAPH_PARAMS, cspbi3, make_records, random_structure, rotation, tiny_model_config


def predictions(batch, model):
    dists = forward(batch, model)
    return np.array([d.mu for d in dists]), np.array([d.sigma for d in dists])


class TestLosses(unittest.TestCase):
    """Tests the Gaussian negative log-likelihood and squared-error losses."""

    @parameterized.expand(
        [
            ([1.0], [1.0], [1.0], 0.0),
            ([0.0], [1.0], [1.0], 0.5),
            ([0.0], [2.0], [2.0], (np.log(4.0) + 1.0) / 2.0),
            ([0.0, 0.0], [1.0, 2.0], [1.0, 2.0], (0.5 + (np.log(4.0) + 1.0) / 2.0) / 2.0),
        ]
    )
    def test_nll_values(self, mu, sigma, y, expected):
        assert abs(nll_loss(Tensor(mu), Tensor(sigma), y).item() - expected) < 1e-12

    def test_nll_is_smallest_at_true_sigma(self):
        residual = np.array([1.5, -1.5, 1.5, -1.5])
        losses = [nll_loss(Tensor(np.zeros(4)), Tensor(np.full(4, s)), residual).item() for s in (1.0, 1.5, 2.0)]
        assert losses[1] < losses[0] and losses[1] < losses[2]

    def test_nll_gradient_at_unit_sigma_is_half_mse_gradient(self):
        mu_a = Tensor([0.3, -1.2, 2.0], requires_grad=True)
        mu_b = Tensor([0.3, -1.2, 2.0], requires_grad=True)
        y = [1.0, 0.0, -1.0]
        T.backward(nll_loss(mu_a, Tensor(np.ones(3)), y))
        T.backward(mse_loss(mu_b, y))
        T.clear_graph()
        assert np.allclose(mu_a.grad, 0.5 * mu_b.grad)

    def test_mse_values(self):
        assert mse_loss(Tensor([1.0, 2.0]), [1.0, 2.0]).item() == 0.0
        assert mse_loss(Tensor([0.0, 2.0]), [1.0, 1.0]).item() == 1.0

    def test_contracts(self):
        with self.assertRaises(ContractError):
            nll_loss(Tensor([0.0]), Tensor([0.0]), [1.0])
        with self.assertRaises(ContractError):
            nll_loss(Tensor([0.0, 1.0]), Tensor([1.0, 1.0]), [1.0])
        with self.assertRaises(ContractError):
            mse_loss(Tensor([]), [])


class TestModelConfig(unittest.TestCase):
    """Tests validating model hyperparameters."""

    def test_defaults(self):
        config = ModelConfig()
        assert (config.d_model, config.num_heads, config.num_layers) == (64, 4, 3)
        assert config.mlp_dims == [128, 64, 2]
        assert config.dropout == 0.2
        assert config.sigma2_min == 1e-6

    @parameterized.expand(
        [
            (dict(mlp_dims=[8, 1]),),
            (dict(head="mse", mlp_dims=[8, 2]),),
            (dict(d_model=10, num_heads=4),),
            (dict(num_layers=0),),
            (dict(dropout=1.0),),
            (dict(sigma2_min=0.0),),
            (dict(architecture="lstm"),),
            (dict(bogus=1),),
        ]
    )
    def test_invalid(self, kwargs):
        with self.assertRaises(ValidationError):
            ModelConfig(**kwargs)

    def test_baselines_may_skip_fusion_layers(self):
        assert ModelConfig(architecture="concat_mlp", num_layers=0).num_layers == 0


class TestModel(unittest.TestCase):
    """Tests the fusion model and its baselines."""

    def setUp(self):
        rng = np.random.default_rng(0)
        self.store = {"a": cspbi3(), "b": random_structure(rng, 3), "c": random_structure(rng, 7)}
        self.records = make_records(self.store, ["a", "b", "c", "a", "b", "c"])
        self.ids = [r.device_id for r in self.records]
        self.vocab = build_vocab(corpus_of(self.records))
        self.model = PCEFusionModel(tiny_model_config(), len(self.vocab), seed=0)

    def tearDown(self):
        T.clear_graph()

    def builder(self, records=None, store=None):
        return DeviceBatchBuilder(
            records or self.records, store or self.store, self.vocab, max_tokens=8, graph_params=GRAPH_PARAMS
        )

    def with_structure(self, ref, structure):
        """A builder in which every device points at ``structure`` stored under ``ref``."""
        store = dict(self.store, **{ref: structure})
        records = [
            DeviceRecord(r.device_id, r.perovskite_formula, ref, r.layer_texts, r.pce) for r in self.records
        ]
        return self.builder(records, store)

    def test_output_shapes(self):
        mu, sigma = self.model(self.builder().build(self.ids))
        assert mu.shape == sigma.shape == (6,)

    def test_batch_composition_does_not_matter(self):
        builder = self.builder()
        mu, sigma = predictions(builder.build(self.ids), self.model)
        for i, device_id in enumerate(self.ids):
            mu_i, sigma_i = predictions(builder.build([device_id]), self.model)
            assert abs(mu_i[0] - mu[i]) < 1e-9
            assert abs(sigma_i[0] - sigma[i]) < 1e-9

    def test_eval_is_deterministic(self):
        batch = self.builder().build(self.ids)
        a, b = predictions(batch, self.model), predictions(batch, self.model)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_atom_order_does_not_matter(self):
        s = self.store["c"]
        perm = np.array([6, 2, 0, 5, 1, 4, 3])
        shuffled = CrystalStructure(s.lattice, s.frac_coords[perm], s.atomic_numbers[perm])
        a = predictions(self.with_structure("x", s).build(self.ids), self.model)
        b = predictions(self.with_structure("x", shuffled).build(self.ids), self.model)
        assert np.allclose(a, b, atol=1e-9)

    def test_rigid_motion_does_not_matter(self):
        s = self.store["c"]
        R = rotation((0.3, -1.0, 2.0), 1.1)
        moved = CrystalStructure(s.lattice @ R.T, s.frac_coords + [0.25, 0.5, -0.125], s.atomic_numbers)
        a = predictions(self.with_structure("x", s).build(self.ids), self.model)
        b = predictions(self.with_structure("x", moved).build(self.ids), self.model)
        assert np.allclose(a, b, atol=1e-8)

    def test_sigma_floor(self):
        _, sigma = predictions(self.builder().build(self.ids), self.model)
        assert np.all(sigma >= self.model.sigma_floor)
        model = PCEFusionModel(tiny_model_config(head="mse", mlp_dims=[8, 1]), len(self.vocab))
        _, sigma = predictions(self.builder().build(self.ids), model)
        assert np.all(sigma == model.sigma_floor)

    def test_text_baseline_ignores_structure(self):
        model = PCEFusionModel(tiny_model_config(architecture="text_mlp"), len(self.vocab))
        a = baseline_text_mlp(self.with_structure("x", self.store["b"]).build(self.ids), model)
        b = baseline_text_mlp(self.with_structure("x", self.store["c"]).build(self.ids), model)
        assert [d.mu for d in a] == [d.mu for d in b]
        assert not hasattr(model, "graph_encoder")

    def test_concat_baseline_is_pooled_projections(self):
        model = PCEFusionModel(tiny_model_config(architecture="concat_mlp"), len(self.vocab))
        assert len(model.fusion.layers) == 0
        batch = self.builder().build(self.ids[2:3])
        with T.no_grad():
            h_atoms = model.graph_encoder(batch.atomic_numbers, batch.src, batch.dst, batch.edge_features)
            v_graph = T.mean(model.fusion.graph_proj(h_atoms), axis=0)
            v_text = T.mean(model.fusion.text_proj(model.text_encoder(batch.token_ids[0])), axis=0)
            out = model.head(T.reshape(T.concat([v_graph, v_text], axis=-1), (1, -1))).data[0]
        (dist,) = baseline_concat_mlp(batch, model)
        assert abs(dist.mu - out[0]) < 1e-9
        assert abs(dist.sigma - (np.log1p(np.exp(out[1])) + model.sigma_floor)) < 1e-9

    def test_baseline_architecture_check(self):
        batch = self.builder().build(self.ids[:1])
        with self.assertRaises(ContractError):
            baseline_text_mlp(batch, self.model)
        with self.assertRaises(ContractError):
            baseline_concat_mlp(batch, self.model)

    def test_needs_graph(self):
        batch = self.builder().build(self.ids[:2])
        batch.atomic_numbers = None
        with self.assertRaises(ContractError):
            self.model(batch)

    def test_standardized_targets(self):
        batch = self.builder().build(self.ids)
        mu, sigma = predictions(batch, self.model)
        self.model.set_target_stats(15.0, 4.0)
        mu_scaled, sigma_scaled = predictions(batch, self.model)
        assert np.allclose(mu_scaled, mu * 4.0 + 15.0)
        assert np.allclose(sigma_scaled, sigma * 4.0)
        assert np.allclose(self.model.scale_targets([15.0, 19.0]), [0.0, 1.0])

    def test_sigma_floor_in_percent(self):
        self.model.set_target_stats(15.0, 0.01)
        floor = self.model.sigma_floor
        mu, sigma = self.model.to_percent(np.array([0.0, 1.0]), np.array([floor, 1000.0 * floor]))
        assert np.allclose(mu, [15.0, 15.01])
        assert sigma[0] == floor and np.isclose(sigma[1], 10.0 * floor)
        _, sigma = predictions(self.builder().build(self.ids), self.model)
        assert np.all(sigma >= floor)

    def test_gradients(self):
        batch = self.builder().build(self.ids[:3])
        targets = self.model.scale_targets(batch.targets) / 10.0

        def loss():
            mu, sigma = self.model(batch)
            return loss_fn(self.model, mu, sigma, targets)

        assert check_gradients(loss, self.model.trainable_parameters(), num_entries=40) < 1e-4

    def test_training_reduces_loss(self):
        batch = self.builder().build(self.ids)
        self.model.set_target_stats(float(np.mean(batch.targets)), float(np.std(batch.targets)))
        targets = self.model.scale_targets(batch.targets)
        optimizer = AdamW(self.model.parameter_groups(1.0))
        losses = []
        for _ in range(60):
            mu, sigma = self.model(batch, self.model.context(training=True))
            loss = loss_fn(self.model, mu, sigma, targets)
            optimizer.zero_grad()
            T.backward(loss)
            optimizer.step(3e-3)
            T.clear_graph()
            losses.append(loss.item())
        assert losses[-1] < losses[0]

    def test_freeze(self):
        model = PCEFusionModel(tiny_model_config(freeze_graph_encoder=True), len(self.vocab))
        batch = self.builder().build(self.ids)
        mu, sigma = model(batch)
        T.backward(nll_loss(mu, sigma, model.scale_targets(batch.targets)))
        assert all(p.grad is None for p in model.graph_encoder.parameters())
        assert all(p.grad is not None for p in model.head.parameters())

    def test_parameter_groups(self):
        (rest, one), (text, multiplier) = self.model.parameter_groups(0.1)
        assert (one, multiplier) == (1.0, 0.1)
        assert {id(p) for p in text} == {id(p) for p in self.model.text_encoder.parameters()}
        assert len(rest) + len(text) == len(self.model.parameters())

    def test_save_and_load(self):
        batch = self.builder().build(self.ids)
        self.model.set_target_stats(12.0, 3.0)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "checkpoint.npz")
            save_model(path, self.model, self.vocab)
            model, vocab = load_model(path)
            with self.assertRaises(DimensionError):
                load_model(path, tiny_model_config(d_model=16))
        assert vocab == self.vocab
        assert model.target_stats == (12.0, 3.0)
        a, b = predictions(batch, self.model), predictions(batch, model)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_train_mode_uses_dropout(self):
        model = PCEFusionModel(tiny_model_config(dropout=0.5), len(self.vocab))
        batch = self.builder().build(self.ids)
        eval_mu = [d.mu for d in forward(batch, model, "eval")]
        train_mu = [d.mu for d in forward(batch, model, "train")]
        assert eval_mu != train_mu
