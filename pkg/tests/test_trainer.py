"""Tests for the IOH-weighted loss, ablation switches, checkpoints and both training stages."""

import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch

from cohort import ForecastInstance
from configuration import Ablation, ModelConfig, PipelineConfig, Stage, TrainConfig
from fusemodel import FuseForecaster
from pcdg import ClinicalDescription
from trainer import (
    Checkpoint,
    FusionDataset,
    FusionPredictor,
    IncompatibleCheckpointError,
    TrainingDivergedError,
    apply_ablation,
    compute_ioh_loss,
    finetune,
    pretrain,
)


def model_config(**overrides) -> ModelConfig:
    settings = dict(patch_len=6, d_model=16, n_layers=1, n_heads=2, max_text_tokens=4, history_len=12, horizon=6)
    settings.update(overrides)
    return ModelConfig(**settings)


def sine_instances(n: int, seed: int = 0) -> list[ForecastInstance]:
    rng = np.random.default_rng(seed)
    instances = []
    for i in range(n):
        phase = rng.uniform(0, 2 * np.pi)
        window = 80 + 10 * np.sin(2 * np.pi * np.arange(18) / 9 + phase)
        target = window[12:]
        instances.append(ForecastInstance(f"P{i}", 0, window[:12], target, False, 10.0, target < 75))
    return instances


def descriptions_for(instances: list[ForecastInstance]) -> dict[str, ClinicalDescription]:
    return {
        i.patient_id: ClinicalDescription(i.patient_id, "text", np.array([5, 6, 0, 0]), np.array([1, 1, 0, 0]))
        for i in instances
    }


class TestIohLoss(unittest.TestCase):
    def test_hypotensive_gradient_is_rho_times_normal(self):
        pred = torch.tensor([1.0, 1.0], requires_grad=True)
        loss = compute_ioh_loss(pred, torch.zeros(2), torch.tensor([False, True]), rho=10.0)
        loss.backward()
        self.assertAlmostEqual(loss.item(), 11.0)
        self.assertAlmostEqual((pred.grad[1] / pred.grad[0]).item(), 10.0, places=6)

    def test_mixed_fixture(self):
        loss = compute_ioh_loss(torch.tensor([70.0, 60.0]), torch.tensor([72.0, 58.0]), torch.tensor([False, True]), 10)
        self.assertEqual(loss.item(), 44.0)

    def test_equals_two_partitioned_mse_terms(self):
        generator = torch.Generator().manual_seed(0)
        pred, target = torch.randn(4, 30, generator=generator), torch.randn(4, 30, generator=generator)
        mask = torch.rand(4, 30, generator=generator) < 0.3
        expected = torch.nn.functional.mse_loss(pred[~mask], target[~mask]) + 10.0 * torch.nn.functional.mse_loss(
            pred[mask], target[mask]
        )
        self.assertAlmostEqual(compute_ioh_loss(pred, target, mask, 10.0).item(), expected.item(), places=5)

    def test_empty_sets_contribute_zero(self):
        pred, target = torch.tensor([[2.0, 0.0]]), torch.zeros(1, 2)
        self.assertEqual(compute_ioh_loss(pred, target, torch.zeros(1, 2, dtype=torch.bool), 10.0).item(), 2.0)
        self.assertEqual(compute_ioh_loss(pred, target, torch.ones(1, 2, dtype=torch.bool), 10.0).item(), 20.0)
        self.assertEqual(compute_ioh_loss(pred, target, torch.zeros(1, 2, dtype=torch.bool), 0.0).item(), 2.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ValueError):
            compute_ioh_loss(torch.zeros(3), torch.zeros(2), torch.zeros(2, dtype=torch.bool), 1.0)


class TestAblation(unittest.TestCase):
    def test_each_variant_flips_one_switch(self):
        base = PipelineConfig()
        self.assertFalse(apply_ablation(Ablation.NO_TEXT, base).model.use_text)
        self.assertFalse(apply_ablation(Ablation.NO_VOCAB_EXT, base).pcdg.extend_vocabulary)
        self.assertFalse(apply_ablation(Ablation.NO_AUGMENTATION, base).mtrda.augment)
        self.assertTrue(apply_ablation(Ablation.NO_PRETRAIN, base).train.skip_pretrain)
        self.assertEqual(apply_ablation(Ablation.NO_TEXT, base).train.ablation, Ablation.NO_TEXT)
        self.assertTrue(base.model.use_text)
        self.assertEqual(base.train.ablation, Ablation.FULL)


class TestDataset(unittest.TestCase):
    def test_missing_description_is_all_padding(self):
        instances = sine_instances(2)
        dataset = FusionDataset(instances, descriptions_for(instances[:1]), 4)
        self.assertEqual(dataset[0]["valid_mask"].tolist(), [1, 1, 0, 0])
        self.assertEqual(dataset[1]["valid_mask"].tolist(), [0, 0, 0, 0])
        self.assertEqual(dataset[1]["window"].shape, (18,))


class TestTraining(unittest.TestCase):
    def setUp(self):
        self.train = sine_instances(16, seed=0)
        self.val = sine_instances(4, seed=1)
        self.descriptions = descriptions_for(self.train + self.val)

    def pretrain_config(self, **overrides) -> TrainConfig:
        settings = dict(stage=Stage.PRETRAIN, learning_rate=3e-3, decay_factor=1.0, batch_size=4, epochs=3, seed=7)
        settings.update(overrides)
        return TrainConfig(**settings)

    def test_pretrain_loss_halves(self):
        config = self.pretrain_config(epochs=100, patience=100)
        checkpoint = pretrain(self.train, self.val, self.descriptions, model_config(), config, vocab_size=10)
        losses = [row["train_loss"] for row in checkpoint.history]
        self.assertLessEqual(min(losses), 0.5 * losses[0])
        self.assertEqual(checkpoint.stage, Stage.PRETRAIN)

    def test_same_seed_same_loss_curve(self):
        runs = [
            pretrain(self.train, self.val, self.descriptions, model_config(), self.pretrain_config(), 10)
            for _ in range(2)
        ]
        self.assertEqual(runs[0].history, runs[1].history)

    def test_learning_rate_decays_per_epoch(self):
        config = self.pretrain_config(learning_rate=1e-3, decay_factor=0.5, epochs=3, patience=10)
        checkpoint = pretrain(self.train, self.val, self.descriptions, model_config(), config, vocab_size=10)
        np.testing.assert_allclose([row["lr"] for row in checkpoint.history], [1e-3, 5e-4, 2.5e-4])

    def test_stage_mismatch(self):
        with self.assertRaises(ValueError):
            pretrain(self.train, [], None, model_config(), TrainConfig(stage=Stage.FINETUNE), 10)
        with self.assertRaises(ValueError):
            pretrain([], [], None, model_config(), self.pretrain_config(), 10)

    def test_checkpoint_reload_is_bitwise(self):
        checkpoint = pretrain(self.train, self.val, self.descriptions, model_config(), self.pretrain_config(), 10)
        ft_config = TrainConfig(stage=Stage.FINETUNE, epochs=2, batch_size=4, learning_rate=1e-3)
        tuned = finetune(self.train, self.val, self.descriptions, model_config(), ft_config, 10, checkpoint)
        with tempfile.TemporaryDirectory() as tmp:
            tuned.save(Path(tmp) / "checkpoint.pt")
            loaded = Checkpoint.load(Path(tmp) / "checkpoint.pt")
        first = FusionPredictor(tuned.build_model(), self.descriptions).predict(self.val)
        second = FusionPredictor(loaded.build_model(), self.descriptions).predict(self.val)
        self.assertEqual(first.shape, (4, 6))
        np.testing.assert_array_equal(first, second)
        self.assertEqual(loaded.train_config, tuned.train_config)
        self.assertEqual(loaded.history, tuned.history)

    def test_unknown_checkpoint_version(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "checkpoint.pt"
            torch.save({"format_version": 99}, path)
            with self.assertRaises(IncompatibleCheckpointError):
                Checkpoint.load(path)

    def test_finetune_needs_a_matching_pretrain_checkpoint(self):
        ft_config = TrainConfig(stage=Stage.FINETUNE, epochs=1, batch_size=4)
        with self.assertRaises(IncompatibleCheckpointError):
            finetune(self.train, self.val, self.descriptions, model_config(), ft_config, 10, None)

        checkpoint = pretrain(self.train, self.val, self.descriptions, model_config(), self.pretrain_config(), 10)
        with self.assertRaises(IncompatibleCheckpointError) as ctx:
            finetune(self.train, self.val, self.descriptions, model_config(d_model=8), ft_config, 10, checkpoint)
        self.assertIn("d_model", str(ctx.exception))
        with self.assertRaises(IncompatibleCheckpointError):
            finetune(self.train, self.val, self.descriptions, model_config(), ft_config, 11, checkpoint)

        tuned = finetune(self.train, self.val, self.descriptions, model_config(), ft_config, 10, checkpoint)
        with self.assertRaises(IncompatibleCheckpointError):
            finetune(self.train, self.val, self.descriptions, model_config(), ft_config, 10, tuned)

    def test_finetune_keeps_backbone_from_pretrain(self):
        checkpoint = pretrain(self.train, self.val, self.descriptions, model_config(), self.pretrain_config(), 10)
        ft_config = TrainConfig(stage=Stage.FINETUNE, epochs=1, batch_size=4, learning_rate=1e-12)
        tuned = finetune(self.train, self.val, self.descriptions, model_config(), ft_config, 10, checkpoint)
        name = "backbone.blocks.0.qkv.weight"
        torch.testing.assert_close(tuned.model_state[name], checkpoint.model_state[name], rtol=0, atol=1e-8)

    def test_no_pretrain_ablation_starts_from_scratch(self):
        ft_config = TrainConfig(stage=Stage.FINETUNE, epochs=1, batch_size=4, ablation=Ablation.NO_PRETRAIN)
        tuned = finetune(self.train, [], None, model_config(use_text=False), ft_config, 10, None)
        self.assertEqual(tuned.stage, Stage.FINETUNE)
        self.assertIsNone(tuned.history[0]["val_loss"])

    def test_non_finite_loss_keeps_last_good_state(self):
        broken = sine_instances(4)
        broken[0].history[:] = np.nan
        with self.assertRaises(TrainingDivergedError) as ctx:
            pretrain(broken, [], None, model_config(use_text=False), self.pretrain_config(batch_size=8), 10)
        self.assertIsNotNone(ctx.exception.checkpoint)
        self.assertEqual(ctx.exception.checkpoint.epoch, 0)

    def test_predictor_on_empty_input(self):
        predictor = FusionPredictor(FuseForecaster(model_config(), 10), None)
        self.assertEqual(predictor.predict([]).shape, (0, 6))
