"""Tests for patching, masked attention and the text/series fusion forecaster."""

import unittest

import numpy as np
import torch
from torch.autograd import gradcheck
from torch.func import functional_call

from configuration import ModelConfig
from fusemodel import (
    FuseForecaster,
    FusionBackbone,
    build_attention_mask,
    count_parameters,
    forecast,
    mask_tokens,
    masked_attention,
    masked_reconstruction_loss,
    normalize_by_history,
    pad_to_patches,
    patchify,
)


def small_config(**overrides) -> ModelConfig:
    settings = dict(patch_len=6, d_model=8, n_layers=1, n_heads=2, max_text_tokens=4, history_len=12, horizon=6)
    settings.update(overrides)
    return ModelConfig(**settings)


class TestPatching(unittest.TestCase):
    def test_patchify_preserves_order(self):
        series = torch.arange(12.0).reshape(1, 12)
        patches = patchify(series, 4)
        self.assertEqual(patches.shape, (1, 3, 4))
        torch.testing.assert_close(patches.flatten(), series.flatten())
        with self.assertRaises(ValueError):
            patchify(series, 5)

    def test_pad_repeats_last_value(self):
        padded = pad_to_patches(torch.tensor([[1.0, 2.0, 3.0, 4.0]]), 3)
        torch.testing.assert_close(padded, torch.tensor([[1.0, 2.0, 3.0, 4.0, 4.0, 4.0]]))
        unchanged = torch.ones(2, 6)
        self.assertIs(pad_to_patches(unchanged, 3), unchanged)

    def test_mask_count_and_reproducibility(self):
        tokens = torch.randn(3, 25, 8)
        mask_token = torch.full((8,), 7.0)
        out, masked = mask_tokens(tokens, mask_token, 0.2, torch.Generator().manual_seed(0))
        self.assertTrue(torch.all(masked.sum(dim=1) == 5))
        _, fifteen = mask_tokens(torch.randn(1, 15, 8), mask_token, 0.2)
        self.assertEqual(int(fifteen.sum()), 3)
        self.assertTrue(torch.all(out[masked] == 7.0))
        torch.testing.assert_close(out[~masked], tokens[~masked])
        _, again = mask_tokens(tokens, mask_token, 0.2, torch.Generator().manual_seed(0))
        self.assertTrue(torch.equal(masked, again))
        _, none = mask_tokens(tokens, mask_token, 0.0)
        self.assertFalse(none.any())
        with self.assertRaises(ValueError):
            mask_tokens(tokens, mask_token, 1.0)

    def test_history_normalisation_floor(self):
        window = torch.tensor([[80.0, 80.0, 80.0, 80.0, 60.0]])
        normalized, mean, std = normalize_by_history(window, 4)
        self.assertEqual(std.item(), 1.0)
        torch.testing.assert_close(normalized, torch.tensor([[0.0, 0.0, 0.0, 0.0, -20.0]]))


class TestMaskedAttention(unittest.TestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.q = torch.randn(1, 1, 3, 4, dtype=torch.float64)
        self.k = torch.randn(1, 1, 5, 4, dtype=torch.float64)
        self.v = torch.randn(1, 1, 5, 4, dtype=torch.float64)

    def test_padded_keys_get_no_weight(self):
        mask = torch.tensor([[0.0, 0.0, 1.0, 0.0, 1.0]]).expand(3, 5)
        out, weights = masked_attention(self.q, self.k, self.v, mask, 1e4)
        self.assertTrue(torch.all(weights[..., [2, 4]] < 1e-6))
        keep = [0, 1, 3]
        expected, _ = masked_attention(self.q, self.k[..., keep, :], self.v[..., keep, :], None, 1e4)
        torch.testing.assert_close(out, expected)

    def test_fully_padded_row_is_zero(self):
        mask = torch.zeros(3, 5, dtype=torch.float64)
        mask[1] = 1.0
        out, _ = masked_attention(self.q, self.k, self.v, mask, 1e4)
        self.assertTrue(torch.all(out[..., 1, :] == 0))
        self.assertTrue(torch.any(out[..., 0, :] != 0))

    def test_attention_mask_rows(self):
        mask = build_attention_mask(torch.tensor([[1, 1, 0]]), n_series=4)
        self.assertEqual(mask.shape, (1, 4, 3))
        torch.testing.assert_close(mask[0, 2], torch.tensor([0.0, 0.0, 1.0]))
        torch.testing.assert_close(build_attention_mask(torch.ones(1, 3), 2), torch.zeros(1, 2, 3))
        torch.testing.assert_close(build_attention_mask(torch.zeros(1, 3), 2), torch.ones(1, 2, 3))

    def test_single_key_returns_its_value(self):
        v = torch.randn(1, 1, 1, 4, dtype=torch.float64)
        out, _ = masked_attention(self.q[..., :1, :], self.k[..., :1, :], v, None, 1e4)
        torch.testing.assert_close(out, v)

    def test_backbone_without_blocks_only_normalises(self):
        backbone = FusionBackbone(8, 2, 0, max_len=10)
        sequence = torch.randn(2, 5, 8)
        torch.testing.assert_close(backbone(sequence), backbone.ln_f(sequence))

    def test_gradients_match_finite_differences(self):
        mask = torch.tensor([[0.0, 1.0, 0.0, 0.0, 0.0]]).expand(3, 5)
        inputs = tuple(t.clone().requires_grad_(True) for t in (self.q, self.k, self.v))

        def fn(q, k, v):
            return masked_attention(q, k, v, mask, 1e4)[0]

        self.assertTrue(gradcheck(fn, inputs, eps=1e-6, atol=1e-6))

    def test_backbone_is_causal(self):
        torch.manual_seed(1)
        backbone = FusionBackbone(8, 2, 2, max_len=10).double()
        sequence = torch.randn(1, 6, 8, dtype=torch.float64)
        changed = sequence.clone()
        changed[:, 4:] = torch.randn(1, 2, 8, dtype=torch.float64)
        torch.testing.assert_close(backbone(sequence)[:, :4], backbone(changed)[:, :4], rtol=0, atol=1e-12)
        with self.assertRaises(ValueError):
            backbone(torch.randn(1, 11, 8, dtype=torch.float64))


class TestForecaster(unittest.TestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.config = small_config()
        self.model = FuseForecaster(self.config, vocab_size=10)
        self.history = 80 + 5 * torch.randn(2, 12)
        self.token_ids = torch.tensor([[5, 6, 0, 0], [7, 8, 9, 0]])
        self.valid_mask = torch.tensor([[1, 1, 0, 0], [1, 1, 1, 0]])

    def test_output_shape_and_length_check(self):
        out = self.model(self.history, self.token_ids, self.valid_mask)
        self.assertEqual(out.shape, (2, 6))
        with self.assertRaises(ValueError):
            self.model(torch.randn(2, 11), self.token_ids, self.valid_mask)

    def test_padded_text_positions_do_not_matter(self):
        self.model.eval()
        other_ids = self.token_ids.clone()
        other_ids[0, 2:] = torch.tensor([3, 4])
        with torch.no_grad():
            first = self.model(self.history, self.token_ids, self.valid_mask)
            second = self.model(self.history, other_ids, self.valid_mask)
            changed_valid = other_ids.clone()
            changed_valid[0, 0] = 9
            third = self.model(self.history, changed_valid, self.valid_mask)
        torch.testing.assert_close(first, second)
        self.assertFalse(torch.allclose(first[0], third[0]))

    def test_text_free_variant(self):
        model = FuseForecaster(small_config(use_text=False), vocab_size=10)
        self.assertFalse(hasattr(model, "text_embedding"))
        self.assertLess(count_parameters(model), count_parameters(self.model))
        self.assertEqual(model(self.history).shape, (2, 6))

    def test_reconstruction_shapes(self):
        window = torch.cat([self.history, 70 + torch.randn(2, 6)], dim=1)
        reconstruction, normalized, masked = self.model.reconstruct(
            window, self.token_ids, self.valid_mask, torch.Generator().manual_seed(0)
        )
        self.assertEqual(reconstruction.shape, (2, 18))
        self.assertEqual(normalized.shape, (2, 18))
        self.assertEqual(masked.shape, (2, 3))
        self.assertTrue(torch.all(masked.sum(dim=1) == 1))

    def test_reconstruction_loss_counts_masked_patches_only(self):
        target = torch.zeros(1, 12)
        reconstruction = torch.zeros(1, 12)
        reconstruction[0, 6:] = 2.0
        self.assertEqual(masked_reconstruction_loss(reconstruction, target, torch.tensor([[True, False]]), 6), 0.0)
        self.assertEqual(masked_reconstruction_loss(reconstruction, target, torch.tensor([[False, True]]), 6), 4.0)
        self.assertEqual(masked_reconstruction_loss(reconstruction, target, torch.tensor([[False, False]]), 6), 0.0)
        noisy = target.clone()
        noisy[0, :6] += torch.randn(6)
        self.assertEqual(masked_reconstruction_loss(reconstruction, noisy, torch.tensor([[False, True]]), 6), 4.0)

    def test_series_order_matters(self):
        self.model.eval()
        permuted = torch.cat([self.history[:, 6:], self.history[:, :6]], dim=1)
        with torch.no_grad():
            first = self.model(self.history, self.token_ids, self.valid_mask)
            second = self.model(permuted, self.token_ids, self.valid_mask)
        self.assertFalse(torch.allclose(first, second))

    def test_finetune_reinitialisation_scope(self):
        before = {name: p.detach().clone() for name, p in self.model.named_parameters()}
        self.model.reinitialize_for_finetune(seed=3)
        for name, p in self.model.named_parameters():
            fresh = name.startswith(("series_embedding.", "reconstruction_head.", "forecast_head."))
            self.assertEqual(not torch.equal(before[name], p), fresh, name)

    def test_gradients_match_finite_differences(self):
        model = FuseForecaster(self.config, vocab_size=10).double()
        history = (80 + 5 * torch.randn(2, 12, dtype=torch.float64)).requires_grad_(True)
        query = model.cross_attention.query.weight.detach().clone().requires_grad_(True)

        def fn(history, query):
            params = {"cross_attention.query.weight": query}
            return functional_call(model, params, (history, self.token_ids, self.valid_mask))

        self.assertTrue(gradcheck(fn, (history, query), eps=1e-6, atol=1e-5, rtol=1e-4))

    def test_numpy_forecast(self):
        out = forecast(self.model, np.full(12, 80.0) + np.arange(12), np.array([5, 6, 0, 0]), np.array([1, 1, 0, 0]))
        self.assertEqual(out.shape, (6,))
        self.assertEqual(out.dtype, np.float64)
