"""Text/series fusion forecaster.

MAP windows are cut into patches and linearly embedded. Tokenized clinical descriptions query
the series tokens through a masked cross-attention whose penalty silences padded text
positions. The fused text outputs are prepended to the series tokens and run through a small
causal pre-LN transformer. Two heads read the series positions: one reconstructs patches for
masked pretraining, the other maps the history states to the forecast horizon.
"""

import logging
import math

import numpy as np
import torch
from torch import nn

from configuration import ModelConfig

logger = logging.getLogger(__name__)

CAUSAL_PENALTY = 1e4


def patchify(series: torch.Tensor, patch_len: int) -> torch.Tensor:
    """(..., L) -> (..., L / patch_len, patch_len), order preserving."""
    length = series.shape[-1]
    if length % patch_len:
        raise ValueError(f"series length {length} is not divisible by patch length {patch_len}")
    return series.reshape(*series.shape[:-1], length // patch_len, patch_len)


def pad_to_patches(series: torch.Tensor, patch_len: int) -> torch.Tensor:
    """Right-pad with the last value up to the next multiple of ``patch_len``."""
    missing = -series.shape[-1] % patch_len
    if not missing:
        return series
    return torch.cat([series, series[..., -1:].expand(*series.shape[:-1], missing)], dim=-1)


def masked_token_count(n_tokens: int, ratio: float) -> int:
    return int(math.floor(ratio * n_tokens + 0.5))


def mask_tokens(
    tokens: torch.Tensor, mask_token: torch.Tensor, ratio: float, generator: torch.Generator | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Replace ``round(ratio * n)`` uniformly drawn positions per sample with ``mask_token``."""
    if not 0 <= ratio < 1:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    batch, n_tokens = tokens.shape[:2]
    n_masked = masked_token_count(n_tokens, ratio)
    masked = torch.zeros(batch, n_tokens, dtype=torch.bool)
    if n_masked:
        noise = torch.rand(batch, n_tokens, generator=generator)
        chosen = torch.argsort(noise, dim=-1)[:, :n_masked]
        masked.scatter_(1, chosen, True)
    return torch.where(masked.unsqueeze(-1), mask_token.to(tokens.dtype), tokens), masked


def build_attention_mask(valid_mask: torch.Tensor, n_series: int) -> torch.Tensor:
    """Rows of ``1 - valid_mask``: shape (..., n_series, n_text); 1 marks a padded text position."""
    pad = 1.0 - valid_mask.to(torch.get_default_dtype())
    return pad.unsqueeze(-2).expand(*pad.shape[:-1], n_series, pad.shape[-1])


def masked_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, penalty_mask: torch.Tensor | None, penalty: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention with ``penalty * mask`` subtracted from the logits.

    ``q`` is (B, heads, Lq, dh), ``penalty_mask`` broadcasts to (B, Lq, Lk). Query rows whose keys
    are all flagged produce zeros.
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if penalty_mask is not None:
        penalty_mask = penalty_mask.to(scores.dtype)
        if penalty_mask.dim() == 2:
            penalty_mask = penalty_mask.unsqueeze(0)
        scores = scores - penalty * penalty_mask.unsqueeze(1)
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    if penalty_mask is not None:
        keep = (penalty_mask < 1).any(dim=-1).to(out.dtype)
        out = out * keep[:, None, :, None]
    return out, weights


def _split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    batch, length, width = x.shape
    return x.reshape(batch, length, n_heads, width // n_heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    batch, heads, length, dim = x.shape
    return x.transpose(1, 2).reshape(batch, length, heads * dim)


class PatchEmbedding(nn.Module):
    def __init__(self, patch_len: int, d_model: int, max_patches: int):
        super().__init__()
        self.projection = nn.Linear(patch_len, d_model)
        self.position = nn.Parameter(torch.empty(max_patches, d_model))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        self.projection.reset_parameters()
        nn.init.normal_(self.position, std=0.02)

    def project(self, patches: torch.Tensor) -> torch.Tensor:
        return self.projection(patches)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        return self.project(patches) + self.position[: patches.shape[-2]]


class TextEmbedding(nn.Module):
    def __init__(self, vocab_size: int, d_model: int, max_tokens: int):
        super().__init__()
        self.tokens = nn.Embedding(vocab_size, d_model, padding_idx=0)
        self.position = nn.Parameter(torch.randn(max_tokens, d_model) * 0.02)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.tokens(token_ids) + self.position[: token_ids.shape[-1]]


class MaskedCrossAttention(nn.Module):
    """Text tokens query series tokens; the penalty mask is applied per text query."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.query = nn.Linear(d_model, d_model)
        self.key = nn.Linear(d_model, d_model)
        self.value = nn.Linear(d_model, d_model)
        self.output = nn.Linear(d_model, d_model)

    def forward(
        self, text: torch.Tensor, series: torch.Tensor, series_text_mask: torch.Tensor, penalty: float
    ) -> torch.Tensor:
        q = _split_heads(self.query(text), self.n_heads)
        k = _split_heads(self.key(series), self.n_heads)
        v = _split_heads(self.value(series), self.n_heads)
        query_mask = series_text_mask.transpose(-2, -1)
        attended, _ = masked_attention(q, k, v, query_mask, penalty)
        out = self.output(_merge_heads(attended))
        padded_query = (query_mask >= 1).all(dim=-1, keepdim=True)
        return out.masked_fill(padded_query, 0.0)


class DecoderBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln_1 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.attn_proj = nn.Linear(d_model, d_model)
        self.ln_2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model))

    def forward(self, h: torch.Tensor, causal_mask: torch.Tensor) -> torch.Tensor:
        q, k, v = (_split_heads(part, self.n_heads) for part in self.qkv(self.ln_1(h)).chunk(3, dim=-1))
        attended, _ = masked_attention(q, k, v, causal_mask, CAUSAL_PENALTY)
        h = h + self.attn_proj(_merge_heads(attended))
        return h + self.mlp(self.ln_2(h))


class FusionBackbone(nn.Module):
    def __init__(self, d_model: int, n_heads: int, n_layers: int, max_len: int):
        super().__init__()
        self.max_len = max_len
        self.blocks = nn.ModuleList(DecoderBlock(d_model, n_heads) for _ in range(n_layers))
        self.ln_f = nn.LayerNorm(d_model)

    def forward(self, sequence: torch.Tensor) -> torch.Tensor:
        length = sequence.shape[1]
        if length > self.max_len:
            raise ValueError(f"sequence of {length} tokens exceeds the backbone limit of {self.max_len}")
        causal = torch.triu(torch.ones(length, length, dtype=sequence.dtype), diagonal=1)
        h = sequence
        for block in self.blocks:
            h = block(h, causal)
        return self.ln_f(h)


def normalize_by_history(window: torch.Tensor, history_len: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Centre and scale by the history statistics; the scale never drops below 1 mmHg."""
    history = window[..., :history_len]
    mean = history.mean(dim=-1, keepdim=True)
    std = history.std(dim=-1, correction=0, keepdim=True).clamp_min(1.0)
    return (window - mean) / std, mean, std


def masked_reconstruction_loss(
    reconstruction: torch.Tensor, target: torch.Tensor, masked: torch.Tensor, patch_len: int
) -> torch.Tensor:
    """Mean squared error over the values of masked patches only; zero when nothing is masked."""
    errors = (patchify(reconstruction, patch_len) - patchify(target, patch_len)) ** 2
    weights = masked.unsqueeze(-1).to(errors.dtype).expand_as(errors)
    total = weights.sum()
    if total == 0:
        return (errors * weights).sum()
    return (errors * weights).sum() / total


class FuseForecaster(nn.Module):
    def __init__(self, config: ModelConfig, vocab_size: int):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        d = config.d_model
        self.series_embedding = PatchEmbedding(config.patch_len, d, config.window_patches)
        self.mask_token = nn.Parameter(torch.randn(d) * 0.02)
        if config.use_text:
            self.text_embedding = TextEmbedding(vocab_size, d, config.max_text_tokens)
            self.cross_attention = MaskedCrossAttention(d, config.n_heads)
        self.backbone = FusionBackbone(d, config.n_heads, config.n_layers, config.max_seq_len)
        self.reconstruction_head = nn.Linear(d, config.patch_len)
        self.forecast_head = nn.Linear(config.history_patches * d, config.horizon)

    def encode(
        self,
        series: torch.Tensor,
        token_ids: torch.Tensor | None,
        valid_mask: torch.Tensor | None,
        mask_ratio: float = 0.0,
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Hidden states at the series positions for a normalised, patch-aligned series."""
        tokens = self.series_embedding.project(patchify(series, self.config.patch_len))
        tokens, masked = mask_tokens(tokens, self.mask_token, mask_ratio, generator)
        tokens = tokens + self.series_embedding.position[: tokens.shape[1]]
        n_series = tokens.shape[1]
        if self.config.use_text:
            text = self.text_embedding(token_ids)
            attention_mask = build_attention_mask(valid_mask, n_series)
            fused = self.cross_attention(text, tokens, attention_mask, self.config.mask_penalty)
            tokens = torch.cat([fused, tokens], dim=1)
        return self.backbone(tokens)[:, -n_series:], masked

    def reconstruct(
        self,
        window: torch.Tensor,
        token_ids: torch.Tensor | None,
        valid_mask: torch.Tensor | None,
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Masked reconstruction of a full history+horizon window in normalised units."""
        window = pad_to_patches(window, self.config.patch_len)
        normalized, _, _ = normalize_by_history(window, self.config.history_len)
        hidden, masked = self.encode(normalized, token_ids, valid_mask, self.config.mask_ratio, generator)
        reconstruction = self.reconstruction_head(hidden).reshape(window.shape[0], -1)
        return reconstruction, normalized, masked

    def forward(
        self, history: torch.Tensor, token_ids: torch.Tensor | None = None, valid_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Forecast ``horizon`` MAP values in mmHg from ``history_len`` past values."""
        if history.shape[-1] != self.config.history_len:
            raise ValueError(f"history has {history.shape[-1]} values, expected {self.config.history_len}")
        normalized, mean, std = normalize_by_history(history, self.config.history_len)
        hidden, _ = self.encode(normalized, token_ids, valid_mask)
        prediction = self.forecast_head(hidden.flatten(start_dim=1))
        return prediction * std + mean

    def reinitialize_for_finetune(self, seed: int) -> None:
        """Fresh series embedding and output heads; every other parameter keeps its value."""
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.series_embedding.reset_parameters()
            self.reconstruction_head.reset_parameters()
            self.forecast_head.reset_parameters()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def forecast(
    model: FuseForecaster,
    history: np.ndarray,
    token_ids: np.ndarray | None = None,
    valid_mask: np.ndarray | None = None,
) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        ids = None if token_ids is None else torch.as_tensor(token_ids, dtype=torch.long).unsqueeze(0)
        mask = None if valid_mask is None else torch.as_tensor(valid_mask).unsqueeze(0)
        out = model(torch.as_tensor(history, dtype=dtype).unsqueeze(0), ids, mask)
    return out.squeeze(0).double().numpy()
