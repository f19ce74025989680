import copy
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from keboola.component.exceptions import UserException
from torch.utils.data import DataLoader, Dataset

from cohort import ForecastInstance
from configuration import Ablation, ModelConfig, PipelineConfig, Stage, TrainConfig
from fusemodel import FuseForecaster, masked_reconstruction_loss
from pcdg import PAD_ID, ClinicalDescription

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
TRAINING_LOG_COLUMNS = ["epoch", "stage", "train_loss", "val_loss", "lr"]


class IncompatibleCheckpointError(UserException):
    pass


class TrainingDivergedError(Exception):
    """Loss became non-finite; ``checkpoint`` holds the last state with a finite loss."""

    def __init__(self, message: str, checkpoint: "Checkpoint | None" = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class Checkpoint:
    stage: Stage
    model_config: ModelConfig
    vocab_size: int
    model_state: dict[str, torch.Tensor]
    train_config: TrainConfig
    optimizer_state: dict[str, Any] | None = None
    epoch: int = 0
    history: list[dict[str, Any]] = field(default_factory=list)

    def build_model(self) -> FuseForecaster:
        model = FuseForecaster(self.model_config, self.vocab_size)
        model.load_state_dict(self.model_state)
        return model

    def save(self, path: str | Path) -> None:
        torch.save(
            {
                "format_version": CHECKPOINT_FORMAT_VERSION,
                "stage": str(self.stage),
                "model_config": self.model_config.model_dump(mode="json"),
                "vocab_size": self.vocab_size,
                "model_state": self.model_state,
                "optimizer_state": self.optimizer_state,
                "epoch": self.epoch,
                "history": self.history,
                "train_config": self.train_config.model_dump(mode="json"),
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        payload = torch.load(path, weights_only=True)
        if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise IncompatibleCheckpointError(
                f"Checkpoint {path} has format version {payload.get('format_version')}, "
                f"expected {CHECKPOINT_FORMAT_VERSION}"
            )
        return cls(
            stage=Stage(payload["stage"]),
            model_config=ModelConfig.model_validate(payload["model_config"]),
            vocab_size=int(payload["vocab_size"]),
            model_state=payload["model_state"],
            train_config=TrainConfig.model_validate(payload["train_config"]),
            optimizer_state=payload["optimizer_state"],
            epoch=int(payload["epoch"]),
            history=list(payload["history"]),
        )


class FusionDataset(Dataset):
    """Instances paired with their tokenized descriptions; missing descriptions become all padding."""

    def __init__(
        self,
        instances: list[ForecastInstance],
        descriptions: dict[str, ClinicalDescription] | None,
        max_tokens: int,
    ):
        self.instances = instances
        self.descriptions = descriptions or {}
        self.max_tokens = max_tokens

    def __len__(self) -> int:
        return len(self.instances)

    def __getitem__(self, index: int) -> dict[str, torch.Tensor]:
        instance = self.instances[index]
        description = self.descriptions.get(instance.description_ref)
        if description is None:
            token_ids = np.full(self.max_tokens, PAD_ID, dtype=np.int64)
            valid_mask = np.zeros(self.max_tokens, dtype=np.int64)
        else:
            token_ids, valid_mask = description.token_ids, description.valid_mask
        return {
            "history": torch.as_tensor(instance.history, dtype=torch.float32),
            "target": torch.as_tensor(instance.target, dtype=torch.float32),
            "window": torch.as_tensor(np.concatenate([instance.history, instance.target]), dtype=torch.float32),
            "token_ids": torch.as_tensor(token_ids, dtype=torch.long),
            "valid_mask": torch.as_tensor(valid_mask, dtype=torch.long),
            "ioh_mask": torch.as_tensor(instance.ioh_mask, dtype=torch.bool),
        }


def make_loader(dataset: FusionDataset, batch_size: int, shuffle: bool, seed: int) -> DataLoader:
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        generator=torch.Generator().manual_seed(seed),
        num_workers=0,
    )


def compute_ioh_loss(pred: torch.Tensor, target: torch.Tensor, ioh_mask: torch.Tensor, rho: float) -> torch.Tensor:
    """MSE over normal timestamps plus ``rho`` times MSE over hypotensive ones; empty sets add 0."""
    if pred.shape != target.shape or pred.shape != ioh_mask.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)}, target {tuple(target.shape)}")
    squared = (pred - target) ** 2
    ioh = ioh_mask.bool()
    zero = squared.sum() * 0.0
    mse_normal = squared[~ioh].mean() if (~ioh).any() else zero
    mse_ioh = squared[ioh].mean() if ioh.any() else zero
    return mse_normal + rho * mse_ioh


def apply_ablation(variant: Ablation, config: PipelineConfig) -> PipelineConfig:
    ablated = config.model_copy(deep=True)
    ablated.train.ablation = variant
    if variant == Ablation.NO_TEXT:
        ablated.model.use_text = False
    elif variant == Ablation.NO_VOCAB_EXT:
        ablated.pcdg.extend_vocabulary = False
    elif variant == Ablation.NO_AUGMENTATION:
        ablated.mtrda.augment = False
    elif variant == Ablation.NO_PRETRAIN:
        ablated.train.skip_pretrain = True
    return ablated


def _evaluate(model: FuseForecaster, loader: DataLoader, loss_fn: Callable, generator_seed: int) -> float | None:
    if len(loader.dataset) == 0:
        return None
    model.eval()
    generator = torch.Generator().manual_seed(generator_seed)
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in loader:
            total += loss_fn(model, batch, generator).item() * len(batch["history"])
            count += len(batch["history"])
    return total / count


def _run_stage(
    model: FuseForecaster,
    train_instances: list[ForecastInstance],
    val_instances: list[ForecastInstance],
    descriptions: dict[str, ClinicalDescription] | None,
    train_config: TrainConfig,
    loss_fn: Callable,
    vocab_size: int,
) -> Checkpoint:
    if not train_instances:
        raise ValueError(f"{train_config.stage} needs at least one training instance")
    eta = model.config.max_text_tokens
    train_loader = make_loader(
        FusionDataset(train_instances, descriptions, eta), train_config.batch_size, True, train_config.seed
    )
    val_loader = make_loader(FusionDataset(val_instances, descriptions, eta), train_config.batch_size, False, 0)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=train_config.decay_factor)
    mask_generator = torch.Generator().manual_seed(train_config.seed)

    def snapshot(epoch: int, history: list[dict]) -> Checkpoint:
        return Checkpoint(
            stage=train_config.stage,
            model_config=model.config,
            vocab_size=vocab_size,
            model_state=copy.deepcopy(model.state_dict()),
            train_config=train_config,
            optimizer_state=copy.deepcopy(optimizer.state_dict()),
            epoch=epoch,
            history=list(history),
        )

    history: list[dict[str, Any]] = []
    best = snapshot(0, history)
    best_score, stale = math.inf, 0
    for epoch in range(1, train_config.epochs + 1):
        lr = optimizer.param_groups[0]["lr"]
        model.train()
        running, seen = 0.0, 0
        for batch in train_loader:
            loss = loss_fn(model, batch, mask_generator)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"{train_config.stage} loss became {loss.item()} in epoch {epoch}", checkpoint=best
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            running += loss.item() * len(batch["history"])
            seen += len(batch["history"])
        train_loss = running / seen
        val_loss = _evaluate(model, val_loader, loss_fn, train_config.seed + 1)
        history.append(
            {
                "epoch": epoch,
                "stage": str(train_config.stage),
                "train_loss": train_loss,
                "val_loss": val_loss,
                "lr": lr,
            }
        )
        val_text = "n/a" if val_loss is None else f"{val_loss:.5f}"
        logger.info(
            f"{train_config.stage} epoch {epoch}/{train_config.epochs}: "
            f"train {train_loss:.5f}, val {val_text}, lr {lr:.3g}"
        )

        score = train_loss if val_loss is None else val_loss
        if score < best_score:
            best_score, stale = score, 0
            best = snapshot(epoch, history)
        else:
            stale += 1
            if stale >= train_config.patience:
                logger.info(f"{train_config.stage}: no improvement for {stale} epoch(s), stopping early")
                break
        scheduler.step()

    best.history = history
    logger.info(f"{train_config.stage} finished; best epoch {best.epoch} with loss {best_score:.5f}")
    return best


def _pretrain_loss(model: FuseForecaster, batch: dict, generator: torch.Generator) -> torch.Tensor:
    reconstruction, normalized, masked = model.reconstruct(
        batch["window"], batch["token_ids"], batch["valid_mask"], generator
    )
    return masked_reconstruction_loss(reconstruction, normalized, masked, model.config.patch_len)


def pretrain(
    train_instances: list[ForecastInstance],
    val_instances: list[ForecastInstance],
    descriptions: dict[str, ClinicalDescription] | None,
    model_config: ModelConfig,
    train_config: TrainConfig,
    vocab_size: int,
) -> Checkpoint:
    """Masked reconstruction of full history+horizon windows fused with their descriptions."""
    if train_config.stage != Stage.PRETRAIN:
        raise ValueError(f"pretrain called with a {train_config.stage} train config")
    torch.manual_seed(train_config.seed)
    model = FuseForecaster(model_config, vocab_size)
    logger.info(f"Pretraining on {len(train_instances)} instances ({len(val_instances)} for validation)")
    return _run_stage(model, train_instances, val_instances, descriptions, train_config, _pretrain_loss, vocab_size)


def _check_compatible(checkpoint: Checkpoint, model_config: ModelConfig, vocab_size: int) -> None:
    if checkpoint.stage != Stage.PRETRAIN:
        raise IncompatibleCheckpointError(f"Fine-tuning needs a pretrain checkpoint, got stage '{checkpoint.stage}'")
    problems = []
    saved, requested = checkpoint.model_config.model_dump(), model_config.model_dump()
    problems += [f"model.{k}: {saved[k]} != {requested[k]}" for k in requested if saved.get(k) != requested[k]]
    if checkpoint.vocab_size != vocab_size:
        problems.append(f"vocabulary size: {checkpoint.vocab_size} != {vocab_size}")
    if problems:
        raise IncompatibleCheckpointError("Pretrain checkpoint does not match this run: " + "; ".join(problems))


def finetune(
    train_instances: list[ForecastInstance],
    val_instances: list[ForecastInstance],
    descriptions: dict[str, ClinicalDescription] | None,
    model_config: ModelConfig,
    train_config: TrainConfig,
    vocab_size: int,
    checkpoint: Checkpoint | None,
) -> Checkpoint:
    """Forecast training with the IOH-weighted loss, starting from a pretrain checkpoint.

    The series embedding and both heads are reinitialised; the backbone, text pathway and mask
    token continue from the checkpoint and stay trainable. The ``no_pretrain`` ablation starts
    from scratch.
    """
    if train_config.stage != Stage.FINETUNE:
        raise ValueError(f"finetune called with a {train_config.stage} train config")
    torch.manual_seed(train_config.seed)
    model = FuseForecaster(model_config, vocab_size)
    if train_config.ablation == Ablation.NO_PRETRAIN:
        if checkpoint is not None:
            logger.warning("Ablation no_pretrain ignores the supplied pretrain checkpoint")
    else:
        if checkpoint is None:
            raise IncompatibleCheckpointError("Fine-tuning needs a pretrain checkpoint unless ablation is no_pretrain")
        _check_compatible(checkpoint, model_config, vocab_size)
        model.load_state_dict(checkpoint.model_state)
        model.reinitialize_for_finetune(train_config.seed)

    def loss_fn(net: FuseForecaster, batch: dict, _generator: torch.Generator) -> torch.Tensor:
        pred = net(batch["history"], batch["token_ids"], batch["valid_mask"])
        return compute_ioh_loss(pred, batch["target"], batch["ioh_mask"], train_config.rho)

    logger.info(f"Fine-tuning on {len(train_instances)} instances ({len(val_instances)} for validation)")
    return _run_stage(model, train_instances, val_instances, descriptions, train_config, loss_fn, vocab_size)


class FusionPredictor:
    """Batch inference over instances with a fine-tuned model."""

    def __init__(
        self,
        model: FuseForecaster,
        descriptions: dict[str, ClinicalDescription] | None,
        batch_size: int = 64,
    ):
        self.model = model
        self.descriptions = descriptions
        self.batch_size = batch_size

    def predict(self, instances: list[ForecastInstance]) -> np.ndarray:
        dataset = FusionDataset(instances, self.descriptions, self.model.config.max_text_tokens)
        loader = DataLoader(dataset, batch_size=self.batch_size, shuffle=False)
        self.model.eval()
        outputs = []
        with torch.no_grad():
            for batch in loader:
                outputs.append(self.model(batch["history"], batch["token_ids"], batch["valid_mask"]).double().numpy())
        if not outputs:
            return np.empty((0, self.model.config.horizon))
        return np.concatenate(outputs)
