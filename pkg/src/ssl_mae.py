"""Masked-patch reconstruction (MAE) pretraining."""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import nn

from src.checkpoint import module_hash, save_checkpoint, save_encoder, state_hash
from src.encoder import (
    EncoderConfig,
    TokenEmbeddings,
    VolumeEncoder,
    Block,
    build_encoder,
    init_weights,
    patchify_tensor,
    positional_encoding,
    unpatchify,
)
from src.ingest import EvalDataset, TrainDataset, make_loader, shuffled_plan
from src.preprocess import AugmentConfig
from src.ssl_dino import PretrainResult, cosine_schedule, param_groups
from src.utils.constants import INIT_STD
from src.utils.decorators import timer
from src.utils.errors import TrainingError
from src.utils.logger import TrainingLog, setup_logger
from src.utils.seeding import derive_rng, torch_seed
from src.volume_store import Manifest, Volume, save_volume

if TYPE_CHECKING:
    from src.config import RunConfig

logger = setup_logger(__name__)

__all__ = [
    "MaeConfig",
    "MaskSet",
    "MaeModel",
    "MaeOutput",
    "sample_mask",
    "mae_forward",
    "mae_loss",
    "constant_predictor_mse",
    "mae_train_step",
    "pretrain_mae",
    "unpatchify",
]


class MaeConfig(BaseModel):
    """Masking, decoder shape and optimizer recipe."""

    model_config = ConfigDict(extra="forbid")

    mask_ratio: float = Field(default=0.75, gt=0.0, lt=1.0)
    decoder_dim: int = Field(default=384, ge=6)
    decoder_depth: int = Field(default=4, ge=1)
    decoder_heads: int = Field(default=8, ge=1)
    decoder_mlp_ratio: int = Field(default=4, ge=1)
    betas: Tuple[float, float] = (0.9, 0.95)
    weight_decay: float = Field(default=0.05, ge=0.0)
    base_lr: float = Field(default=1.5e-3, gt=0.0)
    min_lr: float = Field(default=0.0, ge=0.0)
    warmup_fraction: float = Field(default=0.05, ge=0.0, lt=1.0)
    total_epochs: int = Field(default=400, ge=1)
    batch_size: int = Field(default=64, ge=1)
    checkpoint_every: int = Field(default=50, ge=1)
    n_previews: int = Field(default=0, ge=0)
    augment: AugmentConfig = Field(default_factory=AugmentConfig.for_mae)

    @model_validator(mode="after")
    def validate_decoder(self) -> "MaeConfig":
        """Validate decoder divisibility constraints."""
        if self.decoder_dim % self.decoder_heads:
            raise ValueError(f"decoder_dim {self.decoder_dim} not divisible by decoder_heads {self.decoder_heads}")
        if self.decoder_dim % 6:
            raise ValueError(f"decoder_dim {self.decoder_dim} must be divisible by 6")
        return self

    @classmethod
    def desk(cls) -> "MaeConfig":
        return cls(decoder_dim=48, decoder_depth=2, decoder_heads=4, total_epochs=50, batch_size=16,
                   checkpoint_every=10, n_previews=2)


@dataclass
class MaskSet:
    """Disjoint sorted visible and masked patch indices."""

    visible: np.ndarray
    masked: np.ndarray

    @property
    def n_tokens(self) -> int:
        return int(len(self.visible) + len(self.masked))


def sample_mask(n: int, ratio: float, rng: np.random.Generator) -> MaskSet:
    """Uniform random subset of round(n * ratio) masked patches (halves round up)."""
    if not 0.0 < ratio < 1.0:
        raise TrainingError(f"mask ratio must lie in (0, 1), got {ratio}")
    n_masked = int(math.floor(n * ratio + 0.5))
    order = rng.permutation(n)
    return MaskSet(visible=np.sort(order[n_masked:]), masked=np.sort(order[:n_masked]))


@dataclass
class MaeOutput:
    reconstruction: torch.Tensor
    encoded: TokenEmbeddings

    @property
    def encoder_sequence_length(self) -> int:
        return int(self.encoded.tokens.shape[1]) + 1


class MaeModel(nn.Module):
    """Encoder on visible tokens plus a light decoder that predicts every patch."""

    def __init__(self, encoder: VolumeEncoder, cfg: MaeConfig):
        super().__init__()
        enc = encoder.cfg
        self.encoder = encoder
        self.decoder_embed = nn.Linear(enc.embed_dim, cfg.decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.decoder_dim))
        self.register_buffer(
            "decoder_pos",
            torch.from_numpy(positional_encoding(enc.grid, cfg.decoder_dim))[None],
            persistent=False,
        )
        self.decoder_blocks = nn.ModuleList(
            [
                Block(cfg.decoder_dim, cfg.decoder_heads, cfg.decoder_dim * cfg.decoder_mlp_ratio)
                for _ in range(cfg.decoder_depth)
            ]
        )
        self.decoder_norm = nn.LayerNorm(cfg.decoder_dim)
        self.decoder_pred = nn.Linear(cfg.decoder_dim, enc.token_dim)

        for module in (self.decoder_embed, self.decoder_blocks, self.decoder_norm, self.decoder_pred):
            module.apply(init_weights)
        nn.init.trunc_normal_(self.mask_token, std=INIT_STD)

    def forward(self, patches: torch.Tensor, visible: torch.Tensor) -> MaeOutput:
        """
        Reconstruct every patch from the visible ones.

        Args:
            patches: (B, N, token_dim) tokens
            visible: (B, n_visible) indices of the visible tokens

        Returns:
            MaeOutput with (B, N, token_dim) reconstruction
        """
        b, n, token_dim = patches.shape
        if n != self.encoder.cfg.n_tokens:
            raise TrainingError(f"expected {self.encoder.cfg.n_tokens} patches, got {n}")
        kept = torch.gather(patches, 1, visible[..., None].expand(-1, -1, token_dim))
        encoded = self.encoder(kept, positions=visible)

        x = self.decoder_embed(torch.cat([encoded.cls[:, None], encoded.tokens], dim=1))
        dim = x.shape[-1]
        full = self.mask_token.expand(b, n, dim).scatter(1, visible[..., None].expand(-1, -1, dim), x[:, 1:])
        x = torch.cat([x[:, :1], full + self.decoder_pos], dim=1)
        for block in self.decoder_blocks:
            x, _ = block(x)
        recon = self.decoder_pred(self.decoder_norm(x))[:, 1:]
        return MaeOutput(reconstruction=recon, encoded=encoded)


def _index_tensor(masks: Sequence[MaskSet], attr: str) -> torch.Tensor:
    return torch.from_numpy(np.stack([getattr(m, attr) for m in masks]).astype(np.int64))


def mae_forward(model: MaeModel, patches: torch.Tensor, masks: Union[MaskSet, Sequence[MaskSet]]) -> MaeOutput:
    """Run the model with one mask per batch item (or one mask for a batch of one)."""
    mask_list = [masks] if isinstance(masks, MaskSet) else list(masks)
    if len(mask_list) != patches.shape[0]:
        raise TrainingError(f"{len(mask_list)} masks for a batch of {patches.shape[0]}")
    return model(patches, _index_tensor(mask_list, "visible"))


def _masked_rows(masks: Union[MaskSet, Sequence[MaskSet]], shape: Tuple[int, int]) -> torch.Tensor:
    mask_list = [masks] if isinstance(masks, MaskSet) else list(masks)
    selected = torch.zeros(shape, dtype=torch.bool)
    for i, m in enumerate(mask_list):
        selected[i, torch.from_numpy(np.asarray(m.masked, dtype=np.int64))] = True
    return selected


def mae_loss(recon: torch.Tensor, target: torch.Tensor, masks: Union[MaskSet, Sequence[MaskSet]]) -> torch.Tensor:
    """Mean squared error over the entries of masked patches only."""
    if recon.shape != target.shape:
        raise TrainingError(f"reconstruction {tuple(recon.shape)} and target {tuple(target.shape)} differ")
    selected = _masked_rows(masks, target.shape[:2])
    if not selected.any():
        raise TrainingError("mae_loss needs at least one masked patch")
    per_patch = ((recon - target) ** 2).mean(dim=-1)
    return per_patch[selected].mean()


def constant_predictor_mse(target: torch.Tensor, masks: Union[MaskSet, Sequence[MaskSet]]) -> float:
    """Masked-patch MSE of predicting each volume's mean value everywhere."""
    means = target.mean(dim=(1, 2), keepdim=True).expand_as(target)
    return float(mae_loss(means, target, masks).item())


@dataclass
class MaeState:
    model: MaeModel
    optimizer: torch.optim.Optimizer
    cfg: MaeConfig
    steps_per_epoch: int
    step: int = 0

    @property
    def total_steps(self) -> int:
        return self.cfg.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return int(math.ceil(self.cfg.warmup_fraction * self.total_steps))

    def state_hash(self) -> str:
        return state_hash(self.model.state_dict())


@dataclass
class MaeStepResult:
    step: int
    epoch: int
    loss: float
    lr: float

    def to_dict(self) -> Dict[str, float]:
        return {"step": self.step, "epoch": self.epoch, "loss": self.loss, "lr": self.lr}


def create_mae_state(enc_cfg: EncoderConfig, cfg: MaeConfig, seed: int, steps_per_epoch: int = 1) -> MaeState:
    encoder = build_encoder(enc_cfg, seed)
    with torch_seed(seed + 1):
        model = MaeModel(encoder, cfg)
    optimizer = torch.optim.AdamW(param_groups(model, cfg.weight_decay), lr=cfg.base_lr, betas=cfg.betas)
    return MaeState(model=model, optimizer=optimizer, cfg=cfg, steps_per_epoch=max(steps_per_epoch, 1))


def mae_train_step(state: MaeState, volumes: torch.Tensor, rng: np.random.Generator) -> MaeStepResult:
    """
    Mask, reconstruct and update on one batch of (B, C, D, H, W) volumes.

    Raises:
        TrainingError: If the loss is not finite
    """
    cfg = state.cfg
    enc = state.model.encoder.cfg
    epoch = state.step // state.steps_per_epoch
    lr = cosine_schedule(state.step, state.total_steps, cfg.base_lr, cfg.min_lr, state.warmup_steps)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    patches = patchify_tensor(volumes, enc.patch_size)
    masks = [sample_mask(enc.n_tokens, cfg.mask_ratio, rng) for _ in range(volumes.shape[0])]

    state.model.train()
    output = mae_forward(state.model, patches, masks)
    loss = mae_loss(output.reconstruction, patches, masks)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite MAE loss at step {state.step} (epoch {epoch}, lr {lr:.3g})")

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()

    result = MaeStepResult(step=state.step, epoch=epoch, loss=float(loss.item()), lr=lr)
    state.step += 1
    return result


@torch.no_grad()
def evaluate_reconstruction(model: MaeModel, dataset: EvalDataset, mask_ratio: float, seed: int) -> Dict[str, float]:
    """Held-out masked MSE of the model against the per-volume-mean baseline."""
    model.eval()
    enc = model.encoder.cfg
    model_err, baseline_err = [], []
    for batch_no, (volumes, _, _) in enumerate(make_loader(dataset, 8)):
        patches = patchify_tensor(volumes, enc.patch_size)
        rng = derive_rng(seed, "heldout-mask", batch_no)
        masks = [sample_mask(enc.n_tokens, mask_ratio, rng) for _ in range(volumes.shape[0])]
        output = mae_forward(model, patches, masks)
        model_err.append(float(mae_loss(output.reconstruction, patches, masks)) * len(masks))
        baseline_err.append(constant_predictor_mse(patches, masks) * len(masks))
    n = len(dataset)
    return {"mae_mse": sum(model_err) / n, "mean_predictor_mse": sum(baseline_err) / n, "n_volumes": n}


@torch.no_grad()
def write_previews(
    model: MaeModel, dataset: EvalDataset, n: int, mask_ratio: float, seed: int, out_dir: Path
) -> List[Path]:
    """Dump the first channel of original and reconstructed volumes."""
    model.eval()
    enc = model.encoder.cfg
    paths = []
    for slot in range(min(n, len(dataset))):
        volume, _, index = dataset[slot]
        patches = patchify_tensor(volume[None], enc.patch_size)
        mask = sample_mask(enc.n_tokens, mask_ratio, derive_rng(seed, "preview", slot))
        recon = mae_forward(model, patches, mask).reconstruction[0]
        volume_id = dataset.manifest.records[index].volume_id
        original = unpatchify(patches[0], enc.grid, enc.patch_size)
        rebuilt = unpatchify(recon, enc.grid, enc.patch_size)
        for tag, m in (("original", original), ("reconstruction", rebuilt)):
            preview = Volume(voxels=m.channels[0], id=f"{volume_id}_{tag}")
            paths.append(save_volume(preview, out_dir / f"{volume_id}_{tag}"))
    return paths


@timer
def pretrain_mae(manifest: Manifest, run_cfg: "RunConfig", out_dir: Union[str, Path]) -> PretrainResult:
    """
    MAE pretraining over the train split.

    Writes the training log, periodic checkpoints, the encoder as
    ``encoder.ckpt``, held-out reconstruction metrics and optional previews.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = run_cfg.mae
    train_idx = manifest.split_indices("train")
    if not train_idx:
        raise TrainingError("MAE pretraining needs at least one train record")

    batch_size = min(cfg.batch_size, len(train_idx))
    steps_per_epoch = len(train_idx) // batch_size
    common = dict(
        seed=run_cfg.seed,
        resample_method=run_cfg.resample_method,
        resize_method=run_cfg.resize_method,
    )
    dataset = TrainDataset(manifest, run_cfg.windows, run_cfg.crop, indices=train_idx, aug_cfg=cfg.augment, **common)
    state = create_mae_state(run_cfg.encoder, cfg, run_cfg.seed, steps_per_epoch)

    result = PretrainResult(encoder_path=out / "encoder.ckpt", log_path=out / "train_log.jsonl")
    with TrainingLog(result.log_path) as log:
        for epoch in range(cfg.total_epochs):
            dataset.set_epoch(epoch, shuffled_plan(train_idx, run_cfg.seed, epoch))
            losses = []
            for batch_no, (volumes, _, _) in enumerate(make_loader(dataset, batch_size, drop_last=True)):
                rng = derive_rng(run_cfg.seed, "mask", epoch, batch_no)
                step = mae_train_step(state, volumes, rng)
                losses.append(step.loss)
                log.write(step.to_dict())
            result.epoch_losses.append(float(np.mean(losses)))
            logger.info(f"MAE epoch {epoch + 1}/{cfg.total_epochs}: loss {result.epoch_losses[-1]:.4f}")

            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.total_epochs:
                path = out / f"mae_epoch{epoch + 1:04d}.ckpt"
                save_checkpoint(
                    path,
                    "mae",
                    {"encoder": run_cfg.encoder.model_dump(mode="json"), "mae": cfg.model_dump(mode="json")},
                    {f"model.{k}": v for k, v in state.model.state_dict().items()},
                    optimizer=state.optimizer,
                    meta={"epoch": epoch + 1, "step": state.step},
                )
                result.checkpoints.append(path)

    save_encoder(result.encoder_path, state.model.encoder, meta={"source": "mae", "seed": run_cfg.seed})
    result.final_hash = module_hash(state.model.encoder)

    heldout_idx = manifest.split_indices("val") or manifest.split_indices("test")
    if heldout_idx:
        heldout = EvalDataset(manifest, run_cfg.windows, run_cfg.crop, indices=heldout_idx, **common)
        metrics = evaluate_reconstruction(state.model, heldout, cfg.mask_ratio, run_cfg.seed)
        metrics["seed"] = run_cfg.seed
        with open(out / "reconstruction_metrics.json", "w") as f:
            json.dump(metrics, f, indent=2)
        logger.info(
            f"Held-out masked MSE {metrics['mae_mse']:.5f} vs mean predictor {metrics['mean_predictor_mse']:.5f}"
        )
        if cfg.n_previews:
            write_previews(state.model, heldout, cfg.n_previews, cfg.mask_ratio, run_cfg.seed, out / "previews")
    return result
