"""Self-distillation (DINO) pretraining for the volume encoder."""

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from torch import nn

from src.checkpoint import module_hash, save_checkpoint, save_encoder, state_hash
from src.encoder import EncoderConfig, VolumeEncoder, build_encoder, extract_embedding
from src.ingest import DinoDataset, make_loader, shuffled_plan
from src.preprocess import AugmentConfig
from src.utils.decorators import timer
from src.utils.errors import TrainingError
from src.utils.logger import TrainingLog, setup_logger
from src.utils.seeding import torch_seed
from src.volume_store import Manifest

if TYPE_CHECKING:
    from src.config import RunConfig

logger = setup_logger(__name__)


class DinoConfig(BaseModel):
    """Projection head, temperatures, momenta and optimizer recipe."""

    model_config = ConfigDict(extra="forbid")

    proj_hidden_dim: int = Field(default=2048, ge=1)
    proj_bottleneck_dim: int = Field(default=256, ge=1)
    prototype_count: int = Field(default=4096, ge=2)
    student_temp: float = 0.1
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    warmup_teacher_temp_epochs: int = Field(default=30, ge=0)
    center_momentum: float = 0.9
    ema_momentum_base: float = 0.996
    ema_momentum_final: float = 1.0
    betas: Tuple[float, float] = (0.9, 0.95)
    weight_decay: float = Field(default=0.05, ge=0.0)
    base_lr: float = Field(default=3e-4, gt=0.0)
    min_lr: float = Field(default=1e-6, ge=0.0)
    warmup_epochs: int = Field(default=5, ge=0)
    total_epochs: int = Field(default=1000, ge=1)
    batch_size: int = Field(default=64, ge=1)
    clip_grad: float = Field(default=3.0, ge=0.0)
    freeze_last_layer: int = Field(default=1, ge=0)
    checkpoint_every: int = Field(default=50, ge=1)
    augment: AugmentConfig = Field(default_factory=AugmentConfig.for_dino)

    @field_validator("student_temp", "teacher_temp_start", "teacher_temp_end")
    @classmethod
    def validate_temperature(cls, v: float) -> float:
        """Validate temperatures are positive."""
        if not v > 0:
            raise ValueError(f"temperatures must be > 0, got {v}")
        return v

    @field_validator("center_momentum", "ema_momentum_base", "ema_momentum_final")
    @classmethod
    def validate_momentum(cls, v: float) -> float:
        """Validate momenta lie in [0, 1]."""
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {v}")
        return v

    @model_validator(mode="after")
    def validate_schedule(self) -> "DinoConfig":
        """Validate warmup fits inside training."""
        if self.warmup_epochs > self.total_epochs:
            raise ValueError(f"warmup_epochs {self.warmup_epochs} exceeds total_epochs {self.total_epochs}")
        return self

    @classmethod
    def desk(cls) -> "DinoConfig":
        return cls(
            proj_hidden_dim=256,
            proj_bottleneck_dim=64,
            prototype_count=256,
            warmup_teacher_temp_epochs=5,
            total_epochs=50,
            batch_size=16,
            checkpoint_every=10,
        )


class DinoHead(nn.Module):
    """3-layer MLP, unit-normalized bottleneck, then a weight-normalized prototype layer."""

    def __init__(
        self,
        in_dim: int,
        hidden_dim: int,
        bottleneck_dim: int,
        prototype_count: int,
        linear: bool = False,
    ):
        super().__init__()
        act: nn.Module = nn.Identity() if linear else nn.GELU()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            act,
            nn.Linear(hidden_dim, hidden_dim),
            act,
            nn.Linear(hidden_dim, bottleneck_dim),
        )
        self.prototypes = nn.Linear(bottleneck_dim, prototype_count, bias=False)
        for module in self.mlp:
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                nn.init.zeros_(module.bias)

    def bottleneck(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.mlp(x), dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(self.bottleneck(x), F.normalize(self.prototypes.weight, dim=1))


class DinoNetwork(nn.Module):
    """Encoder plus projection head applied to the CLS embedding of each view."""

    def __init__(self, encoder: VolumeEncoder, head: DinoHead):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, views: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        return [self.head(extract_embedding(self.encoder.encode_volumes(v), "cls")) for v in views]


def dino_loss(
    student_out: Sequence[torch.Tensor],
    teacher_out: Sequence[torch.Tensor],
    center: torch.Tensor,
    student_temp: float,
    teacher_temp: float,
) -> torch.Tensor:
    """
    Cross-view distillation loss.

    Student outputs cover every view with the global views first; teacher
    outputs cover the global views. Averages the cross-entropy over every
    (teacher global g, student view v) pair with v != g.
    """
    if student_temp <= 0 or teacher_temp <= 0:
        raise TrainingError(f"temperatures must be > 0, got student {student_temp}, teacher {teacher_temp}")

    teacher_probs = [F.softmax((t.detach() - center) / teacher_temp, dim=-1) for t in teacher_out]
    student_logp = [F.log_softmax(s / student_temp, dim=-1) for s in student_out]

    total = torch.zeros((), dtype=student_logp[0].dtype)
    n_terms = 0
    for g, probs in enumerate(teacher_probs):
        for v, logp in enumerate(student_logp):
            if v == g:
                continue
            total = total + torch.sum(-probs * logp, dim=-1).mean()
            n_terms += 1
    if n_terms == 0:
        raise TrainingError("dino_loss needs at least one student view besides each teacher view")
    return total / n_terms


@torch.no_grad()
def update_center(
    center: torch.Tensor, teacher_out: Union[torch.Tensor, Sequence[torch.Tensor]], momentum: float
) -> torch.Tensor:
    """center <- m * center + (1 - m) * batch mean of teacher logits."""
    batch = teacher_out if isinstance(teacher_out, torch.Tensor) else torch.cat(list(teacher_out))
    return center * momentum + batch.mean(dim=0) * (1.0 - momentum)


@torch.no_grad()
def update_teacher_ema(student: nn.Module, teacher: nn.Module, momentum: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, tensor by tensor."""
    student_params = dict(student.named_parameters())
    teacher_params = dict(teacher.named_parameters())
    if student_params.keys() != teacher_params.keys():
        raise TrainingError("student and teacher parameter names differ")
    for name, t in teacher_params.items():
        s = student_params[name]
        if s.shape != t.shape:
            raise TrainingError(f"shape mismatch for '{name}': student {tuple(s.shape)}, teacher {tuple(t.shape)}")
        t.lerp_(s.detach(), 1.0 - momentum)


def cosine_schedule(
    step: float, total_steps: int, base: float, final: float, warmup_steps: int = 0, start: float = 0.0
) -> float:
    """Linear warmup start -> base, then half-cosine base -> final."""
    step = min(max(step, 0), total_steps)
    if warmup_steps > 0 and step < warmup_steps:
        return start + (base - start) * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return final + 0.5 * (base - final) * (1.0 + math.cos(math.pi * progress))


def teacher_temperature(epoch: int, cfg: DinoConfig) -> float:
    """Linear warmup of the teacher temperature, constant afterwards."""
    warmup = cfg.warmup_teacher_temp_epochs
    if warmup > 0 and epoch < warmup:
        return cfg.teacher_temp_start + (cfg.teacher_temp_end - cfg.teacher_temp_start) * epoch / warmup
    return cfg.teacher_temp_end


def param_groups(module: nn.Module, weight_decay: float) -> List[Dict]:
    """Split parameters so norms, biases and the CLS token get no weight decay."""
    decay, no_decay = [], []
    for name, param in module.named_parameters():
        if not param.requires_grad:
            continue
        if param.ndim <= 1 or "cls_token" in name:
            no_decay.append(param)
        else:
            decay.append(param)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


@dataclass
class DinoState:
    """Student, teacher, center, optimizer and step counter."""

    student: DinoNetwork
    teacher: DinoNetwork
    center: torch.Tensor
    optimizer: torch.optim.Optimizer
    cfg: DinoConfig
    steps_per_epoch: int
    step: int = 0

    @property
    def total_steps(self) -> int:
        return self.cfg.total_epochs * self.steps_per_epoch

    def state_hash(self) -> str:
        tensors = {f"student.{k}": v for k, v in self.student.state_dict().items()}
        tensors.update({f"teacher.{k}": v for k, v in self.teacher.state_dict().items()})
        tensors["center"] = self.center
        return state_hash(tensors)


@dataclass
class DinoStepResult:
    step: int
    epoch: int
    loss: float
    lr: float
    ema_momentum: float
    teacher_temp: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "loss": self.loss,
            "lr": self.lr,
            "ema_momentum": self.ema_momentum,
            "teacher_temp": self.teacher_temp,
        }


def create_dino_state(
    enc_cfg: EncoderConfig, cfg: DinoConfig, seed: int, steps_per_epoch: int = 1, linear_head: bool = False
) -> DinoState:
    """Initialise student and teacher identically from ``seed``."""
    encoder = build_encoder(enc_cfg, seed)
    with torch_seed(seed + 1):
        head = DinoHead(
            enc_cfg.embed_dim, cfg.proj_hidden_dim, cfg.proj_bottleneck_dim, cfg.prototype_count, linear=linear_head
        )
    student = DinoNetwork(encoder, head)
    teacher = copy.deepcopy(student)
    teacher.requires_grad_(False)
    optimizer = torch.optim.AdamW(param_groups(student, cfg.weight_decay), lr=cfg.base_lr, betas=cfg.betas)
    return DinoState(
        student=student,
        teacher=teacher,
        center=torch.zeros(cfg.prototype_count),
        optimizer=optimizer,
        cfg=cfg,
        steps_per_epoch=max(steps_per_epoch, 1),
    )


def dino_train_step(state: DinoState, views: Sequence[torch.Tensor], n_global: int = 2) -> DinoStepResult:
    """
    One optimisation step on a batch of view sets.

    Args:
        state: Training state, updated in place
        views: One (B, C, D, H, W) tensor per view, global views first
        n_global: Number of global views

    Returns:
        Step diagnostics

    Raises:
        TrainingError: If the loss is not finite
    """
    cfg = state.cfg
    epoch = state.step // state.steps_per_epoch
    lr = cosine_schedule(
        state.step, state.total_steps, cfg.base_lr, cfg.min_lr, cfg.warmup_epochs * state.steps_per_epoch
    )
    momentum = cosine_schedule(state.step, state.total_steps, cfg.ema_momentum_base, cfg.ema_momentum_final)
    temp = teacher_temperature(epoch, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    state.student.train()
    student_out = state.student(views)
    with torch.no_grad():
        teacher_out = state.teacher(views[:n_global])
    loss = dino_loss(student_out, teacher_out, state.center, cfg.student_temp, temp)
    if not torch.isfinite(loss):
        raise TrainingError(
            f"non-finite DINO loss at step {state.step} (epoch {epoch}, lr {lr:.3g}, teacher_temp {temp:.3g})"
        )

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.clip_grad > 0:
        nn.utils.clip_grad_norm_(state.student.parameters(), cfg.clip_grad)
    if epoch < cfg.freeze_last_layer:
        state.student.head.prototypes.weight.grad = None
    state.optimizer.step()

    update_teacher_ema(state.student, state.teacher, momentum)
    state.center = update_center(state.center, teacher_out, cfg.center_momentum)

    result = DinoStepResult(
        step=state.step, epoch=epoch, loss=float(loss.item()), lr=lr, ema_momentum=momentum, teacher_temp=temp
    )
    state.step += 1
    return result


def save_dino_checkpoint(state: DinoState, enc_cfg: EncoderConfig, path: Path, epoch: int) -> Path:
    tensors = {f"student.{k}": v for k, v in state.student.state_dict().items()}
    tensors.update({f"teacher.{k}": v for k, v in state.teacher.state_dict().items()})
    tensors["center"] = state.center
    return save_checkpoint(
        path,
        "dino",
        {"encoder": enc_cfg.model_dump(mode="json"), "dino": state.cfg.model_dump(mode="json")},
        tensors,
        optimizer=state.optimizer,
        meta={"epoch": epoch, "step": state.step},
    )


@dataclass
class PretrainResult:
    """Artifacts of a pretraining run."""

    encoder_path: Path
    log_path: Path
    checkpoints: List[Path] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    final_hash: str = ""


@timer
def pretrain_dino(manifest: Manifest, run_cfg: "RunConfig", out_dir: Union[str, Path]) -> PretrainResult:
    """
    DINO pretraining over the train split.

    Writes the training log, periodic checkpoints and the teacher encoder
    as ``encoder.ckpt``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = run_cfg.dino
    train_idx = manifest.split_indices("train")
    if not train_idx:
        raise TrainingError("DINO pretraining needs at least one train record")

    batch_size = min(cfg.batch_size, len(train_idx))
    steps_per_epoch = len(train_idx) // batch_size
    dataset = DinoDataset(
        manifest,
        run_cfg.windows,
        run_cfg.crop,
        indices=train_idx,
        seed=run_cfg.seed,
        resample_method=run_cfg.resample_method,
        resize_method=run_cfg.resize_method,
        aug_cfg=cfg.augment,
    )
    state = create_dino_state(run_cfg.encoder, cfg, run_cfg.seed, steps_per_epoch)

    result = PretrainResult(encoder_path=out / "encoder.ckpt", log_path=out / "train_log.jsonl")
    with TrainingLog(result.log_path) as log:
        for epoch in range(cfg.total_epochs):
            dataset.set_epoch(epoch, shuffled_plan(train_idx, run_cfg.seed, epoch))
            losses = []
            for views in make_loader(dataset, batch_size, drop_last=True):
                step = dino_train_step(state, views, run_cfg.crop.n_global)
                losses.append(step.loss)
                log.write(step.to_dict())
            result.epoch_losses.append(float(np.mean(losses)))
            logger.info(f"DINO epoch {epoch + 1}/{cfg.total_epochs}: loss {result.epoch_losses[-1]:.4f}")

            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.total_epochs:
                path = out / f"dino_epoch{epoch + 1:04d}.ckpt"
                result.checkpoints.append(save_dino_checkpoint(state, run_cfg.encoder, path, epoch + 1))

    save_encoder(result.encoder_path, state.teacher.encoder, meta={"source": "dino", "seed": run_cfg.seed})
    result.final_hash = module_hash(state.teacher.encoder)
    return result
