"""Downstream adaptation: classification heads, samplers, fine-tuning and prediction."""

import copy
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator
from torch import nn

from src.checkpoint import load_checkpoint, load_encoder, load_module_state, module_hash, save_checkpoint
from src.encoder import EncoderConfig, VolumeEncoder, build_encoder, extract_embedding
from src.evalstat import ScoredSet, auc, few_shot_interval
from src.ingest import EvalDataset, TrainDataset, VolumeDataset, make_loader
from src.preprocess import AugmentConfig
from src.retrieval import EmbeddingRecord, EmbeddingSet
from src.ssl_dino import cosine_schedule
from src.utils.constants import FEW_SHOT_KS, FINETUNE_MODES, HEAD_KINDS, OPTIMIZERS, POOLINGS
from src.utils.decorators import timer
from src.utils.errors import CheckpointError, MetricError, SamplingError, TrainingError
from src.utils.logger import setup_logger
from src.utils.seeding import derive_rng, torch_seed
from src.volume_store import Manifest

if TYPE_CHECKING:
    from src.config import RunConfig

logger = setup_logger(__name__)


class HeadSpec(BaseModel):
    """Classification head shape."""

    model_config = ConfigDict(extra="forbid")

    kind: str = "linear"
    num_classes: int = Field(default=2, ge=2)
    pooling: str = "cls"

    @field_validator("kind")
    @classmethod
    def validate_kind(cls, v: str) -> str:
        """Validate head kind is supported."""
        if v not in HEAD_KINDS:
            raise ValueError(f"Invalid head kind: {v}. Must be one of {sorted(HEAD_KINDS)}")
        return v

    @field_validator("pooling")
    @classmethod
    def validate_pooling(cls, v: str) -> str:
        """Validate pooling is supported."""
        if v not in POOLINGS:
            raise ValueError(f"Invalid pooling: {v}. Must be one of {sorted(POOLINGS)}")
        return v


class FinetuneConfig(BaseModel):
    """Fine-tuning and probing recipe."""

    model_config = ConfigDict(extra="forbid")

    mode: str = "full"
    backbone_lr: float = Field(default=1e-5, gt=0.0)
    head_lr: float = Field(default=1e-3, gt=0.0)
    min_lr_ratio: float = Field(default=0.0, ge=0.0, le=1.0)
    weight_decay: float = Field(default=0.05, ge=0.0)
    optimizer: str = "adamw"
    betas: Tuple[float, float] = (0.9, 0.999)
    max_epochs: int = Field(default=10, ge=1)
    epoch_samples: int = Field(default=5000, ge=2)
    batch_size: int = Field(default=16, ge=1)
    augment_enabled: bool = True
    augment: AugmentConfig = Field(default_factory=AugmentConfig.for_mae)

    @field_validator("mode")
    @classmethod
    def validate_mode(cls, v: str) -> str:
        """Validate mode is supported."""
        if v not in FINETUNE_MODES:
            raise ValueError(f"Invalid mode: {v}. Must be one of {sorted(FINETUNE_MODES)}")
        return v

    @field_validator("optimizer")
    @classmethod
    def validate_optimizer(cls, v: str) -> str:
        """Validate optimizer is supported."""
        if v not in OPTIMIZERS:
            raise ValueError(f"Invalid optimizer: {v}. Must be one of {sorted(OPTIMIZERS)}")
        return v

    @classmethod
    def desk(cls) -> "FinetuneConfig":
        return cls(max_epochs=5, epoch_samples=64, batch_size=8)


class FewShotPlan(BaseModel):
    """Shot counts and repeats for few-shot evaluation."""

    model_config = ConfigDict(extra="forbid")

    ks: Tuple[int, ...] = FEW_SHOT_KS
    repeats: int = Field(default=5, ge=1)

    @field_validator("ks")
    @classmethod
    def validate_ks(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        """Validate shot counts are positive."""
        if not v or any(k < 1 for k in v):
            raise ValueError(f"ks must be non-empty positive integers, got {v}")
        return v

    @classmethod
    def desk(cls) -> "FewShotPlan":
        return cls(ks=(8, 16), repeats=5)


class SweepGrid(BaseModel):
    """Scratch-baseline hyperparameter grid."""

    model_config = ConfigDict(extra="forbid")

    lrs: Tuple[float, ...] = (1e-3, 1e-4, 1e-5)
    weight_decays: Tuple[float, ...] = (0.01, 0.05, 1e-4, 1e-5)
    epochs: Tuple[int, ...] = (10, 15, 30, 50)
    optimizers: Tuple[str, ...] = ("sgd", "adam", "adamw")

    @field_validator("optimizers")
    @classmethod
    def validate_optimizers(cls, v: Tuple[str, ...]) -> Tuple[str, ...]:
        """Validate optimizers are supported."""
        unknown = [o for o in v if o not in OPTIMIZERS]
        if unknown:
            raise ValueError(f"Invalid optimizer(s) {unknown}. Must be among {sorted(OPTIMIZERS)}")
        return v

    def __iter__(self) -> Iterator[Dict[str, Any]]:  # type: ignore[override]
        for lr, wd, epochs, opt in itertools.product(self.lrs, self.weight_decays, self.epochs, self.optimizers):
            yield {"lr": lr, "weight_decay": wd, "epochs": epochs, "optimizer": opt}

    def __len__(self) -> int:
        return len(self.lrs) * len(self.weight_decays) * len(self.epochs) * len(self.optimizers)

    @classmethod
    def desk(cls) -> "SweepGrid":
        return cls(lrs=(1e-3, 1e-4), weight_decays=(0.05,), epochs=(2,), optimizers=("sgd", "adamw"))


class LinearHead(nn.Module):
    def __init__(self, embed_dim: int, num_classes: int, pooling: str = "cls"):
        super().__init__()
        self.pooling = pooling
        self.fc = nn.Linear(embed_dim, num_classes)

    def forward(self, te) -> torch.Tensor:
        return self.fc(extract_embedding(te, self.pooling))


class AttentiveHead(nn.Module):
    """One learned query cross-attending over CLS and every patch token, then a linear layer."""

    def __init__(self, embed_dim: int, num_classes: int):
        super().__init__()
        self.query = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.attn = nn.MultiheadAttention(embed_dim, num_heads=1, batch_first=True)
        self.fc = nn.Linear(embed_dim, num_classes)
        nn.init.trunc_normal_(self.query, std=0.02)

    def forward(self, te) -> torch.Tensor:
        tokens = torch.cat([te.cls[:, None], te.tokens], dim=1)
        pooled, _ = self.attn(self.query.expand(tokens.shape[0], -1, -1), tokens, tokens, need_weights=False)
        return self.fc(pooled[:, 0])


class Classifier(nn.Module):
    """Encoder plus classification head."""

    def __init__(self, encoder: VolumeEncoder, head_spec: HeadSpec):
        super().__init__()
        self.encoder = encoder
        self.head_spec = head_spec
        dim = encoder.cfg.embed_dim
        if head_spec.kind == "linear":
            self.head: nn.Module = LinearHead(dim, head_spec.num_classes, head_spec.pooling)
        else:
            self.head = AttentiveHead(dim, head_spec.num_classes)

    def forward(self, volumes: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder.encode_volumes(volumes))


def _class_indices(manifest: Manifest, task: str, split: str, restrict: Optional[Sequence[int]] = None):
    labels = manifest.labels_for(task)
    pool = manifest.split_indices(split) if restrict is None else list(restrict)
    pos = [i for i in pool if labels[i] == 1]
    neg = [i for i in pool if labels[i] == 0]
    return pos, neg


def balanced_epoch_sample(
    manifest: Manifest,
    task: str,
    n: int,
    rng: np.random.Generator,
    split: str = "train",
    restrict: Optional[Sequence[int]] = None,
) -> List[int]:
    """
    Draw ``n`` indices split evenly between classes (positives get the floor).

    A class is drawn with replacement only when it has fewer members than its share.

    Raises:
        SamplingError: If a class is absent
    """
    pos, neg = _class_indices(manifest, task, split, restrict)
    if not pos or not neg:
        raise SamplingError(
            f"Task '{task}' needs both classes in split '{split}': {len(pos)} positive, {len(neg)} negative"
        )
    n_pos = n // 2
    n_neg = n - n_pos
    drawn_pos = rng.choice(pos, size=n_pos, replace=len(pos) < n_pos)
    drawn_neg = rng.choice(neg, size=n_neg, replace=len(neg) < n_neg)
    combined = np.concatenate([drawn_pos, drawn_neg]).astype(np.int64)
    return [int(i) for i in combined[rng.permutation(len(combined))]]


def few_shot_sample(manifest: Manifest, task: str, k: int, seed: int, split: str = "train") -> List[int]:
    """
    K positives and K negatives without replacement, fixed per (task, K, seed).

    Raises:
        SamplingError: If either class has fewer than K members
    """
    pos, neg = _class_indices(manifest, task, split)
    for name, members in (("positives", pos), ("negatives", neg)):
        if len(members) < k:
            raise SamplingError(
                f"Task '{task}' has {len(members)} {name} in split '{split}', K={k} needs {k - len(members)} more"
            )
    rng = derive_rng(seed, "few-shot", task, k)
    chosen = list(rng.choice(pos, size=k, replace=False)) + list(rng.choice(neg, size=k, replace=False))
    return sorted(int(i) for i in chosen)


def build_optimizer(name: str, groups: List[Dict[str, Any]], betas: Tuple[float, float]) -> torch.optim.Optimizer:
    if name == "sgd":
        return torch.optim.SGD(groups, momentum=0.9)
    if name == "adam":
        return torch.optim.Adam(groups, betas=betas)
    if name == "adamw":
        return torch.optim.AdamW(groups, betas=betas)
    raise TrainingError(f"Unknown optimizer '{name}'. Must be one of {sorted(OPTIMIZERS)}")


@torch.no_grad()
def predict(classifier: Classifier, volumes: torch.Tensor) -> np.ndarray:
    """Softmax class scores, one row per volume."""
    classifier.eval()
    return F.softmax(classifier(volumes), dim=-1).double().numpy()


@torch.no_grad()
def predict_dataset(
    classifier: Classifier, dataset: VolumeDataset, batch_size: int = 8
) -> Tuple[List[str], np.ndarray, np.ndarray]:
    """Volume ids, positive-class scores and labels over a dataset's plan."""
    ids, scores, labels = [], [], []
    for volumes, batch_labels, indices in make_loader(dataset, batch_size):
        scores.append(predict(classifier, volumes)[:, 1])
        labels.append(batch_labels.numpy())
        ids.extend(dataset.manifest.records[int(i)].volume_id for i in indices)
    if not ids:
        return [], np.zeros(0), np.zeros(0, dtype=np.int64)
    return ids, np.concatenate(scores), np.concatenate(labels)


@dataclass
class FinetuneResult:
    """Best-validation classifier and per-epoch history."""

    classifier: Classifier
    history: List[Dict[str, Any]] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auc: Optional[float] = None
    encoder_hash_before: str = ""
    encoder_hash_after: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "history": self.history,
            "best_epoch": self.best_epoch,
            "best_val_auc": self.best_val_auc,
            "encoder_hash_before": self.encoder_hash_before,
            "encoder_hash_after": self.encoder_hash_after,
        }


def _resolve_encoder(encoder: Union[str, Path, VolumeEncoder]) -> VolumeEncoder:
    if isinstance(encoder, VolumeEncoder):
        return copy.deepcopy(encoder)
    return load_encoder(encoder)


def finetune(
    encoder: Union[str, Path, VolumeEncoder],
    manifest: Manifest,
    task: str,
    cfg: FinetuneConfig,
    head: HeadSpec,
    run_cfg: "RunConfig",
    seed: int,
    train_indices: Optional[Sequence[int]] = None,
) -> FinetuneResult:
    """
    Train a classifier on one task.

    Each epoch draws a class-balanced sample from the train split (or from
    ``train_indices``), trains with a per-step cosine schedule and scores the
    validation split. The classifier with the best validation AUC is kept.
    Probe mode freezes every encoder parameter.

    Raises:
        TrainingError: On non-finite loss or incompatible encoder input dims
        SamplingError: If a class is missing from the training pool
    """
    backbone = _resolve_encoder(encoder)
    expected = (len(run_cfg.windows), *run_cfg.crop.model_input)
    if (backbone.cfg.channels, *backbone.cfg.input_dims) != expected:
        raise TrainingError(
            f"Encoder expects {(backbone.cfg.channels, *backbone.cfg.input_dims)} inputs, data yields {expected}"
        )

    with torch_seed(seed):
        classifier = Classifier(backbone, head)
    probe = cfg.mode == "probe"
    if probe:
        classifier.encoder.requires_grad_(False)
    groups = [{"params": list(classifier.head.parameters()), "lr": cfg.head_lr, "base_lr": cfg.head_lr,
               "weight_decay": cfg.weight_decay}]
    if not probe:
        groups.append({"params": list(classifier.encoder.parameters()), "lr": cfg.backbone_lr,
                       "base_lr": cfg.backbone_lr, "weight_decay": cfg.weight_decay})
    optimizer = build_optimizer(cfg.optimizer, groups, cfg.betas)

    common = dict(
        task=task,
        seed=seed,
        resample_method=run_cfg.resample_method,
        resize_method=run_cfg.resize_method,
    )
    aug = cfg.augment if cfg.augment_enabled else AugmentConfig.disabled()
    train_set = TrainDataset(manifest, run_cfg.windows, run_cfg.crop, indices=[], aug_cfg=aug, **common)
    val_idx = manifest.split_indices("val")
    val_set = EvalDataset(manifest, run_cfg.windows, run_cfg.crop, indices=val_idx, **common)

    steps_per_epoch = int(np.ceil(cfg.epoch_samples / cfg.batch_size))
    total_steps = cfg.max_epochs * steps_per_epoch
    result = FinetuneResult(classifier=classifier, encoder_hash_before=module_hash(classifier.encoder))
    best_state = copy.deepcopy(classifier.state_dict())
    step = 0

    for epoch in range(cfg.max_epochs):
        rng = derive_rng(seed, "balanced", task, epoch)
        plan = balanced_epoch_sample(manifest, task, cfg.epoch_samples, rng, restrict=train_indices)
        train_set.set_epoch(epoch, plan)
        epoch_lr = cfg.head_lr * cosine_schedule(step, total_steps, 1.0, cfg.min_lr_ratio)

        classifier.train()
        if probe:
            classifier.encoder.eval()
        losses = []
        for volumes, labels, _ in make_loader(train_set, cfg.batch_size):
            factor = cosine_schedule(step, total_steps, 1.0, cfg.min_lr_ratio)
            for group in optimizer.param_groups:
                group["lr"] = group["base_lr"] * factor
            loss = F.cross_entropy(classifier(volumes), labels)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step} for task '{task}'")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.item()))
            step += 1

        val_auc: Optional[float] = None
        if val_idx:
            ids, scores, labels = predict_dataset(classifier, val_set, cfg.batch_size)
            try:
                val_auc = auc(ScoredSet(ids, scores, labels))
            except MetricError as e:
                logger.warning(f"Validation AUC undefined for task '{task}': {e}")

        result.history.append(
            {"epoch": epoch, "lr": epoch_lr, "train_loss": float(np.mean(losses)), "val_auc": val_auc}
        )
        logger.info(
            f"[{task}] epoch {epoch + 1}/{cfg.max_epochs}: loss {np.mean(losses):.4f}, val_auc {val_auc}"
        )

        improved = val_auc is not None and (result.best_val_auc is None or val_auc > result.best_val_auc)
        if improved or (result.best_val_auc is None and val_auc is None):
            result.best_val_auc = val_auc
            result.best_epoch = epoch
            best_state = copy.deepcopy(classifier.state_dict())

    classifier.load_state_dict(best_state)
    result.encoder_hash_after = module_hash(classifier.encoder)
    if probe and result.encoder_hash_after != result.encoder_hash_before:
        raise TrainingError("Probe mode changed encoder parameters")
    return result


def save_classifier(path: Union[str, Path], classifier: Classifier, meta: Optional[Dict[str, Any]] = None) -> Path:
    return save_checkpoint(
        path,
        "classifier",
        {
            "encoder": classifier.encoder.cfg.model_dump(mode="json"),
            "head": classifier.head_spec.model_dump(mode="json"),
        },
        {f"classifier.{k}": v for k, v in classifier.state_dict().items()},
        meta=meta,
    )


def load_classifier(path: Union[str, Path]) -> Classifier:
    checkpoint = load_checkpoint(path)
    if checkpoint.kind != "classifier":
        raise CheckpointError(f"{path} is a '{checkpoint.kind}' checkpoint, not a classifier")
    classifier = Classifier(VolumeEncoder(EncoderConfig(**checkpoint.config["encoder"])),
                            HeadSpec(**checkpoint.config["head"]))
    load_module_state(classifier, checkpoint, "classifier.")
    return classifier


def write_scores(path: Union[str, Path], ids: Sequence[str], scores: Sequence[float]) -> Path:
    """Line-delimited {volume_id, score_pos} records."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"volume_id": list(ids), "score_pos": np.asarray(scores, dtype=np.float64)})
    frame.to_json(out, orient="records", lines=True, double_precision=15)
    return out


def read_scores(path: Union[str, Path]) -> pd.DataFrame:
    frame = pd.read_json(path, lines=True, dtype={"volume_id": str, "score_pos": float})
    if list(frame.columns) != ["volume_id", "score_pos"]:
        raise MetricError(f"{path} is not a scores file (columns {list(frame.columns)})")
    return frame


@dataclass
class SweepResult:
    runs: List[Dict[str, Any]]
    best: Dict[str, Any]
    best_classifier: Optional[Classifier] = None


@timer
def sweep_scratch(
    manifest: Manifest,
    task: str,
    grid: SweepGrid,
    cfg: FinetuneConfig,
    head: HeadSpec,
    run_cfg: "RunConfig",
    seed: int,
) -> SweepResult:
    """Train from random initialisation over every grid point; keep the best validation AUC."""
    runs: List[Dict[str, Any]] = []
    best: Optional[Dict[str, Any]] = None
    best_classifier = None
    for point in grid:
        point_cfg = cfg.model_copy(
            update={
                "mode": "full",
                "backbone_lr": point["lr"],
                "head_lr": point["lr"],
                "weight_decay": point["weight_decay"],
                "max_epochs": point["epochs"],
                "optimizer": point["optimizer"],
            }
        )
        encoder = build_encoder(run_cfg.encoder, seed)
        result = finetune(encoder, manifest, task, point_cfg, head, run_cfg, seed)
        run = {**point, "best_val_auc": result.best_val_auc, "best_epoch": result.best_epoch}
        runs.append(run)
        logger.info(f"Sweep point {point}: best val AUC {result.best_val_auc}")
        score = -1.0 if result.best_val_auc is None else result.best_val_auc
        if best is None or score > (-1.0 if best["best_val_auc"] is None else best["best_val_auc"]):
            best, best_classifier = run, result.classifier
    if best is None:
        raise TrainingError("Sweep grid is empty")
    return SweepResult(runs=runs, best=best, best_classifier=best_classifier)


@dataclass
class FewShotResult:
    runs: List[Dict[str, Any]]
    aggregate: Dict[int, Dict[str, float]]
    score_files: List[Path]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "runs": self.runs,
            "aggregate": {str(k): v for k, v in self.aggregate.items()},
            "score_files": [str(p) for p in self.score_files],
        }


def run_few_shot(
    encoder: Union[str, Path, VolumeEncoder],
    manifest: Manifest,
    task: str,
    plan: FewShotPlan,
    cfg: FinetuneConfig,
    head: HeadSpec,
    run_cfg: "RunConfig",
    seed: int,
    out_dir: Union[str, Path],
) -> FewShotResult:
    """
    Fine-tune on K positives + K negatives for every K and repeat.

    Repeat ``r`` uses seed ``seed + r``. Test-split scores are written per
    (K, repeat); the aggregate is a per-K mean with a Student-t interval
    over repeats of the test AUC.
    """
    out = Path(out_dir)
    base = _resolve_encoder(encoder)
    test_idx = manifest.split_indices("test")
    test_set = EvalDataset(manifest, run_cfg.windows, run_cfg.crop, indices=test_idx, task=task, seed=seed,
                           resample_method=run_cfg.resample_method, resize_method=run_cfg.resize_method)

    runs: List[Dict[str, Any]] = []
    files: List[Path] = []
    aggregate: Dict[int, Dict[str, float]] = {}
    for k in plan.ks:
        aucs = []
        for r in range(plan.repeats):
            repeat_seed = seed + r
            indices = few_shot_sample(manifest, task, k, repeat_seed)
            result = finetune(base, manifest, task, cfg, head, run_cfg, repeat_seed, train_indices=indices)
            ids, scores, labels = predict_dataset(result.classifier, test_set, cfg.batch_size)
            files.append(write_scores(out / f"{task}_K{k}_r{r}.scores.jsonl", ids, scores))
            try:
                test_auc: Optional[float] = auc(ScoredSet(ids, scores, labels))
                aucs.append(test_auc)
            except MetricError as e:
                logger.warning(f"Test AUC undefined for K={k}, repeat {r}: {e}")
                test_auc = None
            runs.append({"k": k, "repeat": r, "seed": repeat_seed, "test_auc": test_auc,
                         "best_val_auc": result.best_val_auc})
        if aucs:
            aggregate[k] = few_shot_interval(aucs)
    return FewShotResult(runs=runs, aggregate=aggregate, score_files=files)


@torch.no_grad()
def embed_volumes(encoder: VolumeEncoder, dataset: VolumeDataset, pooling: str = "cls",
                  batch_size: int = 8) -> EmbeddingSet:
    """Pooled encoder embeddings with multi-hot labels over the manifest tasks."""
    encoder.eval()
    manifest = dataset.manifest
    records = []
    for volumes, _, indices in make_loader(dataset, batch_size):
        vectors = extract_embedding(encoder.encode_volumes(volumes), pooling).double().numpy()
        for vector, index in zip(vectors, indices.tolist()):
            record = manifest.records[index]
            records.append(
                EmbeddingRecord(record.volume_id, vector, np.array([record.labels[t] for t in manifest.tasks]))
            )
    return EmbeddingSet(subtypes=list(manifest.tasks), records=records)
