"""Volume datasets and loaders for voxel-fm.

A dataset walks an epoch plan: an ordered list of manifest indices (repeats
allowed). Random views for plan slot ``k`` of epoch ``e`` come from the
stream derived from (seed, stream name, e, k), so the batches of an epoch
are reproducible regardless of loader scheduling.
"""

from abc import ABC, abstractmethod
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from src.preprocess import (
    AugmentConfig,
    CropConfig,
    MultiChannelVolume,
    WindowLike,
    augment_canonical,
    center_crop,
    multi_crop,
    prepare_canonical,
    resize,
)
from src.utils.errors import ManifestError, VolumeStoreError
from src.utils.logger import setup_logger
from src.utils.seeding import derive_rng
from src.volume_store import Manifest, load_volume

logger = setup_logger(__name__)


class VolumeDataset(Dataset, ABC):
    """Base dataset over manifest records, caching canonical (pad-target) volumes."""

    stream = "base"

    def __init__(
        self,
        manifest: Manifest,
        windows: Sequence[WindowLike],
        crop_cfg: CropConfig,
        indices: Optional[Sequence[int]] = None,
        task: Optional[str] = None,
        seed: int = 0,
        resample_method: str = "tricubic",
        resize_method: str = "trilinear",
        cache: bool = True,
    ):
        """
        Initialize the dataset.

        Args:
            manifest: Dataset manifest
            windows: HU windows, one channel each
            crop_cfg: Pad/crop/input sizes
            indices: Initial epoch plan (all records when None)
            task: Task whose label is returned with each item
            seed: Run seed for view streams
            resample_method: Spacing resample interpolation
            resize_method: Model-input resize interpolation
            cache: Keep canonical volumes in memory
        """
        if task is not None and task not in manifest.tasks:
            raise ManifestError(f"Unknown task '{task}'. Declared tasks: {manifest.tasks}")
        self.manifest = manifest
        self.windows = list(windows)
        self.crop_cfg = crop_cfg
        self.task = task
        self.seed = seed
        self.resample_method = resample_method
        self.resize_method = resize_method
        self.cache = cache
        self._cache: Dict[int, MultiChannelVolume] = {}
        self.epoch = 0
        self.plan: List[int] = list(range(len(manifest))) if indices is None else [int(i) for i in indices]

    def set_epoch(self, epoch: int, indices: Optional[Sequence[int]] = None) -> None:
        """Select the epoch number (and optionally a new plan) for the next pass."""
        self.epoch = epoch
        if indices is not None:
            self.plan = [int(i) for i in indices]

    def __len__(self) -> int:
        return len(self.plan)

    def canonical(self, index: int) -> MultiChannelVolume:
        """Reoriented, resampled, windowed and padded volume of a manifest record."""
        if index in self._cache:
            return self._cache[index]
        record = self.manifest.records[index]
        try:
            volume = load_volume(self.manifest.resolve_path(record))
        except VolumeStoreError as e:
            raise VolumeStoreError(f"Cannot load '{record.volume_id}': {e}")
        m = prepare_canonical(volume, self.windows, self.crop_cfg, self.resample_method)
        if self.cache:
            self._cache[index] = m
        return m

    def label(self, index: int) -> int:
        if self.task is None:
            return -1
        return int(self.manifest.records[index].labels[self.task])

    def rng_for(self, slot: int) -> np.random.Generator:
        return derive_rng(self.seed, self.stream, self.epoch, slot)

    @abstractmethod
    def __getitem__(self, slot: int) -> Any:
        pass


class EvalDataset(VolumeDataset):
    """Deterministic evaluation views: centre crop then resize."""

    stream = "eval"

    def __getitem__(self, slot: int) -> Tuple[torch.Tensor, int, int]:
        index = self.plan[slot]
        m = center_crop(self.canonical(index), self.crop_cfg.eval_center_crop)
        m = resize(m, self.crop_cfg.model_input, self.resize_method)
        return torch.from_numpy(m.channels), self.label(index), index


class TrainDataset(VolumeDataset):
    """Single augmented view per item."""

    stream = "train"

    def __init__(self, *args: Any, aug_cfg: Optional[AugmentConfig] = None, **kwargs: Any):
        super().__init__(*args, **kwargs)
        self.aug_cfg = aug_cfg or AugmentConfig.for_mae()

    def __getitem__(self, slot: int) -> Tuple[torch.Tensor, int, int]:
        index = self.plan[slot]
        m = augment_canonical(
            self.canonical(index), self.crop_cfg, self.aug_cfg, self.rng_for(slot), self.resize_method
        )
        return torch.from_numpy(m.channels), self.label(index), index


class DinoDataset(VolumeDataset):
    """Multi-crop view sets: globals first, then locals."""

    stream = "dino"

    def __init__(self, *args: Any, aug_cfg: Optional[AugmentConfig] = None, **kwargs: Any):
        super().__init__(*args, **kwargs)
        self.aug_cfg = aug_cfg or AugmentConfig.for_dino()

    def __getitem__(self, slot: int) -> List[torch.Tensor]:
        index = self.plan[slot]
        views = multi_crop(
            self.canonical(index), self.crop_cfg, self.aug_cfg, self.rng_for(slot), self.resize_method
        )
        return [torch.from_numpy(v.channels) for v in views.all_views]


def collate_views(batch: List[List[torch.Tensor]]) -> List[torch.Tensor]:
    """Stack the k-th view of every item into one (B, C, D, H, W) tensor per view."""
    return [torch.stack(views) for views in zip(*batch)]


def collate_labeled(batch: List[Tuple[torch.Tensor, int, int]]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    volumes, labels, indices = zip(*batch)
    return torch.stack(volumes), torch.tensor(labels, dtype=torch.long), torch.tensor(indices, dtype=torch.long)


def make_loader(dataset: VolumeDataset, batch_size: int, drop_last: bool = False) -> DataLoader:
    """Sequential loader over the dataset's epoch plan."""
    collate = collate_views if isinstance(dataset, DinoDataset) else collate_labeled
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=False,
        num_workers=0,
        collate_fn=collate,
        drop_last=drop_last,
    )


def shuffled_plan(indices: Sequence[int], seed: int, epoch: int) -> List[int]:
    """Epoch order of a fixed index set."""
    order = derive_rng(seed, "order", epoch).permutation(len(indices))
    return [int(indices[i]) for i in order]
