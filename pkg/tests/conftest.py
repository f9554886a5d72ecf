"""Shared fixtures: a tiny on-disk manifest, a run config sized for it and a gradient check."""

import math
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from src.config import RunConfig
from src.volume_store import Manifest, ManifestRecord, Volume, save_manifest, save_volume

TINY_OVERRIDES = {
    "seed": 3,
    "windows": "brain",
    "crop": {
        "pad_crop_target": [16, 16, 16],
        "eval_center_crop": [16, 16, 16],
        "model_input": [8, 8, 8],
        "global_scale_range": [8, 16],
        "local_scale_range": [4, 8],
    },
    "encoder": {
        "input_dims": [8, 8, 8],
        "channels": 1,
        "patch_size": 4,
        "embed_dim": 12,
        "depth": 1,
        "heads": 2,
        "mlp_hidden": 16,
    },
    "dino": {
        "proj_hidden_dim": 16,
        "proj_bottleneck_dim": 8,
        "prototype_count": 16,
        "warmup_teacher_temp_epochs": 0,
        "warmup_epochs": 0,
        "total_epochs": 1,
        "batch_size": 2,
        "checkpoint_every": 1,
    },
    "mae": {"decoder_dim": 12, "decoder_depth": 1, "decoder_heads": 2, "total_epochs": 1, "batch_size": 2,
            "n_previews": 1},
    "finetune": {"max_epochs": 1, "epoch_samples": 4, "batch_size": 2},
    "few_shot": {"ks": [2], "repeats": 2},
    "sweep": {"lrs": [1e-3], "weight_decays": [0.05], "epochs": [1], "optimizers": ["sgd", "adamw"]},
    "evaluation": {"n_boot": 20, "n_perm": 50},
}

# (split, bright_lesion, dark_lesion)
TINY_LAYOUT = [
    ("train", 1, 0),
    ("train", 1, 1),
    ("train", 1, 0),
    ("train", 0, 1),
    ("train", 0, 0),
    ("train", 0, 1),
    ("val", 1, 0),
    ("val", 0, 1),
    ("test", 1, 1),
    ("test", 0, 0),
]


@pytest.fixture
def tiny_run_cfg():
    """Desk profile shrunk to 16^3 volumes and an 8^3 single-channel encoder."""
    return RunConfig.for_profile("desk", TINY_OVERRIDES)


@pytest.fixture
def tiny_manifest(tmp_path):
    """Ten 16^3 volumes on disk; positives for bright_lesion carry a hot cube."""
    rng = np.random.default_rng(0)
    records = []
    for i, (split, bright, dark) in enumerate(TINY_LAYOUT):
        voxels = rng.normal(30.0, 5.0, size=(16, 16, 16))
        if bright:
            voxels[6:10, 6:10, 6:10] = 75.0
        if dark:
            voxels[2:5, 2:5, 2:5] = 5.0
        volume_id = f"vol_{i:03d}"
        sidecar = save_volume(Volume(voxels=voxels, id=volume_id), tmp_path / "volumes" / volume_id)
        records.append(
            ManifestRecord(
                volume_id=volume_id,
                path=Path(os.path.relpath(sidecar, tmp_path)).as_posix(),
                split=split,
                labels={"bright_lesion": bright, "dark_lesion": dark},
                group_key=f"patient_{i:03d}",
            )
        )
    manifest = Manifest(tasks=["bright_lesion", "dark_lesion"], records=records, root=tmp_path)
    save_manifest(manifest, tmp_path / "manifest.jsonl")
    return manifest


def relative_gradient_error(loss_fn, params, h=1e-6):
    """
    ||analytic - central difference|| / ||central difference|| over every element of ``params``.

    ``loss_fn`` takes no arguments and must be deterministic; run it in float64.
    """
    params = list(params)
    analytic = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    diff_sq, norm_sq = 0.0, 0.0
    with torch.no_grad():
        for p, grad in zip(params, analytic):
            flat = p.view(-1)
            grad_flat = torch.zeros_like(flat) if grad is None else grad.reshape(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + h
                up = loss_fn().item()
                flat[i] = original - h
                down = loss_fn().item()
                flat[i] = original
                numeric = (up - down) / (2 * h)
                diff_sq += (grad_flat[i].item() - numeric) ** 2
                norm_sq += numeric**2
    return math.sqrt(diff_sq) / math.sqrt(norm_sq)
