"""Attention-distance maps and heatmap export."""

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from src.encoder import TokenEmbeddings
from src.utils.constants import ATTENTION_REDUCTIONS, DEGENERATE_HEATMAP_VALUE
from src.utils.errors import InterpretError
from src.utils.logger import setup_logger
from src.volume_store import Volume

logger = setup_logger(__name__)

Dims = Tuple[int, int, int]

ROW_SUM_TOLERANCE = 1e-5
# Rows whose patch-token mass falls below this are treated as all-CLS
NULL_ROW_MASS = 1e-12


@dataclass
class AttentionStack:
    """Post-softmax weights (depth, heads, N+1, N+1) with CLS at index 0."""

    weights: np.ndarray
    grid: Dims
    patch_size: int

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = int(np.prod(self.grid))
        if self.weights.ndim != 4 or self.weights.shape[2:] != (n + 1, n + 1):
            raise InterpretError(
                f"attention weights must be (depth, heads, {n + 1}, {n + 1}), got {self.weights.shape}"
            )
        deviation = np.abs(self.weights.sum(axis=-1) - 1.0).max()
        if deviation > ROW_SUM_TOLERANCE:
            raise InterpretError(f"attention rows must sum to 1, max deviation {deviation:.2e}")

    @property
    def n_patches(self) -> int:
        return int(np.prod(self.grid))


@dataclass
class DistanceMap:
    """Per-patch mean attention distance in voxels; NaN marks null patches."""

    values: np.ndarray
    grid: Dims
    patch_size: int
    reduction: str

    @property
    def null_mask(self) -> np.ndarray:
        return np.isnan(self.values)

    def as_grid(self) -> np.ndarray:
        return self.values.reshape(self.values.shape[:-1] + tuple(self.grid))


def _patch_coords(grid: Dims) -> np.ndarray:
    return np.indices(grid, dtype=np.float64).reshape(3, -1).T


def patch_distance(i: int, j: int, grid: Dims, patch_size: int) -> float:
    """Euclidean distance between the centres of patches i and j, in voxels."""
    n = int(np.prod(grid))
    for index in (i, j):
        if not 0 <= index < n:
            raise InterpretError(f"patch index {index} out of range for grid {tuple(grid)}")
    a = np.array(np.unravel_index(i, grid), dtype=np.float64)
    b = np.array(np.unravel_index(j, grid), dtype=np.float64)
    return float(np.linalg.norm(a - b) * patch_size)


def patch_distance_matrix(grid: Dims, patch_size: int) -> np.ndarray:
    coords = _patch_coords(grid)
    return cdist(coords, coords) * patch_size


def attention_distance_map(stack: AttentionStack, reduce: str = "mean_all") -> DistanceMap:
    """
    Attention-weighted mean distance from each patch to the patches it attends to.

    CLS attention is dropped and each row renormalized over patch tokens.
    Rows with no patch mass are null (NaN) and ignored when averaging.

    Args:
        stack: Captured attention
        reduce: mean_all (N,), per_layer (depth, N) or per_head (depth, heads, N)
    """
    if reduce not in ATTENTION_REDUCTIONS:
        raise InterpretError(f"Unknown reduction '{reduce}'. Must be one of {sorted(ATTENTION_REDUCTIONS)}")

    patch_attn = stack.weights[:, :, 1:, 1:]
    mass = patch_attn.sum(axis=-1, keepdims=True)
    null = mass[..., 0] <= NULL_ROW_MASS
    normalized = np.divide(patch_attn, mass, out=np.zeros_like(patch_attn), where=mass > NULL_ROW_MASS)
    per_head = (normalized * patch_distance_matrix(stack.grid, stack.patch_size)).sum(axis=-1)
    per_head[null] = np.nan
    if null.any():
        logger.warning(f"{int(null.sum())} attention row(s) put all mass on CLS; marked null")

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        if reduce == "mean_all":
            values = np.nanmean(per_head, axis=(0, 1))
        elif reduce == "per_layer":
            values = np.nanmean(per_head, axis=1)
        else:
            values = per_head
    return DistanceMap(values=values, grid=stack.grid, patch_size=stack.patch_size, reduction=reduce)


def attention_stack_from_embeddings(
    te: TokenEmbeddings, grid: Dims, patch_size: int, item: int = 0
) -> AttentionStack:
    """Wrap the captured attention of one batch item."""
    if te.attn is None:
        raise InterpretError("TokenEmbeddings carry no attention; encode with capture_attention=True")
    return AttentionStack(weights=te.attn[item].detach().double().cpu().numpy(), grid=grid, patch_size=patch_size)


def export_heatmap(
    scores: Union[DistanceMap, np.ndarray],
    base: Union[Volume, Dims],
    grid: Optional[Dims] = None,
    patch_size: Optional[int] = None,
) -> Volume:
    """
    Upsample per-patch scalars to voxels (nearest) and scale them to [0,1].

    Constant maps export at 0.5 everywhere; null patches export as 0.

    Raises:
        InterpretError: If the patch grid does not tile the base volume
    """
    if isinstance(scores, DistanceMap):
        grid, patch_size = scores.grid, scores.patch_size
        values = scores.values
    else:
        values = np.asarray(scores, dtype=np.float64)
    if grid is None or patch_size is None:
        raise InterpretError("grid and patch_size are required for raw per-patch scores")
    if values.shape != (int(np.prod(grid)),):
        raise InterpretError(f"expected {int(np.prod(grid))} per-patch values, got shape {values.shape}")

    dims = base.dims if isinstance(base, Volume) else tuple(base)
    if tuple(g * patch_size for g in grid) != tuple(dims):
        raise InterpretError(f"grid {tuple(grid)} x patch {patch_size} does not match volume dims {tuple(dims)}")

    finite = values[np.isfinite(values)]
    if finite.size == 0 or finite.max() == finite.min():
        logger.warning("Heatmap range is degenerate; exporting mid-scale")
        scaled = np.where(np.isfinite(values), DEGENERATE_HEATMAP_VALUE, 0.0)
    else:
        lo, hi = finite.min(), finite.max()
        scaled = np.where(np.isfinite(values), (values - lo) / (hi - lo), 0.0)

    voxels = scaled.reshape(grid)
    for axis in range(3):
        voxels = np.repeat(voxels, patch_size, axis=axis)

    if isinstance(base, Volume):
        return Volume(voxels=voxels, spacing_mm=base.spacing_mm, orientation=base.orientation, id=f"{base.id}_heatmap")
    return Volume(voxels=voxels, id="heatmap")


def save_distance_map_json(distance_map: DistanceMap, path: Union[str, Path]) -> Path:
    """Write the map as nested JSON arrays over the patch grid; null patches become null."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    grid_values = distance_map.as_grid()
    as_lists = np.where(np.isnan(grid_values), None, grid_values).tolist()
    payload = {
        "grid": list(distance_map.grid),
        "patch_size": distance_map.patch_size,
        "reduction": distance_map.reduction,
        "units": "voxels",
        "values": as_lists,
    }
    with open(out, "w") as f:
        json.dump(payload, f, indent=2)
    return out
