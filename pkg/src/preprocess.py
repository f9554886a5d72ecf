"""Spatial normalization, HU windowing, cropping and augmentation of CT volumes."""

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy import ndimage

from src.utils.constants import (
    CANONICAL_ORIENTATION,
    GAUSSIAN_TRUNCATE,
    INTERPOLATION_ORDERS,
    RESIZE_METHODS,
    WINDOW_PRESETS,
)
from src.utils.errors import PreprocessError, VolumeStoreError
from src.utils.logger import setup_logger
from src.volume_store import Volume, parse_orientation

logger = setup_logger(__name__)

Dims = Tuple[int, int, int]


class WindowSpec(BaseModel):
    """HU window given as (center, width)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    center: float
    width: float

    @field_validator("width")
    @classmethod
    def validate_width(cls, v: float) -> float:
        """Validate width is positive."""
        if not v > 0:
            raise ValueError(f"window width must be > 0, got {v}")
        return v

    @property
    def lower(self) -> float:
        return self.center - self.width / 2.0


WindowLike = Union[WindowSpec, Tuple[float, float], Sequence[float]]


def as_window(window: WindowLike) -> WindowSpec:
    """Coerce a (center, width) pair into a WindowSpec."""
    if isinstance(window, WindowSpec):
        return window
    try:
        center, width = window
        return WindowSpec(center=center, width=width)
    except (TypeError, ValueError, ValidationError) as e:
        raise PreprocessError(f"Invalid window {window!r}: {e}")


def windows_from_preset(name: str) -> List[WindowSpec]:
    if name not in WINDOW_PRESETS:
        raise PreprocessError(f"Unknown window preset '{name}'. Must be one of {sorted(WINDOW_PRESETS)}")
    return [as_window(w) for w in WINDOW_PRESETS[name]]


@dataclass(eq=False)
class MultiChannelVolume:
    """Windowed volume: one [0,1] channel per HU window."""

    channels: np.ndarray
    channel_windows: List[WindowSpec] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.channels = np.ascontiguousarray(self.channels, dtype=np.float32)
        if self.channels.ndim != 4:
            raise PreprocessError(f"channels must be C x D x H x W, got shape {self.channels.shape}")
        if self.channels.shape[0] != len(self.channel_windows):
            raise PreprocessError(
                f"{self.channels.shape[0]} channels but {len(self.channel_windows)} windows"
            )

    @property
    def dims(self) -> Dims:
        _, d, h, w = self.channels.shape
        return int(d), int(h), int(w)

    @property
    def n_channels(self) -> int:
        return int(self.channels.shape[0])

    def replace(self, channels: np.ndarray) -> "MultiChannelVolume":
        return MultiChannelVolume(channels=channels, channel_windows=list(self.channel_windows))


def _check_range(v: Tuple[float, float], name: str) -> Tuple[float, float]:
    lo, hi = v
    if hi < lo:
        raise ValueError(f"{name} must be ordered (lo <= hi), got {v}")
    return v


class AugmentConfig(BaseModel):
    """Random flips, intensity shift, gamma and Gaussian smoothing."""

    model_config = ConfigDict(extra="forbid")

    enable_flip: bool = True
    enable_shift: bool = True
    enable_gamma: bool = True
    enable_blur: bool = True
    flip_prob: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    shift_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    intensity_shift_offset: float = Field(default=0.1, ge=0.0)
    gamma_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    gamma_range: Tuple[float, float] = (0.2, 1.0)
    blur_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    blur_sigma_range: Tuple[float, float] = (0.5, 1.0)

    @field_validator("flip_prob")
    @classmethod
    def validate_flip_prob(cls, v: Tuple[float, float, float]) -> Tuple[float, float, float]:
        """Validate per-axis flip probabilities."""
        if not all(0.0 <= p <= 1.0 for p in v):
            raise ValueError(f"flip_prob entries must lie in [0, 1], got {v}")
        return v

    @field_validator("gamma_range")
    @classmethod
    def validate_gamma_range(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        """Validate gamma range is positive and ordered."""
        if v[0] <= 0:
            raise ValueError(f"gamma_range must be positive, got {v}")
        return _check_range(v, "gamma_range")

    @field_validator("blur_sigma_range")
    @classmethod
    def validate_blur_range(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        """Validate sigma range is non-negative and ordered."""
        if v[0] < 0:
            raise ValueError(f"blur_sigma_range must be non-negative, got {v}")
        return _check_range(v, "blur_sigma_range")

    @classmethod
    def for_dino(cls) -> "AugmentConfig":
        return cls()

    @classmethod
    def for_mae(cls) -> "AugmentConfig":
        return cls(enable_gamma=False, enable_blur=False)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(enable_flip=False, enable_shift=False, enable_gamma=False, enable_blur=False)


class CropConfig(BaseModel):
    """Pad/crop targets, model input size and multi-crop scale ranges."""

    model_config = ConfigDict(extra="forbid")

    pad_crop_target: Dims = (224, 224, 224)
    eval_center_crop: Dims = (192, 192, 192)
    model_input: Dims = (96, 96, 96)
    global_scale_range: Tuple[int, int] = (112, 224)
    local_scale_range: Tuple[int, int] = (64, 112)
    n_global: int = Field(default=2, ge=1)
    n_local: int = Field(default=3, ge=0)

    @field_validator("pad_crop_target", "eval_center_crop", "model_input")
    @classmethod
    def validate_positive(cls, v: Dims) -> Dims:
        """Validate targets are positive."""
        if any(d <= 0 for d in v):
            raise ValueError(f"crop targets must be positive, got {v}")
        return v

    @model_validator(mode="after")
    def validate_ranges(self) -> "CropConfig":
        """Validate scale ranges fit inside the pad target."""
        limit = min(self.pad_crop_target)
        for name in ("global_scale_range", "local_scale_range"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi <= limit:
                raise ValueError(f"{name} {(lo, hi)} must satisfy 1 <= lo <= hi <= {limit}")
        if any(c > p for c, p in zip(self.eval_center_crop, self.pad_crop_target)):
            raise ValueError(
                f"eval_center_crop {self.eval_center_crop} exceeds pad_crop_target {self.pad_crop_target}"
            )
        return self

    @classmethod
    def desk(cls) -> "CropConfig":
        return cls(
            pad_crop_target=(40, 40, 40),
            eval_center_crop=(32, 32, 32),
            model_input=(32, 32, 32),
            global_scale_range=(24, 40),
            local_scale_range=(12, 24),
        )


@dataclass
class ViewSet:
    """Global and local DINO views, all at model input size."""

    global_views: List[MultiChannelVolume]
    local_views: List[MultiChannelVolume]

    @property
    def all_views(self) -> List[MultiChannelVolume]:
        return self.global_views + self.local_views


def reorient_to_ras(v: Volume) -> Volume:
    """
    Permute and flip voxel axes so the volume is in canonical RAS order.

    Spacing components follow their axes.
    """
    try:
        source_axis, flipped = parse_orientation(v.orientation)
    except VolumeStoreError as e:
        raise PreprocessError(str(e))

    if v.orientation == CANONICAL_ORIENTATION:
        return Volume(voxels=v.voxels.copy(), spacing_mm=v.spacing_mm, orientation=v.orientation, id=v.id)

    data = v.voxels
    for canonical, axis in enumerate(source_axis):
        if flipped[canonical]:
            data = np.flip(data, axis=axis)
    data = np.transpose(data, source_axis)
    spacing = tuple(v.spacing_mm[axis] for axis in source_axis)
    return Volume(
        voxels=np.ascontiguousarray(data),
        spacing_mm=spacing,  # type: ignore[arg-type]
        orientation=CANONICAL_ORIENTATION,
        id=v.id,
    )


def _interpolation_order(method: str, allowed) -> int:
    if method not in allowed:
        raise PreprocessError(f"Unknown interpolation method '{method}'. Must be one of {sorted(allowed)}")
    return INTERPOLATION_ORDERS[method]


def _resample_grid(data: np.ndarray, out_shape: Dims, scale: Sequence[float], order: int) -> np.ndarray:
    # Voxel centres stay aligned: input coord = scale * (o + 0.5) - 0.5
    scale_arr = np.asarray(scale, dtype=np.float64)
    offset = 0.5 * scale_arr - 0.5
    return ndimage.affine_transform(
        data.astype(np.float64, copy=False),
        scale_arr,
        offset=offset,
        output_shape=out_shape,
        order=order,
        mode="nearest",
    )


def resample_isotropic(
    v: Volume,
    target_spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0),
    method: str = "tricubic",
) -> Volume:
    """
    Resample a volume to the target voxel spacing.

    Output dims are round(dim * spacing / target) per axis, rounding halves up.

    Raises:
        PreprocessError: On unknown method, invalid target or zero output dims
    """
    order = _interpolation_order(method, INTERPOLATION_ORDERS)
    if len(target_spacing) != 3 or not all(t > 0 for t in target_spacing):
        raise PreprocessError(f"target_spacing must be three positive values, got {target_spacing}")

    out_shape = tuple(
        int(math.floor(n * s / t + 0.5)) for n, s, t in zip(v.dims, v.spacing_mm, target_spacing)
    )
    if min(out_shape) < 1:
        raise PreprocessError(
            f"Resampling '{v.id}' {v.dims} at {v.spacing_mm} mm to {target_spacing} mm "
            f"gives degenerate dims {out_shape}"
        )

    if out_shape == v.dims and tuple(v.spacing_mm) == tuple(float(t) for t in target_spacing):
        voxels = v.voxels.copy()
    else:
        scale = [t / s for s, t in zip(v.spacing_mm, target_spacing)]
        voxels = _resample_grid(v.voxels, out_shape, scale, order).astype(np.float32)  # type: ignore[arg-type]

    return Volume(
        voxels=voxels,
        spacing_mm=tuple(float(t) for t in target_spacing),  # type: ignore[arg-type]
        orientation=v.orientation,
        id=v.id,
    )


def apply_windows(v: Volume, windows: Sequence[WindowLike]) -> MultiChannelVolume:
    """Map HU values into one [0,1] channel per window: clamp((x - lower) / width)."""
    if not windows:
        raise PreprocessError("At least one window is required")
    specs = [as_window(w) for w in windows]
    x = v.voxels.astype(np.float64)
    channels = np.stack([np.clip((x - w.lower) / w.width, 0.0, 1.0) for w in specs])
    return MultiChannelVolume(channels=channels.astype(np.float32), channel_windows=specs)


def pad_or_crop(m: MultiChannelVolume, target: Dims) -> MultiChannelVolume:
    """
    Centre-pad with zeros or centre-crop each axis to the target size.

    Odd remainders put the extra voxel on the high-index side.
    """
    if len(target) != 3 or any(t <= 0 for t in target):
        raise PreprocessError(f"target must be three positive sizes, got {target}")

    data = m.channels
    pad_width = [(0, 0)]
    slices = [slice(None)]
    for n, t in zip(m.dims, target):
        if t >= n:
            before = (t - n) // 2
            pad_width.append((before, t - n - before))
            slices.append(slice(None))
        else:
            start = (n - t) // 2
            pad_width.append((0, 0))
            slices.append(slice(start, start + t))

    data = data[tuple(slices)]
    if any(p != (0, 0) for p in pad_width):
        data = np.pad(data, pad_width, mode="constant", constant_values=0.0)
    return m.replace(data)


def center_crop(m: MultiChannelVolume, target: Dims = (192, 192, 192)) -> MultiChannelVolume:
    """Centre-crop; the target may not exceed the input on any axis."""
    if any(t > n for t, n in zip(target, m.dims)):
        raise PreprocessError(f"center_crop target {tuple(target)} exceeds input dims {m.dims}")
    return pad_or_crop(m, target)


def resize(m: MultiChannelVolume, target: Dims = (96, 96, 96), method: str = "trilinear") -> MultiChannelVolume:
    """Interpolate every channel to the target dims, then clamp to [0,1]."""
    order = _interpolation_order(method, RESIZE_METHODS)
    target = tuple(int(t) for t in target)  # type: ignore[assignment]
    if target == m.dims:
        return m.replace(m.channels.copy())

    scale = [n / t for n, t in zip(m.dims, target)]
    channels = np.stack([_resample_grid(c, target, scale, order) for c in m.channels])
    return m.replace(np.clip(channels, 0.0, 1.0).astype(np.float32))


def augment(m: MultiChannelVolume, cfg: AugmentConfig, rng: np.random.Generator) -> MultiChannelVolume:
    """
    Apply random flips, intensity shift, gamma and smoothing.

    Every draw is consumed whether or not its transform is enabled, so the
    stream position after augment is independent of the config.
    """
    data = m.channels

    flip_draws = rng.random(3)
    for axis in range(3):
        if cfg.enable_flip and flip_draws[axis] < cfg.flip_prob[axis]:
            data = np.flip(data, axis=axis + 1)

    shift_draw = rng.random()
    delta = rng.uniform(-cfg.intensity_shift_offset, cfg.intensity_shift_offset)
    gamma_draw = rng.random()
    gamma = rng.uniform(*cfg.gamma_range)
    blur_draw = rng.random()
    sigma = rng.uniform(*cfg.blur_sigma_range)

    if cfg.enable_shift and shift_draw < cfg.shift_prob:
        data = np.clip(data + np.float32(delta), 0.0, 1.0)
    if cfg.enable_gamma and gamma_draw < cfg.gamma_prob:
        data = np.power(np.clip(data, 0.0, 1.0), np.float32(gamma))
    if cfg.enable_blur and blur_draw < cfg.blur_prob and sigma > 0:
        data = ndimage.gaussian_filter(
            data, sigma=(0.0, sigma, sigma, sigma), mode="reflect", truncate=GAUSSIAN_TRUNCATE
        )

    return m.replace(np.clip(data, 0.0, 1.0))


def crop_and_resize(
    m: MultiChannelVolume,
    side: int,
    origin: Tuple[int, int, int],
    target: Dims,
    method: str = "trilinear",
) -> MultiChannelVolume:
    """Cut a cube of ``side`` voxels at ``origin`` and resize it to ``target``."""
    if side < 1 or any(o < 0 or o + side > n for o, n in zip(origin, m.dims)):
        raise PreprocessError(f"Crop of side {side} at {tuple(origin)} does not fit dims {m.dims}")
    d, h, w = origin
    cube = m.channels[:, d : d + side, h : h + side, w : w + side]
    return resize(m.replace(cube), target, method)


def multi_crop(
    m: MultiChannelVolume,
    cfg: CropConfig,
    aug_cfg: AugmentConfig,
    rng: np.random.Generator,
    method: str = "trilinear",
) -> ViewSet:
    """
    Draw the DINO view set from a volume at the pad target size.

    Each view is a cube with side uniform in its scale range at a uniform
    valid position, resized to the model input and augmented.
    """
    if m.dims != tuple(cfg.pad_crop_target):
        raise PreprocessError(f"multi_crop expects dims {tuple(cfg.pad_crop_target)}, got {m.dims}")

    def draw(scale_range: Tuple[int, int]) -> MultiChannelVolume:
        side = int(rng.integers(scale_range[0], scale_range[1] + 1))
        origin = tuple(int(rng.integers(0, n - side + 1)) for n in m.dims)
        view = crop_and_resize(m, side, origin, cfg.model_input, method)  # type: ignore[arg-type]
        return augment(view, aug_cfg, rng)

    global_views = [draw(cfg.global_scale_range) for _ in range(cfg.n_global)]
    local_views = [draw(cfg.local_scale_range) for _ in range(cfg.n_local)]
    return ViewSet(global_views=global_views, local_views=local_views)


def prepare_canonical(
    v: Volume,
    windows: Sequence[WindowLike],
    crop_cfg: CropConfig,
    resample_method: str = "tricubic",
    target_spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> MultiChannelVolume:
    """Reorient, resample, window and pad/crop to the pad target."""
    canonical = resample_isotropic(reorient_to_ras(v), target_spacing, resample_method)
    return pad_or_crop(apply_windows(canonical, windows), crop_cfg.pad_crop_target)


def preprocess_for_eval(
    v: Volume,
    windows: Sequence[WindowLike],
    crop_cfg: CropConfig,
    resample_method: str = "tricubic",
    resize_method: str = "trilinear",
    target_spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> MultiChannelVolume:
    """Full deterministic evaluation chain ending at the model input size."""
    m = prepare_canonical(v, windows, crop_cfg, resample_method, target_spacing)
    m = center_crop(m, crop_cfg.eval_center_crop)
    return resize(m, crop_cfg.model_input, resize_method)


def preprocess_for_training(
    v: Volume,
    windows: Sequence[WindowLike],
    crop_cfg: CropConfig,
    aug_cfg: AugmentConfig,
    rng: np.random.Generator,
    resample_method: str = "tricubic",
    resize_method: str = "trilinear",
    target_spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> MultiChannelVolume:
    """Single-view training chain; augmentation runs at the pad target before cropping."""
    m = prepare_canonical(v, windows, crop_cfg, resample_method, target_spacing)
    return augment_canonical(m, crop_cfg, aug_cfg, rng, resize_method)


def augment_canonical(
    m: MultiChannelVolume,
    crop_cfg: CropConfig,
    aug_cfg: AugmentConfig,
    rng: np.random.Generator,
    resize_method: str = "trilinear",
) -> MultiChannelVolume:
    """Augment a pad-target volume, then centre-crop and resize it."""
    m = augment(m, aug_cfg, rng)
    m = center_crop(m, crop_cfg.eval_center_crop)
    return resize(m, crop_cfg.model_input, resize_method)
