"""Volume and dataset persistence for voxel-fm.

Volumes are stored as a JSON sidecar plus a raw little-endian float32 blob
(depth-major, then height, then width). Manifests are line-delimited JSON:
one header line declaring the tasks, then one record per line.
"""

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy import stats

from src.utils.constants import (
    AXIS_PAIRS,
    CANONICAL_ORIENTATION,
    MANIFEST_FORMAT_VERSION,
    SPLIT_FRACTIONS,
    SPLITS,
    VOLUME_BLOB_SUFFIX,
    VOLUME_DTYPE,
    VOLUME_FORMAT_VERSION,
    VOLUME_SIDECAR_SUFFIX,
)
from src.utils.errors import ManifestError, VolumeFormatError, VolumeStoreError
from src.utils.logger import setup_logger
from src.utils.seeding import derive_rng
from src.validate import ManifestValidator

logger = setup_logger(__name__)

PathLike = Union[str, os.PathLike]


def parse_orientation(code: str) -> Tuple[Tuple[int, int, int], Tuple[bool, bool, bool]]:
    """
    Decode a 3-letter orientation code.

    Letter ``k`` names the anatomical direction array axis ``k`` increases
    toward. Returns, for each canonical axis (R, A, S), the source array
    axis that carries it and whether that axis runs the opposite way.

    Raises:
        VolumeFormatError: If the code is not one of the 48 signed permutations
    """
    if not isinstance(code, str) or len(code) != 3:
        raise VolumeFormatError(f"Orientation code must be 3 letters, got {code!r}")

    source_axis = [-1, -1, -1]
    flipped = [False, False, False]
    for axis, letter in enumerate(code.upper()):
        for canonical, (positive, negative) in enumerate(AXIS_PAIRS):
            if letter in (positive, negative):
                if source_axis[canonical] != -1:
                    raise VolumeFormatError(f"Orientation code {code!r} repeats an anatomical axis")
                source_axis[canonical] = axis
                flipped[canonical] = letter == negative
                break
        else:
            raise VolumeFormatError(f"Orientation code {code!r} has invalid letter {letter!r}")

    return (source_axis[0], source_axis[1], source_axis[2]), (flipped[0], flipped[1], flipped[2])


@dataclass(eq=False)
class Volume:
    """A 3D scalar voxel grid with physical spacing and orientation."""

    voxels: np.ndarray
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: str = CANONICAL_ORIENTATION
    id: str = ""

    def __post_init__(self) -> None:
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)  # type: ignore[assignment]
        self.orientation = str(self.orientation).upper()
        self.validate()

    @property
    def dims(self) -> Tuple[int, int, int]:
        d, h, w = self.voxels.shape
        return int(d), int(h), int(w)

    def validate(self) -> None:
        """Check the Volume invariants, raising VolumeStoreError on violation."""
        if self.voxels.ndim != 3 or min(self.voxels.shape, default=0) <= 0:
            raise VolumeStoreError(
                f"Volume '{self.id}' voxels must be a non-empty 3D grid, got shape {self.voxels.shape}"
            )
        if len(self.spacing_mm) != 3 or not all(
            math.isfinite(s) and s > 0 for s in self.spacing_mm
        ):
            raise VolumeStoreError(f"Volume '{self.id}' has invalid spacing {self.spacing_mm}")
        parse_orientation(self.orientation)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing_mm == other.spacing_mm
            and self.orientation == other.orientation
            and self.id == other.id
            and self.voxels.tobytes() == other.voxels.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


def container_paths(path: PathLike) -> Tuple[Path, Path]:
    """
    Resolve the sidecar and blob paths of a volume container.

    ``path`` may be the stem, the sidecar or the blob path.
    """
    text = str(path)
    for suffix in (VOLUME_SIDECAR_SUFFIX, VOLUME_BLOB_SUFFIX):
        if text.endswith(suffix):
            text = text[: -len(suffix)]
            break
    return Path(text + VOLUME_SIDECAR_SUFFIX), Path(text + VOLUME_BLOB_SUFFIX)


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def save_volume(volume: Volume, path: PathLike) -> Path:
    """
    Write a volume in the sidecar + raw blob container.

    Args:
        volume: Volume to store
        path: Container stem (or sidecar/blob path)

    Returns:
        Path of the written sidecar

    Raises:
        VolumeStoreError: If the volume is inconsistent or the write fails
    """
    volume.validate()
    sidecar_path, blob_path = container_paths(path)

    blob = volume.voxels.astype("<f4", copy=False).tobytes(order="C")
    if len(blob) != int(np.prod(volume.dims)) * 4:
        raise VolumeStoreError(
            f"Refusing to write '{volume.id}': dims {volume.dims} do not match blob of {len(blob)} bytes"
        )
    sidecar = {
        "format_version": VOLUME_FORMAT_VERSION,
        "dims": list(volume.dims),
        "spacing_mm": list(volume.spacing_mm),
        "orientation": volume.orientation,
        "dtype": VOLUME_DTYPE,
        "id": volume.id,
    }

    try:
        atomic_write_bytes(blob_path, blob)
        atomic_write_bytes(sidecar_path, json.dumps(sidecar, indent=2, sort_keys=True).encode("utf-8"))
    except OSError as e:
        raise VolumeStoreError(f"Failed to write volume '{volume.id}' to {sidecar_path}: {e}")

    logger.debug(f"Saved volume '{volume.id}' {volume.dims} to {sidecar_path}")
    return sidecar_path


def load_volume(path: PathLike) -> Volume:
    """
    Read a volume container.

    Args:
        path: Container stem (or sidecar/blob path)

    Returns:
        Volume whose invariants hold

    Raises:
        VolumeFormatError: On malformed header, blob length mismatch or invalid spacing
        VolumeStoreError: On I/O failure
    """
    sidecar_path, blob_path = container_paths(path)
    try:
        with open(sidecar_path, "r") as f:
            header = json.load(f)
        blob = blob_path.read_bytes()
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"Malformed volume header {sidecar_path}: {e}")
    except OSError as e:
        raise VolumeStoreError(f"Cannot read volume {sidecar_path}: {e}")

    if not isinstance(header, dict):
        raise VolumeFormatError(f"Malformed volume header {sidecar_path}: expected an object")
    if header.get("format_version") != VOLUME_FORMAT_VERSION:
        raise VolumeFormatError(
            f"Unsupported volume format_version {header.get('format_version')!r} in {sidecar_path}"
        )
    if header.get("dtype") != VOLUME_DTYPE:
        raise VolumeFormatError(f"Unsupported dtype {header.get('dtype')!r} in {sidecar_path}")

    dims = header.get("dims")
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in dims)
    ):
        raise VolumeFormatError(f"Malformed dims {dims!r} in {sidecar_path}")

    spacing = header.get("spacing_mm")
    if not isinstance(spacing, list) or len(spacing) != 3:
        raise VolumeFormatError(f"Malformed spacing_mm {spacing!r} in {sidecar_path}")
    try:
        spacing_values = tuple(float(s) for s in spacing)
    except (TypeError, ValueError):
        raise VolumeFormatError(f"Malformed spacing_mm {spacing!r} in {sidecar_path}")
    if not all(math.isfinite(s) and s > 0 for s in spacing_values):
        raise VolumeFormatError(f"Invalid spacing {list(spacing_values)} in {sidecar_path}: must be positive")

    expected = int(np.prod(dims)) * 4
    if len(blob) != expected:
        raise VolumeFormatError(
            f"Blob length mismatch for {blob_path}: dims {dims} need {expected} bytes, found {len(blob)}"
        )

    voxels = np.frombuffer(blob, dtype="<f4").reshape(dims).astype(np.float32)
    try:
        return Volume(
            voxels=voxels,
            spacing_mm=spacing_values,  # type: ignore[arg-type]
            orientation=header.get("orientation", CANONICAL_ORIENTATION),
            id=str(header.get("id", sidecar_path.name[: -len(VOLUME_SIDECAR_SUFFIX)])),
        )
    except VolumeStoreError as e:
        raise VolumeFormatError(f"Invalid volume in {sidecar_path}: {e}")


class ManifestRecord(BaseModel):
    """One dataset entry: a volume, its split, labels and patient group."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    volume_id: str
    path: str
    split: Literal["train", "val", "test"]
    labels: Dict[str, int]
    group_key: str


@dataclass
class Manifest:
    """Dataset index binding volume records to task labels and splits."""

    tasks: List[str]
    records: List[ManifestRecord]
    root: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        report = ManifestValidator.validate_records(
            [r.model_dump() for r in self.records], self.tasks
        )
        if not report.is_valid:
            raise ManifestError(report.summary())
        self._id_index = {r.volume_id: i for i, r in enumerate(self.records)}

    def __len__(self) -> int:
        return len(self.records)

    def index_of(self, volume_id: str) -> int:
        try:
            return self._id_index[volume_id]
        except KeyError:
            raise ManifestError(f"Unknown volume_id '{volume_id}'")

    def resolve_path(self, record: ManifestRecord) -> Path:
        """Absolute container path of a record."""
        path = Path(record.path)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path

    def split_indices(self, split: str) -> List[int]:
        if split not in SPLITS:
            raise ManifestError(f"Unknown split '{split}'. Must be one of {list(SPLITS)}")
        return [i for i, r in enumerate(self.records) if r.split == split]

    def labels_for(self, task: str) -> np.ndarray:
        if task not in self.tasks:
            raise ManifestError(f"Unknown task '{task}'. Declared tasks: {self.tasks}")
        return np.array([r.labels[task] for r in self.records], dtype=np.int64)

    def to_frame(self) -> pd.DataFrame:
        """One row per record with one integer column per task."""
        rows = []
        for r in self.records:
            row: Dict[str, Any] = {
                "volume_id": r.volume_id,
                "path": r.path,
                "split": r.split,
                "group_key": r.group_key,
            }
            row.update({task: int(r.labels[task]) for task in self.tasks})
            rows.append(row)
        columns = ["volume_id", "path", "split", "group_key"] + list(self.tasks)
        return pd.DataFrame(rows, columns=columns)


def load_manifest(path: PathLike) -> Manifest:
    """
    Load and validate a line-delimited JSON manifest.

    Args:
        path: Manifest file path

    Returns:
        Manifest whose invariants hold

    Raises:
        ManifestError: On malformed lines, duplicate ids, leakage or missing labels
    """
    manifest_path = Path(path)
    if not manifest_path.exists():
        raise ManifestError(f"Manifest file not found: {manifest_path}")

    header: Optional[Dict[str, Any]] = None
    raw_records: List[Dict[str, Any]] = []
    with open(manifest_path, "r") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{manifest_path}:{line_no}: invalid JSON: {e}")
            if not isinstance(obj, dict):
                raise ManifestError(f"{manifest_path}:{line_no}: expected a JSON object")
            if header is None:
                header = obj
            else:
                raw_records.append(obj)

    if header is None or "tasks" not in header:
        raise ManifestError(f"{manifest_path}: first line must be a header declaring 'tasks'")
    if header.get("format_version", MANIFEST_FORMAT_VERSION) != MANIFEST_FORMAT_VERSION:
        raise ManifestError(f"{manifest_path}: unsupported format_version {header['format_version']!r}")
    tasks = header["tasks"]
    if not isinstance(tasks, list) or not all(isinstance(t, str) for t in tasks):
        raise ManifestError(f"{manifest_path}: header 'tasks' must be a list of names")

    report = ManifestValidator.validate_records(raw_records, tasks)
    if not report.is_valid:
        raise ManifestError(f"{manifest_path}: {report.summary()}")

    try:
        records = [ManifestRecord(**r) for r in raw_records]
    except ValidationError as e:
        raise ManifestError(f"{manifest_path}: schema error: {e}")

    manifest = Manifest(tasks=list(tasks), records=records, root=manifest_path.parent)
    logger.info(f"Loaded manifest with {len(manifest)} records and tasks {manifest.tasks}")
    return manifest


def save_manifest(manifest: Manifest, path: PathLike) -> Path:
    """Write a manifest; record paths are stored relative to the manifest directory."""
    manifest_path = Path(path)
    base = manifest_path.parent.resolve()
    lines = [json.dumps({"format_version": MANIFEST_FORMAT_VERSION, "tasks": manifest.tasks})]
    for record in manifest.records:
        absolute = manifest.resolve_path(record).resolve()
        try:
            stored = os.path.relpath(absolute, base)
        except ValueError:
            stored = str(absolute)
        data = record.model_dump()
        data["path"] = Path(stored).as_posix()
        lines.append(json.dumps(data, sort_keys=True))
    try:
        atomic_write_bytes(manifest_path, ("\n".join(lines) + "\n").encode("utf-8"))
    except OSError as e:
        raise ManifestError(f"Failed to write manifest {manifest_path}: {e}")
    return manifest_path


class ClassRule(BaseModel):
    """Task is positive iff ``min_count`` blobs of ``blob_class`` with radius >= ``min_radius`` exist."""

    model_config = ConfigDict(extra="forbid")

    blob_class: str
    min_count: int = Field(default=1, ge=1)
    min_radius: float = Field(default=0.0, ge=0.0)


def _default_intensities() -> Dict[str, Tuple[float, float]]:
    return {"bright": (60.0, 90.0), "dark": (-10.0, 10.0), "calcified": (300.0, 600.0)}


def _default_rules() -> Dict[str, ClassRule]:
    return {
        "bright_lesion": ClassRule(blob_class="bright"),
        "dark_lesion": ClassRule(blob_class="dark"),
        "large_bright": ClassRule(blob_class="bright", min_radius=5.0),
        "calcification": ClassRule(blob_class="calcified"),
    }


class PhantomSpec(BaseModel):
    """Procedural head-like phantom: air, optional bone shell, soft-tissue fill, lesion blobs."""

    model_config = ConfigDict(extra="forbid")

    dims: Tuple[int, int, int] = (40, 40, 40)
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: str = CANONICAL_ORIENTATION
    background_level: float = 30.0
    air_level: float = -1000.0
    skull_level: Optional[float] = 1000.0
    skull_thickness: int = Field(default=2, ge=1)
    blob_count_range: Tuple[int, int] = (0, 3)
    blob_radius_range: Tuple[int, int] = (3, 6)
    blob_intensity_ranges: Dict[str, Tuple[float, float]] = Field(default_factory=_default_intensities)
    noise_sigma: float = Field(default=5.0, ge=0.0)
    class_rules: Dict[str, ClassRule] = Field(default_factory=_default_rules)
    scans_per_patient: int = Field(default=1, ge=1)

    @field_validator("dims")
    @classmethod
    def validate_dims(cls, v: Tuple[int, int, int]) -> Tuple[int, int, int]:
        """Validate dims are positive."""
        if any(d <= 0 for d in v):
            raise ValueError(f"dims must be positive, got {v}")
        return v

    @field_validator("spacing_mm")
    @classmethod
    def validate_spacing(cls, v: Tuple[float, float, float]) -> Tuple[float, float, float]:
        """Validate spacing is positive and finite."""
        if not all(math.isfinite(s) and s > 0 for s in v):
            raise ValueError(f"spacing_mm must be positive, got {v}")
        return v

    @field_validator("orientation")
    @classmethod
    def validate_orientation(cls, v: str) -> str:
        """Validate orientation is a signed axis permutation."""
        try:
            parse_orientation(v)
        except VolumeFormatError as e:
            raise ValueError(str(e))
        return v.upper()

    @field_validator("blob_count_range", "blob_radius_range")
    @classmethod
    def validate_int_range(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        """Validate integer ranges are ordered and non-negative."""
        lo, hi = v
        if lo < 0 or hi < lo:
            raise ValueError(f"range must satisfy 0 <= lo <= hi, got {v}")
        return v

    @field_validator("blob_intensity_ranges")
    @classmethod
    def validate_intensities(cls, v: Dict[str, Tuple[float, float]]) -> Dict[str, Tuple[float, float]]:
        """Validate each class has an ordered intensity range."""
        if not v:
            raise ValueError("blob_intensity_ranges must declare at least one class")
        for name, (lo, hi) in v.items():
            if hi < lo:
                raise ValueError(f"intensity range for '{name}' is not ordered: {(lo, hi)}")
        return v

    @model_validator(mode="after")
    def validate_rules(self) -> "PhantomSpec":
        """Validate class rules reference declared blob classes."""
        for task, rule in self.class_rules.items():
            if rule.blob_class not in self.blob_intensity_ranges:
                raise ValueError(
                    f"class rule '{task}' references unknown blob class '{rule.blob_class}'"
                )
        return self

    @property
    def blob_classes(self) -> List[str]:
        return sorted(self.blob_intensity_ranges)

    @property
    def tasks(self) -> List[str]:
        return list(self.class_rules)

    def check_satisfiable(self) -> None:
        """Raise VolumeStoreError when the largest blob cannot fit the volume."""
        r_max = self.blob_radius_range[1]
        if self.blob_count_range[1] > 0 and 2 * r_max + 1 > min(self.dims):
            raise VolumeStoreError(
                f"Unsatisfiable phantom spec: blob diameter {2 * r_max + 1} exceeds dims {self.dims}"
            )

    def implied_prevalence(self, task: str) -> float:
        """
        Closed-form positive rate of a class rule.

        Blob counts are uniform over the count range, each blob picks a class
        uniformly and an integer radius uniformly, so qualifying blobs per
        volume are binomial given the count.
        """
        if task not in self.class_rules:
            raise VolumeStoreError(f"Unknown phantom task '{task}'")
        rule = self.class_rules[task]
        radii = np.arange(self.blob_radius_range[0], self.blob_radius_range[1] + 1)
        p_radius = float(np.mean(radii >= rule.min_radius))
        p_blob = p_radius / len(self.blob_classes)
        counts = np.arange(self.blob_count_range[0], self.blob_count_range[1] + 1)
        return float(np.mean(stats.binom.sf(rule.min_count - 1, counts, p_blob)))


def synthesize_phantom(
    spec: PhantomSpec, rng: np.random.Generator, volume_id: str = ""
) -> Tuple[Volume, Dict[str, int]]:
    """
    Generate one phantom volume and its task labels.

    Args:
        spec: Phantom specification
        rng: Generator consumed in a fixed draw order
        volume_id: Identifier stored on the volume

    Returns:
        (Volume, labels) with labels computed from the drawn geometry
    """
    spec.check_satisfiable()
    dims = spec.dims
    zz, yy, xx = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")

    if spec.skull_level is None:
        voxels = np.full(dims, spec.background_level, dtype=np.float64)
    else:
        center = [(d - 1) / 2.0 for d in dims]
        semi = [0.45 * d for d in dims]
        radius = np.sqrt(
            ((zz - center[0]) / semi[0]) ** 2
            + ((yy - center[1]) / semi[1]) ** 2
            + ((xx - center[2]) / semi[2]) ** 2
        )
        inner = 1.0 - spec.skull_thickness / min(semi)
        voxels = np.full(dims, spec.air_level, dtype=np.float64)
        voxels[radius <= 1.0] = spec.skull_level
        voxels[radius <= inner] = spec.background_level

    classes = spec.blob_classes
    k_lo, k_hi = spec.blob_count_range
    r_lo, r_hi = spec.blob_radius_range
    n_blobs = int(rng.integers(k_lo, k_hi + 1))
    blobs: List[Tuple[str, int]] = []
    for _ in range(n_blobs):
        blob_class = classes[int(rng.integers(len(classes)))]
        r = int(rng.integers(r_lo, r_hi + 1))
        c = [int(rng.integers(r, d - r)) for d in dims]
        lo, hi = spec.blob_intensity_ranges[blob_class]
        level = float(rng.uniform(lo, hi))
        mask = (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2 <= r * r
        voxels[mask] = level
        blobs.append((blob_class, r))

    if spec.noise_sigma > 0:
        voxels = voxels + rng.normal(0.0, spec.noise_sigma, size=dims)

    labels = {}
    for task, rule in spec.class_rules.items():
        qualifying = sum(1 for cls, r in blobs if cls == rule.blob_class and r >= rule.min_radius)
        labels[task] = int(qualifying >= rule.min_count)

    volume = Volume(
        voxels=voxels.astype(np.float32),
        spacing_mm=spec.spacing_mm,
        orientation=spec.orientation,
        id=volume_id,
    )
    return volume, labels


def _assign_splits(n_groups: int, rng: np.random.Generator) -> List[str]:
    order = rng.permutation(n_groups)
    n_train = int(round(SPLIT_FRACTIONS[0] * n_groups))
    n_val = int(round(SPLIT_FRACTIONS[1] * n_groups))
    splits = [""] * n_groups
    for rank, g in enumerate(order):
        if rank < n_train:
            splits[g] = "train"
        elif rank < n_train + n_val:
            splits[g] = "val"
        else:
            splits[g] = "test"
    return splits


def generate_phantoms(
    spec: PhantomSpec, n: int, seed: int, out_dir: PathLike
) -> Manifest:
    """
    Generate ``n`` phantoms, store them and write their manifest.

    Each phantom draws from its own stream derived from (seed, index), so the
    output is deterministic for (spec, seed, n) and per-item work can be
    split across processes. Splits are drawn over patient groups.

    Args:
        spec: Phantom specification
        n: Number of volumes (>= 1)
        seed: Generation seed
        out_dir: Output directory (volumes/ and manifest.jsonl)

    Returns:
        The written Manifest

    Raises:
        VolumeStoreError: If n < 1 or the spec is unsatisfiable
    """
    if n < 1:
        raise VolumeStoreError(f"n must be >= 1, got {n}")
    spec.check_satisfiable()

    out_path = Path(out_dir)
    volume_dir = out_path / "volumes"
    n_groups = (n + spec.scans_per_patient - 1) // spec.scans_per_patient
    group_splits = _assign_splits(n_groups, derive_rng(seed, "split"))

    records = []
    for i in range(n):
        volume_id = f"phantom_{i:05d}"
        volume, labels = synthesize_phantom(spec, derive_rng(seed, "phantom", i), volume_id)
        sidecar = save_volume(volume, volume_dir / volume_id)
        group = i // spec.scans_per_patient
        records.append(
            ManifestRecord(
                volume_id=volume_id,
                path=Path(os.path.relpath(sidecar, out_path)).as_posix(),
                split=group_splits[group],  # type: ignore[arg-type]
                labels=labels,
                group_key=f"patient_{group:05d}",
            )
        )

    manifest = Manifest(tasks=spec.tasks, records=records, root=out_path)
    save_manifest(manifest, out_path / "manifest.jsonl")

    prevalence = {t: float(np.mean([r.labels[t] for r in records])) for t in spec.tasks}
    logger.info(f"Generated {n} phantoms in {out_path}; prevalence {prevalence}")
    return manifest
