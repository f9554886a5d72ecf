"""Constants and enumerations for voxel-fm."""

from typing import Dict, Set, Tuple

# Supported log levels
LOG_LEVELS: Set[str] = {"DEBUG", "INFO", "WARNING", "ERROR"}
DEFAULT_LOG_LEVEL = "INFO"

# Run profiles
PROFILES: Set[str] = {"desk", "full"}
DEFAULT_PROFILE = "desk"
DEFAULT_SEED = 0

# Dataset splits
SPLITS: Tuple[str, ...] = ("train", "val", "test")
SPLIT_FRACTIONS: Tuple[float, float, float] = (0.8, 0.1, 0.1)

# Container formats
VOLUME_FORMAT_VERSION = 1
VOLUME_DTYPE = "f32le"
VOLUME_SIDECAR_SUFFIX = ".vol.json"
VOLUME_BLOB_SUFFIX = ".vol.raw"
MANIFEST_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"VXFMCKPT"
EMBEDDING_FORMAT_VERSION = 1

# Canonical orientation and the anatomical axis pairs it is built from
CANONICAL_ORIENTATION = "RAS"
AXIS_PAIRS: Tuple[Tuple[str, str], ...] = (("R", "L"), ("A", "P"), ("S", "I"))

# HU windows as (center, width)
DEFAULT_WINDOWS: Tuple[Tuple[float, float], ...] = ((40.0, 80.0), (80.0, 200.0), (600.0, 2800.0))
WINDOW_PRESETS: Dict[str, Tuple[Tuple[float, float], ...]] = {
    "ct3": DEFAULT_WINDOWS,
    "brain": ((40.0, 80.0),),
}

# Interpolation kinds and their spline orders
INTERPOLATION_ORDERS: Dict[str, int] = {"nearest": 0, "trilinear": 1, "tricubic": 3}
RESIZE_METHODS: Set[str] = {"trilinear", "tricubic"}

# Gaussian smoothing kernel truncation, in sigmas
GAUSSIAN_TRUNCATE = 4.0

# Encoder
POOLINGS: Set[str] = {"cls", "mean"}
POSITIONAL_BASE = 10000.0
INIT_STD = 0.02

# Adaptation
HEAD_KINDS: Set[str] = {"linear", "attentive"}
FINETUNE_MODES: Set[str] = {"full", "probe"}
OPTIMIZERS: Set[str] = {"sgd", "adam", "adamw"}
FEW_SHOT_KS: Tuple[int, ...] = (8, 16, 32, 64, 128, 256)

# Evaluation
DEFAULT_N_BOOT = 100
DEFAULT_N_PERM = 1000
CI_LEVEL = 0.95
MAX_BOOTSTRAP_REDRAWS = 1000
RETRIEVAL_KS: Tuple[int, ...] = (1, 5, 10)
GALLERY_MODES: Set[str] = {"all", "positives"}
ATTENTION_REDUCTIONS: Set[str] = {"mean_all", "per_layer", "per_head"}
DEGENERATE_HEATMAP_VALUE = 0.5

# CLI verbs
VERBS: Tuple[str, ...] = (
    "phantom",
    "pretrain-dino",
    "pretrain-mae",
    "finetune",
    "probe",
    "fewshot",
    "sweep",
    "evaluate",
    "retrieve",
    "attnmap",
    "cost",
    "embed",
)

# Environment
THREADS_ENV_VAR = "VOXFM_NUM_THREADS"
