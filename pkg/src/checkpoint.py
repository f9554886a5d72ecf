"""Checkpoint container for voxel-fm.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header
{format_version, kind, config, tensors, optimizer, meta}, then the payload of
contiguous little-endian float32 tensors at the byte offsets listed in the
header. Optimizer tensors are stored under ``optimizer.<param>.<key>`` names.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from src.encoder import EncoderConfig, VolumeEncoder
from src.utils.constants import CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC
from src.utils.errors import CheckpointError
from src.utils.logger import setup_logger
from src.volume_store import atomic_write_bytes

logger = setup_logger(__name__)

OPTIMIZER_PREFIX = "optimizer."
_DTYPES = {str(d): d for d in (torch.float32, torch.float64, torch.float16, torch.int64, torch.int32, torch.bool)}


def _to_f32_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes()


def state_hash(tensors: Mapping[str, torch.Tensor]) -> str:
    """SHA-256 over sorted tensor names, shapes and float32 bytes."""
    digest = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name]
        digest.update(name.encode("utf-8"))
        digest.update(json.dumps(list(t.shape)).encode("utf-8"))
        digest.update(_to_f32_bytes(t))
    return digest.hexdigest()


def module_hash(module: nn.Module) -> str:
    return state_hash(module.state_dict())


def flatten_optimizer(optimizer: torch.optim.Optimizer) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    """Split an optimizer state into named tensors and a JSON-able remainder."""
    sd = optimizer.state_dict()
    tensors: Dict[str, torch.Tensor] = {}
    scalars: Dict[str, Any] = {}
    for param_id, param_state in sd["state"].items():
        for key, value in param_state.items():
            name = f"{param_id}.{key}"
            if isinstance(value, torch.Tensor):
                tensors[OPTIMIZER_PREFIX + name] = value
            else:
                scalars[name] = value
    groups = [
        {k: (list(v) if isinstance(v, tuple) else v) for k, v in group.items()}
        for group in sd["param_groups"]
    ]
    return tensors, {"param_groups": groups, "scalars": scalars}


def restore_optimizer(optimizer: torch.optim.Optimizer, checkpoint: "Checkpoint") -> None:
    """Load the optimizer state stored in a checkpoint."""
    if checkpoint.optimizer is None:
        raise CheckpointError("Checkpoint carries no optimizer state")
    state: Dict[int, Dict[str, Any]] = {}
    for name, tensor in checkpoint.tensors.items():
        if name.startswith(OPTIMIZER_PREFIX):
            param_id, key = name[len(OPTIMIZER_PREFIX) :].split(".", 1)
            state.setdefault(int(param_id), {})[key] = tensor
    for name, value in checkpoint.optimizer.get("scalars", {}).items():
        param_id, key = name.split(".", 1)
        state.setdefault(int(param_id), {})[key] = value
    try:
        optimizer.load_state_dict({"state": state, "param_groups": checkpoint.optimizer["param_groups"]})
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"Optimizer state does not match: {e}")


@dataclass
class Checkpoint:
    """Decoded checkpoint."""

    kind: str
    config: Dict[str, Any]
    tensors: Dict[str, torch.Tensor]
    optimizer: Optional[Dict[str, Any]] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def model_tensors(self, prefix: str = "") -> Dict[str, torch.Tensor]:
        """Non-optimizer tensors under ``prefix`` with the prefix stripped."""
        return {
            name[len(prefix) :]: t
            for name, t in self.tensors.items()
            if name.startswith(prefix) and not name.startswith(OPTIMIZER_PREFIX)
        }

    def state_hash(self) -> str:
        return state_hash(self.model_tensors())


def save_checkpoint(
    path: Union[str, Path],
    kind: str,
    config: Mapping[str, Any],
    tensors: Mapping[str, torch.Tensor],
    optimizer: Optional[torch.optim.Optimizer] = None,
    meta: Optional[Mapping[str, Any]] = None,
) -> Path:
    """
    Write a checkpoint.

    Args:
        path: Output path
        kind: Checkpoint kind (encoder, dino, mae, classifier)
        config: JSON-able config the tensors were built from
        tensors: Named model tensors
        optimizer: Optional optimizer whose state is stored alongside
        meta: Extra JSON-able metadata (epoch, step, metrics)

    Returns:
        Path written

    Raises:
        CheckpointError: On non-finite tensors, name clashes or I/O failure
    """
    all_tensors: Dict[str, torch.Tensor] = dict(tensors)
    optimizer_header = None
    if optimizer is not None:
        opt_tensors, optimizer_header = flatten_optimizer(optimizer)
        clash = set(opt_tensors) & set(all_tensors)
        if clash:
            raise CheckpointError(f"Tensor names clash with optimizer state: {sorted(clash)}")
        all_tensors.update(opt_tensors)

    entries = []
    chunks = []
    offset = 0
    for name, t in all_tensors.items():
        if t.is_floating_point() and not torch.isfinite(t).all():
            raise CheckpointError(f"Refusing to save non-finite tensor '{name}'")
        data = _to_f32_bytes(t)
        entries.append(
            {"name": name, "shape": list(t.shape), "dtype": str(t.dtype), "offset": offset, "nbytes": len(data)}
        )
        chunks.append(data)
        offset += len(data)

    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": kind,
        "config": dict(config),
        "tensors": entries,
        "optimizer": optimizer_header,
        "meta": dict(meta or {}),
    }
    try:
        header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    except TypeError as e:
        raise CheckpointError(f"Checkpoint header is not JSON-serialisable: {e}")

    blob = CHECKPOINT_MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + b"".join(chunks)
    out = Path(path)
    try:
        atomic_write_bytes(out, blob)
    except OSError as e:
        raise CheckpointError(f"Failed to write checkpoint {out}: {e}")
    logger.debug(f"Saved {kind} checkpoint with {len(entries)} tensors to {out}")
    return out


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint.

    Raises:
        CheckpointError: On bad magic, unsupported version or truncated payload
    """
    src = Path(path)
    try:
        blob = src.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {src}: {e}")

    magic_len = len(CHECKPOINT_MAGIC)
    if blob[:magic_len] != CHECKPOINT_MAGIC or len(blob) < magic_len + 4:
        raise CheckpointError(f"{src} is not a voxel-fm checkpoint")
    (header_len,) = struct.unpack("<I", blob[magic_len : magic_len + 4])
    start = magic_len + 4
    try:
        header = json.loads(blob[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Malformed checkpoint header in {src}: {e}")
    if not isinstance(header, dict) or header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        version = header.get("format_version") if isinstance(header, dict) else None
        raise CheckpointError(f"Unsupported checkpoint format_version {version!r} in {src}")

    payload = blob[start + header_len :]
    try:
        entries = header["tensors"]
        expected = sum(e["nbytes"] for e in entries)
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"Checkpoint header of {src} has no valid tensor table: {e!r}")
    if len(payload) != expected:
        raise CheckpointError(f"Checkpoint payload of {src} is {len(payload)} bytes, header declares {expected}")

    tensors: Dict[str, torch.Tensor] = {}
    try:
        for entry in entries:
            raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
            array = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
            tensors[entry["name"]] = torch.from_numpy(array).to(_DTYPES.get(entry["dtype"], torch.float32))
        kind, config = header["kind"], header["config"]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Malformed checkpoint header in {src}: {e!r}")

    return Checkpoint(
        kind=kind,
        config=config,
        tensors=tensors,
        optimizer=header.get("optimizer"),
        meta=header.get("meta", {}),
    )


def load_module_state(module: nn.Module, checkpoint: Checkpoint, prefix: str = "") -> None:
    """Load ``prefix``-named tensors into a module, strictly."""
    try:
        module.load_state_dict(checkpoint.model_tensors(prefix), strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint tensors under '{prefix}' do not match the module: {e}")


def save_encoder(path: Union[str, Path], encoder: VolumeEncoder, meta: Optional[Mapping[str, Any]] = None) -> Path:
    """Export an encoder on its own, as consumed by the downstream verbs."""
    tensors = {f"encoder.{k}": v for k, v in encoder.state_dict().items()}
    return save_checkpoint(path, "encoder", {"encoder": encoder.cfg.model_dump(mode="json")}, tensors, meta=meta)


def load_encoder(path: Union[str, Path]) -> VolumeEncoder:
    """Rebuild an encoder from any checkpoint that carries ``encoder.*`` tensors."""
    checkpoint = load_checkpoint(path)
    if "encoder" not in checkpoint.config:
        raise CheckpointError(f"Checkpoint {path} has no encoder config")
    encoder = VolumeEncoder(EncoderConfig(**checkpoint.config["encoder"]))
    load_module_state(encoder, checkpoint, "encoder.")
    return encoder
