"""Seed and determinism helpers."""

import contextlib
import random
import zlib
from typing import Iterator, Optional, Union

import numpy as np
import torch

from src.utils.logger import setup_logger

logger = setup_logger(__name__)

SeedKey = Union[int, str]


def _key_to_int(key: SeedKey) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"Seed keys must be non-negative, got {key}")
    return int(key)


def derive_rng(seed: int, *keys: SeedKey) -> np.random.Generator:
    """
    Build a counter-based numpy generator for one stream.

    The stream depends only on ``(seed, *keys)``, so per-item and
    per-resample draws stay identical however the work is scheduled.

    Args:
        seed: Run seed
        *keys: Stream identifiers (epoch, item index, task name, ...)

    Returns:
        Independent numpy Generator
    """
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch global generators."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def configure_determinism(enabled: bool, threads: Optional[int] = None) -> None:
    """
    Switch torch into (or out of) bitwise-reproducible mode.

    Deterministic mode pins the thread count (1 unless given) so CPU
    reductions always run in the same order.
    """
    if threads is not None and threads <= 0:
        raise ValueError(f"threads must be positive, got {threads}")
    if enabled:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(threads or 1)
    else:
        torch.use_deterministic_algorithms(False)
        if threads:
            torch.set_num_threads(threads)
    logger.debug(f"Determinism={enabled}, torch threads={torch.get_num_threads()}")


@contextlib.contextmanager
def torch_seed(seed: int) -> Iterator[None]:
    """Run a block under a forked torch RNG seeded with ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield
