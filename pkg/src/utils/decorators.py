"""Decorators for long-running voxel-fm pipelines."""

import functools
import logging
import time
from typing import Any, Callable, TypeVar

F = TypeVar("F", bound=Callable[..., Any])


def timer(func: F) -> F:
    """
    Log the wall time of a pipeline call on the logger of its own module.

    Failed calls are logged with the time spent before the error, which is
    then re-raised unchanged.

    Args:
        func: Function to be timed

    Returns:
        Wrapped function
    """
    logger = logging.getLogger(func.__module__)

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        start = time.perf_counter()
        try:
            result = func(*args, **kwargs)
        except Exception:
            logger.warning(f"{func.__qualname__} failed after {time.perf_counter() - start:.2f}s")
            raise
        logger.info(f"{func.__qualname__} finished in {time.perf_counter() - start:.2f}s")
        return result

    return wrapper  # type: ignore[return-value]
