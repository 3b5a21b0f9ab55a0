"""BLAS worker control.

The dense shapes in this package (a few thousand rows by 64-256 columns)
run fastest with a single BLAS thread; multithreaded GEMM spends more on
synchronization than it saves. Heavy loops therefore run under a worker
cap, defaulting to 1 and overridable via the GENTLE_THREADS env var.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

from .errors import ConfigError


def worker_limit() -> int:
    raw = os.environ.get("GENTLE_THREADS", "1")
    try:
        limit = int(raw)
    except ValueError:
        raise ConfigError(f"GENTLE_THREADS must be an integer, got {raw!r}") from None
    if limit < 1:
        raise ConfigError(f"GENTLE_THREADS must be >= 1, got {limit}")
    return limit


@contextmanager
def blas_workers(limit: int | None = None):
    """Cap BLAS threads inside the block; no-op if threadpoolctl is absent."""
    limit = worker_limit() if limit is None else limit
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=limit):
        yield
