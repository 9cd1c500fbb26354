"""Worker-count plumbing shared by the CLI and the compute modules."""

from __future__ import annotations

import os
from contextlib import contextmanager

import numba

from .errors import InvalidParamError

ENV_THREADS = "ATLASCRF_THREADS"


def resolve_threads(requested=None) -> int:
    """CLI --threads wins, then ATLASCRF_THREADS, then 1."""
    if requested is None:
        raw = os.environ.get(ENV_THREADS)
        if raw is None:
            return 1
        try:
            requested = int(raw)
        except ValueError:
            raise InvalidParamError(f"{ENV_THREADS} must be an integer, got {raw!r}")
    if requested < 1:
        raise InvalidParamError(f"thread count must be >= 1, got {requested}")
    return requested


@contextmanager
def num_threads(n: int):
    """Run numba-parallel sections with up to ``n`` workers.

    Requests above the machine limit are clamped; output element ownership in
    the kernels makes results independent of the count either way.
    """
    limit = numba.config.NUMBA_NUM_THREADS
    n = max(1, min(int(n), limit))
    prev = numba.get_num_threads()
    numba.set_num_threads(n)
    try:
        yield n
    finally:
        numba.set_num_threads(prev)
