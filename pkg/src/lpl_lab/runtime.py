"""Process-wide runtime knobs read from the environment."""

import os

import torch

THREADS_ENV = "LPL_LAB_THREADS"


def worker_count() -> int:
    """Worker cap from ``LPL_LAB_THREADS``; 0 (or unset) means single-threaded."""
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return max(n, 0)


def configure_torch() -> int:
    """Apply the thread cap to torch. Returns the number of intra-op threads."""
    n = worker_count()
    threads = 1 if n == 0 else n
    torch.set_num_threads(threads)
    if n == 0:
        torch.use_deterministic_algorithms(True)
    return threads
