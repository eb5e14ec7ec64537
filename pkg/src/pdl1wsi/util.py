"""Small helpers shared across modules."""

import os


def read_exact(fh, n: int, path) -> bytes:
    """Read exactly n bytes or raise; short reads mean a truncated file."""
    data = fh.read(n)
    if len(data) != n:
        raise ValueError(f"{path}: truncated file")
    return data


def worker_count(default: int = 1) -> int:
    """Worker cap from the PDL1_THREADS environment variable."""
    raw = os.environ.get("PDL1_THREADS", "").strip()
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"PDL1_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"PDL1_THREADS must be >= 1, got {n}")
    return n
