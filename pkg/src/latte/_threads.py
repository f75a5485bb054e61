"""Honor LATTE_THREADS before numpy picks its thread pool sizes.

Must be imported before numpy anywhere in the package; 0 or unset leaves the
BLAS backend to choose (auto).
"""

import os


def apply_thread_cap() -> int:
    raw = os.environ.get("LATTE_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise SystemExit(f"error: LATTE_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise SystemExit(f"error: LATTE_THREADS must be >= 0, got {n}")
    if n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, str(n))
    return n


apply_thread_cap()
