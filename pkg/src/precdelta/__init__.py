"""Preconditioned linear recurrences: reference, chunkwise and verification code."""
import os

__version__ = "0.1.0"

# PRECDELTA_THREADS caps BLAS threads; it only takes effect if set before
# numpy is first imported, which importing this package first guarantees.
_threads = os.environ.get("PRECDELTA_THREADS")
if _threads:
    if not _threads.isdigit() or int(_threads) < 1:
        raise ValueError(f"PRECDELTA_THREADS must be a positive integer, got {_threads!r}")
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

from .recurrence import (RecurrenceConfig, SequenceBatch, run_sequential,  # noqa: E402
                         variant_config)
from .chunkwise import full_chunkwise_run  # noqa: E402
from .autograd import backward_sequential, finite_diff_check  # noqa: E402

__all__ = ["RecurrenceConfig", "SequenceBatch", "run_sequential", "variant_config",
           "full_chunkwise_run", "backward_sequential", "finite_diff_check", "__version__"]
