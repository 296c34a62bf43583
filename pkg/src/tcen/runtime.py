"""Process-level performance settings."""

from __future__ import annotations

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_tuned = False


def tune_allocator() -> bool:
    """Keep freed blocks in the glibc heap instead of returning them to the OS.

    The recurrent kernels allocate many short-lived arrays of a few hundred
    KB; with the default thresholds each one is a fresh mmap and its pages
    fault in on first touch.  Raising both thresholds saves roughly a third
    of the step time.  Returns False (and changes nothing) off glibc.
    """
    global _tuned
    if _tuned:
        return True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    mallopt.argtypes = [ctypes.c_int, ctypes.c_int]
    ok = mallopt(_M_MMAP_THRESHOLD, 1 << 30) == 1 and mallopt(_M_TRIM_THRESHOLD, 1 << 30) == 1
    _tuned = ok
    return ok
