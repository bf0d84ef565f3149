"""MaxStyle: adversarial style-composition augmentation for robust segmentation."""

import ctypes as _ctypes


def _tune_allocator():
    # Large conv workspaces are allocated per forward pass; with glibc's
    # default mmap threshold every one of them page-faults from scratch.
    # Raising the threshold keeps them on the heap for reuse (~5x faster
    # convolutions on small machines). Best effort, harmless to skip.
    try:
        libc = _ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except Exception:
        pass


_tune_allocator()

from . import ndtensor  # noqa: E402,F401
