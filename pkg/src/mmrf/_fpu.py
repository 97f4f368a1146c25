"""Scoped flush-to-zero for denormal floats.

Volume-rendering weights and softplus tails underflow into denormals, which
are orders of magnitude slower on CPU. Flushing them to zero is harmless for
training and rendering, but the processor flag is global to the thread, so it
is only raised inside the hot entry points and restored afterwards.
"""

import functools
import threading

import torch

_state = threading.local()


class flush_denormals:
    """Context manager and decorator; re-entrant."""

    def __enter__(self):
        depth = getattr(_state, "depth", 0)
        if depth == 0:
            torch.set_flush_denormal(True)
        _state.depth = depth + 1
        return self

    def __exit__(self, *exc):
        _state.depth -= 1
        if _state.depth == 0:
            torch.set_flush_denormal(False)
        return False

    def __call__(self, fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            with flush_denormals():
                return fn(*args, **kwargs)

        return wrapper
