"""Learning-rate schedules."""

from __future__ import annotations

import math

__all__ = ["cosine_anneal"]


def cosine_anneal(base_lr: float, step: int, total_steps: int) -> float:
    """Half-cosine decay from base_lr at step 0 to 0 at step == total_steps.

    lr(t) = 0.5 * base_lr * (1 + cos(pi * t / T)); monotone non-increasing
    on [0, T].  Steps past the end are an error rather than a clamp, to
    surface schedule/loop mismatches.
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside schedule of length {total_steps}")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))
