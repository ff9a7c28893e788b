"""Warm-up + cosine learning-rate schedule."""

import math


def warmup_cosine_lr(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Learning rate for optimiser update number ``step`` (0-based).

    Linear ramp from 0 to ``base_lr`` over ``warmup_steps`` updates, so the lr
    reaches ``base_lr`` exactly at step == warmup_steps (the first update after
    the warm-up pass), then half-cosine decay towards 0 at ``total_steps``.
    """
    if warmup_steps < 1 or total_steps < warmup_steps:
        raise ValueError("need 1 <= warmup_steps <= total_steps")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    decay_steps = total_steps - warmup_steps
    if decay_steps == 0:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / decay_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
