"""Exam-level fusion: RMS pooling across images and additive context."""

from __future__ import annotations

from typing import Optional, Sequence

import torch

from .encoders import normalize


def _stack(vectors: Sequence[torch.Tensor] | torch.Tensor, dim: int) -> torch.Tensor:
    if isinstance(vectors, torch.Tensor):
        return vectors
    shapes = {tuple(v.shape) for v in vectors}
    if len(shapes) > 1:
        raise ValueError(f"dimension mismatch: {sorted(shapes)}")
    return torch.stack(list(vectors), dim=dim)


def rms_fuse(vectors: Sequence[torch.Tensor] | torch.Tensor, dim: int = 0) -> torch.Tensor:
    """Elementwise sqrt(mean(v_i ** 2)) over the image axis ``dim``.

    Coordinate signs are discarded and the result does not depend on the
    order of the inputs, to the last bit. Where every input coordinate is zero the
    output is 0 with gradient 0.
    """
    stacked = _stack(vectors, dim)
    if stacked.shape[dim] < 2:
        raise ValueError("rms_fuse needs at least 2 vectors")
    # summing sorted squares makes the result bitwise independent of input order
    ms = stacked.pow(2).sort(dim=dim).values.mean(dim=dim)
    positive = ms > 0
    safe = torch.where(positive, ms, torch.ones_like(ms))
    return torch.where(positive, safe.sqrt(), torch.zeros_like(ms))


def add_context(image_feature: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
    if image_feature.shape[-1] != context.shape[-1]:
        raise ValueError(f"dimension mismatch: {image_feature.shape[-1]} vs {context.shape[-1]}")
    return image_feature + context


def fuse_exam(image_embeddings: torch.Tensor, context: Optional[torch.Tensor] = None,
              apply_context: bool | torch.Tensor = True) -> torch.Tensor:
    """RMS over images (if more than one), optional additive context, then normalise.

    ``image_embeddings`` is (n, d) for one sample or (B, n, d) for a batch.
    ``apply_context`` may be a (B,) boolean mask to gate context per sample.
    """
    if image_embeddings.ndim not in (2, 3):
        raise ValueError("expected (n, d) or (B, n, d) image embeddings")
    n_axis = image_embeddings.ndim - 2
    if image_embeddings.shape[n_axis] == 0:
        raise ValueError("no image embeddings")
    if image_embeddings.shape[n_axis] > 1:
        feat = rms_fuse(image_embeddings, dim=n_axis)
    else:
        feat = image_embeddings.select(n_axis, 0)
    if context is not None:
        if isinstance(apply_context, torch.Tensor):
            gate = apply_context.to(feat.dtype).unsqueeze(-1)
            feat = add_context(feat, gate * context)
        elif apply_context:
            feat = add_context(feat, context)
    return normalize(feat)
