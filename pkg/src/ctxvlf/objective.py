"""Scaled text-image similarity and the symmetric contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Optional, Sequence

import torch


@dataclass
class LossValue:
    total: torch.Tensor
    text_to_image: torch.Tensor
    image_to_text: torch.Tensor

    def __float__(self) -> float:
        return float(self.total)


def similarity(texts: torch.Tensor, images: torch.Tensor, tau: float | torch.Tensor) -> torch.Tensor:
    """scores[i, j] = <text_i, image_j> / tau for unit-norm rows."""
    if texts.shape[0] != images.shape[0]:
        raise ValueError(f"length mismatch: {texts.shape[0]} texts vs {images.shape[0]} images")
    if texts.shape[0] < 1:
        raise ValueError("empty batch")
    if float(torch.as_tensor(tau).detach()) <= 0:
        raise ValueError("temperature must be positive")
    return texts @ images.T / tau


def category_targets(keys: Sequence[Hashable], dtype=torch.float32) -> torch.Tensor:
    """Binary match matrix: 1 where two samples share a category key."""
    codes = {}
    idx = torch.tensor([codes.setdefault(k, len(codes)) for k in keys])
    return (idx[:, None] == idx[None, :]).to(dtype)


def _soft_ce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    weights = targets / targets.sum(dim=1, keepdim=True)
    return -(weights * torch.log_softmax(logits, dim=1)).sum(dim=1).mean()


def contrastive_loss(scores: torch.Tensor, targets: Optional[torch.Tensor] = None) -> LossValue:
    """Mean of the text->image (row) and image->text (column) cross-entropies.

    ``targets`` is a non-negative match matrix (default identity); each row
    and column is normalised to a distribution over its positives.
    """
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {tuple(scores.shape)}")
    if targets is None:
        targets = torch.eye(scores.shape[0], dtype=scores.dtype, device=scores.device)
    targets = targets.to(scores.dtype)
    t2i = _soft_ce(scores, targets)
    i2t = _soft_ce(scores.T, targets.T)
    return LossValue(total=(t2i + i2t) / 2, text_to_image=t2i, image_to_text=i2t)


def combined_loss(losses: Sequence[LossValue]) -> LossValue:
    """Sum the per-variant losses into one value for a single backward pass."""
    if not losses:
        raise ValueError("no losses to combine")
    return LossValue(
        total=sum((l.total for l in losses[1:]), losses[0].total),
        text_to_image=sum((l.text_to_image for l in losses[1:]), losses[0].text_to_image),
        image_to_text=sum((l.image_to_text for l in losses[1:]), losses[0].image_to_text),
    )
