"""Reference vision/text encoders with projection heads into a shared space."""

from __future__ import annotations

import hashlib
import math
import re
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, Field

TOKEN_RE = re.compile(r"[a-z0-9]+(?:[-'][a-z0-9]+)*")

TAU_INIT = 0.07
TAU_MIN, TAU_MAX = 1e-3, 10.0


class EncoderConfig(BaseModel):
    embed_dim: int = Field(64, ge=8)
    vision_channels: tuple[int, ...] = (16, 32, 32, 64)
    text_vocab: int = Field(2048, ge=16)
    text_width: int = Field(64, ge=8)
    text_init_std: float = Field(0.02, gt=0)
    tau_init: float = Field(TAU_INIT, gt=0)

    model_config = {"frozen": True, "extra": "forbid"}


@lru_cache(maxsize=65536)
def tokenize(text: str, vocab: int = 2048) -> tuple[int, ...]:
    """Hash unigrams and adjacent bigrams into ``vocab`` bins (stable across runs)."""
    words = TOKEN_RE.findall(text.lower())
    grams = words + [a + " " + b for a, b in zip(words, words[1:])]
    if not grams:
        grams = [text]
    return tuple(
        int.from_bytes(hashlib.blake2b(g.encode("utf-8"), digest_size=8).digest(), "little") % vocab
        for g in grams
    )


def normalize(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Scale to unit Euclidean norm along ``dim``; zero vectors are an error."""
    norm = torch.linalg.vector_norm(v, dim=dim, keepdim=True)
    if bool((norm == 0).any()):
        raise ValueError("cannot normalize a zero vector")
    return v / norm


def image_tensor(pixels) -> torch.Tensor:
    """H x W x 3 array -> 3 x H x W float tensor."""
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 pixels, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


class VisionEncoder(nn.Module):
    def __init__(self, channels: Sequence[int], embed_dim: int):
        super().__init__()
        layers, cin = [], 3
        for cout in channels:
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.GELU()]
            cin = cout
        self.backbone = nn.Sequential(*layers)
        self.proj = nn.Linear(cin, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = (x - 0.5) / 0.25
        return self.proj(self.backbone(x).mean(dim=(-2, -1)))


class TextEncoder(nn.Module):
    def __init__(self, vocab: int, width: int, embed_dim: int, init_std: float = 0.02):
        super().__init__()
        self.vocab = vocab
        self.embed = nn.EmbeddingBag(vocab, width, mode="mean")
        nn.init.normal_(self.embed.weight, std=init_std)
        self.proj = nn.Linear(width, embed_dim)
        # a shared bias would point every text, contexts included, the same way at init
        nn.init.zeros_(self.proj.bias)

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        ids, offsets = [], []
        for t in texts:
            offsets.append(len(ids))
            ids.extend(tokenize(t, self.vocab))
        device = self.embed.weight.device
        pooled = self.embed(torch.tensor(ids, dtype=torch.long, device=device),
                            torch.tensor(offsets, dtype=torch.long, device=device))
        return self.proj(pooled)


class DualEncoder(nn.Module):
    """Image and text towers plus a log-parameterised temperature.

    Any module exposing ``vision(images)`` and ``text(list_of_str)`` returning
    (B, embed_dim) tensors can be swapped in for the reference towers.
    """

    def __init__(self, config: EncoderConfig | None = None, vision: nn.Module | None = None,
                 text: nn.Module | None = None):
        super().__init__()
        self.config = config or EncoderConfig()
        c = self.config
        self.vision = vision if vision is not None else VisionEncoder(c.vision_channels, c.embed_dim)
        self.text = text if text is not None else TextEncoder(c.text_vocab, c.text_width, c.embed_dim, c.text_init_std)
        self.log_tau = nn.Parameter(torch.tensor(math.log(c.tau_init)))

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp().clamp(TAU_MIN, TAU_MAX)

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        """(..., 3, H, W) -> (..., d); post-projection, not normalised."""
        if images.ndim < 3 or images.shape[-3] != 3 or min(images.shape[-2:]) < 16:
            raise ValueError(f"expected (..., 3, H>=16, W>=16) images, got {tuple(images.shape)}")
        lead = images.shape[:-3]
        flat = images.reshape(-1, *images.shape[-3:]).to(self.log_tau.dtype)
        return self.vision(flat).reshape(*lead, -1)

    def encode_text(self, texts: str | Sequence[str]) -> torch.Tensor:
        single = isinstance(texts, str)
        batch = [texts] if single else list(texts)
        if not batch or any(not t for t in batch):
            raise ValueError("texts must be non-empty strings")
        out = self.text(batch)
        return out[0] if single else out

    def ensemble_text(self, variants: Sequence[str]) -> torch.Tensor:
        """Normalised mean of normalised per-variant embeddings."""
        if isinstance(variants, str) or len(variants) == 0:
            raise ValueError("need a non-empty list of variants")
        return normalize(normalize(self.encode_text(list(variants))).mean(dim=0))
