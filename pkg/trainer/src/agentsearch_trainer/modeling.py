"""A tiny bi-encoder: frozen hashed bag-of-words base plus a low-rank adapter.

The base maps text to the mean of hashed token embeddings (frozen, seeded).
Only the rank-decomposed residual ``B @ A`` trains, mirroring adapter-style
fine-tuning at desk scale: with B initialized to zero the model starts out
exactly equal to the frozen backbone. Any real backbone can replace this
class; the trainer only needs ``encode``.
"""

from __future__ import annotations

import hashlib
import re

import torch
from torch import nn

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _bucket(token: str, buckets: int) -> int:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % buckets


class HashedBiEncoder(nn.Module):
    def __init__(self, dim: int = 64, buckets: int = 4096, rank: int = 8,
                 alpha: float = 16.0, seed: int = 0):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        base = torch.randn(buckets, dim, generator=generator) / dim ** 0.5
        self.base_embeddings = nn.Parameter(base, requires_grad=False)
        self.adapter_a = nn.Parameter(torch.randn(rank, dim, generator=generator) * 0.01)
        self.adapter_b = nn.Parameter(torch.zeros(dim, rank))
        self.scaling = alpha / rank
        self.buckets = buckets
        self.dim = dim
        self.rank = rank

    def _pool(self, texts: list[str], max_tokens: int) -> torch.Tensor:
        pooled = torch.zeros(len(texts), self.dim)
        for i, text in enumerate(texts):
            ids = [_bucket(t, self.buckets) for t in tokenize(text)[:max_tokens]]
            if ids:
                pooled[i] = self.base_embeddings[ids].mean(dim=0)
        return pooled

    def encode(self, texts: list[str], max_tokens: int = 4096) -> torch.Tensor:
        """L2-normalized embeddings, shape (len(texts), dim)."""
        pooled = self._pool(texts, max_tokens)
        adapted = pooled + self.scaling * (pooled @ self.adapter_a.T) @ self.adapter_b.T
        return nn.functional.normalize(adapted, dim=-1, eps=1e-12)

    def adapter_state(self) -> dict[str, torch.Tensor]:
        return {"adapter_a": self.adapter_a.detach().clone(),
                "adapter_b": self.adapter_b.detach().clone()}


def build_backbone(backbone_id: str, *, dim: int, buckets: int, rank: int,
                   alpha: float, seed: int) -> HashedBiEncoder:
    """Resolve a backbone name; only the built-in toy encoder ships here."""
    if backbone_id != "hashed-bow":
        raise ValueError(f"unknown backbone {backbone_id!r}; this trainer ships "
                         f"only the desk-scale 'hashed-bow' encoder")
    return HashedBiEncoder(dim=dim, buckets=buckets, rank=rank, alpha=alpha, seed=seed)
