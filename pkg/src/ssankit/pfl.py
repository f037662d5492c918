"""Part-specific feature learning: word attention and per-part shared projections."""
from __future__ import annotations

import torch
from torch import nn

from .encoders import partition
from .global_branch import cosine, gmp, make_projection, rmp


class WordAttention(nn.Module):
    """Row k of the weight is W_p^k; scores are independent sigmoids, not a softmax over parts.

    Zero-initialised, so an untrained module scores every word 0.5 for every part.
    """

    def __init__(self, channels: int, parts: int):
        super().__init__()
        self.score = nn.Linear(channels, parts)
        nn.init.zeros_(self.score.weight)
        nn.init.zeros_(self.score.bias)

    def forward(self, words: torch.Tensor) -> torch.Tensor:
        """``B x n x C -> B x n x K`` probabilities that word i belongs to part k."""
        return torch.sigmoid(self.score(words))


def weight_text(words: torch.Tensor, scores: torch.Tensor, k: int) -> torch.Tensor:
    """E_k: every word column scaled by its score for part k."""
    return words * scores[..., k:k + 1]


class PartFeatureLearning(nn.Module):
    def __init__(self, channels: int, dim: int, parts: int):
        super().__init__()
        self.parts = parts
        self.attention = WordAttention(channels, parts)
        self.proj = nn.ModuleList(make_projection(channels, dim) for _ in range(parts))

    def visual(self, feature_map: torch.Tensor) -> torch.Tensor:
        """``B x C x H x W -> B x K x M``, parts ordered top to bottom."""
        bands = partition(feature_map, self.parts)
        return torch.stack([p(gmp(band)) for p, band in zip(self.proj, bands)], dim=1)

    def textual(self, words: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns part features ``B x K x M`` and word-part scores ``B x n x K``."""
        scores = self.attention(words)
        feats = [p(rmp(weight_text(words, scores, k), mask)) for k, p in enumerate(self.proj)]
        return torch.stack(feats, dim=1), scores


def part_similarity(v_parts: torch.Tensor, t_parts: torch.Tensor) -> torch.Tensor:
    """Cosine of the concatenated part features (``... x K x D`` each)."""
    return cosine(v_parts.flatten(-2), t_parts.flatten(-2))
