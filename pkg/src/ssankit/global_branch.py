"""Global max pooling, row-wise max pooling, the shared projection and cosine scores."""
from __future__ import annotations

import torch
from torch import nn


class DegenerateFeatureError(ValueError):
    pass


def gmp(feature_map: torch.Tensor) -> torch.Tensor:
    """Channel-wise max over every spatial position: ``B x C x H x W -> B x C``."""
    return feature_map.amax(dim=(-2, -1))


def rmp(words: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-channel max over valid word positions: ``B x n x C -> B x C``."""
    if not mask.any(dim=1).all():
        raise ValueError("row-wise max pooling over a caption with every position masked")
    return words.masked_fill(~mask[..., None], float("-inf")).amax(dim=1)


def _check_norm(norm: torch.Tensor) -> None:
    if (norm == 0).any():
        raise DegenerateFeatureError("degenerate feature")


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis (broadcasting)."""
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    _check_norm(na)
    _check_norm(nb)
    return (a * b).sum(-1) / (na * nb)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """All-pairs cosine: rows of `a` (``P x D``) against rows of `b` (``Q x D``)."""
    na, nb = a.norm(dim=-1, keepdim=True), b.norm(dim=-1, keepdim=True)
    _check_norm(na)
    _check_norm(nb)
    return (a / na) @ (b / nb).T


def make_projection(in_dim: int, out_dim: int, bias: bool = True) -> nn.Linear:
    """A 1x1 convolution applied after pooling, i.e. a linear map. Bias starts at zero."""
    layer = nn.Linear(in_dim, out_dim, bias=bias)
    nn.init.kaiming_uniform_(layer.weight, a=5 ** 0.5)
    if bias:
        nn.init.zeros_(layer.bias)
    return layer


class GlobalBranch(nn.Module):
    """One projection W_g serves both modalities."""

    def __init__(self, channels: int, dim: int):
        super().__init__()
        self.proj = make_projection(channels, dim)

    def visual(self, feature_map: torch.Tensor) -> torch.Tensor:
        return self.proj(gmp(feature_map))

    def textual(self, words: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.proj(rmp(words, mask))
