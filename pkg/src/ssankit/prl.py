"""Part relation learning with a multi-view non-local network.

Unlike a standard non-local block every part owns its own query and key
projections, so the module is not permutation equivariant over parts.
"""
from __future__ import annotations

import torch
from torch import nn

from .global_branch import DegenerateFeatureError, cosine, make_projection


def softmax_excluding_self(sim: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax of a ``... x K x K`` matrix with the diagonal left out (set to 0)."""
    k = sim.shape[-1]
    if k < 2:
        raise ValueError("relation learning requires K >= 2")
    eye = torch.eye(k, dtype=torch.bool, device=sim.device)
    return torch.softmax(sim.masked_fill(eye, float("-inf")), dim=-1)


class MultiViewNonLocal(nn.Module):
    def __init__(self, dim: int, inner_dim: int, out_dim: int, parts: int):
        super().__init__()
        if parts < 2:
            raise ValueError("relation learning requires K >= 2")
        self.parts = parts
        self.theta = nn.ModuleList(make_projection(dim, inner_dim, bias=False) for _ in range(parts))
        self.phi = nn.ModuleList(make_projection(dim, inner_dim, bias=False) for _ in range(parts))
        self.gamma = nn.ModuleList(make_projection(inner_dim, dim) for _ in range(parts))
        self.out = nn.ModuleList(make_projection(dim, out_dim) for _ in range(parts))

    def _project(self, layers: nn.ModuleList, parts: torch.Tensor) -> torch.Tensor:
        return torch.stack([f(parts[..., k, :]) for k, f in enumerate(layers)], dim=-2)

    def relation_weights(self, parts: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """alpha ``B x K x K`` (zero diagonal) and key projections ``B x K x M'``."""
        queries = self._project(self.theta, parts)
        keys = self._project(self.phi, parts)
        if (queries.norm(dim=-1) == 0).any() or (keys.norm(dim=-1) == 0).any():
            raise DegenerateFeatureError("degenerate feature")
        sim = cosine(queries[..., :, None, :], keys[..., None, :, :])
        return softmax_excluding_self(sim), keys

    def aggregate(self, alpha: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
        """W_gamma^k applied to the alpha-weighted sum of the other parts' keys: ``B x K x M``."""
        mixed = alpha @ keys
        return self._project(self.gamma, mixed)

    def forward(self, parts: torch.Tensor) -> torch.Tensor:
        """``B x K x M -> B x K x N``."""
        alpha, keys = self.relation_weights(parts)
        return self._project(self.out, parts + self.aggregate(alpha, keys))
