"""Ranking loss, compound ranking loss with adaptive margin, ID loss and their composition.

Score arguments are tensors of matching shape (one entry per anchor) or plain floats.
"""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .config import LossConfig
from .global_branch import cosine, cosine_matrix
from .model import STREAMS, FeatureBundle

_EPS_STRONG = 1e-6


class PairScores(NamedTuple):
    pos: torch.Tensor            # S(I_p, D_p)
    img_neg_text: torch.Tensor   # S(I_p, D_n)
    neg_img_text: torch.Tensor   # S(I_n, D_p)
    weak_pos: torch.Tensor       # S(I_p, D'_p)
    neg_img_weak: torch.Tensor   # S(I_n, D'_p)


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.tensor(float(x), dtype=torch.float64)


def ranking_loss(pos, img_neg_text, neg_img_text, margin: float) -> torch.Tensor:
    """Bidirectional hinge with hardest negatives, one value per anchor."""
    pos, a, b = _t(pos), _t(img_neg_text), _t(neg_img_text)
    return F.relu(margin - pos + a) + F.relu(margin - pos + b)


def adaptive_margin(pos, weak_pos, margin: float, strict: bool = False) -> torch.Tensor:
    """alpha_2 = (lambda + 1) * alpha_1 / 2 with lambda = min(S(I_p,D'_p) / S(I_p,D_p), 1).

    The margin is a constant target: it is computed without gradient. Unless `strict`,
    lambda is clamped to [0, 1] and set to 1 when |S(I_p,D_p)| < 1e-6.
    """
    pos, weak_pos = _t(pos).detach(), _t(weak_pos).detach()
    if strict:
        lam = torch.clamp(weak_pos / pos, max=1.0)
    else:
        small = pos.abs() < _EPS_STRONG
        lam = torch.clamp(weak_pos / torch.where(small, torch.ones_like(pos), pos), 0.0, 1.0)
        lam = torch.where(small, torch.ones_like(lam), lam)
    return (lam + 1.0) * margin / 2.0


def compound_ranking_loss(scores: PairScores, cfg: LossConfig, weak_margin=None) -> torch.Tensor:
    """Strong terms with margin alpha_1 plus beta-weighted weak terms with margin alpha_2.

    alpha_2 is adaptive unless `weak_margin` fixes it.
    """
    s = PairScores(*map(_t, scores))
    strong = ranking_loss(s.pos, s.img_neg_text, s.neg_img_text, cfg.margin)
    if cfg.beta == 0:
        return strong
    if weak_margin is None:
        alpha2 = adaptive_margin(s.pos, s.weak_pos, cfg.margin, cfg.strict_lambda)
    else:
        alpha2 = _t(weak_margin)
    weak = F.relu(alpha2 - s.weak_pos + s.img_neg_text) + F.relu(alpha2 - s.weak_pos + s.neg_img_weak)
    return strong + cfg.beta * weak


def id_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy; labels must index a class."""
    n = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"identity label out of range [0, {n})")
    return F.cross_entropy(logits, labels)


def mine_hard_negatives(sim: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Hardest cross-identity text per image row and image per text column.

    `sim[i, j]` scores image i against text j, both batches sharing `labels`.
    Returns (D_n index per anchor, I_n index per anchor); ties go to the lowest index.
    """
    same = labels[:, None] == labels[None, :]
    if same.all(dim=1).any():
        raise ValueError("no negatives available")
    masked = sim.detach().masked_fill(same, float("-inf"))
    return masked.argmax(dim=1), masked.argmax(dim=0)


class IdentityHeads(nn.Module):
    """One classifier per feature-stream position, each shared by both modalities."""

    def __init__(self, num_classes: int, global_dim: int, part_dim: int | None = None,
                 relation_dim: int | None = None, parts: int = 0):
        super().__init__()
        self.global_ = nn.Linear(global_dim, num_classes)
        self.pfl = (nn.ModuleList(nn.Linear(part_dim, num_classes) for _ in range(parts))
                    if part_dim else None)
        self.prl = (nn.ModuleList(nn.Linear(relation_dim, num_classes) for _ in range(parts))
                    if relation_dim else None)

    def logits(self, stream: str, feats: torch.Tensor) -> list[torch.Tensor]:
        if stream == "global":
            return [self.global_(feats)]
        heads = self.pfl if stream == "pfl" else self.prl
        return [h(feats[:, k]) for k, h in enumerate(heads)]


def stream_pair_scores(vis: torch.Tensor, txt: torch.Tensor, txt_weak: torch.Tensor,
                       labels: torch.Tensor) -> PairScores:
    """Gather the five scores of the compound loss for every anchor of a batch."""
    sim = cosine_matrix(vis, txt)
    d_n, i_n = mine_hard_negatives(sim, labels)
    idx = torch.arange(len(labels))
    return PairScores(
        pos=sim[idx, idx],
        img_neg_text=sim[idx, d_n],
        neg_img_text=sim[i_n, idx],
        weak_pos=cosine(vis, txt_weak),
        neg_img_weak=cosine(vis[i_n], txt_weak),
    )


def total_loss(visual: FeatureBundle, textual: FeatureBundle, weak_textual: FeatureBundle,
               labels: torch.Tensor, heads: IdentityHeads, cfg: LossConfig
               ) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum over streams of (CR loss on the concatenated feature + ID losses).

    ID losses are applied to every part feature of both modalities and averaged over
    those (``id_reduction="sum"`` adds them instead); CR losses use the concatenation of
    parts. Anchors are averaged.
    """
    total = visual.global_.new_zeros(())
    breakdown: dict[str, float] = {}
    for name, weight in zip(STREAMS, cfg.stream_weights):
        if weight == 0 or visual.stream(name) is None:
            continue
        scores = stream_pair_scores(visual.concat(name), textual.concat(name),
                                    weak_textual.concat(name), labels)
        cr = compound_ranking_loss(scores, cfg).mean()
        terms = [id_loss(z, labels)
                 for feats in (visual.stream(name), textual.stream(name))
                 for z in heads.logits(name, feats)]
        ident = sum(terms) / (len(terms) if cfg.id_reduction == "mean" else 1)
        breakdown[f"L_cr_{name}"] = float(cr.detach())
        breakdown[f"L_id_{name}"] = float(ident.detach())
        total = total + weight * (cr + ident)
    breakdown["total"] = float(total.detach())
    return total, breakdown
