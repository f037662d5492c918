"""The full network: encoders plus global, part and relation streams for both modalities."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .encoders import TextEncoder, VisualEncoder
from .global_branch import GlobalBranch, cosine_matrix
from .pfl import PartFeatureLearning
from .prl import MultiViewNonLocal

STREAMS = ("global", "pfl", "prl")


@dataclass
class FeatureBundle:
    """Features for a batch of one modality. Shapes ``B x M``, ``B x K x M``, ``B x K x N``."""

    global_: torch.Tensor
    local: torch.Tensor | None = None
    relation: torch.Tensor | None = None
    word_scores: torch.Tensor | None = None

    def stream(self, name: str) -> torch.Tensor | None:
        return {"global": self.global_, "pfl": self.local, "prl": self.relation}[name]

    def streams(self) -> list[str]:
        return [s for s in STREAMS if self.stream(s) is not None]

    def concat(self, name: str) -> torch.Tensor:
        x = self.stream(name)
        return x if x.dim() == 2 else x.flatten(1)

    def index(self, idx) -> "FeatureBundle":
        pick = lambda x: None if x is None else x[idx]
        return FeatureBundle(pick(self.global_), pick(self.local), pick(self.relation),
                             pick(self.word_scores))

    def detach(self) -> "FeatureBundle":
        d = lambda x: None if x is None else x.detach()
        return FeatureBundle(d(self.global_), d(self.local), d(self.relation), d(self.word_scores))


class SSAN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.visual_encoder = VisualEncoder(cfg)
        self.text_encoder = TextEncoder(cfg.vocab_size, cfg.embed_dim, cfg.text_hidden)
        self.global_branch = GlobalBranch(cfg.channels, cfg.global_dim)
        self.pfl = PartFeatureLearning(cfg.channels, cfg.global_dim, cfg.parts) if cfg.use_pfl else None
        self.prl = (MultiViewNonLocal(cfg.global_dim, cfg.relation_dim, cfg.part_out_dim, cfg.parts)
                    if cfg.use_prl else None)

    def encode_images(self, images: torch.Tensor) -> FeatureBundle:
        fmap = self.visual_encoder(images)
        return self.image_streams(fmap)

    def image_streams(self, fmap: torch.Tensor) -> FeatureBundle:
        out = FeatureBundle(self.global_branch.visual(fmap))
        if self.pfl is not None:
            out.local = self.pfl.visual(fmap)
        if self.prl is not None:
            out.relation = self.prl(out.local)
        return out

    def encode_texts(self, ids: torch.Tensor, lengths: torch.Tensor) -> FeatureBundle:
        words, mask = self.text_encoder(ids, lengths)
        return self.text_streams(words, mask)

    def text_streams(self, words: torch.Tensor, mask: torch.Tensor) -> FeatureBundle:
        out = FeatureBundle(self.global_branch.textual(words, mask))
        if self.pfl is not None:
            out.local, out.word_scores = self.pfl.textual(words, mask)
        if self.prl is not None:
            out.relation = self.prl(out.local)
        return out

    def forward(self, images, ids, lengths) -> tuple[FeatureBundle, FeatureBundle]:
        return self.encode_images(images), self.encode_texts(ids, lengths)

    @staticmethod
    def similarities(visual: FeatureBundle, textual: FeatureBundle) -> dict[str, torch.Tensor]:
        """Per-stream cosine matrices, images along rows and texts along columns."""
        return {s: cosine_matrix(visual.concat(s), textual.concat(s)) for s in visual.streams()}
