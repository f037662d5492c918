"""Visual feature maps and textual word banks.

Tensors use PyTorch layout: a visual feature map F is ``B x C x H x W`` and a word
bank E is ``B x n x C`` with a boolean validity mask ``B x n``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ConfigError, ModelConfig


class TinyCNN(nn.Module):
    """Four conv blocks, each halving the resolution (stride 16 overall).

    The last block has no ReLU so feature maps are signed and pooled features are
    almost never exactly zero.
    """

    def __init__(self, channels: int = 32, widths: tuple[int, int, int] = (16, 32, 64)):
        super().__init__()
        layers: list[nn.Module] = []
        c_in = 3
        for c_out in (*widths, channels):
            layers += [nn.Conv2d(c_in, c_out, 3, padding=1, bias=False), nn.BatchNorm2d(c_out),
                       nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            c_in = c_out
        del layers[-2]  # final ReLU
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class ResNet50Trunk(nn.Module):
    """ResNet-50 up to layer4 (stride 32, 2048 channels), randomly initialised.

    Pretrained weights come from a flat ``.npz`` archive whose keys are the
    torchvision ``resnet50`` state-dict names (``conv1.weight``, ``bn1.running_mean``,
    ``layer3.5.conv2.weight``, ...). ``fc.*`` keys are ignored.
    """

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        self.conv1, self.bn1, self.relu, self.maxpool = net.conv1, net.bn1, net.relu, net.maxpool
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        return self.layer4(self.layer3(self.layer2(self.layer1(x))))

    def load_archive(self, path: str | Path) -> None:
        with np.load(path) as archive:
            state = {k: torch.from_numpy(archive[k]) for k in archive.files if not k.startswith("fc.")}
        self.load_state_dict(state, strict=True)


class VisualEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.image_size = tuple(cfg.image_size)
        if cfg.encoder == "tiny-cnn":
            self.backbone: nn.Module = TinyCNN(cfg.channels)
        else:
            self.backbone = ResNet50Trunk()
            if cfg.pretrained:
                self.backbone.load_archive(cfg.pretrained)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if tuple(images.shape[-2:]) != self.image_size:
            raise ValueError(
                f"expected input size {self.image_size[0]}x{self.image_size[1]}, "
                f"got {images.shape[-2]}x{images.shape[-1]}"
            )
        return self.backbone(images)


def prepare_images(batch: list[np.ndarray] | np.ndarray, flip: np.ndarray | None = None,
                   dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """uint8 ``H x W x 3`` rasters -> normalised ``B x 3 x H x W`` tensor in [-1, 1]."""
    arr = np.stack(batch) if isinstance(batch, list) else batch
    if flip is not None:
        arr = np.where(flip[:, None, None, None], arr[:, :, ::-1], arr)
    x = torch.from_numpy(np.ascontiguousarray(arr)).to(dtype).permute(0, 3, 1, 2)
    return x / 127.5 - 1.0


def partition(feature_map: torch.Tensor, parts: int) -> list[torch.Tensor]:
    """Split ``B x C x H x W`` into `parts` contiguous row bands, top to bottom."""
    h = feature_map.shape[-2]
    if parts < 1 or h % parts:
        raise ConfigError(f"feature-map height {h} is not divisible by K={parts}")
    return list(torch.split(feature_map, h // parts, dim=-2))


def reverse_valid(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Reverse each sequence's first ``lengths[b]`` steps in place; padding stays put."""
    n = x.shape[1]
    pos = torch.arange(n, device=x.device).expand(x.shape[0], n)
    idx = torch.where(pos < lengths[:, None], lengths[:, None] - 1 - pos, pos)
    return torch.gather(x, 1, idx[..., None].expand_as(x))


class TextEncoder(nn.Module):
    """Word embedding table plus a bidirectional LSTM whose states are averaged per word."""

    def __init__(self, vocab_size: int, embed_dim: int, hidden: int):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, embed_dim, padding_idx=0)
        self.forward_lstm = nn.LSTM(embed_dim, hidden, batch_first=True)
        self.backward_lstm = nn.LSTM(embed_dim, hidden, batch_first=True)

    def embed_words(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.embedding.num_embeddings):
            raise IndexError(
                f"token id out of range [0, {self.embedding.num_embeddings}): "
                f"min {int(ids.min())}, max {int(ids.max())}"
            )
        return self.embedding(ids)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """ids ``B x n``, lengths ``B`` -> (E ``B x n x C``, mask ``B x n``)."""
        if (lengths < 1).any():
            raise ValueError("every caption needs at least one token")
        mask = torch.arange(ids.shape[1], device=ids.device)[None, :] < lengths[:, None]
        x = self.embed_words(ids)
        h_fwd, _ = self.forward_lstm(x)
        h_bwd, _ = self.backward_lstm(reverse_valid(x, lengths))
        h_bwd = reverse_valid(h_bwd, lengths)
        words = 0.5 * (h_fwd + h_bwd)
        return words * mask[..., None].to(words.dtype), mask
