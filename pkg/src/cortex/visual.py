"""Toy visual backbone and image-level change detector."""
from __future__ import annotations

import numpy as np
import torch
from torch import Tensor, nn

from .errors import ShapeError
from .itda import MultiHeadAttention, VisualFeatureGrid


class ConvBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv = nn.Conv2d(c, c, kernel_size=3, padding=1)
        self.act = nn.GELU()

    def forward(self, x: Tensor) -> Tensor:
        return x + self.act(self.conv(x))


class ToyBackbone(nn.Module):
    """Non-overlapping patch embedding followed by two residual conv blocks.

    Takes channels-last images ``(B, H, W, 3)`` and returns tokens
    ``(B, L, c)`` with ``L = (H / stride) * (W / stride)`` in row-major order.
    """

    def __init__(self, c: int = 64, stride: int = 8):
        super().__init__()
        self.c, self.stride = c, stride
        self.patch = nn.Conv2d(3, c, kernel_size=stride, stride=stride)
        self.blocks = nn.Sequential(ConvBlock(c), ConvBlock(c))

    def grid_shape(self, h: int, w: int) -> tuple[int, int]:
        if h % self.stride or w % self.stride:
            raise ShapeError(f"image {h}x{w} not divisible by patch stride {self.stride}")
        return h // self.stride, w // self.stride

    def forward(self, images: Tensor) -> Tensor:
        b, h, w, _ = images.shape
        self.grid_shape(h, w)
        x = self.blocks(self.patch(images.permute(0, 3, 1, 2)))
        return x.flatten(2).transpose(1, 2)


def extract_features(image, backbone: ToyBackbone, scene: str | None = None) -> VisualFeatureGrid:
    """Features for one ``(H, W, 3)`` image."""
    p = next(backbone.parameters())
    img = torch.as_tensor(np.asarray(image), dtype=p.dtype, device=p.device)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {tuple(img.shape)}")
    hw = backbone.grid_shape(img.shape[0], img.shape[1])
    return VisualFeatureGrid(backbone(img.unsqueeze(0))[0], hw, scene)


class ChangeDetector(nn.Module):
    """``SelfAttn(W [f_bef ; f_aft ; f_bef - f_aft])`` with channel concatenation."""

    def __init__(self, c: int = 64, heads: int = 8):
        super().__init__()
        self.proj = nn.Linear(3 * c, c)
        self.attn = MultiHeadAttention(c, heads)

    def forward(self, f_bef: Tensor, f_aft: Tensor) -> Tensor:
        if f_bef.shape != f_aft.shape:
            raise ShapeError(f"grid shapes differ: {tuple(f_bef.shape)} vs {tuple(f_aft.shape)}")
        x = self.proj(torch.cat([f_bef, f_aft, f_bef - f_aft], dim=-1))
        return self.attn(x, x, x)


def detect_change(f_bef, f_aft, detector: ChangeDetector) -> Tensor:
    fb = f_bef.tokens if isinstance(f_bef, VisualFeatureGrid) else f_bef
    fa = f_aft.tokens if isinstance(f_aft, VisualFeatureGrid) else f_aft
    return detector(fb, fa)
