"""Image-text dual alignment.

Sentence features query visual tokens through bare scaled dot-product
attention (no learned projections). The *static* branch pairs each scene
with its own sentences; the *dynamic* branch pairs each scene with the
other scene's sentences. Both branches are tied to purely visual attention
outputs by squared-distance losses.

All functions broadcast over leading batch dimensions. Sentence sets of
different sizes are batched by padding and passing a boolean ``mask``
(True = real sentence).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .errors import ContractError, ShapeError
from .text_encoding import SentenceFeatureSet


@dataclass
class VisualFeatureGrid:
    tokens: Tensor  # (..., L, c)
    spatial: tuple[int, int]
    scene: str | None = None

    def __post_init__(self):
        if self.tokens.shape[-2] != self.spatial[0] * self.spatial[1]:
            raise ShapeError(f"{self.tokens.shape[-2]} tokens for a {self.spatial} grid")


def _unwrap_grid(f) -> tuple[Tensor, str | None]:
    if isinstance(f, VisualFeatureGrid):
        return f.tokens, f.scene
    return f, None


def _unwrap_text(t, like: Tensor) -> tuple[Tensor, str | None]:
    if isinstance(t, SentenceFeatureSet):
        return torch.as_tensor(t.features, dtype=like.dtype, device=like.device), t.scene
    return t, None


def attn(q: Tensor, k: Tensor, v: Tensor, key_mask: Tensor | None = None) -> Tensor:
    """``softmax(q k^T / sqrt(c)) v`` over the key axis.

    ``key_mask`` (True = keep) excludes padded keys. torch's softmax subtracts
    the row max, so large logits do not overflow.
    """
    c = q.shape[-1]
    if k.shape[-1] != c or v.shape[-2] != k.shape[-2]:
        raise ShapeError(f"attn shapes q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    if k.shape[-2] < 1:
        raise ShapeError("attn needs at least one key")
    scores = q @ k.transpose(-1, -2) / math.sqrt(c)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask.unsqueeze(-2), float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)


def _text_attend_mean(f: Tensor, t: Tensor, mask: Tensor | None) -> Tensor:
    if f.shape[-1] != t.shape[-1]:
        raise ShapeError(f"channel mismatch: visual {f.shape[-1]} vs text {t.shape[-1]}")
    out = attn(t, f, f)  # (..., N, c)
    if mask is None:
        return out.mean(dim=-2)
    w = mask.to(out.dtype).unsqueeze(-1)
    return (out * w).sum(dim=-2) / w.sum(dim=-2).clamp_min(1.0)


def static_align(f, t, mask: Tensor | None = None) -> Tensor:
    """Mean over a scene's own sentences of sentence-queried attention on its grid."""
    f, f_scene = _unwrap_grid(f)
    t, t_scene = _unwrap_text(t, f)
    if f_scene is not None and t_scene is not None and f_scene != t_scene:
        raise ContractError(f"static alignment pairs {t_scene} sentences with a {f_scene} grid")
    return _text_attend_mean(f, t, mask)


def static_self(f) -> Tensor:
    f, _ = _unwrap_grid(f)
    return attn(f, f, f)


def dynamic_align(f, t_other, mask: Tensor | None = None) -> Tensor:
    """Like :func:`static_align` but with the *other* scene's sentences."""
    f, f_scene = _unwrap_grid(f)
    t, t_scene = _unwrap_text(t_other, f)
    if f_scene is not None and t_scene is not None and f_scene == t_scene:
        raise ContractError(f"dynamic alignment needs the other scene's sentences, got {t_scene} for {f_scene}")
    return _text_attend_mean(f, t, mask)


def dynamic_cross(f_self, f_other) -> Tensor:
    """Grid of ``f_self`` attended by queries from the other scene's grid."""
    f_self, _ = _unwrap_grid(f_self)
    f_other, _ = _unwrap_grid(f_other)
    if f_self.shape != f_other.shape:
        raise ShapeError(f"grid shapes differ: {tuple(f_self.shape)} vs {tuple(f_other.shape)}")
    return attn(f_other, f_self, f_self)


def _pair_loss(bef_ti: Tensor, aft_ti: Tensor, bef_ii: Tensor, aft_ii: Tensor) -> Tensor:
    for vec, grid in ((bef_ti, bef_ii), (aft_ti, aft_ii)):
        if grid.ndim < 2 or vec.shape != grid.shape[:-2] + grid.shape[-1:]:
            raise ShapeError(f"cannot compare vector {tuple(vec.shape)} with grid {tuple(grid.shape)}")
    # the visual side is token-pooled so both sides are single c-vectors
    d_bef = bef_ti - bef_ii.mean(dim=-2)
    d_aft = aft_ti - aft_ii.mean(dim=-2)
    return 0.5 * ((d_bef**2).sum(-1) + (d_aft**2).sum(-1))


def static_loss(s_bef_ti: Tensor, s_aft_ti: Tensor, s_bef_ii: Tensor, s_aft_ii: Tensor) -> Tensor:
    return _pair_loss(s_bef_ti, s_aft_ti, s_bef_ii, s_aft_ii)


def dynamic_loss(d_bef_ti: Tensor, d_aft_ti: Tensor, d_bef_ii: Tensor, d_aft_ii: Tensor) -> Tensor:
    return _pair_loss(d_bef_ti, d_aft_ti, d_bef_ii, d_aft_ii)


@dataclass
class AlignedFeatures:
    static_bef: Tensor
    static_aft: Tensor
    dynamic_bef: Tensor
    dynamic_aft: Tensor

    @property
    def f_itda(self) -> Tensor:
        return torch.stack([self.static_bef, self.static_aft, self.dynamic_bef, self.dynamic_aft], dim=-2)


@dataclass
class AlignmentLosses:
    l_sa: Tensor
    l_da: Tensor

    @property
    def l_align(self) -> Tensor:
        return self.l_sa + self.l_da

    def mean(self) -> "AlignmentLosses":
        return AlignmentLosses(self.l_sa.mean(), self.l_da.mean())


def itda_forward(f_bef, f_aft, t_bef, t_aft, mask_bef: Tensor | None = None,
                 mask_aft: Tensor | None = None) -> tuple[AlignedFeatures, AlignmentLosses]:
    fb, _ = _unwrap_grid(f_bef)
    fa, _ = _unwrap_grid(f_aft)
    tb, _ = _unwrap_text(t_bef, fb)
    ta, _ = _unwrap_text(t_aft, fb)

    s_bef = static_align(fb, tb, mask_bef)
    s_aft = static_align(fa, ta, mask_aft)
    l_sa = static_loss(s_bef, s_aft, static_self(fb), static_self(fa))

    d_bef = dynamic_align(fb, ta, mask_aft)
    d_aft = dynamic_align(fa, tb, mask_bef)
    l_da = dynamic_loss(d_bef, d_aft, dynamic_cross(fb, fa), dynamic_cross(fa, fb))

    return AlignedFeatures(s_bef, s_aft, d_bef, d_aft), AlignmentLosses(l_sa, l_da)


class MultiHeadAttention(nn.Module):
    """Learned multi-head attention built on :func:`attn` (detector and model use)."""

    def __init__(self, c: int, heads: int = 8):
        super().__init__()
        if c % heads:
            raise ValueError(f"c={c} not divisible by heads={heads}")
        self.c, self.heads = c, heads
        self.q = nn.Linear(c, c)
        self.k = nn.Linear(c, c)
        self.v = nn.Linear(c, c)
        self.out = nn.Linear(c, c)

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, self.c // self.heads).transpose(-2, -3)

    def forward(self, query: Tensor, key: Tensor, value: Tensor, key_mask: Tensor | None = None) -> Tensor:
        q, k, v = self._split(self.q(query)), self._split(self.k(key)), self._split(self.v(value))
        if key_mask is not None:
            key_mask = key_mask.unsqueeze(-2)
        o = attn(q, k, v, key_mask)
        *lead, h, n, d = o.shape
        return self.out(o.transpose(-2, -3).reshape(*lead, n, h * d))


def to_numpy(x) -> np.ndarray:
    return x.detach().cpu().numpy() if isinstance(x, Tensor) else np.asarray(x)
