"""Full change-captioning model and the tensors it trains on."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .decoder import CaptionDecoder, DecoderConfig, MemoryBundle, Vocab, decode_train, generate, detokenize, pad_batch, tokenize
from .errors import ConfigurationError
from .itda import AlignmentLosses, itda_forward
from .text_encoding import EncoderSpec, encode_sentences
from .toy_scene import ScenePair, rasterize, render_pseudo_rte
from .visual import ChangeDetector, ToyBackbone


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    c: int = 64
    heads: int = 8
    layers: int = 2
    max_len: int = 20
    dropout: float = 0.1
    stride: int = 8
    use_rte: bool = True
    use_itda: bool = True
    use_rte_memory: bool = True

    def __post_init__(self):
        if self.use_itda and not self.use_rte:
            raise ConfigurationError("ITDA needs the reasoning text: use_itda requires use_rte")


class CortexModel(nn.Module):
    """Backbone -> change detector, plus text alignment, feeding one decoder.

    With ``use_rte`` off this is the visual-only baseline (memory = f_icd).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = ToyBackbone(cfg.c, cfg.stride)
        self.detector = ChangeDetector(cfg.c, cfg.heads)
        self.decoder = CaptionDecoder(DecoderConfig(cfg.vocab_size, cfg.c, cfg.heads, cfg.layers,
                                                    cfg.max_len, cfg.dropout))

    def encode(self, img_bef: Tensor, img_aft: Tensor, t_bef: Tensor | None = None, mask_bef: Tensor | None = None,
               t_aft: Tensor | None = None, mask_aft: Tensor | None = None) -> tuple[MemoryBundle, AlignmentLosses]:
        f_bef, f_aft = self.backbone(img_bef), self.backbone(img_aft)
        f_icd = self.detector(f_bef, f_aft)
        zero = f_icd.new_zeros(f_icd.shape[0])
        losses = AlignmentLosses(zero, zero)
        f_itda = None
        if self.cfg.use_rte and self.cfg.use_itda:
            t_bef_, t_aft_ = t_bef.to(f_bef.dtype), t_aft.to(f_bef.dtype)
            aligned, losses = itda_forward(f_bef, f_aft, t_bef_, t_aft_, mask_bef, mask_aft)
            f_itda = aligned.f_itda
        if self.cfg.use_rte and self.cfg.use_rte_memory:
            mem = MemoryBundle.assemble(f_icd, f_itda, t_bef, mask_bef, t_aft, mask_aft)
        else:
            mem = MemoryBundle.assemble(f_icd, f_itda)
        return mem, losses

    def forward(self, batch: Mapping[str, Tensor]) -> tuple[Tensor, Tensor, AlignmentLosses]:
        mem, losses = self.encode(batch["img_bef"], batch["img_aft"], batch.get("t_bef"), batch.get("mask_bef"),
                                  batch.get("t_aft"), batch.get("mask_aft"))
        logits, l_cap = decode_train(self.decoder, mem, batch["captions"])
        return logits, l_cap, losses.mean()

    @torch.no_grad()
    def caption(self, batch: Mapping[str, Tensor], strategy: str = "greedy", k: int = 3) -> list[list[int]]:
        mem, _ = self.encode(batch["img_bef"], batch["img_aft"], batch.get("t_bef"), batch.get("mask_bef"),
                             batch.get("t_aft"), batch.get("mask_aft"))
        return generate(self.decoder, mem, strategy, k)


# ---------------------------------------------------------------------------
# data


def sentences_for(pair: ScenePair, rte_index: Mapping[tuple[str, str], list[str]] | None, scene: str) -> list[str]:
    """Reasoning sentences from an RTE file if available, else rendered from the scene."""
    if rte_index is not None and (pair.pair_id, scene) in rte_index:
        return rte_index[(pair.pair_id, scene)]
    return render_pseudo_rte(pair.before if scene == "before" else pair.after)


def _pad_text(feats: Sequence[np.ndarray], c: int) -> tuple[Tensor, Tensor]:
    n = max(f.shape[0] for f in feats)
    out = np.zeros((len(feats), n, c))
    mask = np.zeros((len(feats), n), dtype=bool)
    for i, f in enumerate(feats):
        out[i, : f.shape[0]] = f
        mask[i, : f.shape[0]] = True
    return torch.as_tensor(out), torch.as_tensor(mask)


def build_tensors(pairs: Sequence[ScenePair], vocab: Vocab, *, encoder: EncoderSpec, resolution: int = 40,
                  max_len: int = 20, rte_index: Mapping | None = None, cap: int = 15,
                  dtype: torch.dtype = torch.float32) -> dict[str, Tensor]:
    """Stack images, padded sentence features and caption ids for ``pairs``."""
    imgs_b = np.stack([rasterize(p.before, resolution) for p in pairs])
    imgs_a = np.stack([rasterize(p.after, resolution) for p in pairs])
    tb, ta = [], []
    for p in pairs:
        tb.append(encode_sentences(sentences_for(p, rte_index, "before")[:cap], encoder, "before").features)
        ta.append(encode_sentences(sentences_for(p, rte_index, "after")[:cap], encoder, "after").features)
    t_bef, mask_bef = _pad_text(tb, encoder.c)
    t_aft, mask_aft = _pad_text(ta, encoder.c)
    caps = pad_batch([tokenize(p.gt_captions[0], vocab) for p in pairs], max_len + 1)
    return {
        "img_bef": torch.as_tensor(imgs_b, dtype=dtype),
        "img_aft": torch.as_tensor(imgs_a, dtype=dtype),
        "t_bef": t_bef.to(dtype),
        "mask_bef": mask_bef,
        "t_aft": t_aft.to(dtype),
        "mask_aft": mask_aft,
        "captions": caps,
    }


def index_batch(data: Mapping[str, Tensor], idx: Tensor) -> dict[str, Tensor]:
    out = {k: v[idx] for k, v in data.items()}
    # trim sentence padding to the longest set in this batch
    for scene in ("bef", "aft"):
        n = int(out[f"mask_{scene}"].sum(1).max())
        out[f"t_{scene}"] = out[f"t_{scene}"][:, :n]
        out[f"mask_{scene}"] = out[f"mask_{scene}"][:, :n]
    cap_len = int((out["captions"] != 0).sum(1).max())
    out["captions"] = out["captions"][:, :cap_len]
    return out


def captions_from_ids(seqs: Sequence[Sequence[int]], vocab: Vocab) -> list[str]:
    return [detokenize(s, vocab) for s in seqs]


def tensors_from_images(img_bef: np.ndarray, img_aft: np.ndarray, sents_bef: Sequence[str] | None,
                        sents_aft: Sequence[str] | None, encoder: EncoderSpec,
                        dtype: torch.dtype = torch.float32) -> dict[str, Tensor]:
    """A one-pair batch (no captions) for inference on raw images."""
    out = {"img_bef": torch.as_tensor(np.asarray(img_bef)[None], dtype=dtype),
           "img_aft": torch.as_tensor(np.asarray(img_aft)[None], dtype=dtype)}
    if sents_bef is not None and sents_aft is not None:
        for key, sents, scene in (("bef", sents_bef, "before"), ("aft", sents_aft, "after")):
            t, m = _pad_text([encode_sentences(sents, encoder, scene).features], encoder.c)
            out[f"t_{key}"], out[f"mask_{key}"] = t.to(dtype), m
    return out
