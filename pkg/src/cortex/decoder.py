"""Caption vocabulary and the transformer decoder over fused memory tokens."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import InputError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

SEG_ICD, SEG_ITDA, SEG_RTE = 0, 1, 2


class Vocab:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(SPECIALS)}
        for t in tokens:
            if t not in self.stoi:
                self.stoi[t] = len(self.itos)
                self.itos.append(t)

    @classmethod
    def build(cls, captions: Iterable[str]) -> "Vocab":
        """Vocabulary from (training-split) captions, tokens sorted for stability."""
        return cls(sorted({t for cap in captions for t in cap.lower().split()}))

    def __len__(self) -> int:
        return len(self.itos)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos))

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text().splitlines()
        if tuple(lines[: len(SPECIALS)]) != SPECIALS:
            raise InputError(f"{path}: vocab must start with {SPECIALS}")
        return cls(lines[len(SPECIALS):])


def tokenize(caption: str, vocab: Vocab) -> list[int]:
    return [BOS] + [vocab.stoi.get(t, UNK) for t in caption.lower().split()] + [EOS]


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        words.append(vocab.itos[i])
    return " ".join(words)


def pad_batch(seqs: Sequence[Sequence[int]], max_len: int) -> Tensor:
    out = torch.full((len(seqs), max_len), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        if len(s) > max_len:
            raise InputError(f"caption of {len(s)} tokens exceeds max length {max_len}")
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    c: int = 64
    heads: int = 8
    layers: int = 2
    max_len: int = 20
    dropout: float = 0.1
    max_grid: int = 64

    def __post_init__(self):
        if self.c % self.heads:
            raise ValueError(f"c={self.c} must be divisible by heads={self.heads}")


@dataclass
class MemoryBundle:
    """Decoder memory rows with their origin.

    ``segments`` tags each row icd/itda/rte; ``slots`` is the position within
    the segment (grid index for icd, branch index for itda, 0/1 = before/after
    scene for rte). ``pad_mask`` is True on padding rows.
    """

    tokens: Tensor  # (B, R, c)
    segments: Tensor  # (B, R) long
    slots: Tensor  # (B, R) long
    pad_mask: Tensor  # (B, R) bool

    @classmethod
    def assemble(cls, f_icd: Tensor, f_itda: Tensor | None = None, t_bef: Tensor | None = None,
                 mask_bef: Tensor | None = None, t_aft: Tensor | None = None,
                 mask_aft: Tensor | None = None) -> "MemoryBundle":
        b, L, _ = f_icd.shape
        dev = f_icd.device
        parts = [f_icd]
        segs = [torch.full((b, L), SEG_ICD, device=dev)]
        slots = [torch.arange(L, device=dev).expand(b, L)]
        pads = [torch.zeros(b, L, dtype=torch.bool, device=dev)]
        if f_itda is not None:
            parts.append(f_itda)
            segs.append(torch.full((b, 4), SEG_ITDA, device=dev))
            slots.append(torch.arange(4, device=dev).expand(b, 4))
            pads.append(torch.zeros(b, 4, dtype=torch.bool, device=dev))
        for scene, (t, m) in enumerate(((t_bef, mask_bef), (t_aft, mask_aft))):
            if t is None:
                continue
            n = t.shape[1]
            parts.append(t.to(f_icd.dtype))
            segs.append(torch.full((b, n), SEG_RTE, device=dev))
            slots.append(torch.full((b, n), scene, device=dev))
            pads.append(torch.zeros(b, n, dtype=torch.bool, device=dev) if m is None else ~m)
        return cls(torch.cat(parts, 1), torch.cat(segs, 1).long(), torch.cat(slots, 1).long(),
                   torch.cat(pads, 1))


class CaptionDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.c
        self.embed = nn.Embedding(cfg.vocab_size, c, padding_idx=PAD)
        self.pos = nn.Embedding(cfg.max_len, c)
        self.mem_norm = nn.LayerNorm(c)
        self.seg_embed = nn.Embedding(3, c)
        self.icd_pos = nn.Embedding(cfg.max_grid, c)
        self.itda_slot = nn.Embedding(4, c)
        self.rte_scene = nn.Embedding(2, c)
        layer = nn.TransformerDecoderLayer(c, cfg.heads, 4 * c, cfg.dropout, activation="gelu", batch_first=True,
                                           norm_first=True)
        self.layers = nn.TransformerDecoder(layer, cfg.layers)
        self.final_norm = nn.LayerNorm(c)
        self.head = nn.Linear(c, cfg.vocab_size)
        # zero head: the untrained model predicts a uniform distribution
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def memory_embed(self, mem: MemoryBundle) -> Tensor:
        slot = torch.zeros_like(mem.tokens)
        seg = mem.segments.unsqueeze(-1)
        slot = torch.where(seg == SEG_ICD, self.icd_pos(mem.slots.clamp(max=self.cfg.max_grid - 1)), slot)
        slot = torch.where(seg == SEG_ITDA, self.itda_slot(mem.slots.clamp(max=3)), slot)
        slot = torch.where(seg == SEG_RTE, self.rte_scene(mem.slots.clamp(max=1)), slot)
        return self.mem_norm(mem.tokens) + self.seg_embed(mem.segments) + slot

    def forward(self, mem: MemoryBundle, ids: Tensor, memory: Tensor | None = None) -> Tensor:
        """Logits ``(B, T, V)`` for input ids ``(B, T)`` under a causal mask."""
        t = ids.shape[1]
        if t > self.cfg.max_len:
            raise InputError(f"sequence length {t} exceeds max length {self.cfg.max_len}")
        if memory is None:
            memory = self.memory_embed(mem)
        x = self.embed(ids) + self.pos(torch.arange(t, device=ids.device))
        causal = torch.triu(torch.full((t, t), float("-inf"), dtype=x.dtype, device=ids.device), diagonal=1)
        h = self.layers(x, memory, tgt_mask=causal, memory_key_padding_mask=mem.pad_mask)
        return self.head(self.final_norm(h))


def caption_loss(logits: Tensor, targets: Tensor) -> Tensor:
    """Cross-entropy averaged over non-pad target positions."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=PAD)


def decode_train(decoder: CaptionDecoder, mem: MemoryBundle, gt_ids: Tensor) -> tuple[Tensor, Tensor]:
    """Teacher forcing on ``gt_ids`` = ``[<bos> ... <eos> <pad>...]`` rows."""
    if gt_ids.shape[1] > decoder.cfg.max_len + 1:
        raise InputError(f"caption length {gt_ids.shape[1]} exceeds max length")
    logits = decoder(mem, gt_ids[:, :-1])
    return logits, caption_loss(logits, gt_ids[:, 1:])


@torch.no_grad()
def greedy_decode(decoder: CaptionDecoder, mem: MemoryBundle, max_len: int | None = None) -> list[list[int]]:
    max_len = max_len or decoder.cfg.max_len
    memory = decoder.memory_embed(mem)
    b = memory.shape[0]
    ids = torch.full((b, 1), BOS, dtype=torch.long, device=memory.device)
    done = torch.zeros(b, dtype=torch.bool, device=memory.device)
    for _ in range(max_len - 1):
        logits = decoder(mem, ids, memory)[:, -1]
        logits[:, [PAD, BOS]] = float("-inf")
        nxt = logits.argmax(-1)  # first maximum, i.e. the lowest token id on ties
        nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
        ids = torch.cat([ids, nxt[:, None]], 1)
        done |= nxt == EOS
        if done.all():
            break
    out = []
    for row in ids[:, 1:].tolist():
        out.append(row[: row.index(EOS) + 1] if EOS in row else row)
    return out


@torch.no_grad()
def beam_decode(decoder: CaptionDecoder, mem: MemoryBundle, k: int, max_len: int | None = None) -> list[list[int]]:
    """Length-normalised beam search, one memory row at a time.

    Candidates are ranked by mean token log-probability; equal scores go to
    the lower token id (then the earlier beam).
    """
    max_len = max_len or decoder.cfg.max_len
    results = []
    for i in range(mem.tokens.shape[0]):
        sub = MemoryBundle(mem.tokens[i:i + 1], mem.segments[i:i + 1], mem.slots[i:i + 1], mem.pad_mask[i:i + 1])
        memory = decoder.memory_embed(sub)
        beams = [([BOS], 0.0)]
        finished: list[tuple[list[int], float]] = []
        for _ in range(max_len - 1):
            if not beams:
                break
            ids = torch.tensor([b[0] for b in beams], dtype=torch.long, device=memory.device)
            logp = torch.log_softmax(decoder(MemoryBundle(sub.tokens.expand(len(beams), -1, -1),
                                                          sub.segments.expand(len(beams), -1),
                                                          sub.slots.expand(len(beams), -1),
                                                          sub.pad_mask.expand(len(beams), -1)),
                                             ids, memory.expand(len(beams), -1, -1))[:, -1], -1)
            cands = []
            for bi, (seq, total) in enumerate(beams):
                for tok, lp in enumerate(logp[bi].tolist()):
                    if tok in (PAD, BOS):
                        continue
                    new_total = total + lp
                    cands.append((new_total / len(seq), tok, bi, seq + [tok], new_total))
            cands.sort(key=lambda x: (-x[0], x[1], x[2]))
            beams = []
            for score, tok, _, seq, total in cands[:k]:
                if tok == EOS:
                    finished.append((seq, score))
                else:
                    beams.append((seq, total))
        pool = finished + [(seq, total / (len(seq) - 1)) for seq, total in beams]
        best = max(pool, key=lambda x: x[1])[0]
        results.append(best[1:])
    return results


def generate(decoder: CaptionDecoder, mem: MemoryBundle, strategy: str = "greedy", k: int = 3) -> list[list[int]]:
    if strategy == "greedy":
        return greedy_decode(decoder, mem)
    if strategy == "beam":
        return beam_decode(decoder, mem, k)
    raise ValueError(f"unknown decoding strategy {strategy!r}")


def uniform_loss(vocab_size: int) -> float:
    return math.log(vocab_size)
