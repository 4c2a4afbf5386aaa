"""Sentence embeddings for the extracted reasoning text.

Two encoders share one interface: a dependency-free hashed bag-of-words
(``toy_hash``) and an adapter around an external embedding service
(``pretrained_adapter``). Features are frozen; nothing here is trained.
"""
from __future__ import annotations

import hashlib
import string
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import EncoderError, InputError, ShapeError


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "toy_hash"
    c: int = 64
    seed: int = 0
    adapter_endpoint: str | None = None
    adapter_timeout: float = 30.0

    def __post_init__(self):
        if self.kind not in ("toy_hash", "pretrained_adapter"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.c <= 0:
            raise ValueError("c must be positive")
        if self.kind == "pretrained_adapter" and not self.adapter_endpoint:
            raise ValueError("pretrained_adapter needs adapter_endpoint")


@dataclass
class SentenceFeatureSet:
    features: np.ndarray
    sentences: tuple[str, ...]
    scene: str = "before"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.sentences = tuple(self.sentences)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ShapeError(f"expected (N>=1, c) features, got {self.features.shape}")
        if self.features.shape[0] != len(self.sentences):
            raise ShapeError("feature rows do not match sentence count")
        if not np.isfinite(self.features).all():
            raise ValueError("non-finite sentence features")

    @property
    def c(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]


def tokenize_sentence(sentence: str) -> list[str]:
    """Lowercase whitespace tokens with surrounding punctuation removed."""
    toks = (t.strip(string.punctuation) for t in sentence.lower().split())
    return [t for t in toks if t]


@lru_cache(maxsize=65536)
def _token_vector(token: str, seed: int, c: int) -> np.ndarray:
    h = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
    vec = np.random.default_rng([seed, c, h]).standard_normal(c)
    vec.flags.writeable = False
    return vec


def _toy_hash(sentences: Sequence[str], spec: EncoderSpec) -> np.ndarray:
    rows = []
    for s in sentences:
        toks = tokenize_sentence(s)
        if not toks:
            raise InputError(f"empty sentence: {s!r}")
        v = np.mean([_token_vector(t, spec.seed, spec.c) for t in toks], axis=0)
        rows.append(v / np.linalg.norm(v))
    return np.stack(rows)


def adapter_projection(in_dim: int, c: int) -> np.ndarray:
    """Frozen identity-initialised ``(c, in_dim)`` map (truncates or zero-pads)."""
    return np.eye(c, in_dim)


def _adapter(sentences: Sequence[str], spec: EncoderSpec) -> np.ndarray:
    from .rte import post_json

    try:
        body = post_json(spec.adapter_endpoint.rstrip("/") + "/embed", {"texts": list(sentences)},
                         timeout=spec.adapter_timeout)
        vecs = np.asarray(body["vectors"], dtype=np.float64)
    except (OSError, KeyError, ValueError) as exc:
        raise EncoderError(f"embedding adapter at {spec.adapter_endpoint} failed: {exc}") from exc
    if vecs.ndim != 2 or vecs.shape[0] != len(sentences):
        raise EncoderError(f"adapter returned shape {vecs.shape} for {len(sentences)} sentences")
    return vecs @ adapter_projection(vecs.shape[1], spec.c).T


def encode_sentences(sentences: Sequence[str], spec: EncoderSpec = EncoderSpec(),
                     scene: str = "before") -> SentenceFeatureSet:
    sentences = list(sentences)
    if not sentences:
        raise InputError("no sentences to encode")
    for s in sentences:
        if not s.strip():
            raise InputError("empty sentence")
    feats = _toy_hash(sentences, spec) if spec.kind == "toy_hash" else _adapter(sentences, spec)
    return SentenceFeatureSet(feats, tuple(sentences), scene)


def concat_rte(before: SentenceFeatureSet, after: SentenceFeatureSet) -> np.ndarray:
    """Stack before rows then after rows into the ``(N + M, c)`` RTE feature."""
    if before.c != after.c:
        raise ShapeError(f"channel mismatch {before.c} vs {after.c}")
    return np.concatenate([before.features, after.features], axis=0)
