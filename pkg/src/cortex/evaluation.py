"""Caption metrics (BLEU-4, ROUGE-L, CIDEr) and the total / semantic-change report."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import ConfigurationError, InputError


@dataclass
class EvalRecord:
    pair_id: str
    hypothesis: list[str]
    references: list[list[str]]
    is_semantic_change: bool = True

    def __post_init__(self):
        if not self.references:
            raise InputError(f"{self.pair_id}: no references")
        self.hypothesis = [t.lower() for t in self.hypothesis]
        self.references = [[t.lower() for t in r] for r in self.references]

    @classmethod
    def from_strings(cls, pair_id: str, hypothesis: str, references: Sequence[str],
                     is_semantic_change: bool = True) -> "EvalRecord":
        return cls(pair_id, hypothesis.split(), [r.split() for r in references], is_semantic_change)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(corpus: Sequence[EvalRecord]) -> float:
    """Corpus BLEU-4, closest reference length, no smoothing."""
    if not corpus:
        raise InputError("empty corpus")
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = ref_len = 0
    for rec in corpus:
        hyp = rec.hypothesis
        hyp_len += len(hyp)
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in rec.references)[1]
        for n in range(1, 5):
            h = ngrams(hyp, n)
            max_ref: Counter = Counter()
            for r in rec.references:
                max_ref |= ngrams(r, n)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in h.items())
            totals[n - 1] += max(0, len(hyp) - n + 1)
    if min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(hyp: Sequence[str], ref: Sequence[str], beta: float = 1.2) -> float:
    if not hyp or not ref:
        return 0.0
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def rouge_l(corpus: Sequence[EvalRecord], beta: float = 1.2) -> float:
    if not corpus:
        raise InputError("empty corpus")
    return sum(max(rouge_l_sentence(rec.hypothesis, r, beta) for r in rec.references) for rec in corpus) / len(corpus)


def cider(corpus: Sequence[EvalRecord], n: int = 4) -> float:
    """Plain CIDEr: TF-IDF n-gram cosine averaged over n = 1..4 and references, times 10.

    Document frequencies come from the references; no length penalty and no
    count clipping.
    """
    if len(corpus) < 2:
        raise ConfigurationError("CIDEr needs at least two records to define document frequency")
    df: Counter = Counter()
    for rec in corpus:
        seen = set()
        for r in rec.references:
            for k in range(1, n + 1):
                seen.update(ngrams(r, k))
        df.update(seen)
    log_docs = math.log(len(corpus))

    def tfidf(tokens):
        vecs = []
        for k in range(1, n + 1):
            vecs.append({g: c * (log_docs - math.log(max(1.0, df[g]))) for g, c in ngrams(tokens, k).items()})
        return vecs

    def cos(a, b):
        na = math.sqrt(sum(v * v for v in a.values()))
        nb = math.sqrt(sum(v * v for v in b.values()))
        if na == 0 or nb == 0:
            return 0.0
        return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)

    total = 0.0
    for rec in corpus:
        hv = tfidf(rec.hypothesis)
        per_ref = [sum(cos(hv[k], rv[k]) for k in range(n)) / n for rv in map(tfidf, rec.references)]
        total += 10.0 * sum(per_ref) / len(per_ref)
    return total / len(corpus)


METRICS = ("bleu4", "rouge_l", "cider")
EXTERNAL_METRICS = ("meteor", "spice")


def score_corpus(corpus: Sequence[EvalRecord]) -> dict[str, float]:
    if not corpus:
        return {m: float("nan") for m in METRICS}
    out = {"bleu4": bleu4(corpus), "rouge_l": rouge_l(corpus)}
    out["cider"] = cider(corpus) if len(corpus) >= 2 else float("nan")
    return out


@dataclass
class MetricReport:
    total: dict[str, float]
    semantic: dict[str, float]
    n_total: int = 0
    n_semantic: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def bleu4(self) -> float:
        return self.total["bleu4"]

    @property
    def rouge_l(self) -> float:
        return self.total["rouge_l"]

    @property
    def cider(self) -> float:
        return self.total["cider"]

    def to_dict(self) -> dict:
        return {"total": self.total, "semantic_change": self.semantic, "n_total": self.n_total,
                "n_semantic_change": self.n_semantic, "meteor": None, "spice": None, **self.meta}


def build_report(corpus: Sequence[EvalRecord], **meta) -> MetricReport:
    semantic = [r for r in corpus if r.is_semantic_change]
    return MetricReport(score_corpus(corpus), score_corpus(semantic), len(corpus), len(semantic), dict(meta))


def _fmt(x: float, scale: float = 100.0) -> str:
    return "n/a" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x * scale:.1f}"


def format_report(report: MetricReport) -> str:
    """Two-block text table; scores are shown x100 as in published tables."""
    cols = ("B", "M", "R", "C", "S")
    head = "| " + " | ".join(cols) + " | " + " | ".join(cols) + " |"
    lines = [
        f"{'Total Performance':^31}{'Semantic Change':^31}",
        head,
        "|" + "---|" * 10,
    ]
    cells = []
    for block in (report.total, report.semantic):
        cells += [_fmt(block["bleu4"]), "n/a", _fmt(block["rouge_l"]), _fmt(block["cider"]), "n/a"]
    lines.append("| " + " | ".join(cells) + " |")
    lines.append(f"(n_total={report.n_total}, n_semantic_change={report.n_semantic})")
    return "\n".join(lines)


def report_json(report: MetricReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True)


def records_from_captions(pairs: Iterable, hypotheses: Sequence[str]) -> list[EvalRecord]:
    return [EvalRecord.from_strings(p.pair_id, h, list(p.gt_captions), p.is_semantic_change)
            for p, h in zip(pairs, hypotheses)]
