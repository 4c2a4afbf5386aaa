"""Straight-line float64 reference implementations used only by the tests.

Deliberately written without torch and with explicit loops so they share no
code path with the package.
"""
import math
from collections import Counter

import numpy as np


def softmax_row(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def attn(Q, K, V):
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    c = Q.shape[1]
    out = np.zeros((Q.shape[0], V.shape[1]))
    for i in range(Q.shape[0]):
        scores = [float(np.dot(Q[i], K[j])) / math.sqrt(c) for j in range(K.shape[0])]
        w = softmax_row(scores)
        for j in range(K.shape[0]):
            out[i] += w[j] * V[j]
    return out


def text_mean(f, t):
    acc = np.zeros(f.shape[1])
    for n in range(t.shape[0]):
        acc += attn(t[n:n + 1], f, f)[0]
    return acc / t.shape[0]


def itda(f_bef, f_aft, t_bef, t_aft):
    """Returns (f_itda 4 x c, l_sa, l_da)."""
    s_bef = text_mean(f_bef, t_bef)
    s_aft = text_mean(f_aft, t_aft)
    ss_bef = attn(f_bef, f_bef, f_bef).mean(axis=0)
    ss_aft = attn(f_aft, f_aft, f_aft).mean(axis=0)
    l_sa = 0.5 * (np.sum((s_bef - ss_bef) ** 2) + np.sum((s_aft - ss_aft) ** 2))
    d_bef = text_mean(f_bef, t_aft)
    d_aft = text_mean(f_aft, t_bef)
    dd_bef = attn(f_aft, f_bef, f_bef).mean(axis=0)
    dd_aft = attn(f_bef, f_aft, f_aft).mean(axis=0)
    l_da = 0.5 * (np.sum((d_bef - dd_bef) ** 2) + np.sum((d_aft - dd_aft) ** 2))
    return np.stack([s_bef, s_aft, d_bef, d_aft]), l_sa, l_da


def linear(x, W, b):
    return x @ np.asarray(W, dtype=np.float64).T + np.asarray(b, dtype=np.float64)


def multihead(x, p, prefix, heads):
    q = linear(x, p[f"{prefix}.q.weight"], p[f"{prefix}.q.bias"])
    k = linear(x, p[f"{prefix}.k.weight"], p[f"{prefix}.k.bias"])
    v = linear(x, p[f"{prefix}.v.weight"], p[f"{prefix}.v.bias"])
    d = q.shape[1] // heads
    outs = [attn(q[:, h * d:(h + 1) * d], k[:, h * d:(h + 1) * d], v[:, h * d:(h + 1) * d]) for h in range(heads)]
    return linear(np.concatenate(outs, axis=1), p[f"{prefix}.out.weight"], p[f"{prefix}.out.bias"])


def detector(f_bef, f_aft, p, heads):
    x = linear(np.concatenate([f_bef, f_aft, f_bef - f_aft], axis=1), p["proj.weight"], p["proj.bias"])
    return multihead(x, p, "attn", heads)


# --- metrics -----------------------------------------------------------------

def _grams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def cider_dense(records, n=4):
    """Plain CIDEr via explicit TF-IDF matrices over the full n-gram vocabulary."""
    docs = len(records)
    vocab = {}
    for rec in records:
        for toks in [rec["hyp"], *rec["refs"]]:
            for k in range(1, n + 1):
                for g in _grams(toks, k):
                    vocab.setdefault(g, len(vocab))
    df = np.zeros(len(vocab))
    for rec in records:
        present = np.zeros(len(vocab), dtype=bool)
        for toks in rec["refs"]:
            for k in range(1, n + 1):
                for g in _grams(toks, k):
                    present[vocab[g]] = True
        df += present
    idf = np.log(docs) - np.log(np.maximum(df, 1.0))
    order = np.array([len(g) for g in sorted(vocab, key=vocab.get)])

    def vec(toks):
        v = np.zeros(len(vocab))
        for k in range(1, n + 1):
            for g, c in _grams(toks, k).items():
                v[vocab[g]] = c
        return v * idf

    scores = []
    for rec in records:
        h = vec(rec["hyp"])
        per_ref = []
        for toks in rec["refs"]:
            r = vec(toks)
            sims = []
            for k in range(1, n + 1):
                m = order == k
                nh, nr = np.linalg.norm(h[m]), np.linalg.norm(r[m])
                sims.append(0.0 if nh == 0 or nr == 0 else float(h[m] @ r[m]) / (nh * nr))
            per_ref.append(np.mean(sims))
        scores.append(10.0 * np.mean(per_ref))
    return float(np.mean(scores))


def lcs_recursive(a, b):
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def rouge_l_maxf(records, beta=1.2):
    total = 0.0
    for rec in records:
        best = 0.0
        for ref in rec["refs"]:
            lcs = lcs_recursive(tuple(rec["hyp"]), tuple(ref))
            if lcs:
                p, r = lcs / len(rec["hyp"]), lcs / len(ref)
                best = max(best, (1 + beta**2) * p * r / (r + beta**2 * p))
        total += best
    return total / len(records)


def central_difference(fn, x, eps=1e-3):
    """Numerical gradient of scalar ``fn`` w.r.t. numpy array ``x`` (modified in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = fn()
        x[idx] = old - eps
        fm = fn()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g
