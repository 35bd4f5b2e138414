"""Translation quality and efficiency scores.

BLEU-4 is corpus level with uniform 1-4-gram weights and no smoothing.
ROUGE-L is the mean sentence-level LCS F1 (beta = 1). Scores are on a
0-100 scale.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

Tokens = Sequence


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_corpus(hyps, refs) -> None:
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")


def bleu_stats(hypotheses: Sequence[Tokens], references: Sequence[Tokens], max_order: int = 4) -> dict:
    """Clipped n-gram matches, totals and lengths summed over the corpus."""
    _check_corpus(hypotheses, references)
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return {"matches": matches, "totals": totals, "hyp_len": hyp_len, "ref_len": ref_len}


def bleu4(hypotheses: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    """Corpus BLEU-4 in [0, 100]; any zero n-gram precision gives 0."""
    st = bleu_stats(hypotheses, references, 4)
    if st["hyp_len"] == 0 or any(m == 0 for m in st["matches"]):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(st["matches"], st["totals"])) / 4.0
    c, r = st["hyp_len"], st["ref_len"]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(hyp: Tokens, ref: Tokens) -> float:
    if not hyp and not ref:
        return 1.0
    lcs = lcs_length(list(hyp), list(ref))
    if lcs == 0:
        return 0.0
    p = lcs / len(hyp)
    r = lcs / len(ref)
    return 2 * p * r / (p + r)


def rouge_l(hypotheses: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    """Mean sentence ROUGE-L F1 (plain harmonic mean) times 100."""
    _check_corpus(hypotheses, references)
    return 100.0 * sum(rouge_l_sentence(h, r) for h, r in zip(hypotheses, references)) / len(hypotheses)


def information_density(score: float, params_millions: float) -> float:
    """Score per million parameters."""
    if params_millions <= 0:
        raise ValueError(f"params_millions must be positive, got {params_millions}")
    return score / params_millions


def netscore(
    score: float,
    params_millions: float,
    macs_billions: float,
    alpha: float = 2.0,
    beta: float = 0.5,
    gamma: float = 0.5,
) -> float:
    """``20 log10(score^alpha / (params^beta * macs^gamma))``."""
    for name, val in (("score", score), ("params_millions", params_millions), ("macs_billions", macs_billions)):
        if val <= 0:
            raise ValueError(f"{name} must be positive, got {val}")
    return 20.0 * (alpha * math.log10(score) - beta * math.log10(params_millions) - gamma * math.log10(macs_billions))
