"""Corpus BLEU (13a tokenisation, exponential smoothing) and word error rate."""

from __future__ import annotations

import math
import re
from collections import Counter
from typing import List, Sequence

_13A_RULES = [
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
]


def tokenize_13a(line: str) -> List[str]:
    line = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in line:
        line = (line.replace("&quot;", '"').replace("&amp;", "&")
                .replace("&lt;", "<").replace("&gt;", ">"))
    line = f" {line} "
    for rx, sub in _13A_RULES:
        line = rx.sub(sub, line)
    return line.split()


def _ngrams(toks: Sequence[str], n: int) -> Counter:
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu(hypotheses: Sequence[str], references: Sequence[str], max_order: int = 4) -> float:
    """Corpus-level, case-sensitive BLEU in [0, 100]."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not references:
        raise ValueError("empty evaluation set")
    correct = [0] * max_order
    total = [0] * max_order
    sys_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        ht, rt = tokenize_13a(h), tokenize_13a(r)
        sys_len += len(ht)
        ref_len += len(rt)
        for n in range(1, max_order + 1):
            hc, rc = _ngrams(ht, n), _ngrams(rt, n)
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(0, len(ht) - n + 1)
    if sys_len == 0 or correct[0] == 0:
        return 0.0
    log_prec = 0.0
    smooth = 1.0
    for n in range(max_order):
        if total[n] == 0:
            return 0.0
        if correct[n] == 0:
            smooth *= 2
            p = 100.0 / (smooth * total[n])
        else:
            p = 100.0 * correct[n] / total[n]
        log_prec += math.log(p)
    bp = 1.0 if sys_len >= ref_len else math.exp(1 - ref_len / sys_len)
    return bp * math.exp(log_prec / max_order)


def edit_distance(a: Sequence[str], b: Sequence[str]) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def wer(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    """Word edits summed over the corpus divided by total reference words."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    edits = words = 0
    for h, r in zip(hypotheses, references):
        rw = r.split()
        edits += edit_distance(h.split(), rw)
        words += len(rw)
    if words == 0:
        raise ValueError("references contain no words")
    return edits / words
