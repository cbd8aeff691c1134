"""
evaluation.py  --  corpus BLEU-4, stem-level BLEU, vocabulary coverage, suffix accuracy

BLEU is single-reference corpus BLEU-4 on the pipeline's own lowercased
whitespace tokenization, with brevity penalty. An n-gram order with zero
matches gets precision eps / total (eps = 1e-9, floor smoothing), so tiny
corpora don't hit log 0. No unigram match at all scores 0.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import reduce
from typing import Collection, Sequence

from text_pipeline import StemmerRules, Vocabulary, factor_sentence, stem_word

logger = logging.getLogger(__name__)

MAX_ORDER = 4
SMOOTH_EPS = 1e-9

Sentence = str | Sequence[str]


def _tokens(s: Sentence) -> list[str]:
    return s.split() if isinstance(s, str) else list(s)


@dataclass(frozen=True)
class BleuStats:
    matches: tuple[int, ...] = field(default=(0,) * MAX_ORDER)
    totals: tuple[int, ...] = field(default=(0,) * MAX_ORDER)
    hyp_len: int = 0
    ref_len: int = 0

    def __add__(self, other: BleuStats) -> BleuStats:
        return BleuStats(tuple(a + b for a, b in zip(self.matches, other.matches)),
                         tuple(a + b for a, b in zip(self.totals, other.totals)),
                         self.hyp_len + other.hyp_len, self.ref_len + other.ref_len)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hyp: Sentence, ref: Sentence) -> BleuStats:
    h, r = _tokens(hyp), _tokens(ref)
    matches, totals = [], []
    for n in range(1, MAX_ORDER + 1):
        hc, rc = _ngrams(h, n), _ngrams(r, n)
        matches.append(sum(min(c, rc[g]) for g, c in hc.items()))
        totals.append(max(len(h) - n + 1, 0))
    return BleuStats(tuple(matches), tuple(totals), len(h), len(r))


def corpus_bleu_stats(hyps: Sequence[Sentence], refs: Sequence[Sentence]) -> BleuStats:
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")
    return reduce(BleuStats.__add__, (bleu_stats(h, r) for h, r in zip(hyps, refs)), BleuStats())


def precisions(stats: BleuStats) -> list[float]:
    out = []
    for m, t in zip(stats.matches, stats.totals):
        if m > 0:
            out.append(m / t)
        else:
            out.append(SMOOTH_EPS / t if t > 0 else SMOOTH_EPS)
    return out


def brevity_penalty(stats: BleuStats) -> float:
    if stats.hyp_len == 0:
        return 0.0
    if stats.hyp_len >= stats.ref_len:
        return 1.0
    return math.exp(1.0 - stats.ref_len / stats.hyp_len)


def bleu_from_stats(stats: BleuStats) -> float:
    if stats.matches[0] == 0:
        return 0.0
    log_p = sum(math.log(p) for p in precisions(stats)) / MAX_ORDER
    return min(1.0, brevity_penalty(stats) * math.exp(log_p))


def bleu(hyps: Sequence[Sentence], refs: Sequence[Sentence]) -> float:
    return bleu_from_stats(corpus_bleu_stats(hyps, refs))


def to_stems(sentence: Sentence, rules: StemmerRules) -> list[str]:
    return factor_sentence(_tokens(sentence), rules)[0]


def stem_bleu(hyps: Sequence[Sentence], refs: Sequence[Sentence], rules: StemmerRules) -> float:
    """BLEU after both sides are reduced to their stems."""
    return bleu([to_stems(h, rules) for h in hyps], [to_stems(r, rules) for r in refs])


def coverage(corpus: Sequence[Sentence], vocab: Vocabulary) -> float:
    tokens = [t for s in corpus for t in _tokens(s)]
    if not tokens:
        raise ValueError("coverage of an empty corpus")
    return sum(t in vocab for t in tokens) / len(tokens)


def suffix_accuracy(hyps: Sequence[Sentence], refs: Sequence[Sentence], rules: StemmerRules,
                    restrict: Collection[tuple[str, str]] | None = None) -> float:
    """
    Fraction of reference words whose suffix the hypothesis reproduces at the
    same position. With `restrict`, only reference words whose (stem, suffix)
    is in the set are scored. Missing hypothesis positions count as wrong.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
    scored = correct = 0
    for hyp, ref in zip(hyps, refs):
        h = [stem_word(w, rules) for w in _tokens(hyp)]
        for i, word in enumerate(_tokens(ref)):
            split = stem_word(word, rules)
            if restrict is not None and (split.stem, split.suffix) not in restrict:
                continue
            scored += 1
            correct += i < len(h) and h[i].suffix == split.suffix
    if scored == 0:
        raise ValueError("no reference words to score")
    return correct / scored


def report(hyps: Sequence[Sentence], refs: Sequence[Sentence], rules: StemmerRules,
           vocab: Vocabulary | None = None) -> dict[str, float]:
    stats = corpus_bleu_stats(hyps, refs)
    out = {"BLEU": bleu_from_stats(stats), "stemBLEU": stem_bleu(hyps, refs, rules)}
    out["coverage"] = coverage(refs, vocab) if vocab is not None else float("nan")
    for n, p in enumerate(precisions(stats), 1):
        out[f"p{n}"] = p
    out["BP"] = brevity_penalty(stats)
    logger.debug("bleu stats: %s", stats)
    return out
