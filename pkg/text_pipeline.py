"""
text_pipeline.py  --  raw parallel text -> factored (sub-stem, suffix) training data

Target-side words are split by a deterministic suffix-stripping stemmer into a
stem and a suffix. The stem is always a prefix of the surface word, so the
suffix is a plain string cut; a word the stemmer leaves alone gets the
"no suffix" tag N. Stems are then segmented with BPE and the suffix sequence is
padded with N in front of each stem's suffix so both sequences stay aligned:

    words     kosk-a   bolsh-imi          vidit
    stems     kosk     bolsh              vidit
    suffixes  a        imi                N
    BPE       kosk     bol@@  sh          vid@@  it
    suffixes  a        N      imi         N      N

Also here: entity generalization and lowercasing, length filtering, vocabulary
construction, and the IBM Model 1 scorer used to drop poorly aligned pairs.

File formats
  rules     one rule per line "suffix<TAB>min_stem_len", "#" comments
  bpe       "version 1" header, then one merge per line "left right"
  vocab     "token<TAB>count" per line, descending count
"""
from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# ── Constants ─────────────────────────────────────────────────────────────────

NO_SUFFIX = "N"          # suffix tag for "no suffix" / non-final BPE fragment
BPE_MARK = "@@"          # trailing marker on non-final BPE fragments
BPE_VERSION = "version 1"

UNK, BOS, EOS = "<unk>", "<s>", "</s>"
UNK_ID, BOS_ID, EOS_ID, N_ID = 0, 1, 2, 3
RESERVED = (UNK, BOS, EOS)
SUFFIX_RESERVED = (UNK, BOS, EOS, NO_SUFFIX)

IBM1_NULL = "<null>"
IBM1_FLOOR = 1e-12       # probability for pairs the table has never seen
DEFAULT_FILTER_THRESHOLD = -7.0

# Whole-token patterns, tried in order. Dates before times before numbers so
# "2024-01-05" is never read as a number.
ENTITY_PATTERNS: list[tuple[str, str]] = [
    ("_date_",   r"\d{4}-\d{1,2}-\d{1,2}|\d{1,2}/\d{1,2}/\d{2,4}|\d{1,2}\.\d{1,2}\.\d{4}"),
    ("_time_",   r"\d{1,2}:\d{2}(?::\d{2})?"),
    ("_number_", r"[+-]?\d+(?:[.,]\d+)*"),
]


class DataError(ValueError):
    """Malformed input file or corpus."""


# ── Preprocessing ─────────────────────────────────────────────────────────────

def compile_entities(patterns: Sequence[tuple[str, str]] = ENTITY_PATTERNS
                     ) -> list[tuple[str, re.Pattern]]:
    return [(symbol, re.compile(rx)) for symbol, rx in patterns]


_DEFAULT_ENTITIES = compile_entities()


def preprocess(sentence: str,
               rules: Sequence[tuple[str, re.Pattern]] | None = None) -> list[str]:
    """Lowercase, split on whitespace, replace date/time/number tokens."""
    rules = _DEFAULT_ENTITIES if rules is None else rules
    tokens = []
    for tok in sentence.lower().split():
        for symbol, rx in rules:
            if rx.fullmatch(tok):
                tok = symbol
                break
        tokens.append(tok)
    return tokens


def length_filter(pair: tuple[Sequence[str], Sequence[str]],
                  lo: int = 1, hi: int = 30) -> bool:
    src, tgt = pair
    return lo <= len(src) <= hi and lo <= len(tgt) <= hi


# ── Stemming ──────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class StemmerRules:
    """Suffix table, longest suffix first. Ties keep file order."""
    ordered_suffixes: tuple[tuple[str, int], ...] = ()
    casefold: bool = False

    def __post_init__(self) -> None:
        for suffix, min_len in self.ordered_suffixes:
            if not suffix:
                raise DataError("empty suffix in stemmer rules")
            if min_len < 1:
                raise DataError(f"rule {suffix!r}: min stem length must be >= 1, got {min_len}")
        ordered = tuple(sorted(self.ordered_suffixes, key=lambda r: -len(r[0])))
        object.__setattr__(self, "ordered_suffixes", ordered)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, int]], casefold: bool = False) -> StemmerRules:
        return cls(tuple((s, int(n)) for s, n in pairs), casefold)


WORD_LEVEL = StemmerRules()   # no rules: every word is its own stem


@dataclass(frozen=True)
class MorphSplit:
    stem: str
    suffix: str   # NO_SUFFIX when nothing was stripped

    @property
    def surface(self) -> str:
        return self.stem + ("" if self.suffix == NO_SUFFIX else self.suffix)


def stem_word(word: str, rules: StemmerRules) -> MorphSplit:
    key = word
    if rules.casefold and len(word.lower()) == len(word):
        key = word.lower()
    for suffix, min_len in rules.ordered_suffixes:
        if key.endswith(suffix) and len(word) - len(suffix) >= min_len:
            cut = len(word) - len(suffix)
            return MorphSplit(word[:cut], word[cut:])
    return MorphSplit(word, NO_SUFFIX)


def factor_sentence(words: Sequence[str], rules: StemmerRules) -> tuple[list[str], list[str]]:
    splits = [stem_word(w, rules) for w in words]
    return [s.stem for s in splits], [s.suffix for s in splits]


def rejoin(stems: Sequence[str], suffixes: Sequence[str]) -> list[str]:
    return [MorphSplit(st, sf).surface for st, sf in zip(stems, suffixes)]


def load_rules(path: str | Path, casefold: bool = False) -> StemmerRules:
    pairs = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 2 or not parts[1].strip().isdigit():
            raise DataError(f"{path}:{lineno}: expected 'suffix<TAB>min_stem_len', got {raw!r}")
        pairs.append((parts[0].strip(), int(parts[1])))
    return StemmerRules.from_pairs(pairs, casefold)


def save_rules(rules: StemmerRules, path: str | Path) -> None:
    lines = ["# suffix\tmin_stem_len"]
    lines += [f"{s}\t{n}" for s, n in rules.ordered_suffixes]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def suffix_inventory(suffix_corpus: Iterable[Sequence[str]]) -> Counter:
    return Counter(sf for sent in suffix_corpus for sf in sent)


# ── Factored sentences ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class FactoredSentence:
    """Aligned sub-stem and suffix sequences (strings or ids)."""
    substems: tuple
    suffixes: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "substems", tuple(self.substems))
        object.__setattr__(self, "suffixes", tuple(self.suffixes))
        if len(self.substems) != len(self.suffixes):
            raise ValueError(
                f"stem/suffix length mismatch: {len(self.substems)} != {len(self.suffixes)}")

    def __len__(self) -> int:
        return len(self.substems)


# ── BPE ───────────────────────────────────────────────────────────────────────

@dataclass
class BpeModel:
    merges: list[tuple[str, str]] = field(default_factory=list)
    _ranks: dict = field(default_factory=dict, repr=False, compare=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}

    def merge_symbols(self, symbols: Sequence[str]) -> list[str]:
        """Apply merges by rank until none applies (a fixed point)."""
        word = list(symbols)
        while len(word) > 1:
            pairs = [p for p in zip(word, word[1:]) if p in self._ranks]
            if not pairs:
                break
            left, right = min(pairs, key=self._ranks.__getitem__)
            merged, i = [], 0
            while i < len(word):
                if i + 1 < len(word) and word[i] == left and word[i + 1] == right:
                    merged.append(left + right)
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            word = merged
        return word

    def segment(self, stem: str) -> list[str]:
        """Sub-stem units of one stem; characters outside the alphabet stay single."""
        if stem not in self._cache:
            units = self.merge_symbols(list(stem))
            self._cache[stem] = [u + BPE_MARK for u in units[:-1]] + units[-1:]
        return list(self._cache[stem])


def _pair_counts(vocab: dict[tuple[str, ...], int]) -> Counter:
    counts: Counter = Counter()
    for symbols, freq in vocab.items():
        for pair in zip(symbols, symbols[1:]):
            counts[pair] += freq
    return counts


def learn_bpe(stem_corpus: Iterable[Sequence[str]], num_merges: int) -> BpeModel:
    """Greedy most-frequent-pair merging within stems; ties go to the smallest pair."""
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    stem_freq = Counter(stem for sent in stem_corpus for stem in sent)
    vocab = {tuple(stem): freq for stem, freq in stem_freq.items() if stem}
    merges: list[tuple[str, str]] = []
    while len(merges) < num_merges:
        counts = _pair_counts(vocab)
        if not counts:
            break
        best = min(counts, key=lambda p: (-counts[p], p))
        merges.append(best)
        joined = best[0] + best[1]
        new_vocab = {}
        for symbols, freq in vocab.items():
            out, i = [], 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best:
                    out.append(joined)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            new_vocab[tuple(out)] = new_vocab.get(tuple(out), 0) + freq
        vocab = new_vocab
    logger.debug("learned %d BPE merges from %d stem types", len(merges), len(stem_freq))
    return BpeModel(merges)


def apply_bpe_with_suffix_adjust(f: FactoredSentence, model: BpeModel) -> FactoredSentence:
    """Split stems into sub-stems; n units get n-1 N tags ahead of the stem's suffix."""
    substems, suffixes = [], []
    for stem, suffix in zip(f.substems, f.suffixes):
        units = model.segment(stem)
        substems.extend(units)
        suffixes.extend([NO_SUFFIX] * (len(units) - 1))
        suffixes.append(suffix)
    return FactoredSentence(substems, suffixes)


def remove_bpe(substems: Sequence[str]) -> list[str]:
    stems, buf = [], ""
    for unit in substems:
        if unit.endswith(BPE_MARK):
            buf += unit[: -len(BPE_MARK)]
        else:
            stems.append(buf + unit)
            buf = ""
    if buf:
        stems.append(buf)
    return stems


def save_bpe(model: BpeModel, path: str | Path) -> None:
    lines = [BPE_VERSION] + [f"{a} {b}" for a, b in model.merges]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_bpe(path: str | Path) -> BpeModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != BPE_VERSION:
        raise DataError(f"{path}: missing '{BPE_VERSION}' header")
    merges = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'left right', got {line!r}")
        merges.append((parts[0], parts[1]))
    return BpeModel(merges)


# ── Vocabulary ────────────────────────────────────────────────────────────────

@dataclass
class Vocabulary:
    """Token <-> id bijection. Reserved tokens take the first ids."""
    tokens: list[str]
    counts: dict[str, int] = field(default_factory=dict)
    reserved: tuple[str, ...] = RESERVED

    def __post_init__(self) -> None:
        if tuple(self.tokens[: len(self.reserved)]) != self.reserved:
            raise ValueError("reserved tokens must come first")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def build_vocab(corpus: Iterable[Sequence[str]], max_size: int,
                reserved: tuple[str, ...] = RESERVED) -> Vocabulary:
    if max_size <= len(reserved):
        raise ValueError(f"max_size {max_size} leaves no room after {len(reserved)} reserved tokens")
    counts = Counter(tok for sent in corpus for tok in sent)
    ranked = sorted((t for t in counts if t not in reserved), key=lambda t: (-counts[t], t))
    tokens = list(reserved) + ranked[: max_size - len(reserved)]
    return Vocabulary(tokens, {t: counts[t] for t in tokens if t in counts}, reserved)


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    body = [f"{t}\t{vocab.counts.get(t, 0)}" for t in vocab.tokens[len(vocab.reserved):]]
    Path(path).write_text("".join(line + "\n" for line in body), encoding="utf-8")


def load_vocab(path: str | Path, reserved: tuple[str, ...] = RESERVED) -> Vocabulary:
    tokens, counts = list(reserved), {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[1].isdigit():
            raise DataError(f"{path}:{lineno}: expected 'token<TAB>count', got {line!r}")
        tokens.append(parts[0])
        counts[parts[0]] = int(parts[1])
    return Vocabulary(tokens, counts, reserved)


# ── IBM Model 1 ───────────────────────────────────────────────────────────────

@dataclass
class Ibm1Model:
    """t(target | source) as a dense table. Row 0 is the NULL source token."""
    src_index: dict[str, int]
    tgt_index: dict[str, int]
    table: np.ndarray
    log_likelihoods: list[float] = field(default_factory=list)

    def prob(self, tgt: str, src: str) -> float:
        s, t = self.src_index.get(src), self.tgt_index.get(tgt)
        if s is None or t is None:
            return 0.0
        return float(self.table[s, t])


def _ibm1_ids(model: Ibm1Model, src: Sequence[str], tgt: Sequence[str]
              ) -> tuple[np.ndarray, np.ndarray]:
    s_ids = np.array([0] + [model.src_index[w] for w in src], dtype=np.int64)
    t_ids = np.array([model.tgt_index[w] for w in tgt], dtype=np.int64)
    return s_ids, t_ids


def ibm1_log_likelihood(corpus: Sequence[tuple[Sequence[str], Sequence[str]]],
                        model: Ibm1Model) -> float:
    """sum over pairs of sum_j log( 1/(l+1) * sum_i t(f_j | e_i) ), NULL included."""
    total = 0.0
    for src, tgt in corpus:
        if not tgt:
            continue
        s_ids, t_ids = _ibm1_ids(model, src, tgt)
        col = model.table[np.ix_(s_ids, t_ids)].sum(axis=0) / len(s_ids)
        total += float(np.log(col).sum())
    return total


def ibm1_train(corpus: Sequence[tuple[Sequence[str], Sequence[str]]], iters: int) -> Ibm1Model:
    """Standard EM from a uniform table; history[i] is the likelihood before update i."""
    if not corpus:
        raise ValueError("IBM Model 1 needs a non-empty corpus")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    src_types = sorted({w for src, _ in corpus for w in src})
    tgt_types = sorted({w for _, tgt in corpus for w in tgt})
    src_index = {IBM1_NULL: 0, **{w: i + 1 for i, w in enumerate(src_types)}}
    tgt_index = {w: i for i, w in enumerate(tgt_types)}
    table = np.full((len(src_index), len(tgt_index)), 1.0 / max(len(tgt_index), 1))
    model = Ibm1Model(src_index, tgt_index, table)

    encoded = [_ibm1_ids(model, src, tgt) for src, tgt in corpus if tgt]
    for it in range(iters):
        counts = np.zeros_like(model.table)
        loglik = 0.0
        for s_ids, t_ids in encoded:
            sub = model.table[np.ix_(s_ids, t_ids)]
            denom = sub.sum(axis=0)
            loglik += float(np.log(denom / len(s_ids)).sum())
            np.add.at(counts, (s_ids[:, None], t_ids[None, :]), sub / denom)
        model.log_likelihoods.append(loglik)
        totals = counts.sum(axis=1, keepdims=True)
        # a source type seen nowhere keeps its previous row
        model.table = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), model.table)
        logger.debug("IBM1 iteration %d: log-likelihood %.6f", it + 1, loglik)
    model.log_likelihoods.append(ibm1_log_likelihood(corpus, model))
    return model


def ibm1_score(pair: tuple[Sequence[str], Sequence[str]], model: Ibm1Model) -> float:
    """Length-normalized Model 1 log-probability of tgt given src."""
    src, tgt = pair
    if not tgt:
        return -math.inf
    s_ids = [0] + [model.src_index[w] for w in src if w in model.src_index]
    norm = 1.0 / (len(src) + 1)
    total = 0.0
    for w in tgt:
        t = model.tgt_index.get(w)
        p = 0.0 if t is None else float(model.table[s_ids, t].sum()) * norm
        total += math.log(max(p, IBM1_FLOOR))
    return total / len(tgt)


def ibm1_score_and_filter(corpus: Sequence[tuple[Sequence[str], Sequence[str]]],
                          model: Ibm1Model,
                          threshold: float = DEFAULT_FILTER_THRESHOLD) -> list:
    kept = [pair for pair in corpus if ibm1_score(pair, model) >= threshold]
    logger.info("IBM1 filter: kept %d / %d pairs (threshold %.2f)", len(kept), len(corpus), threshold)
    return kept
