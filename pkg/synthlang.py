"""
synthlang.py  --  toy parallel corpus: analytic source, agglutinative target

Source sentences mark number with a separate word ("many") and never mark
case. The target inflects every adjective and noun for number x case with a
suffix from one shared 6-cell paradigm; adjectives agree with their noun,
subjects are nominative, objects take the case their verb governs, verbs are
uninflected. Every target word is stem + suffix, so the grammar's own suffix
table factors it exactly.

Template:
  [many] [ADJ] NOUN VERB [[many] [ADJ] NOUN]

Grammar file: JSON with keys plural_marker, min_stem_len, paradigm
("num.case" -> suffix), nouns / adjectives (source -> target stem), verbs
(source -> {stem, governs}). See default_grammar.json.

Output (write_corpus): PREFIX.src, PREFIX.tgt, PREFIX.gold.stem, PREFIX.gold.suffix
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from numerics import Rng
from text_pipeline import NO_SUFFIX, DataError, StemmerRules, stem_word

logger = logging.getLogger(__name__)

DEFAULT_GRAMMAR = Path(__file__).with_name("default_grammar.json")
NUMBERS = ("sg", "pl")
CASES = ("nom", "acc", "gen")
CELLS = tuple(f"{n}.{c}" for n in NUMBERS for c in CASES)

ADJ_RATE = 0.5
OBJECT_RATE = 0.8
SEEN_TEST_FRACTION = 0.1
NOVEL_PER_PAIR = 2


@dataclass(frozen=True)
class Verb:
    stem: str
    governs: str


@dataclass(frozen=True)
class SynthGrammar:
    nouns: dict[str, str]
    adjectives: dict[str, str]
    verbs: dict[str, Verb]
    paradigm: dict[str, str]
    plural_marker: str = "many"
    min_stem_len: int = 2

    def rules(self) -> StemmerRules:
        return StemmerRules.from_pairs((sf, self.min_stem_len) for sf in self.paradigm.values())

    def suffix(self, number: str, case: str) -> str:
        return self.paradigm[f"{number}.{case}"]

    @property
    def inflected_stems(self) -> list[str]:
        return sorted(set(self.nouns.values()) | set(self.adjectives.values()))

    def validate(self) -> None:
        """Gold factoring must equal the pipeline's factoring for every lexeme x cell."""
        if set(self.paradigm) != set(CELLS):
            raise DataError(f"paradigm must define exactly the cells {', '.join(CELLS)}")
        if len(set(self.paradigm.values())) != len(self.paradigm):
            raise DataError("paradigm cells must have distinct suffixes")
        targets = list(self.nouns.values()) + list(self.adjectives.values()) + \
            [v.stem for v in self.verbs.values()]
        if len(set(targets)) != len(targets):
            raise DataError("target stems must be unique across the lexicon")
        sources = list(self.nouns) + list(self.adjectives) + list(self.verbs)
        if len(set(sources)) != len(sources) or self.plural_marker in sources:
            raise DataError("source words must be unique and differ from the plural marker")
        for verb in self.verbs.values():
            if verb.governs not in ("acc", "gen"):
                raise DataError(f"verb {verb.stem!r} governs {verb.governs!r}; expected acc or gen")
        rules = self.rules()
        for stem in self.inflected_stems:
            for cell, suffix in self.paradigm.items():
                got = stem_word(stem + suffix, rules)
                if (got.stem, got.suffix) != (stem, suffix):
                    raise DataError(f"{stem}+{suffix} ({cell}) factors as {got.stem}+{got.suffix}")
        for verb in self.verbs.values():
            if stem_word(verb.stem, rules).suffix != NO_SUFFIX:
                raise DataError(f"verb {verb.stem!r} would be stemmed")


def load_grammar(path: str | Path = DEFAULT_GRAMMAR) -> SynthGrammar:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        grammar = SynthGrammar(
            nouns=dict(raw["nouns"]),
            adjectives=dict(raw["adjectives"]),
            verbs={w: Verb(v["stem"], v["governs"]) for w, v in raw["verbs"].items()},
            paradigm=dict(raw["paradigm"]),
            plural_marker=raw.get("plural_marker", "many"),
            min_stem_len=int(raw.get("min_stem_len", 2)),
        )
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as e:
        raise DataError(f"{path}: malformed grammar ({e!r})") from None
    grammar.validate()
    return grammar


# ── Generation ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SynthSentence:
    source: tuple[str, ...]
    target: tuple[str, ...]
    stems: tuple[str, ...]
    suffixes: tuple[str, ...]
    cells: tuple[tuple[str, str], ...]    # (stem, "num.case") of each inflected word


def _emit(grammar: SynthGrammar, words, number: str, case: str, src, tgt, stems, sufs, cells) -> None:
    """Append one agreeing phrase; words are (source word, target stem) pairs."""
    suffix = grammar.suffix(number, case)
    if number == "pl":
        src.append(grammar.plural_marker)
    for source_word, stem in words:
        src.append(source_word)
        tgt.append(stem + suffix)
        stems.append(stem)
        sufs.append(suffix)
        cells.append((stem, f"{number}.{case}"))


def _emit_verb(grammar: SynthGrammar, verb_word: str, src, tgt, stems, sufs) -> None:
    verb = grammar.verbs[verb_word]
    src.append(verb_word)
    tgt.append(verb.stem)
    stems.append(verb.stem)
    sufs.append(NO_SUFFIX)


def _noun_phrase(grammar: SynthGrammar, rng: Rng, case: str, src, tgt, stems, sufs, cells) -> None:
    number = NUMBERS[rng.integers(0, 2)]
    words = []
    if rng.bernoulli(ADJ_RATE):
        adj = rng.choice(sorted(grammar.adjectives))
        words.append((adj, grammar.adjectives[adj]))
    noun = rng.choice(sorted(grammar.nouns))
    words.append((noun, grammar.nouns[noun]))
    _emit(grammar, words, number, case, src, tgt, stems, sufs, cells)


def generate(grammar: SynthGrammar, num_sentences: int, seed: int) -> list[SynthSentence]:
    if num_sentences < 1:
        raise ValueError("num_sentences must be >= 1")
    rng = Rng(seed)
    verbs = sorted(grammar.verbs)
    corpus = []
    for _ in range(num_sentences):
        src, tgt, stems, sufs, cells = [], [], [], [], []
        _noun_phrase(grammar, rng, "nom", src, tgt, stems, sufs, cells)
        verb_word = rng.choice(verbs)
        _emit_verb(grammar, verb_word, src, tgt, stems, sufs)
        if rng.bernoulli(OBJECT_RATE):
            _noun_phrase(grammar, rng, grammar.verbs[verb_word].governs, src, tgt, stems, sufs, cells)
        corpus.append(SynthSentence(tuple(src), tuple(tgt), tuple(stems), tuple(sufs), tuple(cells)))
    return corpus


# ── Held-out split ────────────────────────────────────────────────────────────

@dataclass
class Split:
    train: list[SynthSentence]
    test_seen: list[SynthSentence]
    test_novel: list[SynthSentence]
    held_out: set[tuple[str, str]] = field(default_factory=set)    # (stem, cell)

    def held_out_words(self, grammar: SynthGrammar) -> set[tuple[str, str]]:
        """Held-out combinations as (stem, suffix) strings."""
        return {(stem, grammar.paradigm[cell]) for stem, cell in self.held_out}


def _pairs(corpus: Sequence[SynthSentence]) -> set[tuple[str, str]]:
    return {c for s in corpus for c in s.cells}


def _choose_held_out(corpus: Sequence[SynthSentence], grammar: SynthGrammar, rng: Rng) -> set[tuple[str, str]]:
    observed: dict[str, set[str]] = {}
    for s in corpus:
        for stem, cell in s.cells:
            observed.setdefault(stem, set()).add(cell)
    held = {}
    for stem in sorted(observed):
        if len(observed[stem]) >= 2:
            held[stem] = rng.choice(sorted(observed[stem]))
    # novel sentences need a nominative subject built from a held-out pair
    nouns = [n for n in sorted(set(grammar.nouns.values())) if n in held]
    if nouns and not any(held[n].endswith(".nom") for n in nouns):
        for n in (nouns[i] for i in rng.permutation(len(nouns))):
            nom = sorted(c for c in observed[n] if c.endswith(".nom"))
            if nom:
                held[n] = rng.choice(nom)
                break
    return set(held.items())


def _novel_sentences(grammar: SynthGrammar, held_out: set[tuple[str, str]], rng: Rng) -> list[SynthSentence]:
    """Sentences whose every inflected word is a held-out (stem, cell) noun."""
    source_of = {stem: word for word, stem in grammar.nouns.items()}
    nouns = sorted((stem, cell) for stem, cell in held_out if stem in source_of)
    subjects = [(stem, cell) for stem, cell in nouns if cell.endswith(".nom")]
    governing = {case: sorted(w for w, v in grammar.verbs.items() if v.governs == case) for case in CASES}
    out = []
    for stem, cell in nouns:
        case = cell.split(".")[1]
        for _ in range(NOVEL_PER_PAIR):
            if case == "nom":
                subject, obj, verb_word = (stem, cell), None, rng.choice(sorted(grammar.verbs))
            elif subjects and governing[case]:
                subject, obj, verb_word = rng.choice(subjects), (stem, cell), rng.choice(governing[case])
            else:
                break
            src, tgt, stems, sufs, cells = [], [], [], [], []
            noun, (number, subject_case) = subject[0], subject[1].split(".")
            _emit(grammar, [(source_of[noun], noun)], number, subject_case, src, tgt, stems, sufs, cells)
            _emit_verb(grammar, verb_word, src, tgt, stems, sufs)
            if obj is not None:
                number, object_case = obj[1].split(".")
                _emit(grammar, [(source_of[obj[0]], obj[0])], number, object_case, src, tgt, stems, sufs, cells)
            out.append(SynthSentence(tuple(src), tuple(tgt), tuple(stems), tuple(sufs), tuple(cells)))
    return out


def holdout_split(corpus: Sequence[SynthSentence], grammar: SynthGrammar, seed: int) -> Split:
    """
    Hold out one paradigm cell per stem. No held-out (stem, cell) occurs in
    train. test_novel sentences inflect every word in a held-out cell and use
    only stems seen in train: corpus sentences that happen to qualify, plus
    sentences built directly from the held-out nouns. Corpus sentences mixing
    held-out and seen combinations are dropped. test_seen sentences use only
    combinations that occur in train.
    """
    rng = Rng(seed, (7,))
    held_out = _choose_held_out(corpus, grammar, rng)

    rest = [s for s in corpus if not held_out & set(s.cells)]
    order = rng.permutation(len(rest))
    n_seen = int(len(rest) * SEEN_TEST_FRACTION)
    seen_pool = [rest[i] for i in order[:n_seen]]
    train = [rest[i] for i in order[n_seen:]]

    train_pairs = _pairs(train)
    test_seen = []
    for s in seen_pool:
        (test_seen if set(s.cells) <= train_pairs else train).append(s)
    train_stems = {stem for s in train for stem in s.stems}
    candidates = [s for s in corpus if s.cells and set(s.cells) <= held_out]
    candidates += _novel_sentences(grammar, held_out, rng)
    test_novel = [s for s in candidates if set(s.stems) <= train_stems]
    if not test_novel:
        raise ValueError("grammar too small to produce novel combinations")
    logger.info("split: %d train | %d test-seen | %d test-novel | %d held-out cells",
                len(train), len(test_seen), len(test_novel), len(held_out))
    return Split(train, test_seen, test_novel, held_out)


def write_corpus(corpus: Sequence[SynthSentence], prefix: str | Path) -> list[Path]:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    columns = {".src": "source", ".tgt": "target", ".gold.stem": "stems", ".gold.suffix": "suffixes"}
    paths = []
    for ext, attr in columns.items():
        path = prefix.with_name(prefix.name + ext)
        path.write_text("".join(" ".join(getattr(s, attr)) + "\n" for s in corpus), encoding="utf-8")
        paths.append(path)
    return paths
