"""
Synthetic agglutinative corpus: generation, gold factoring, held-out split,
and the suffix-generalization comparison against a word-level target.
"""
import dataclasses
import json

import pytest

from conftest import encode_corpus, small_train_config
from decoder import BeamConfig, Seq2Seq, Translator
from evaluation import suffix_accuracy
from model import train
from synthlang import CELLS, Verb, generate, holdout_split, load_grammar, write_corpus
from text_pipeline import NO_SUFFIX, DataError, factor_sentence, suffix_inventory


def _inflected(sentence):
    return [i for i, sf in enumerate(sentence.suffixes) if sf != NO_SUFFIX]


def test_generation_is_deterministic(grammar):
    assert generate(grammar, 50, seed=4) == generate(grammar, 50, seed=4)
    assert generate(grammar, 50, seed=4) != generate(grammar, 50, seed=5)
    with pytest.raises(ValueError):
        generate(grammar, 0, seed=1)


def test_gold_factoring_matches_pipeline(grammar):
    rules = grammar.rules()
    for s in generate(grammar, 300, seed=1):
        assert factor_sentence(list(s.target), rules) == (list(s.stems), list(s.suffixes))
        assert [st + (sf if sf != NO_SUFFIX else "") for st, sf in zip(s.stems, s.suffixes)] == list(s.target)


def test_agreement_and_government(grammar):
    governs = {v.stem: v.governs for v in grammar.verbs.values()}
    for s in generate(grammar, 300, seed=2):
        verb_at = next(i for i, stem in enumerate(s.stems) if stem in governs)
        positions = _inflected(s)
        assert len(positions) == len(s.cells)
        for i, (stem, cell) in zip(positions, s.cells):
            number, case = cell.split(".")
            assert s.stems[i] == stem
            assert s.suffixes[i] == grammar.paradigm[cell]
            assert case == ("nom" if i < verb_at else governs[s.stems[verb_at]])
        plural_words = sum(cell.startswith("pl.") for _, cell in s.cells)
        assert len(s.source) - len(s.target) == s.source.count(grammar.plural_marker)
        assert (plural_words > 0) == (grammar.plural_marker in s.source)


def test_suffix_inventory_is_paradigm_plus_n(grammar):
    corpus = generate(grammar, 2000, seed=3)
    inventory = suffix_inventory(s.suffixes for s in corpus)
    assert set(inventory) == set(grammar.paradigm.values()) | {NO_SUFFIX}
    assert len(inventory) == len(CELLS) + 1


@pytest.mark.parametrize("change", [
    dict(paradigm={"sg.nom": "a"}),
    dict(paradigm={c: "a" for c in CELLS}),
    dict(verbs={"sees": Verb("vida", "acc")}),
    dict(verbs={"sees": Verb("vid", "nom")}),
    dict(nouns={"house": "dom", "home": "dom"}),
])
def test_validate_rejects_broken_grammars(grammar, change):
    with pytest.raises(DataError):
        dataclasses.replace(grammar, **change).validate()


def test_load_grammar_malformed(tmp_path):
    path = tmp_path / "g.json"
    path.write_text(json.dumps({"nouns": {}}), encoding="utf-8")
    with pytest.raises(DataError, match="malformed grammar"):
        load_grammar(path)
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(DataError):
        load_grammar(path)


@pytest.fixture(scope="module")
def split(grammar):
    return holdout_split(generate(grammar, 2000, seed=8), grammar, seed=8)


def test_split_keeps_held_out_combinations_out_of_train(split):
    train_cells = {c for s in split.train for c in s.cells}
    assert split.held_out
    assert not split.held_out & train_cells
    assert all(set(s.cells) <= train_cells for s in split.test_seen)


def test_novel_combinations_never_occur_in_train(split):
    train_cells = {c for s in split.train for c in s.cells}
    novel_cells = {c for s in split.test_novel for c in s.cells}
    assert novel_cells
    assert not novel_cells & train_cells
    assert all(s.cells and set(s.cells) <= split.held_out for s in split.test_novel)


def test_novel_sentences_follow_the_grammar(grammar, split):
    rules = grammar.rules()
    for s in split.test_novel:
        assert factor_sentence(list(s.target), rules) == (list(s.stems), list(s.suffixes))
        assert len(s.source) - len(s.target) == s.source.count(grammar.plural_marker)


def test_novel_sentences_use_known_stems_in_new_cells(split):
    train_stems = {stem for s in split.train for stem in s.stems}
    assert len(split.test_novel) >= 20
    for s in split.test_novel:
        assert split.held_out & set(s.cells)
        assert set(s.stems) <= train_stems


def test_split_is_deterministic(grammar, split):
    again = holdout_split(generate(grammar, 2000, seed=8), grammar, seed=8)
    assert again.held_out == split.held_out
    assert again.train == split.train
    assert again.test_novel == split.test_novel


def test_held_out_words(grammar, split):
    words = split.held_out_words(grammar)
    assert len(words) == len(split.held_out)
    assert all(suffix in grammar.paradigm.values() for _, suffix in words)


def test_split_of_tiny_corpus_fails(grammar):
    with pytest.raises(ValueError, match="too small"):
        holdout_split(generate(grammar, 1, seed=1), grammar, seed=1)


def test_write_corpus(grammar, tmp_path):
    corpus = generate(grammar, 5, seed=6)
    paths = write_corpus(corpus, tmp_path / "out" / "train")
    assert [p.name for p in paths] == ["train.src", "train.tgt", "train.gold.stem", "train.gold.suffix"]
    lines = paths[1].read_text(encoding="utf-8").splitlines()
    assert lines == [" ".join(s.target) for s in corpus]


def _held_out_suffix_accuracy(split, grammar, rules) -> float:
    pairs, *vocabs = encode_corpus(split.train, rules)
    config = small_train_config(embed_dim=16, hidden_dim=32, epochs=12, batch_size=16, lr=5e-3)
    model_config = config.model_config(*(len(v) for v in vocabs))
    params = train(pairs, config, model_config).params
    translator = Translator(Seq2Seq(params, model_config), *vocabs)
    beam = BeamConfig(beam_size=4, max_len=20)
    hyps = [translator.translate(list(s.source), beam)[0][0] for s in split.test_novel]
    refs = [" ".join(s.target) for s in split.test_novel]
    return suffix_accuracy(hyps, refs, grammar.rules(), restrict=split.held_out_words(grammar))


@pytest.mark.slow
def test_factored_target_generalizes_to_unseen_inflections(grammar):
    factored, word_level = [], []
    for seed in (1, 2, 3):
        split = holdout_split(generate(grammar, 800, seed=seed), grammar, seed=seed)
        factored.append(_held_out_suffix_accuracy(split, grammar, grammar.rules()))
        word_level.append(_held_out_suffix_accuracy(split, grammar, None))
    assert sum(factored) / 3 - sum(word_level) / 3 >= 0.10
