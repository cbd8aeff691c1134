"""Shared fixtures: tiny models and toy corpora encoded as training pairs."""
import numpy as np
import pytest

from model import (ModelConfig, TrainConfig, TrainingPair, decode_step_stem, decode_step_suffix,
                   encode, init_params)
from numerics import Rng, no_grad
from synthlang import DEFAULT_GRAMMAR, load_grammar
from text_pipeline import (BOS_ID, EOS_ID, N_ID, SUFFIX_RESERVED, WORD_LEVEL, FactoredSentence,
                           build_vocab, factor_sentence)


@pytest.fixture(scope="session")
def grammar():
    return load_grammar(DEFAULT_GRAMMAR)


@pytest.fixture
def tiny_config():
    return ModelConfig(src_vocab=8, stem_vocab=9, suffix_vocab=6, embed_dim=4, hidden_dim=5,
                       dropout_rate=0.0, lam=0.1, init_scale=0.3)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, Rng(1))


@pytest.fixture
def tiny_pairs():
    return [TrainingPair((3, 4, 5), FactoredSentence((3, 4), (4, 3))),
            TrainingPair((6, 7), FactoredSentence((5, 6, 8), (3, 5, 4))),
            TrainingPair((4,), FactoredSentence((7,), (3,)))]


def encode_corpus(sentences, rules=None, src_vocab=None, stem_vocab=None, suffix_vocab=None):
    """SynthSentences -> (pairs, src_vocab, stem_vocab, suffix_vocab); vocabs built if not given."""
    rules = WORD_LEVEL if rules is None else rules
    src = [list(s.source) for s in sentences]
    factored = [factor_sentence(list(s.target), rules) for s in sentences]
    src_vocab = src_vocab or build_vocab(src, 30000)
    stem_vocab = stem_vocab or build_vocab([f[0] for f in factored], 30000)
    suffix_vocab = suffix_vocab or build_vocab([f[1] for f in factored], 1000, SUFFIX_RESERVED)
    pairs = [TrainingPair(tuple(src_vocab.encode(s)),
                          FactoredSentence(stem_vocab.encode(st), suffix_vocab.encode(sf)))
             for s, (st, sf) in zip(src, factored)]
    return pairs, src_vocab, stem_vocab, suffix_vocab


def small_train_config(**kw) -> TrainConfig:
    base = dict(embed_dim=8, hidden_dim=10, dropout=0.0, epochs=2, batch_size=4, lr=0.01,
                seed=3, sync_every=2)
    base.update(kw)
    return TrainConfig(**base)


def greedy_decode(src, params, config, max_len: int) -> tuple[list[int], list[int]]:
    """Argmax stem, then argmax suffix for that stem; EOS forced at max_len."""
    with no_grad():
        enc = encode(src, params, config)
        S, y, stems, suffixes = enc.init, BOS_ID, [], []
        for t in range(max_len):
            dist, state = decode_step_stem([y], S, enc, params, config, step=t)
            s = EOS_ID if t == max_len - 1 else int(np.argmax(dist.data[0]))
            if s == EOS_ID:
                return stems + [EOS_ID], suffixes + [N_ID]
            stems.append(s)
            dist = decode_step_suffix(state, [s], params, config, step=t)
            suffixes.append(int(np.argmax(dist.data[0])))
            S, y = state.S_stem, s
    raise AssertionError("greedy decode did not terminate")
