"""
Cube-pruning beam search, hypothesis re-scoring and surface finalization.
"""
import numpy as np
import pytest

from conftest import encode_corpus, greedy_decode
from decoder import (BeamConfig, Hypothesis, Seq2Seq, Translator, beam_search, expand_step,
                     finalize, finalize_strings, format_nbest, initial_beam, score_hypothesis,
                     translate_lines)
from model import (ModelConfig, TrainConfig, decode_step_stem, decode_step_suffix, encode,
                   init_params, train)
from numerics import LOG_EPS, Rng, Tensor, no_grad
from synthlang import generate
from text_pipeline import (BOS_ID, EOS_ID, N_ID, NO_SUFFIX, RESERVED, SUFFIX_RESERVED,
                           FactoredSentence, Vocabulary, apply_bpe_with_suffix_adjust,
                           factor_sentence, learn_bpe)


def _random_model(seed: int, stem_vocab: int = 5, suffix_vocab: int = 4) -> Seq2Seq:
    config = ModelConfig(src_vocab=6, stem_vocab=stem_vocab, suffix_vocab=suffix_vocab,
                         embed_dim=3, hidden_dim=4, dropout_rate=0.0, init_scale=1.0)
    return Seq2Seq(init_params(config, Rng(seed)), config)


def _one_hot_model() -> Seq2Seq:
    """Deterministic chain: <s> -> kot+a -> dom+u -> ok+N -> </s>."""
    config = ModelConfig(src_vocab=5, stem_vocab=6, suffix_vocab=6, embed_dim=6, hidden_dim=6,
                         dropout_rate=0.0)
    params = init_params(config, Rng(0))
    for _, t in params.items():
        t.data[...] = 0.0
    params["stem_embed"].data[:] = np.eye(6)
    params["out_stem.W"].data[:6] = 3.0 * np.eye(6)
    for prev, nxt in [(BOS_ID, 3), (3, 4), (4, 5), (5, EOS_ID)]:
        params["stem_head.W"].data[prev, nxt] = 50.0
    for s in range(6):
        params["suffix_ff.W"].data[6 + s, s] = 3.0
    for stem, suffix in [(3, 4), (4, 5), (5, N_ID)]:
        params["suffix_head.W"].data[stem, suffix] = 50.0
    return Seq2Seq(params, config)


def _one_hot_translator() -> Translator:
    return Translator(_one_hot_model(),
                      Vocabulary(list(RESERVED) + ["cat", "house"]),
                      Vocabulary(list(RESERVED) + ["kot", "dom", "ok"]),
                      Vocabulary(list(SUFFIX_RESERVED) + ["a", "u"], reserved=SUFFIX_RESERVED))


def _enumerate(beam, model: Seq2Seq, enc):
    """Every (hypothesis, stem, suffix) continuation scored one row at a time."""
    p, c = model.params, model.config
    out = []
    with no_grad():
        for h in beam:
            y = h.substem_ids[-1] if h.substem_ids else BOS_ID
            dist, state = decode_step_stem([y], Tensor(h.state[None, :]), enc, p, c)
            stem_lp = np.log(dist.data[0] + LOG_EPS)
            for s in range(c.stem_vocab):
                if s == EOS_ID:
                    out.append((h.log_score + stem_lp[s], h.substem_ids + (s,), h.suffix_ids + (N_ID,)))
                    continue
                suffix_lp = np.log(decode_step_suffix(state, [s], p, c).data[0] + LOG_EPS)
                for f in range(c.suffix_vocab):
                    out.append((h.log_score + stem_lp[s] + suffix_lp[f],
                                h.substem_ids + (s,), h.suffix_ids + (f,)))
    return sorted(out, key=lambda x: x[0], reverse=True)


# ── Config / argument errors ──────────────────────────────────────────────────

@pytest.mark.parametrize("kw", [dict(beam_size=0), dict(max_len=0), dict(length_norm_alpha=1.5)])
def test_beam_config_validation(kw):
    with pytest.raises(ValueError):
        BeamConfig(**kw)


def test_expand_step_rejects_bad_beams():
    model = _random_model(1)
    enc = encode([3, 4], model.params, model.config)
    with pytest.raises(ValueError, match="empty beam"):
        expand_step([], model, enc, BeamConfig())
    done = Hypothesis((EOS_ID,), (N_ID,), -1.0, enc.init.data[0], finished=True)
    with pytest.raises(ValueError, match="finished"):
        expand_step([done], model, enc, BeamConfig())


# ── Search ────────────────────────────────────────────────────────────────────

@pytest.mark.parametrize("seed", range(5))
def test_beam_one_is_greedy(seed):
    model = _random_model(seed, stem_vocab=7, suffix_vocab=5)
    src = [3, 5, 4]
    best = beam_search(src, model, BeamConfig(beam_size=1, max_len=6))
    assert len(best) == 1
    greedy = greedy_decode(src, model.params, model.config, 6)
    assert (list(best[0].substem_ids), list(best[0].suffix_ids)) == greedy


@pytest.mark.parametrize("seed", range(100))
def test_expand_step_matches_exhaustive_enumeration(seed):
    model = _random_model(seed)
    n = model.config.stem_vocab * model.config.suffix_vocab
    config = BeamConfig(beam_size=n)
    enc = encode([3, 4, 5], model.params, model.config)

    beam = initial_beam(enc)
    for _ in range(2):
        got = expand_step(beam, model, enc, config)
        want = _enumerate(beam, model, enc)[:n]
        assert [(h.substem_ids, h.suffix_ids) for h in got] == [(s, f) for _, s, f in want]
        assert np.allclose([h.log_score for h in got], [w[0] for w in want], rtol=0, atol=1e-12)
        beam = [h for h in got if not h.finished][:3]


def test_suffix_mass_on_n_reduces_scores_to_stems():
    model = _random_model(4)
    p = model.params
    p["suffix_ff.W"].data[...] = 0.0
    p["suffix_ff.b"].data[...] = 1.0
    p["suffix_head.W"].data[...] = 0.0
    p["suffix_head.W"].data[:, N_ID] = 200.0
    src = [3, 5]
    enc = encode(src, p, model.config)
    beam = initial_beam(enc)
    for _ in range(3):
        beam = expand_step(beam, model, enc, BeamConfig(beam_size=3))
        for h in beam:
            assert set(h.suffix_ids) == {N_ID}
            state, stem_lp = Tensor(enc.init.data), 0.0
            with no_grad():
                for prev, s in zip((BOS_ID,) + h.substem_ids[:-1], h.substem_ids):
                    dist, state = decode_step_stem([prev], state, enc, p, model.config)
                    stem_lp += np.log(dist.data[0, s] + LOG_EPS)
                    state = state.S_stem
            assert h.log_score == pytest.approx(stem_lp, abs=len(h.substem_ids) * 2 * LOG_EPS)
        beam = [h for h in beam if not h.finished]
        if not beam:
            break


def test_force_eos_finishes_every_hypothesis():
    model = _random_model(2)
    enc = encode([3], model.params, model.config)
    beam = [h for h in expand_step(initial_beam(enc), model, enc, BeamConfig(beam_size=3))
            if not h.finished]
    out = expand_step(beam, model, enc, BeamConfig(beam_size=3), force_eos=True)
    assert all(h.finished and h.substem_ids[-1] == EOS_ID and h.suffix_ids[-1] == N_ID for h in out)


def test_nbest_is_sorted_and_rescorable(tiny_params, tiny_config):
    model = Seq2Seq(tiny_params, tiny_config)
    config = BeamConfig(beam_size=4, max_len=5)
    hyps = beam_search([3, 4, 6], model, config)
    assert 1 <= len(hyps) <= 4
    scores = [h.normalized(config.length_norm_alpha) for h in hyps]
    assert scores == sorted(scores, reverse=True)
    for h in hyps:
        assert h.finished
        assert h.substem_ids[-1] == EOS_ID and h.suffix_ids[-1] == N_ID
        assert len(h.substem_ids) == len(h.suffix_ids) <= config.max_len
        rescored = score_hypothesis([3, 4, 6], h.substem_ids, h.suffix_ids, model)
        assert rescored == pytest.approx(h.log_score, abs=1e-9)


def test_one_hot_model_decodes_its_chain():
    model = _one_hot_model()
    best = beam_search([3, 4], model, BeamConfig(beam_size=4))[0]
    assert best.substem_ids == (3, 4, 5, EOS_ID)
    assert best.suffix_ids == (4, 5, N_ID, N_ID)
    assert best.log_score > -1e-6


# ── Finalization ──────────────────────────────────────────────────────────────

@pytest.mark.parametrize("substems, suffixes, words", [
    (["u1@@", "u2"], [NO_SUFFIX, "a"], ["u1u2a"]),
    (["dom", "ok"], ["u", NO_SUFFIX], ["domu", "ok"]),
    ([], [], []),
    (["ko@@"], [NO_SUFFIX], ["ko"]),
])
def test_finalize_strings(substems, suffixes, words):
    assert finalize_strings(substems, suffixes) == words


def test_finalize_strings_errors():
    with pytest.raises(ValueError, match="misaligned suffix"):
        finalize_strings(["u1@@", "u2"], ["a", "a"])
    with pytest.raises(ValueError, match="length mismatch"):
        finalize_strings(["u1"], [])


def test_finalize_drops_trailing_eos():
    t = _one_hot_translator()
    hyp = Hypothesis((3, 4, 5, EOS_ID), (4, 5, N_ID, N_ID), 0.0, np.zeros(6), True)
    assert finalize(hyp, t.stem_vocab, t.suffix_vocab) == ["kota", "domu", "ok"]


def test_bpe_factoring_round_trips_through_finalize(grammar):
    corpus = generate(grammar, 40, seed=2)
    rules = grammar.rules()
    factored = [factor_sentence(list(s.target), rules) for s in corpus]
    bpe = learn_bpe([stems for stems, _ in factored], 15)
    for s, (stems, suffixes) in zip(corpus, factored):
        split = apply_bpe_with_suffix_adjust(FactoredSentence(stems, suffixes), bpe)
        assert finalize_strings(list(split.substems), list(split.suffixes)) == list(s.target)


# ── Translator ────────────────────────────────────────────────────────────────

def test_translator_one_hot():
    t = _one_hot_translator()
    [(text, score)] = t.translate(["cat", "house"], BeamConfig(beam_size=1))
    assert text == "kota domu ok"
    assert score > -1e-6
    assert t.translate([], BeamConfig()) == [("", 0.0)]


def test_translate_lines_keeps_order_across_threads(tiny_params, tiny_config):
    src = Vocabulary(list(RESERVED) + ["a", "b", "c", "d", "e"])
    stem = Vocabulary(list(RESERVED) + ["p", "q", "r", "s", "t", "v"])
    suffix = Vocabulary(list(SUFFIX_RESERVED) + ["x", "y"], reserved=SUFFIX_RESERVED)
    translator = Translator(Seq2Seq(tiny_params, tiny_config), src, stem, suffix)
    lines = ["a b", "c", "", "d e a", "b b b", "e"]
    config = BeamConfig(beam_size=2, max_len=4)
    serial = translate_lines(lines, translator, config)
    assert translate_lines(lines, translator, config, threads=3) == serial
    assert serial[2] == [("", 0.0)]


def test_format_nbest():
    results = [[("kota", -0.5), ("kotu", -1.25)], [("", 0.0)]]
    assert format_nbest(results, 1) == ["0 ||| kota ||| -0.500000", "1 |||  ||| 0.000000"]
    assert len(format_nbest(results, 5)) == 3


# ── Overfit ───────────────────────────────────────────────────────────────────

@pytest.fixture(scope="module")
def overfit(grammar):
    pairs, *vocabs = encode_corpus(generate(grammar, 50, seed=21), grammar.rules())
    config = TrainConfig(embed_dim=16, hidden_dim=32, dropout=0.0, epochs=200, batch_size=10,
                         lr=0.01, seed=1)
    result = train(pairs, config, config.model_config(*(len(v) for v in vocabs)))
    return pairs, result, config.model_config(*(len(v) for v in vocabs))


@pytest.mark.slow
def test_overfit_reaches_low_loss(overfit):
    _, result, _ = overfit
    assert min(r.L for r in result.curve) < 0.05


@pytest.mark.slow
def test_overfit_beam_reproduces_training_targets(overfit):
    pairs, result, model_config = overfit
    model = Seq2Seq(result.params, model_config)
    exact = 0
    for pair in pairs:
        best = beam_search(pair.src, model, BeamConfig(beam_size=4))[0]
        exact += (best.substem_ids == pair.target.substems + (EOS_ID,)
                  and best.suffix_ids == pair.target.suffixes + (N_ID,))
    assert exact >= 49
