"""
decoder.py  --  beam search over the two-step stem/suffix factorization

Each expansion takes the top-n stems of every live hypothesis, the top-n
suffixes of every such stem, and keeps the best n complete (stem, suffix)
candidates in a bounded priority queue. The search score is the unweighted
sum of stem and suffix log-probabilities; finished hypotheses compete under
log_score / len^alpha. EOS is a stem whose suffix is "N" with probability 1.

Output (translate):
  best hypothesis per line, or with --nbest k: "index ||| hypothesis ||| score"
"""
from __future__ import annotations

import heapq
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from model import EncoderState, ModelConfig, decode_step_stem, decode_step_suffix, encode
from numerics import LOG_EPS, ParamStore, Tensor, no_grad
from text_pipeline import (BOS_ID, BPE_MARK, EOS_ID, N_ID, NO_SUFFIX, MorphSplit, Vocabulary)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 4
    max_len: int = 60
    length_norm_alpha: float = 0.6

    def __post_init__(self) -> None:
        if self.beam_size < 1:
            raise ValueError("beam size must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if not 0.0 <= self.length_norm_alpha <= 1.0:
            raise ValueError("length_norm_alpha must be in [0, 1]")


@dataclass(frozen=True)
class Hypothesis:
    substem_ids: tuple[int, ...]
    suffix_ids: tuple[int, ...]
    log_score: float
    state: np.ndarray          # decoder state S after the last stem
    finished: bool = False

    def normalized(self, alpha: float) -> float:
        return self.log_score / max(len(self.substem_ids), 1) ** alpha


@dataclass
class Seq2Seq:
    params: ParamStore
    config: ModelConfig


def _log(p: np.ndarray) -> np.ndarray:
    return np.log(p + LOG_EPS)


def _top(logp: np.ndarray, n: int) -> np.ndarray:
    return np.argsort(-logp, kind="stable")[:n]


def initial_beam(enc: EncoderState) -> list[Hypothesis]:
    return [Hypothesis((), (), 0.0, enc.init.data[0].copy())]


def expand_step(beam: Sequence[Hypothesis], model: Seq2Seq, enc: EncoderState,
                config: BeamConfig, force_eos: bool = False) -> list[Hypothesis]:
    """One cube-pruning step; returns at most beam_size candidates, best first."""
    if not beam:
        raise ValueError("cannot expand an empty beam")
    if any(h.finished for h in beam):
        raise ValueError("cannot expand a finished hypothesis")
    n = config.beam_size
    k = len(beam)
    y_prev = [h.substem_ids[-1] if h.substem_ids else BOS_ID for h in beam]
    S_prev = Tensor(np.stack([h.state for h in beam]))

    with no_grad():
        dist, state = decode_step_stem(y_prev, S_prev, enc.tile(k), model.params, model.config)
        stem_logp = _log(dist.data)

        picks = []            # (hyp index, stem id)
        for i in range(k):
            stems = [EOS_ID] if force_eos else _top(stem_logp[i], n).tolist()
            picks += [(i, s) for s in stems]

        inflected = [(i, s) for i, s in picks if s != EOS_ID]
        suffix_logp = {}
        if inflected:
            rows = np.array([i for i, _ in inflected])
            stems = np.array([s for _, s in inflected])
            d = decode_step_suffix(state.select(rows), stems, model.params, model.config)
            for (i, s), row in zip(inflected, _log(d.data)):
                suffix_logp[i, s] = row

    queue: list = []
    seq = itertools.count()
    for i, s in picks:
        base = beam[i].log_score + float(stem_logp[i, s])
        if s == EOS_ID:
            options = [(N_ID, 0.0)]
        else:
            row = suffix_logp[i, s]
            options = [(int(x), float(row[x])) for x in _top(row, n)]
        for suffix, lp in options:
            item = (base + lp, -next(seq), i, s, suffix)
            if len(queue) < n:
                heapq.heappush(queue, item)
            elif item > queue[0]:
                heapq.heapreplace(queue, item)

    out = []
    for score, _, i, s, suffix in sorted(queue, reverse=True):
        h = beam[i]
        out.append(Hypothesis(h.substem_ids + (s,), h.suffix_ids + (suffix,), score,
                              state.S_stem.data[i].copy(), s == EOS_ID))
    return out


def beam_search(src: Sequence[int], model: Seq2Seq, config: BeamConfig) -> list[Hypothesis]:
    """n-best finished hypotheses, best length-normalized score first."""
    with no_grad():
        enc = encode(src, model.params, model.config)
    beam = initial_beam(enc)
    finished: list[Hypothesis] = []
    for t in range(config.max_len):
        expanded = expand_step(beam, model, enc, config, force_eos=t == config.max_len - 1)
        finished += [h for h in expanded if h.finished]
        beam = [h for h in expanded if not h.finished]
        if not beam:
            break
    finished.sort(key=lambda h: h.normalized(config.length_norm_alpha), reverse=True)
    return finished[:config.beam_size]


def score_hypothesis(src: Sequence[int], substem_ids: Sequence[int], suffix_ids: Sequence[int],
                     model: Seq2Seq) -> float:
    """Teacher-forced log-probability of a given output, scored like the search."""
    if len(substem_ids) != len(suffix_ids):
        raise ValueError("stem/suffix length mismatch")
    with no_grad():
        enc = encode(src, model.params, model.config)
        S, y_prev, total = enc.init, BOS_ID, 0.0
        for t, (s, suffix) in enumerate(zip(substem_ids, suffix_ids)):
            dist, state = decode_step_stem([y_prev], S, enc, model.params, model.config, step=t)
            total += float(_log(dist.data[0, s]))
            if s != EOS_ID:
                d = decode_step_suffix(state, [s], model.params, model.config, step=t)
                total += float(_log(d.data[0, suffix]))
            S, y_prev = state.S_stem, s
    return total


# ── Finalization ──────────────────────────────────────────────────────────────

def finalize_strings(substems: Sequence[str], suffixes: Sequence[str]) -> list[str]:
    """Join "@@" fragments into stems and attach each word's suffix."""
    if len(substems) != len(suffixes):
        raise ValueError("stem/suffix length mismatch")
    words, buf = [], ""
    for unit, suffix in zip(substems, suffixes):
        if unit.endswith(BPE_MARK):
            if suffix != NO_SUFFIX:
                raise ValueError(f"misaligned suffix {suffix!r} on non-final fragment {unit!r}")
            buf += unit[: -len(BPE_MARK)]
        else:
            words.append(MorphSplit(buf + unit, suffix).surface)
            buf = ""
    if buf:
        words.append(buf)
    return words


def finalize(hyp: Hypothesis, stem_vocab: Vocabulary, suffix_vocab: Vocabulary) -> list[str]:
    stems, suffixes = list(hyp.substem_ids), list(hyp.suffix_ids)
    if stems and stems[-1] == EOS_ID:
        stems, suffixes = stems[:-1], suffixes[:-1]
    return finalize_strings(stem_vocab.decode(stems), suffix_vocab.decode(suffixes))


# ── Batch translation ─────────────────────────────────────────────────────────

@dataclass
class Translator:
    model: Seq2Seq
    src_vocab: Vocabulary
    stem_vocab: Vocabulary
    suffix_vocab: Vocabulary

    def translate(self, tokens: Sequence[str], config: BeamConfig) -> list[tuple[str, float]]:
        if not tokens:
            logger.warning("empty source line, emitting empty translation")
            return [("", 0.0)]
        hyps = beam_search(self.src_vocab.encode(tokens), self.model, config)
        return [(" ".join(finalize(h, self.stem_vocab, self.suffix_vocab)),
                 h.normalized(config.length_norm_alpha)) for h in hyps]


def translate_lines(lines: Sequence[str], translator: Translator, config: BeamConfig,
                    threads: int = 1) -> list[list[tuple[str, float]]]:
    """n-best (text, normalized score) per line, in input order."""
    token_lines = [line.split() for line in lines]
    if threads > 1 and len(token_lines) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(lambda toks: translator.translate(toks, config), token_lines))
    else:
        results = [translator.translate(toks, config) for toks in token_lines]
    logger.info("translated %d lines (beam %d)", len(results), config.beam_size)
    return results


def format_nbest(results: Sequence[list[tuple[str, float]]], nbest: int) -> list[str]:
    return [f"{i} ||| {text} ||| {score:.6f}"
            for i, hyps in enumerate(results) for text, score in hyps[:nbest]]
