"""
model.py  --  bi-GRU encoder, attention decoder, two-step stem/suffix heads

Per target position t the decoder
  1. attends over the encoder states with S_{t-1}          -> alpha_t, C_t
  2. updates its state from the previous stem and C_t       -> S_t
  3. predicts the stem from (y_{t-1}, S_t, C_t)             -> p(stem_t)
  4. predicts the suffix from (S_t, embed(stem_t), C_t)     -> p(suffix_t)
No suffix is ever fed back into the recurrence, so suffixes cannot influence
later stems. Training loss: L = (1 - lam) * L_stem + lam * L_suffix.

Training is Adam over shuffled, length-bucketed, padded batches; the
distributed variant trains one worker per shard and replaces every worker's
parameters by their uniform average every `sync_every` batches.

Config file (flat "key = value", "#" comments), keys = TrainConfig fields:
  embed_dim, hidden_dim, dropout, lam, init_scale, epochs, batch_size, lr,
  beta1, beta2, adam_eps, clip_norm, seed, sync_every, workers,
  src_vocab_size, stem_vocab_size, suffix_vocab_size

Output:
  loss curve CSV "epoch,L,L_stem,L_suffix"; checkpoints in numerics format
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import reduce
from pathlib import Path
from typing import Callable, Sequence, get_type_hints

import numpy as np

from numerics import (ParamStore, Rng, Tensor, add, backward, clip_grad_norm, concat,
                      cross_entropy, dropout, embedding, gru_step, init_gru, init_uniform,
                      matmul, mul, no_grad, one_minus, reshape, save_checkpoint, scale,
                      softmax, stack, take_rows, tanh, weighted_sum)
from text_pipeline import BOS_ID, EOS_ID, N_ID, DataError, FactoredSentence

logger = logging.getLogger(__name__)

BUCKET_BATCHES = 8      # batches per length bucket
INIT_STREAM = 0         # Rng child keys
WORKER_STREAM = 1


# ── Config ────────────────────────────────────────────────────────────────────

@dataclass
class ModelConfig:
    src_vocab: int
    stem_vocab: int
    suffix_vocab: int
    embed_dim: int = 64
    hidden_dim: int = 128
    dropout_rate: float = 0.2
    lam: float = 0.1
    init_scale: float = 0.08

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if min(self.src_vocab, self.stem_vocab, self.embed_dim, self.hidden_dim) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.stem_vocab <= EOS_ID or self.src_vocab <= EOS_ID:
            raise ValueError("vocabularies must hold the reserved tokens")
        if self.suffix_vocab <= N_ID:
            raise ValueError("suffix vocabulary must contain the N tag")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class TrainConfig:
    embed_dim: int = 64
    hidden_dim: int = 128
    dropout: float = 0.2
    lam: float = 0.1
    init_scale: float = 0.08
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 1
    sync_every: int = 100
    workers: int = 1
    src_vocab_size: int = 30000
    stem_vocab_size: int = 30000
    suffix_vocab_size: int = 1000

    def model_config(self, src_vocab: int, stem_vocab: int, suffix_vocab: int) -> ModelConfig:
        return ModelConfig(src_vocab, stem_vocab, suffix_vocab, self.embed_dim, self.hidden_dim,
                           self.dropout, self.lam, self.init_scale)


def _parse_key_values(text: str, source: str) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return values


def _coerce(cls, values: dict[str, str], source: str):
    known = get_type_hints(cls)
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise DataError(f"{source}: unknown config key {key!r}")
        typ = known[key]
        try:
            kwargs[key] = typ(raw)
        except ValueError:
            raise DataError(f"{source}: bad value for {key}: {raw!r}") from None
    return kwargs


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> TrainConfig:
    """File values first, then non-None overrides (command-line flags win)."""
    values = {}
    if path is not None:
        values = _coerce(TrainConfig, _parse_key_values(Path(path).read_text(encoding="utf-8"),
                                                        str(path)), str(path))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig(**values)


def save_key_values(obj, path: str | Path) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in asdict(obj).items()), encoding="utf-8")


# ── Parameters ────────────────────────────────────────────────────────────────

def init_params(config: ModelConfig, rng: Rng) -> ParamStore:
    E, H, s = config.embed_dim, config.hidden_dim, config.init_scale
    p = ParamStore()
    init_uniform(p, "src_embed", (config.src_vocab, E), rng, s)
    init_gru(p, "enc_fwd", E, H, rng, s)
    init_gru(p, "enc_bwd", E, H, rng, s)
    init_uniform(p, "dec_init.W", (H, H), rng, s)
    init_uniform(p, "dec_init.b", (H,), rng, s)
    init_uniform(p, "stem_embed", (config.stem_vocab, E), rng, s)
    init_uniform(p, "att.W", (H, H), rng, s)
    init_uniform(p, "att.U", (2 * H, H), rng, s)
    init_uniform(p, "att.v", (H, 1), rng, s)
    init_gru(p, "dec", E + 2 * H, H, rng, s)
    init_uniform(p, "out_stem.W", (E + H + 2 * H, H), rng, s)
    init_uniform(p, "out_stem.b", (H,), rng, s)
    init_uniform(p, "stem_head.W", (H, config.stem_vocab), rng, s)
    init_uniform(p, "suffix_ff.W", (H + E + 2 * H, H), rng, s)
    init_uniform(p, "suffix_ff.b", (H,), rng, s)
    init_uniform(p, "suffix_head.W", (H, config.suffix_vocab), rng, s)
    return p


# parameters that only the suffix prediction reads
SUFFIX_PARAMS = ("suffix_ff.W", "suffix_ff.b", "suffix_head.W")


# ── Batches ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class TrainingPair:
    src: tuple[int, ...]
    target: FactoredSentence    # sub-stem ids, suffix ids (no BOS/EOS)


@dataclass
class Batch:
    src: np.ndarray          # [B, m]
    src_mask: np.ndarray     # [B, m] bool
    stem_in: np.ndarray      # [B, T] BOS + stems
    stem_out: np.ndarray     # [B, T] stems + EOS
    suffix_out: np.ndarray   # [B, T] suffixes + N
    tgt_mask: np.ndarray     # [B, T] bool

    @property
    def num_tokens(self) -> int:
        return int(self.tgt_mask.sum())


def make_batch(pairs: Sequence[TrainingPair]) -> Batch:
    """Pad to the longest pair; padding positions are masked out of the loss."""
    B = len(pairs)
    m = max(len(p.src) for p in pairs)
    T = max(len(p.target) for p in pairs) + 1
    src = np.full((B, m), EOS_ID, dtype=np.int64)
    src_mask = np.zeros((B, m), dtype=bool)
    stem_in = np.full((B, T), EOS_ID, dtype=np.int64)
    stem_out = np.full((B, T), EOS_ID, dtype=np.int64)
    suffix_out = np.full((B, T), N_ID, dtype=np.int64)
    tgt_mask = np.zeros((B, T), dtype=bool)
    for b, p in enumerate(pairs):
        n = len(p.target)
        src[b, :len(p.src)] = p.src
        src_mask[b, :len(p.src)] = True
        stem_in[b, 0] = BOS_ID
        stem_in[b, 1:n + 1] = p.target.substems
        stem_out[b, :n] = p.target.substems
        suffix_out[b, :n] = p.target.suffixes
        tgt_mask[b, :n + 1] = True
    return Batch(src, src_mask, stem_in, stem_out, suffix_out, tgt_mask)


# ── Encoder ───────────────────────────────────────────────────────────────────

@dataclass
class EncoderState:
    states: Tensor        # [B, m, 2H], row j = [fwd_j ; bwd_j]
    keys: Tensor          # [B, m, H] attention projection of states
    mask: np.ndarray      # [B, m]
    init: Tensor          # [B, H] initial decoder state

    def rows(self, b: int = 0) -> np.ndarray:
        return self.states.data[b][self.mask[b]]

    def tile(self, n: int) -> EncoderState:
        """Repeat a single-sentence encoding n times (beam search)."""
        idx = np.zeros(n, dtype=np.int64)
        return EncoderState(take_rows(self.states, idx), take_rows(self.keys, idx),
                            self.mask[idx], take_rows(self.init, idx))


def _masked_update(new: Tensor, old: Tensor, keep: np.ndarray) -> Tensor:
    if keep.all():
        return new
    m = Tensor(keep[:, None].astype(np.float64))
    return add(mul(new, m), mul(old, one_minus(m)))


def encode_batch(src: np.ndarray, src_mask: np.ndarray, params: ParamStore, config: ModelConfig,
                 training: bool = False, rng: Rng | None = None) -> EncoderState:
    src = np.asarray(src, dtype=np.int64)
    B, m = src.shape
    if m == 0 or not src_mask.any(axis=1).all():
        raise ValueError("empty source sentence")
    if src.max() >= config.src_vocab:
        raise IndexError(f"source id {src.max()} out of range for vocabulary {config.src_vocab}")
    H = config.hidden_dim
    xs = [dropout(embedding(params["src_embed"], src[:, j]), config.dropout_rate, rng, training)
          for j in range(m)]

    h = Tensor(np.zeros((B, H)))
    fwd = []
    for j in range(m):
        h = _masked_update(gru_step(xs[j], h, params, "enc_fwd"), h, src_mask[:, j])
        fwd.append(h)
    h = Tensor(np.zeros((B, H)))
    bwd = [None] * m
    for j in reversed(range(m)):
        h = _masked_update(gru_step(xs[j], h, params, "enc_bwd"), h, src_mask[:, j])
        bwd[j] = h

    states = stack([concat([f, b]) for f, b in zip(fwd, bwd)], axis=1)
    keys = matmul(states, params["att.U"])
    init = tanh(add(matmul(bwd[0], params["dec_init.W"]), params["dec_init.b"]))
    return EncoderState(states, keys, src_mask.copy(), init)


def encode(src: Sequence[int], params: ParamStore, config: ModelConfig) -> EncoderState:
    """One sentence, inference mode."""
    if len(src) == 0:
        raise ValueError("empty source sentence")
    ids = np.asarray([src], dtype=np.int64)
    return encode_batch(ids, np.ones_like(ids, dtype=bool), params, config)


# ── Decoder steps ─────────────────────────────────────────────────────────────

def attend(S_prev: Tensor, enc: EncoderState, params: ParamStore) -> tuple[Tensor, Tensor]:
    """alpha = softmax_j(v . tanh(S_prev W + h_j U)),  C = sum_j alpha_j h_j."""
    B, m, H = enc.keys.shape
    query = reshape(matmul(S_prev, params["att.W"]), (B, 1, H))
    energies = reshape(matmul(tanh(add(enc.keys, query)), params["att.v"]), (B, m))
    alpha = softmax(energies, mask=enc.mask)
    return alpha, weighted_sum(alpha, enc.states)


@dataclass
class DecoderStepState:
    S_stem: Tensor
    C: Tensor
    alpha: Tensor
    O_stem: Tensor
    step: int = 0
    S_suffix: Tensor | None = None
    suffix_context: Tensor | None = None    # the C the suffix head actually read

    def select(self, rows: np.ndarray) -> DecoderStepState:
        rows = np.asarray(rows, dtype=np.int64)
        return DecoderStepState(take_rows(self.S_stem, rows), take_rows(self.C, rows),
                                take_rows(self.alpha, rows), take_rows(self.O_stem, rows), self.step)


def _check_ids(ids, size: int, what: str) -> np.ndarray:
    ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
    if ids.min() < 0 or ids.max() >= size:
        raise IndexError(f"{what} id out of range for vocabulary of size {size}")
    return ids


def decode_step_stem(y_prev_stem, S_prev: Tensor, enc: EncoderState, params: ParamStore,
                     config: ModelConfig, step: int = 0, training: bool = False,
                     rng: Rng | None = None) -> tuple[Tensor, DecoderStepState]:
    y = _check_ids(y_prev_stem, config.stem_vocab, "stem")
    rate = config.dropout_rate
    alpha, C = attend(S_prev, enc, params)
    e = dropout(embedding(params["stem_embed"], y), rate, rng, training)
    S = gru_step(concat([e, C]), S_prev, params, "dec")
    O = tanh(add(matmul(concat([e, S, C]), params["out_stem.W"]), params["out_stem.b"]))
    dist = softmax(matmul(dropout(O, rate, rng, training), params["stem_head.W"]))
    return dist, DecoderStepState(S, C, alpha, O, step)


def decode_step_suffix(state: DecoderStepState, y_stem, params: ParamStore, config: ModelConfig,
                       step: int | None = None, training: bool = False,
                       rng: Rng | None = None) -> Tensor:
    if step is not None and step != state.step:
        raise ValueError(f"stale decoder state: built at step {state.step}, used at step {step}")
    y = _check_ids(y_stem, config.stem_vocab, "stem")
    rate = config.dropout_rate
    e = dropout(embedding(params["stem_embed"], y), rate, rng, training)
    state.suffix_context = state.C
    state.S_suffix = tanh(add(matmul(concat([state.S_stem, e, state.C]), params["suffix_ff.W"]),
                              params["suffix_ff.b"]))
    return softmax(matmul(dropout(state.S_suffix, rate, rng, training), params["suffix_head.W"]))


# ── Loss ──────────────────────────────────────────────────────────────────────

@dataclass
class LossBreakdown:
    L_stem: Tensor
    L_suffix: Tensor
    L: Tensor

    def values(self) -> tuple[float, float, float]:
        return self.L.item(), self.L_stem.item(), self.L_suffix.item()


def forward_loss(pairs: Batch | TrainingPair | Sequence[TrainingPair], params: ParamStore,
                 config: ModelConfig, lam: float | None = None, training: bool = False,
                 rng: Rng | None = None) -> LossBreakdown:
    """Teacher-forced mean NLL of gold stems and gold suffixes, mixed by lambda."""
    if isinstance(pairs, TrainingPair):
        pairs = [pairs]
    batch = pairs if isinstance(pairs, Batch) else make_batch(pairs)
    lam = config.lam if lam is None else lam
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")

    enc = encode_batch(batch.src, batch.src_mask, params, config, training, rng)
    S = enc.init
    stem_terms, suffix_terms = [], []
    for t in range(batch.stem_in.shape[1]):
        dist_stem, state = decode_step_stem(batch.stem_in[:, t], S, enc, params, config,
                                            step=t, training=training, rng=rng)
        dist_suffix = decode_step_suffix(state, batch.stem_out[:, t], params, config,
                                         step=t, training=training, rng=rng)
        mask = batch.tgt_mask[:, t]
        stem_terms.append(cross_entropy(dist_stem, batch.stem_out[:, t], mask))
        suffix_terms.append(cross_entropy(dist_suffix, batch.suffix_out[:, t], mask))
        S = state.S_stem
    n = batch.num_tokens
    L_stem = scale(reduce(add, stem_terms), 1.0 / n)
    L_suffix = scale(reduce(add, suffix_terms), 1.0 / n)
    L = add(scale(L_stem, 1.0 - lam), scale(L_suffix, lam))
    return LossBreakdown(L_stem, L_suffix, L)


# ── Adam ──────────────────────────────────────────────────────────────────────

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
        return cls({n: np.zeros_like(t.data) for n, t in params.items()},
                   {n: np.zeros_like(t.data) for n, t in params.items()},
                   0, lr, beta1, beta2, eps)


def adam_update(params: ParamStore, state: AdamState) -> None:
    for name, p in params.items():
        if p.grad is None:
            raise KeyError(f"missing gradient for parameter {name}")
    state.step += 1
    t, b1, b2 = state.step, state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1 ** t)
        v_hat = state.v[name] / (1.0 - b2 ** t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ── Training ──────────────────────────────────────────────────────────────────

@dataclass
class EpochLoss:
    epoch: int
    L: float
    L_stem: float
    L_suffix: float
    tokens: int = 0


@dataclass
class TrainResult:
    params: ParamStore
    curve: list[EpochLoss] = field(default_factory=list)


def iter_batches(pairs: Sequence[TrainingPair], batch_size: int, rng: Rng) -> list[list[TrainingPair]]:
    """Shuffle, sort each bucket by length, cut into batches, shuffle batch order."""
    order = rng.permutation(len(pairs))
    span = batch_size * BUCKET_BATCHES
    batches = []
    for start in range(0, len(order), span):
        bucket = sorted(order[start:start + span].tolist(),
                        key=lambda i: (len(pairs[i].target), len(pairs[i].src)))
        batches += [[pairs[i] for i in bucket[k:k + batch_size]]
                    for k in range(0, len(bucket), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


class _Worker:
    """One training replica: its own shard, parameters, Adam moments and Rng stream."""

    def __init__(self, index: int, shard: Sequence[TrainingPair], config: TrainConfig,
                 model_config: ModelConfig, params: ParamStore, rng: Rng):
        self.index = index
        self.shard = list(shard)
        self.config = config
        self.model_config = model_config
        self.params = params
        self.rng = rng
        self.adam = AdamState.for_params(params, config.lr, config.beta1, config.beta2, config.adam_eps)
        self.epochs_done = 0
        self.curve: list[EpochLoss] = []
        self._queue: list[list[TrainingPair]] = []
        self._sums = np.zeros(3)
        self._tokens = 0

    @property
    def done(self) -> bool:
        return self.epochs_done >= self.config.epochs and not self._queue

    def run(self, max_batches: float = math.inf,
            on_epoch: Callable[[EpochLoss, ParamStore], None] | None = None) -> int:
        ran = 0
        while ran < max_batches:
            if not self._queue:
                if self.epochs_done >= self.config.epochs:
                    break
                self._queue = iter_batches(self.shard, self.config.batch_size, self.rng)
            self._step(make_batch(self._queue.pop(0)))
            ran += 1
            if not self._queue:
                self._close_epoch(on_epoch)
        return ran

    def _step(self, batch: Batch) -> None:
        self.params.zero_grad()
        loss = forward_loss(batch, self.params, self.model_config, training=True, rng=self.rng)
        backward(loss.L)
        clip_grad_norm(self.params, self.config.clip_norm)
        adam_update(self.params, self.adam)
        n = batch.num_tokens
        self._sums += np.array(loss.values()) * n
        self._tokens += n

    def _close_epoch(self, on_epoch) -> None:
        self.epochs_done += 1
        L, L_stem, L_suffix = self._sums / max(self._tokens, 1)
        record = EpochLoss(self.epochs_done, float(L), float(L_stem), float(L_suffix), self._tokens)
        self.curve.append(record)
        self._sums[:] = 0.0
        self._tokens = 0
        if not all(math.isfinite(x) for x in (record.L, record.L_stem, record.L_suffix)):
            logger.warning("worker %d epoch %d: non-finite loss", self.index, record.epoch)
        if on_epoch is not None:
            on_epoch(record, self.params)


def _log_banner(title: str, config: TrainConfig, model_config: ModelConfig, n_pairs: int,
                params: ParamStore) -> None:
    logger.info("=" * 65)
    logger.info("  %s", title)
    logger.info("=" * 65)
    logger.info("  Pairs:      %d", n_pairs)
    logger.info("  Vocab:      src %d | stem %d | suffix %d",
                model_config.src_vocab, model_config.stem_vocab, model_config.suffix_vocab)
    logger.info("  Dims:       embed %d | hidden %d | %d parameters",
                model_config.embed_dim, model_config.hidden_dim, params.num_values())
    logger.info("  Objective:  (1 - %.2f) * L_stem + %.2f * L_suffix", model_config.lam, model_config.lam)
    logger.info("  Schedule:   %d epochs | batch %d | Adam lr %g | dropout %.2f | seed %d",
                config.epochs, config.batch_size, config.lr, model_config.dropout_rate, config.seed)
    logger.info("=" * 65)


def train(corpus: Sequence[TrainingPair], config: TrainConfig, model_config: ModelConfig,
          out_dir: str | Path | None = None,
          on_epoch: Callable[[EpochLoss, ParamStore], None] | None = None) -> TrainResult:
    if not corpus:
        raise ValueError("empty training corpus")
    rng = Rng(config.seed)
    params = init_params(model_config, rng.child(INIT_STREAM))
    _log_banner("TRAIN  --  stem/suffix factored decoder", config, model_config, len(corpus), params)

    def _epoch_done(record: EpochLoss, p: ParamStore) -> None:
        logger.info("epoch %3d  L=%.4f  L_stem=%.4f  L_suffix=%.4f",
                    record.epoch, record.L, record.L_stem, record.L_suffix)
        if out_dir is not None:
            save_checkpoint(p, Path(out_dir) / "model.msq")
        if on_epoch is not None:
            on_epoch(record, p)

    worker = _Worker(0, corpus, config, model_config, params, rng.child(WORKER_STREAM, 0))
    worker.run(on_epoch=_epoch_done)
    return TrainResult(worker.params, worker.curve)


def _merge_curves(curves: Sequence[list[EpochLoss]]) -> list[EpochLoss]:
    merged = []
    for records in zip(*curves):
        tokens = sum(r.tokens for r in records) or 1
        avg = [sum(getattr(r, k) * r.tokens for r in records) / tokens for k in ("L", "L_stem", "L_suffix")]
        merged.append(EpochLoss(records[0].epoch, *avg, tokens))
    return merged


def distributed_train(corpus: Sequence[TrainingPair], config: TrainConfig, model_config: ModelConfig,
                      workers: int | None = None, sync_every: int | None = None,
                      shards: Sequence[Sequence[TrainingPair]] | None = None,
                      shared_seed: bool = False, threads: int = 1,
                      on_sync: Callable[[int, ParamStore], None] | None = None) -> TrainResult:
    """
    Parameter averaging: every sync_every batches the workers that trained in
    that round are replaced by their uniform mean, and workers that already
    finished adopt it too. Each worker runs config.epochs passes over its own
    shard, so per-worker compute matches a single-worker run of the same config
    on a corpus the size of one shard.
    """
    workers = config.workers if workers is None else workers
    sync_every = config.sync_every if sync_every is None else sync_every
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if sync_every < 1:
        raise ValueError("sync_every must be >= 1")
    if shards is None:
        if workers > len(corpus):
            raise ValueError(f"{workers} workers but only {len(corpus)} training pairs")
        shards = [list(corpus[i::workers]) for i in range(workers)]
    elif len(shards) != workers:
        raise ValueError(f"got {len(shards)} shards for {workers} workers")
    if any(not s for s in shards):
        raise ValueError("every worker needs at least one training pair")

    rng = Rng(config.seed)
    snapshot = init_params(model_config, rng.child(INIT_STREAM))
    _log_banner(f"TRAIN  --  parameter averaging, {workers} workers, sync every {sync_every}",
                config, model_config, sum(len(s) for s in shards), snapshot)
    pool = [_Worker(i, shard, config, model_config, snapshot.copy(),
                    rng.child(WORKER_STREAM, 0 if shared_seed else i))
            for i, shard in enumerate(shards)]

    rounds = 0
    while not all(w.done for w in pool):
        active = [w for w in pool if not w.done]
        if threads > 1 and len(active) > 1:
            with ThreadPoolExecutor(max_workers=min(threads, len(active))) as ex:
                list(ex.map(lambda w: w.run(sync_every), active))
        else:
            for w in active:
                w.run(sync_every)
        # only workers that trained this round enter the mean
        averaged = ParamStore.average([w.params for w in active])
        for w in pool:
            w.params.load_values(averaged)
        rounds += 1
        logger.debug("sync round %d: epochs %s", rounds, [w.epochs_done for w in pool])
        if on_sync is not None:
            on_sync(rounds, averaged)

    curve = _merge_curves([w.curve for w in pool])
    for record in curve:
        logger.info("epoch %3d  L=%.4f  L_stem=%.4f  L_suffix=%.4f",
                    record.epoch, record.L, record.L_stem, record.L_suffix)
    logger.info("%d sync rounds", rounds)
    return TrainResult(pool[0].params, curve)


def score_pairs(corpus: Sequence[TrainingPair], params: ParamStore, config: ModelConfig,
                batch_size: int = 64) -> EpochLoss:
    """Token-weighted mean loss, no dropout, no updates."""
    sums, tokens = np.zeros(3), 0
    with no_grad():
        for start in range(0, len(corpus), batch_size):
            batch = make_batch(corpus[start:start + batch_size])
            sums += np.array(forward_loss(batch, params, config).values()) * batch.num_tokens
            tokens += batch.num_tokens
    L, L_stem, L_suffix = sums / max(tokens, 1)
    return EpochLoss(0, float(L), float(L_stem), float(L_suffix), tokens)


def write_loss_curve(curve: Sequence[EpochLoss], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "L", "L_stem", "L_suffix"])
        for r in curve:
            w.writerow([r.epoch, repr(r.L), repr(r.L_stem), repr(r.L_suffix)])
