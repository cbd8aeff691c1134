"""
morphseq.py  --  command-line entry point for the factored stem/suffix translation toolkit

Workflow:
  synth -> preprocess -> ibm1-filter -> factor -> bpe-learn -> factor --bpe
        -> train | train-distributed -> translate -> eval

Every subcommand writes run_manifest.json next to its outputs (subcommand,
config, inputs, outputs, seed, version); eval writes it next to --hyp and
gradcheck into --out. All randomness flows from --seed. --threads 1 (the
default) is the bit-deterministic serial path.

Exit codes: 0 ok, 1 usage error, 2 data error (malformed or missing input,
violated contract).

Config (env vars):
  MORPHSEQ_LOG         log level (default INFO)
  MORPHSEQ_EVENT_LOG   JSONL event log (default morphseq_log.jsonl)
  MORPHSEQ_THREADS     default for --threads (default 1)
  MORPHSEQ_DEBUG       "1" -> NaN/Inf check after every numeric op

Output:
  morphseq_log.jsonl  --  one JSON line per run, training epoch or sync round
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from decoder import BeamConfig, Seq2Seq, Translator, format_nbest, translate_lines
from evaluation import report
from model import (EpochLoss, ModelConfig, TrainingPair, distributed_train, forward_loss,
                   init_params, load_config, save_key_values, train, write_loss_curve)
from numerics import ParamStore, Rng, finite_diff_check, load_checkpoint, save_checkpoint
from synthlang import DEFAULT_GRAMMAR, generate, holdout_split, load_grammar, write_corpus
from text_pipeline import (RESERVED, SUFFIX_RESERVED, WORD_LEVEL, DataError, FactoredSentence,
                           apply_bpe_with_suffix_adjust, build_vocab, factor_sentence,
                           ibm1_score_and_filter, ibm1_train, learn_bpe,
                           length_filter, load_bpe, load_rules, load_vocab, preprocess, save_bpe,
                           save_rules, save_vocab, stem_word)

__version__ = "0.3.0"

# ── Config ────────────────────────────────────────────────────────────────────

EVENT_LOG = Path(os.getenv("MORPHSEQ_EVENT_LOG", "morphseq_log.jsonl"))
DEFAULT_THREADS = int(os.getenv("MORPHSEQ_THREADS", "1"))
GRADCHECK_TOL = 1e-4
GRADCHECK_FLOOR = 1e-5
MANIFEST = "run_manifest.json"

# ── Logging ───────────────────────────────────────────────────────────────────

logging.basicConfig(
    level=os.getenv("MORPHSEQ_LOG", "INFO").upper(),
    format="%(asctime)s [%(levelname)s] %(message)s",
    datefmt="%H:%M:%S",
)
logger = logging.getLogger(__name__)


def log_event(record: dict) -> None:
    record["ts"] = datetime.now(timezone.utc).isoformat()
    with open(EVENT_LOG, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, ensure_ascii=False) + "\n")


def write_manifest(out_dir: Path, args: argparse.Namespace, inputs: Sequence, outputs: Sequence) -> None:
    manifest = {
        "subcommand": args.command,
        "config": str(args.config) if getattr(args, "config", None) else None,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": getattr(args, "seed", None),
        "version": __version__,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    log_event({"type": "run", **manifest})


# ── File helpers ──────────────────────────────────────────────────────────────

def read_lines(path: str | Path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def write_lines(path: str | Path, lines: Sequence[str]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_parallel(*paths) -> list[list[str]]:
    columns = [read_lines(p) for p in paths]
    if len({len(c) for c in columns}) != 1:
        raise DataError("line counts differ: " + ", ".join(f"{p} ({len(c)})" for p, c in zip(paths, columns)))
    return columns


def _with_suffix(prefix: str | Path, ext: str) -> Path:
    prefix = Path(prefix)
    return prefix.with_name(prefix.name + ext)


# ── Subcommands ───────────────────────────────────────────────────────────────

def cmd_preprocess(args) -> int:
    if args.tgt:
        src, tgt = read_parallel(args.src, args.tgt)
        pairs = [(preprocess(s), preprocess(t)) for s, t in zip(src, tgt)]
        kept = [p for p in pairs if length_filter(p, args.min_len, args.max_len)]
        outs = [_with_suffix(args.out, ".src"), _with_suffix(args.out, ".tgt")]
        write_lines(outs[0], [" ".join(s) for s, _ in kept])
        write_lines(outs[1], [" ".join(t) for _, t in kept])
        logger.info("preprocess: kept %d / %d pairs", len(kept), len(pairs))
        inputs = [args.src, args.tgt]
    else:
        outs = [Path(args.out)]
        write_lines(outs[0], [" ".join(preprocess(s)) for s in read_lines(args.src)])
        inputs = [args.src]
    write_manifest(outs[0].parent, args, inputs, outs)
    return 0


def cmd_stem(args) -> int:
    rules = load_rules(args.rules)
    words = [w for line in read_lines(args.input) for w in line.split()]
    lines = [f"{w}\t{s.stem}\t{s.suffix}" for w, s in ((w, stem_word(w, rules)) for w in words)]
    if args.output:
        write_lines(args.output, lines)
        write_manifest(Path(args.output).parent, args, [args.input, args.rules], [args.output])
    else:
        print("\n".join(lines))
    return 0


def cmd_factor(args) -> int:
    if not args.word_level and not args.rules:
        print("morphseq factor: error: --rules is required unless --word-level is given", file=sys.stderr)
        return 1
    rules = WORD_LEVEL if args.word_level else load_rules(args.rules)
    bpe = load_bpe(args.bpe) if args.bpe else None
    stems, suffixes = [], []
    for line in read_lines(args.input):
        f = FactoredSentence(*factor_sentence(line.split(), rules))
        if bpe is not None:
            f = apply_bpe_with_suffix_adjust(f, bpe)
        stems.append(" ".join(f.substems))
        suffixes.append(" ".join(f.suffixes))
    outs = [_with_suffix(args.out, ".stem"), _with_suffix(args.out, ".suffix")]
    write_lines(outs[0], stems)
    write_lines(outs[1], suffixes)
    inputs = [args.input] + ([] if args.word_level else [args.rules]) + ([args.bpe] if args.bpe else [])
    write_manifest(outs[0].parent, args, inputs, outs)
    return 0


def cmd_bpe_learn(args) -> int:
    model = learn_bpe([line.split() for line in read_lines(args.input)], args.merges)
    save_bpe(model, args.output)
    logger.info("bpe-learn: %d merges", len(model.merges))
    write_manifest(Path(args.output).parent, args, [args.input], [args.output])
    return 0


def cmd_vocab(args) -> int:
    reserved = SUFFIX_RESERVED if args.suffix else RESERVED
    vocab = build_vocab([line.split() for line in read_lines(args.input)], args.max_size, reserved)
    save_vocab(vocab, args.output)
    logger.info("vocab: %d entries", len(vocab))
    write_manifest(Path(args.output).parent, args, [args.input], [args.output])
    return 0


def cmd_ibm1_filter(args) -> int:
    src, tgt = read_parallel(args.src, args.tgt)
    corpus = [(s.split(), t.split()) for s, t in zip(src, tgt)]
    model = ibm1_train(corpus, args.iters)
    kept = ibm1_score_and_filter(corpus, model, args.threshold)
    outs = [_with_suffix(args.out, ".src"), _with_suffix(args.out, ".tgt")]
    write_lines(outs[0], [" ".join(s) for s, _ in kept])
    write_lines(outs[1], [" ".join(t) for _, t in kept])
    write_manifest(outs[0].parent, args, [args.src, args.tgt], outs)
    return 0


def _train_config(args):
    overrides = {
        "seed": args.seed, "epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
        "embed_dim": args.embed_dim, "hidden_dim": args.hidden_dim, "dropout": args.dropout,
        "lam": args.lam, "clip_norm": args.clip_norm,
        "workers": getattr(args, "workers", None), "sync_every": getattr(args, "sync_every", None),
    }
    return load_config(args.config, overrides)


def _load_training_data(args, config):
    src, stems, suffixes = read_parallel(args.src, _with_suffix(args.factored, ".stem"),
                                         _with_suffix(args.factored, ".suffix"))
    src_tok = [s.split() for s in src]
    stem_tok = [s.split() for s in stems]
    suffix_tok = [s.split() for s in suffixes]
    src_vocab = build_vocab(src_tok, config.src_vocab_size)
    stem_vocab = build_vocab(stem_tok, config.stem_vocab_size)
    suffix_vocab = build_vocab(suffix_tok, config.suffix_vocab_size, SUFFIX_RESERVED)
    pairs = []
    for lineno, (s, st, sf) in enumerate(zip(src_tok, stem_tok, suffix_tok), 1):
        if not s:
            logger.warning("line %d: empty source, skipped", lineno)
            continue
        if len(st) != len(sf):
            raise DataError(f"line {lineno}: {len(st)} stems but {len(sf)} suffixes")
        pairs.append(TrainingPair(tuple(src_vocab.encode(s)),
                                  FactoredSentence(stem_vocab.encode(st), suffix_vocab.encode(sf))))
    return pairs, src_vocab, stem_vocab, suffix_vocab


def _epoch_event(record: EpochLoss, _params: ParamStore) -> None:
    log_event({"type": "epoch", "epoch": record.epoch, "L": record.L,
               "L_stem": record.L_stem, "L_suffix": record.L_suffix, "tokens": record.tokens})


def cmd_train(args) -> int:
    config = _train_config(args)
    args.seed = config.seed
    pairs, src_vocab, stem_vocab, suffix_vocab = _load_training_data(args, config)
    model_config = config.model_config(len(src_vocab), len(stem_vocab), len(suffix_vocab))
    out = Path(args.model_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_vocab(src_vocab, out / "src.vocab")
    save_vocab(stem_vocab, out / "stem.vocab")
    save_vocab(suffix_vocab, out / "suffix.vocab")
    save_key_values(config, out / "config.txt")

    if args.command == "train-distributed":
        result = distributed_train(
            pairs, config, model_config, threads=args.threads,
            on_sync=lambda r, _p: log_event({"type": "sync", "round": r, "workers": config.workers}))
        for record in result.curve:
            _epoch_event(record, result.params)
    else:
        result = train(pairs, config, model_config, out_dir=out, on_epoch=_epoch_event)
    save_checkpoint(result.params, out / "model.msq")
    write_loss_curve(result.curve, out / "loss_curve.csv")
    outputs = [out / n for n in ("model.msq", "src.vocab", "stem.vocab", "suffix.vocab",
                                 "config.txt", "loss_curve.csv")]
    write_manifest(out, args, [args.src, args.factored], outputs)
    return 0


def load_translator(model_dir: str | Path) -> Translator:
    d = Path(model_dir)
    config = load_config(d / "config.txt")
    src_vocab = load_vocab(d / "src.vocab")
    stem_vocab = load_vocab(d / "stem.vocab")
    suffix_vocab = load_vocab(d / "suffix.vocab", SUFFIX_RESERVED)
    model_config = config.model_config(len(src_vocab), len(stem_vocab), len(suffix_vocab))
    params = load_checkpoint(d / "model.msq")
    expected = init_params(model_config, Rng(0))
    for name, t in expected.items():
        if name not in params or params[name].shape != t.shape:
            raise DataError(f"{d / 'model.msq'}: parameter {name} missing or misshapen")
    return Translator(Seq2Seq(params, model_config), src_vocab, stem_vocab, suffix_vocab)


def cmd_translate(args) -> int:
    translator = load_translator(args.model_dir)
    beam = BeamConfig(args.beam, args.max_len, args.alpha)
    lines = read_lines(args.input)
    logger.info("=" * 65)
    logger.info("  TRANSLATE  --  %d lines", len(lines))
    logger.info("=" * 65)
    logger.info("  Model:      %s", args.model_dir)
    logger.info("  Beam:       %d | max_len %d | alpha %.2f", beam.beam_size, beam.max_len,
                beam.length_norm_alpha)
    logger.info("  Threads:    %d", args.threads)
    logger.info("=" * 65)
    results = translate_lines(lines, translator, beam, threads=args.threads)
    if args.nbest:
        out_lines = format_nbest(results, args.nbest)
    else:
        out_lines = [hyps[0][0] for hyps in results]
    write_lines(args.output, out_lines)
    write_manifest(Path(args.output).parent, args, [args.model_dir, args.input], [args.output])
    return 0


def cmd_eval(args) -> int:
    hyps, refs = read_parallel(args.hyp, args.ref)
    rules = load_rules(args.rules) if args.rules else WORD_LEVEL
    vocab = load_vocab(args.vocab) if args.vocab else None
    scores = report(hyps, refs, rules, vocab)
    print("# corpus BLEU-4, lowercased pipeline tokenization, single reference")
    print(f"BLEU={scores['BLEU']:.6f} stemBLEU={scores['stemBLEU']:.6f} coverage={scores['coverage']:.6f}")
    print(" ".join(f"p{n}={scores[f'p{n}']:.6f}" for n in range(1, 5)) + f" BP={scores['BP']:.6f}")
    write_manifest(Path(args.hyp).parent, args, [args.hyp, args.ref], [])
    return 0


def cmd_synth(args) -> int:
    grammar = load_grammar(args.grammar)
    corpus = generate(grammar, args.num, args.seed)
    split = holdout_split(corpus, grammar, args.seed)
    out = Path(args.out)
    outputs = []
    for name, part in (("all", corpus), ("train", split.train), ("test_seen", split.test_seen),
                       ("test_novel", split.test_novel)):
        outputs += write_corpus(part, out / name)
    held = out / "held_out.tsv"
    write_lines(held, [f"{stem}\t{grammar.paradigm[cell]}\t{cell}" for stem, cell in sorted(split.held_out)])
    save_rules(grammar.rules(), out / "grammar.rules")
    write_manifest(out, args, [args.grammar], outputs + [held, out / "grammar.rules"])
    return 0


def cmd_gradcheck(args) -> int:
    rng = Rng(args.seed)
    config = ModelConfig(src_vocab=6, stem_vocab=7, suffix_vocab=5, embed_dim=4, hidden_dim=4,
                         dropout_rate=0.0, lam=0.3, init_scale=0.3)
    params = init_params(config, rng.child(0))
    pairs = [TrainingPair((3, 4, 5), FactoredSentence((3, 4), (4, 3))),
             TrainingPair((5, 3), FactoredSentence((6, 5, 3), (3, 3, 4)))]
    err = finite_diff_check(lambda p: forward_loss(pairs, p, config).L, params, floor=GRADCHECK_FLOOR)
    print(f"max relative error {err:.3e} over {params.num_values()} parameters")
    if err >= GRADCHECK_TOL:
        logger.error("gradient check failed: %.3e >= %.0e", err, GRADCHECK_TOL)
        return 2
    write_manifest(Path(args.out), args, [], [])
    return 0


# ── Parser ────────────────────────────────────────────────────────────────────

class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--src", required=True, help="preprocessed source sentences")
    p.add_argument("--factored", required=True, help="prefix of PREFIX.stem / PREFIX.suffix")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--config", help="key = value training config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lambda", dest="lam", type=float, help="suffix loss weight in [0, 1]")
    p.add_argument("--clip-norm", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="morphseq", description="Factored stem/suffix neural translation toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=DEFAULT_THREADS,
                        help="worker threads; 1 is the bit-deterministic serial path")

    p = sub.add_parser("preprocess", parents=[common], help="entity normalization + length filter")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt")
    p.add_argument("--out", required=True, help="output file, or prefix when --tgt is given")
    p.add_argument("--min-len", type=int, default=1)
    p.add_argument("--max-len", type=int, default=30)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("stem", parents=[common], help="split words into stem and suffix")
    p.add_argument("--input", required=True)
    p.add_argument("--rules", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_stem)

    p = sub.add_parser("factor", parents=[common], help="sentences -> PREFIX.stem / PREFIX.suffix")
    p.add_argument("--input", required=True)
    p.add_argument("--rules")
    p.add_argument("--bpe", help="BPE codes; applies suffix adjustment")
    p.add_argument("--word-level", action="store_true", help="no stemming: words are atomic stems")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_factor)

    p = sub.add_parser("bpe-learn", parents=[common], help="learn BPE merges over stems")
    p.add_argument("--input", required=True)
    p.add_argument("--merges", type=int, default=1000)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_bpe_learn)

    p = sub.add_parser("vocab", parents=[common], help="frequency-ranked vocabulary")
    p.add_argument("--input", required=True)
    p.add_argument("--max-size", type=int, default=30000)
    p.add_argument("--suffix", action="store_true", help="reserve the N tag")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("ibm1-filter", parents=[common], help="drop poorly aligned pairs")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--threshold", type=float, default=-7.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ibm1_filter)

    p = sub.add_parser("train", parents=[common], help="train a model")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-distributed", parents=[common], help="train with simulated parameter averaging")
    _add_train_flags(p)
    p.add_argument("--workers", type=int)
    p.add_argument("--sync-every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", parents=[common], help="beam search decoding")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--max-len", type=int, default=60)
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--nbest", type=int, default=0)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("eval", parents=[common], help="BLEU, stem BLEU, coverage")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--rules")
    p.add_argument("--vocab")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[common], help="generate a toy parallel corpus and its held-out split")
    p.add_argument("--grammar", default=str(DEFAULT_GRAMMAR))
    p.add_argument("--num", type=int, default=2000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the training loss")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", default=".", help="directory for run_manifest.json")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 1
    if args.threads < 1:
        logger.error("%s: --threads must be >= 1", args.command)
        return 1
    try:
        return args.func(args)
    except (DataError, ValueError, IndexError, KeyError, OSError) as e:
        logger.error("%s: %s", args.command, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
