"""Command-line entry point: ``bidisum {train,decode,eval,gen,check,params}``.

Settings come from built-in defaults, then an optional ``--config`` file of
``key=value`` lines, then command-line flags. Every command writes its
resolved settings to ``<out>/<command>.config`` before doing any work. The
default output directory is ``$BIDISUM_OUT`` or ``./runs``.

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .data import (DataError, Example, TASKS, Vocab, build_vocab, gen_synthetic, read_pairs,
                   synthetic_vocab, tokenize, write_pairs)
from .decoding import BeamConfig, bbs_decode, beam_search, greedy_decode
from .model import ModelConfig, count_parameters, sequence_logprob
from .numerics import NumericalError
from .rouge import rouge_l, rouge_n, rouge_report
from .training import TrainConfig, TrainingDiverged, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
REFERENCE_PARAM_COUNT = 34_434_722
OUT_ENV = "BIDISUM_OUT"

log = logging.getLogger("bidisum")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# settings
# ---------------------------------------------------------------------------

_MODEL_KEYS = [f.name for f in fields(ModelConfig)]
_TRAIN_KEYS = [f.name for f in fields(TrainConfig)]
_BEAM_KEYS = ["beam_size", "max_steps_decode", "length_normalize", "forbid_unk"]

DEFAULTS: dict[str, object] = {
    **ModelConfig().to_dict(),
    **TrainConfig().to_dict(),
    "beam_size": 4,
    "max_steps_decode": 100,
    "length_normalize": True,
    "forbid_unk": False,
    "decoder": "bbs",
    "max_vocab": 50000,
}


def _parse_config_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{n}: unknown setting {key!r}")
        out[key] = value
    return out


def _as_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {v!r}")


def resolve_settings(args: argparse.Namespace, keys) -> dict[str, object]:
    """Defaults < config file < flags, restricted to ``keys``."""
    settings = {k: DEFAULTS[k] for k in keys}
    if getattr(args, "config", None):
        for k, v in _parse_config_file(args.config).items():
            if k in settings:
                settings[k] = v
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            settings[k] = v
    return settings


def _model_config(settings) -> ModelConfig:
    return ModelConfig.from_dict({k: settings[k] for k in _MODEL_KEYS if k in settings})


def _beam_config(settings) -> BeamConfig:
    return BeamConfig(beam_size=int(settings["beam_size"]), gamma=float(settings["gamma"]),
                      max_steps=int(settings["max_steps_decode"]),
                      length_normalize=_as_bool(settings["length_normalize"]),
                      forbid_unk=_as_bool(settings["forbid_unk"]))


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_settings(path: Path, settings: dict) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in settings.items()), encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    settings = resolve_settings(args, _MODEL_KEYS + _TRAIN_KEYS + ["max_vocab"])
    settings.update(train_path=args.train, val_path=args.val, vocab_path=args.vocab)
    out = _out_dir(args)
    model_keys = {k: settings[k] for k in _MODEL_KEYS}
    caps = dict(max_source_len=int(model_keys["max_source_len"]),
                max_target_len=int(model_keys["max_target_len"]))
    train_pairs, _ = read_pairs(args.train, **caps)
    val_pairs, _ = read_pairs(args.val, **caps)
    if not train_pairs or not val_pairs:
        raise DataError("training and validation corpora must each contain at least one pair")
    if args.vocab:
        vocab = Vocab.load(args.vocab)
    else:
        vocab = build_vocab((s + t for s, t in train_pairs), int(settings["max_vocab"]))
    settings["vocab_size"] = len(vocab)
    model_config = _model_config(settings)
    train_config = TrainConfig.from_dict(settings)
    _write_settings(out / "train.config", settings)
    vocab.save(out / "vocab.txt")
    to_examples = lambda pairs: [Example(vocab.encode(s), vocab.encode(t)) for s, t in pairs]  # noqa: E731
    result = train(model_config, train_config, to_examples(train_pairs), to_examples(val_pairs), out)
    print(f"best validation loss {result.best_val_loss!r} at step {result.best_step} "
          f"({result.stop_reason}); checkpoint {out / 'best.ckpt'}")
    return EXIT_OK


def _read_sources(path) -> list[list[str]]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read input {path}: {exc}") from exc
    sources = [tokenize(line.split("\t", 1)[0]) for line in lines if line.strip()]
    if any(not s for s in sources):
        raise DataError(f"{path}: empty source line")
    return sources


def decode_record(index: int, ids, vocab: Vocab, decoder: str, score: float, fwd: float,
                  bwd: float | None, backward_beam) -> str:
    rec = {
        "index": index,
        "decoder": decoder,
        "tokens": vocab.decode(ids),
        "ids": list(ids),
        "score": score,
        "fwd_logp": fwd,
        "bwd_logp": bwd,
        "backward_beam": None if backward_beam is None else vocab.decode(backward_beam),
    }
    return json.dumps(rec, sort_keys=True)


def cmd_decode(args) -> int:
    settings = resolve_settings(args, ["gamma"] + _BEAM_KEYS + ["decoder"])
    out = _out_dir(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "best.ckpt"
    vocab_path = Path(args.vocab) if args.vocab else ckpt.parent / "vocab.txt"
    settings.update(checkpoint=ckpt, vocab_path=vocab_path, input=args.input)
    beam = _beam_config(settings)
    decoder = settings["decoder"]
    if decoder not in ("greedy", "beam", "bbs"):
        raise UsageError(f"unknown decoder {decoder!r}; choose greedy, beam or bbs")
    output = Path(args.output) if args.output else out / "decode.jsonl"
    settings["output"] = output
    _write_settings(out / "decode.config", settings)
    params, config = load_checkpoint(ckpt)
    try:
        vocab = Vocab.load(vocab_path)
    except OSError as exc:
        raise DataError(f"cannot read vocabulary {vocab_path}: {exc}") from exc
    if len(vocab) != config.vocab_size:
        raise DataError(f"vocabulary has {len(vocab)} entries, checkpoint expects {config.vocab_size}")
    lines = []
    for i, src in enumerate(_read_sources(args.input)):
        x = vocab.encode(src[: config.max_source_len])
        if decoder == "greedy":
            ids = greedy_decode(x, params, config, beam.max_steps, forbid_unk=beam.forbid_unk)
            fwd, _ = sequence_logprob("forward", ids, x, params, config)
            lines.append(decode_record(i, ids, vocab, decoder, fwd / len(ids), fwd, None, None))
        elif decoder == "beam":
            best = beam_search("forward", x, params, config, beam)[0]
            lines.append(decode_record(i, best.tokens, vocab, decoder, best.score, best.cum_logp, None, None))
        else:
            res = bbs_decode(x, params, config, beam)
            used = res.backward_beam_used
            lines.append(decode_record(i, res.best.tokens, vocab, decoder, res.best.score,
                                       res.best.extras["fwd_total"], res.best.extras["bwd_total"],
                                       None if used is None else used.tokens))
    output.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    print(f"decoded {len(lines)} inputs with {decoder} into {output}")
    return EXIT_OK


def _read_decoded(path) -> list[list[str]]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read decode output {path}: {exc}") from exc
    out = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            out.append([str(t) for t in json.loads(line)["tokens"]])
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{n}: not a decode record") from exc
    return out


def _read_references(path) -> list[list[str]]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read references {path}: {exc}") from exc
    return [tokenize(line.split("\t", 1)[-1]) for line in lines if line.strip()]


def cmd_eval(args) -> int:
    out = _out_dir(args)
    report_path = Path(args.output) if args.output else out / "rouge.tsv"
    _write_settings(out / "eval.config", {"decoded": args.decoded, "references": args.references,
                                          "output": report_path})
    cands, refs = _read_decoded(args.decoded), _read_references(args.references)
    if len(cands) != len(refs):
        raise DataError(f"{len(cands)} decoded outputs but {len(refs)} references")
    if not cands:
        raise DataError("nothing to evaluate")
    header = ["pair"] + [f"{m}_{s}" for m in ("r1", "r2", "rl") for s in ("p", "r", "f1")]
    rows = ["\t".join(header)]

    def cells(scores):
        return [f"{v:.6f}" for s in scores for v in (s.precision, s.recall, s.f1)]

    for i, (c, r) in enumerate(zip(cands, refs)):
        rows.append("\t".join([str(i)] + cells([rouge_n(c, r, 1), rouge_n(c, r, 2), rouge_l(c, r)])))
    mean = rouge_report(cands, refs)
    rows.append("\t".join(["mean"] + cells([mean["rouge-1"], mean["rouge-2"], mean["rouge-l"]])))
    report_path.write_text("".join(r + "\n" for r in rows), encoding="utf-8")
    for name, s in mean.items():
        print(f"{name}\tP={s.precision:.4f}\tR={s.recall:.4f}\tF1={s.f1:.4f}")
    return EXIT_OK


def cmd_gen(args) -> int:
    out = _out_dir(args)
    output = Path(args.output) if args.output else out / f"{args.task}.tsv"
    settings = {"task": args.task, "n": args.n, "seed": args.seed, "min_len": args.min_len,
                "max_len": args.max_len, "vocab_size": args.vocab_size, "output": output}
    _write_settings(out / "gen.config", settings)
    try:
        examples = gen_synthetic(args.task, args.n, (args.min_len, args.max_len), args.vocab_size, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_pairs(output, examples, synthetic_vocab(args.vocab_size))
    print(f"wrote {len(examples)} {args.task} pairs to {output}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .verify import CHECKS, run_checks

    names = args.only or list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise UsageError(f"unknown check(s) {', '.join(unknown)}; available: {', '.join(CHECKS)}")
    results = run_checks(names)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_params(args) -> int:
    settings = resolve_settings(args, _MODEL_KEYS)
    config = _model_config(settings)
    n = count_parameters(config)
    print(f"computed\t{n}")
    print(f"reference\t{REFERENCE_PARAM_COUNT}")
    print(f"difference\t{n - REFERENCE_PARAM_COUNT:+d}")
    readout = 2 * config.vocab_size * (config.readout_dim + 1)
    print(f"output_projections\t{readout}")
    note = ("the reference figure is not asserted: it belongs to a model with pointer and coverage "
            "parts that are not built here and an unpublished layout")
    if n - readout < REFERENCE_PARAM_COUNT < n:
        note += ("; the surplus here is within the two vocabulary-sized output projections, which read "
                 "the decoder state, the context and the previous embedding")
    print(f"note\t{note}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_setting_flags(p: argparse.ArgumentParser, keys) -> None:
    types = {bool: _as_bool, int: int, float: float}
    for key in keys:
        default = DEFAULTS[key]
        kind = types.get(type(default), str)
        if key in ("attention_dim", "max_epochs"):
            kind = int
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None,
                       help=f"(default {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bidisum", description="Bidirectional encoder-decoder summarisation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model on a TAB-separated corpus")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--vocab", help="fixed vocabulary file (default: build from --train)")
    p.add_argument("--config")
    p.add_argument("--out")
    _add_setting_flags(p, [k for k in _MODEL_KEYS if k != "vocab_size"] + _TRAIN_KEYS + ["max_vocab"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode sources with a trained checkpoint")
    p.add_argument("--input", required=True, help="one source per line (text after a TAB is ignored)")
    p.add_argument("--checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--output")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--decoder", choices=("greedy", "beam", "bbs"), default=None)
    p.add_argument("--k", dest="beam_size", type=int, default=None, help="beam size (default 4)")
    p.add_argument("--gamma", type=float, default=None, help="weight of the forward score (default 0.7)")
    p.add_argument("--max-steps", dest="max_steps_decode", type=int, default=None,
                   help="maximum output tokens (default 100)")
    p.add_argument("--length-normalize", dest="length_normalize", type=_as_bool, default=None)
    p.add_argument("--forbid-unk", dest="forbid_unk", type=_as_bool, default=None)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="ROUGE report for decode output against references")
    p.add_argument("--decoded", required=True)
    p.add_argument("--references", required=True, help="one reference per line; text after a TAB if present")
    p.add_argument("--output")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen", help="write a synthetic corpus")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-len", type=int, default=4)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--vocab-size", type=int, default=50)
    p.add_argument("--output")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("check", help="run the verification battery")
    p.add_argument("--only", nargs="+", metavar="CHECK")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("params", help="count parameters for a model configuration")
    p.add_argument("--config")
    _add_setting_flags(p, _MODEL_KEYS)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:
        if isinstance(exc, (DataError, CheckpointError)):
            print(f"bidisum: data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"bidisum: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, TrainingDiverged) as exc:
        print(f"bidisum: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"bidisum: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
