"""Command-line entry point.

Subcommands: ``corpus stats|tokenize|vocab|split|filter``, ``train``,
``translate``, ``eval bleu|wer|length-bins``, ``af serve|create|report``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
Results go to stdout, diagnostics to stderr; ``--json`` switches supported
subcommands to machine-readable output. Every file-producing run writes a
``<output>.manifest.json`` recording the command line, configuration,
seeds, and input digests, so equal manifests imply byte-identical outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from . import afeval as afeval_mod
from . import corpus as corpus_mod
from . import decode as decode_mod
from . import evaluation
from . import figures
from . import model as model_mod
from . import training as training_mod
from .errors import CorpusFormatError, MtkitError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise UsageError(message)


# ---------------------------------------------------------------------------
# manifests and config files


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def write_manifest(
    output: Path, argv: list[str], config: dict, seeds: dict, inputs: list[Path]
) -> None:
    manifest = {
        "command_line": ["mtkit"] + list(argv),
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).is_file()},
        "tool_version": __version__,
        "created_unix": round(time.time(), 3),
    }
    if output.is_dir():
        target = output / "run.manifest.json"
    else:
        target = output.with_name(output.name + ".manifest.json")
    target.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CorpusFormatError(f"{path}:{lineno}: expected key = value")
        values[key.strip()] = value.strip()
    return values


def _read_eval_lines(path: str | Path) -> list[str]:
    # evaluation inputs may legitimately contain empty hypothesis lines
    return Path(path).read_text(encoding="utf-8").splitlines()


# ---------------------------------------------------------------------------
# corpus subcommands


def cmd_corpus_stats(args) -> int:
    corpus = corpus_mod.read_parallel(args.src, args.tgt, args.language_pair)
    rows = [
        ("source", corpus_mod.corpus_stats(corpus, "source")),
        ("target", corpus_mod.corpus_stats(corpus, "target")),
    ]
    if args.json:
        payload = {
            name: {
                "sentences": st.sentence_count,
                "words": st.word_count,
                "vocabulary": st.vocab_size,
                "asl": float(st.asl),
            }
            for name, st in rows
        }
        print(json.dumps(payload, indent=2))
    else:
        print(corpus_mod.format_stats_table(rows, abbreviate=not args.raw_counts))
    return 0


def cmd_corpus_tokenize(args) -> int:
    lines = corpus_mod.read_lines(args.infile)
    out = [" ".join(corpus_mod.tokenize(line).tokens) for line in lines]
    corpus_mod.write_lines(args.out, out)
    write_manifest(Path(args.out), args.argv, {}, {}, [Path(args.infile)])
    return 0


def cmd_corpus_vocab(args) -> int:
    lines = corpus_mod.read_lines(args.infile)
    sentences = tuple(
        (corpus_mod.tokenize(line), corpus_mod.Sentence(())) for line in lines
    )
    vocab = corpus_mod.build_vocabulary(
        corpus_mod.ParallelCorpus(sentences), "source", args.size
    )
    corpus_mod.save_vocabulary(vocab, args.out)
    write_manifest(
        Path(args.out), args.argv, {"size_limit": args.size}, {}, [Path(args.infile)]
    )
    return 0


def cmd_corpus_split(args) -> int:
    corpus = corpus_mod.read_parallel(args.src, args.tgt)
    train, dev, test = corpus_mod.split_corpus(corpus, args.dev, args.test, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train), ("dev", dev), ("test", test)):
        corpus_mod.write_lines(out / f"{name}.src", (corpus_mod.detokenize(s) for s, _ in part))
        corpus_mod.write_lines(out / f"{name}.tgt", (corpus_mod.detokenize(t) for _, t in part))
    write_manifest(
        out, args.argv,
        {"dev": args.dev, "test": args.test}, {"seed": args.seed},
        [Path(args.src), Path(args.tgt)],
    )
    print(f"train {len(train)}  dev {len(dev)}  test {len(test)}")
    return 0


def cmd_corpus_filter(args) -> int:
    corpus = corpus_mod.read_parallel(args.src, args.tgt)
    kept = corpus_mod.filter_by_length(corpus, args.max_len)
    corpus_mod.write_lines(args.out_src, (corpus_mod.detokenize(s) for s, _ in kept))
    corpus_mod.write_lines(args.out_tgt, (corpus_mod.detokenize(t) for _, t in kept))
    write_manifest(
        Path(args.out_src), args.argv, {"max_len": args.max_len}, {},
        [Path(args.src), Path(args.tgt)],
    )
    print(f"kept {len(kept)} of {len(corpus)} pairs")
    return 0


# ---------------------------------------------------------------------------
# train


_MODEL_KEYS = {
    "layers": int,
    "hidden_size": int,
    "embed_size": int,
    "dropout": float,
    "attention_kind": str,
    "attention_dim": int,
    "input_feeding": lambda v: str(v).lower() in ("1", "true", "yes", "on"),
    "max_train_len": int,
}
_TRAIN_KEYS = {
    "batch_size": int,
    "initial_lr": float,
    "max_epochs": int,
    "grad_clip_norm": float,
    "seed": int,
    "halving_rule": str,
    "patience": int,
}


def cmd_train(args) -> int:
    settings: dict = {"vocab_size": 50000, "truecase": True}
    if args.config:
        for key, raw in parse_config_file(args.config).items():
            if key in _MODEL_KEYS:
                settings[key] = _MODEL_KEYS[key](raw)
            elif key in _TRAIN_KEYS:
                settings[key] = _TRAIN_KEYS[key](raw)
            elif key == "vocab_size":
                settings[key] = int(raw)
            elif key == "truecase":
                settings[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                raise CorpusFormatError(f"{args.config}: unknown config key {key!r}")
    for key in list(_MODEL_KEYS) + list(_TRAIN_KEYS) + ["vocab_size"]:
        flag = getattr(args, key, None)
        if flag is not None:
            settings[key] = flag
    if args.no_truecase:
        settings["truecase"] = False

    train_corpus = corpus_mod.read_parallel(args.train_src, args.train_tgt)
    dev_corpus = corpus_mod.read_parallel(args.dev_src, args.dev_tgt)
    max_len = settings.get("max_train_len", 50)
    train_corpus = corpus_mod.filter_by_length(train_corpus, max_len)

    truecaser = None
    if settings["truecase"]:
        truecaser = corpus_mod.build_truecaser(train_corpus, "source")
        apply = lambda c: corpus_mod.ParallelCorpus(
            tuple((corpus_mod.apply_truecase(s, truecaser), t) for s, t in c.pairs),
            c.language_pair,
        )
        train_corpus = apply(train_corpus)
        dev_corpus = apply(dev_corpus)

    src_vocab = corpus_mod.build_vocabulary(train_corpus, "source", settings["vocab_size"])
    tgt_vocab = corpus_mod.build_vocabulary(train_corpus, "target", settings["vocab_size"])
    cfg = model_mod.ModelConfig(
        src_vocab=len(src_vocab),
        tgt_vocab=len(tgt_vocab),
        **{k: settings[k] for k in _MODEL_KEYS if k in settings},
    )
    tcfg = training_mod.TrainConfig(**{k: settings[k] for k in _TRAIN_KEYS if k in settings})

    pairs = [
        (corpus_mod.encode(s, src_vocab), corpus_mod.encode(t, tgt_vocab))
        for s, t in train_corpus.pairs
    ]
    dev = training_mod.build_dev_set(dev_corpus, src_vocab, tgt_vocab)
    probes = None
    if args.probe_sentences:
        probes = _read_eval_lines(args.probe_sentences)

    out_dir = Path(args.out_dir)
    _, state, checkpoints = training_mod.train(
        pairs, dev, cfg, tcfg,
        out_dir=out_dir, src_vocab=src_vocab, truecaser=truecaser,
        probe_sentences=probes, log=lambda msg: print(msg, file=sys.stderr),
    )
    history = [json.loads(line) for line in (out_dir / "history.jsonl").read_text().splitlines()]
    figures.render_training_curves(history, out_dir / "curves.png")
    write_manifest(
        out_dir, args.argv,
        {**{k: getattr(cfg, k) for k in _MODEL_KEYS}, **{k: getattr(tcfg, k) for k in _TRAIN_KEYS}},
        {"seed": tcfg.seed},
        [Path(args.train_src), Path(args.train_tgt), Path(args.dev_src), Path(args.dev_tgt)],
    )
    last = state.history[-1]
    print(
        f"trained {state.epoch} epochs: val_ppl {last.val_ppl:.4f} "
        f"val_bleu {last.val_bleu:.2f} (best {state.best_val_bleu:.2f}); "
        f"checkpoints in {out_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# translate


def cmd_translate(args) -> int:
    opts = decode_mod.TranslateOptions(
        beam=args.beam,
        max_len_factor=args.max_len_factor,
        unk_replace=not args.no_unk_replace,
        attn_sidecar=args.attn_sidecar,
        threads=args.threads if args.threads is not None else os.cpu_count(),
    )
    n = decode_mod.translate_file(args.model, args.infile, args.out, opts)
    write_manifest(
        Path(args.out), args.argv,
        {"beam": args.beam, "max_len_factor": args.max_len_factor,
         "unk_replace": not args.no_unk_replace},
        {},
        [Path(args.model), Path(args.infile)],
    )
    print(f"translated {n} lines -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval_bleu(args) -> int:
    hyps = _read_eval_lines(args.hyp)
    refs = _read_eval_lines(args.ref)
    rep = evaluation.bleu_from_lines(hyps, refs, truecase=not args.no_truecase)
    if args.json:
        print(evaluation.report_to_json(rep), end="")
    else:
        print(f"BLEU = {rep.bleu:.2f}")
        print(
            "precisions = "
            + "/".join(f"{p:.4f}" for p in rep.precisions)
            + f"  BP = {rep.brevity_penalty:.6f}  hyp/ref = {rep.hyp_len}/{rep.ref_len}",
            file=sys.stderr,
        )
    return 0


def cmd_eval_wer(args) -> int:
    hyps = _read_eval_lines(args.hyp)
    refs = _read_eval_lines(args.ref)
    rep = evaluation.wer_from_lines(hyps, refs, truecase=not args.no_truecase)
    if args.json:
        print(evaluation.report_to_json(rep), end="")
    else:
        print(f"WER = {rep.wer:.4f}")
        print(f"edits = {rep.edits}  ref tokens = {rep.ref_len}", file=sys.stderr)
    return 0


def cmd_eval_length_bins(args) -> int:
    hyps = _read_eval_lines(args.hyp)
    refs = _read_eval_lines(args.ref)
    srcs = _read_eval_lines(args.src)
    rep = evaluation.binned_quality_from_lines(
        hyps, refs, srcs, k=args.bins, truecase=not args.no_truecase
    )
    out = Path(args.out)
    evaluation.emit_report(rep, "json" if out.suffix == ".json" else "csv", out)
    figure_path = None
    if not args.no_figure:
        figure_path = Path(args.figure) if args.figure else out.with_suffix(".png")
        figures.render_length_bins(rep, figure_path)
    write_manifest(
        out, args.argv, {"bins": args.bins, "truecase": not args.no_truecase}, {},
        [Path(args.hyp), Path(args.ref), Path(args.src)],
    )
    msg = f"wrote {out}"
    if figure_path is not None:
        msg += f" and {figure_path}"
    print(msg)
    return 0


# ---------------------------------------------------------------------------
# af


def cmd_af_serve(args) -> int:
    afeval_mod.serve(args.log, args.port, args.ui)
    return 0


def cmd_af_create(args) -> int:
    systems = []
    for spec in args.system:
        label, sep, path = spec.partition("=")
        if not sep:
            raise UsageError(f"--system expects LABEL=FILE, got {spec!r}")
        systems.append((label, _read_eval_lines(path)))
    store = afeval_mod.AfStore(args.log)
    campaign = store.create_campaign(
        _read_eval_lines(args.sources),
        systems,
        sample_size=args.sample_size,
        seed=args.seed,
        evaluators=[e for e in args.evaluators.split(",") if e],
        language_pair=args.language_pair,
    )
    print(campaign.id)
    return 0


def cmd_af_report(args) -> int:
    store = afeval_mod.AfStore(args.log)
    rep = store.aggregate(args.campaign)
    if args.json:
        print(json.dumps(afeval_mod.report_to_json(rep), indent=2))
    elif args.csv:
        print(afeval_mod.report_to_csv(rep), end="")
    else:
        print(afeval_mod.report_to_text(rep))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="mtkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mtkit {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap internal parallelism (default: all available)")
    sub = parser.add_subparsers(dest="command", required=True)

    # corpus
    corpus_p = sub.add_parser("corpus", help="corpus preparation")
    corpus_sub = corpus_p.add_subparsers(dest="subcommand", required=True)

    p = corpus_sub.add_parser("stats", help="Table-style corpus statistics")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--language-pair", default="")
    p.add_argument("--raw-counts", action="store_true", help="no K/M abbreviation")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_corpus_stats)

    p = corpus_sub.add_parser("tokenize", help="tokenize raw text, one line per segment")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corpus_tokenize)

    p = corpus_sub.add_parser("vocab", help="build a ranked vocabulary file")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--size", type=int, default=50000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corpus_vocab)

    p = corpus_sub.add_parser("split", help="seeded train/dev/test split")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--dev", type=int, default=10000)
    p.add_argument("--test", type=int, default=10000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_corpus_split)

    p = corpus_sub.add_parser("filter", help="drop pairs longer than a token cap")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--out-src", required=True)
    p.add_argument("--out-tgt", required=True)
    p.set_defaults(func=cmd_corpus_filter)

    # train
    p = sub.add_parser("train", help="train a model with SGD and LR halving")
    p.add_argument("--train-src", required=True)
    p.add_argument("--train-tgt", required=True)
    p.add_argument("--dev-src", required=True)
    p.add_argument("--dev-tgt", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="flat key = value config file; flags override")
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden-size", dest="hidden_size", type=int)
    p.add_argument("--embed-size", dest="embed_size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--attention-kind", dest="attention_kind", choices=model_mod.ATTENTION_KINDS)
    p.add_argument("--attention-dim", dest="attention_dim", type=int)
    p.add_argument("--input-feeding", dest="input_feeding", action="store_const", const=True)
    p.add_argument("--max-train-len", dest="max_train_len", type=int)
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="initial_lr", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--grad-clip", dest="grad_clip_norm", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--halving-rule", dest="halving_rule", choices=training_mod.HALVING_RULES)
    p.add_argument("--patience", type=int)
    p.add_argument("--no-truecase", action="store_true")
    p.add_argument("--probe-sentences", help="file of lines decoded after every epoch")
    p.set_defaults(func=cmd_train)

    # translate
    p = sub.add_parser("translate", help="translate a file with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--max-len-factor", type=float, default=2.0)
    p.add_argument("--attn-sidecar", help="write per-line attention matrices as JSON lines")
    p.add_argument("--no-unk-replace", action="store_true")
    p.set_defaults(func=cmd_translate)

    # eval
    eval_p = sub.add_parser("eval", help="automatic quality metrics")
    eval_sub = eval_p.add_subparsers(dest="subcommand", required=True)

    p = eval_sub.add_parser("bleu", help="corpus BLEU, single reference")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--no-truecase", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval_bleu)

    p = eval_sub.add_parser("wer", help="corpus word error rate")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--no-truecase", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval_wer)

    p = eval_sub.add_parser("length-bins", help="BLEU and -WER per source-length bin")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out", required=True, help="CSV (or .json) report path")
    p.add_argument("--figure", help="figure path (default: report path with .png)")
    p.add_argument("--no-figure", action="store_true")
    p.add_argument("--no-truecase", action="store_true")
    p.set_defaults(func=cmd_eval_length_bins)

    # af
    af_p = sub.add_parser("af", help="blinded adequacy/fluency evaluation service")
    af_sub = af_p.add_subparsers(dest="subcommand", required=True)

    p = af_sub.add_parser("serve", help="run the rating HTTP service")
    p.add_argument("--log", required=True, help="event-log directory")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--ui", help="directory with the built rater UI bundle")
    p.set_defaults(func=cmd_af_serve)

    p = af_sub.add_parser("create", help="create a blinded campaign from files")
    p.add_argument("--log", required=True)
    p.add_argument("--sources", required=True)
    p.add_argument("--system", action="append", required=True, metavar="LABEL=FILE")
    p.add_argument("--sample-size", type=int, default=150)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--evaluators", required=True, help="comma-separated evaluator ids")
    p.add_argument("--language-pair", default="")
    p.set_defaults(func=cmd_af_create)

    p = af_sub.add_parser("report", help="aggregate ratings into a quality table")
    p.add_argument("--log", required=True)
    p.add_argument("--campaign", required=True)
    p.add_argument("--csv", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_af_report)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mtkit: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return 0 if exc.code in (0, None) else 1
    args.argv = list(argv)
    try:
        return args.func(args) or 0
    except UsageError as exc:
        print(f"mtkit: error: {exc}", file=sys.stderr)
        return 1
    except MtkitError as exc:
        print(f"mtkit: data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"mtkit: data error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        import traceback

        traceback.print_exc()
        print(f"mtkit: internal error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
