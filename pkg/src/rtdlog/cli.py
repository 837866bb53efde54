"""Command-line entry point: ``rtdlog {synth,train-tokenizer,train,score,evaluate}``.

Exit codes: 0 ok, 2 usage or missing input, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import checkpoint, corpus, detector, electra
from .config import RunConfig
from .encoder import NumericError
from .preprocess import NormalizerConfig, default_config, normalize
from .report import build_report, format_table
from .tokenizer import Vocabulary, encode, train_vocab

log = logging.getLogger("rtdlog")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
SCORES_HEADER = ["line_no", "score", "label", "n_tokens", "flag"]
SCORE_CHUNK = 4096


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _resolve(args) -> RunConfig:
    base = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {k: getattr(args, k, None) for k in RunConfig.__dataclass_fields__}
    if getattr(args, "paper_scale", False):
        overrides["preset"] = "paper"
    return base.merged(overrides)


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise UsageError("--out DIR is required")
    d = Path(cfg.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _need_file(path, what):
    if not path:
        raise UsageError(f"{what} is required")
    if path != "-" and not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _normalizer(cfg: RunConfig) -> NormalizerConfig:
    if cfg.normalizer:
        _need_file(cfg.normalizer, "--normalizer")
        return NormalizerConfig.load(cfg.normalizer)
    return default_config()


def _load_split(cfg: RunConfig):
    _need_file(cfg.dataset, "--dataset")
    lines, skipped = corpus.load_dataset(cfg.dataset, cfg.profile)
    if skipped:
        log.warning("skipped %d malformed lines (first: line %d, %s)", len(skipped),
                    skipped[0].line_no, skipped[0].reason)
    if not lines:
        raise ValueError(f"{cfg.dataset}: no usable log lines")
    train, test = corpus.split(lines, cfg.split_spec())
    return lines, train, test, skipped


def _load_checkpoint(path):
    if not (Path(path) / "manifest.json").is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return checkpoint.load(path)[0]


def _normal_messages(lines, norm):
    return [normalize(l.text, norm, l.line_no) for l in lines if not l.is_anomaly]


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    out = Path(args.out) if args.out else None
    if out is None:
        raise UsageError("--out DIR is required")
    out.mkdir(parents=True, exist_ok=True)
    spec = corpus.SynthSpec(args.n_templates, args.n_lines, args.n_anomalies, args.n_anomaly_templates, args.seed,
                            mean_gap_seconds=args.mean_gap)
    synth = corpus.synthesize(spec)
    corpus.write_corpus(synth, out / "corpus.log", out / "manifest.json")
    (out / "run_config.json").write_text(json.dumps({"synth": asdict(spec)}, indent=2) + "\n", encoding="utf-8")
    log.info("wrote %d lines (%d anomalies) to %s", len(synth.lines), spec.n_anomalies, out / "corpus.log")
    return 0


def cmd_train_tokenizer(args) -> int:
    cfg = _resolve(args)
    norm = _normalizer(cfg)
    _, train, _, _ = _load_split(cfg)
    out = _out_dir(cfg)
    msgs = _normal_messages(train, norm)
    if not msgs:
        raise ValueError("training split contains no normal lines")
    vocab = train_vocab(msgs, cfg.vocab_size, norm.placeholders)
    vocab.save(out / "vocab.txt", out / "vocab.json")
    norm.save(out / "normalizer.json")
    cfg.save(out / "run_config.json")
    log.info("vocabulary of %d tokens from %d messages -> %s", len(vocab), len(msgs), out / "vocab.txt")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(cfg)
    vocab_path = Path(args.vocab) if args.vocab else out / "vocab.txt"
    _need_file(str(vocab_path), "vocabulary (run train-tokenizer first or pass --vocab)")
    vocab = Vocabulary.load(vocab_path)
    norm_path = vocab_path.with_name("normalizer.json")
    norm = NormalizerConfig.load(norm_path) if not cfg.normalizer and norm_path.is_file() else _normalizer(cfg)
    _, train, _, _ = _load_split(cfg)
    seqs = [encode(m, vocab, cfg.max_len) for m in _normal_messages(train, norm)]
    tcfg = cfg.training_config()
    cfg.save(out / "run_config.json")

    def on_step(rec):
        if rec.step % 50 == 0:
            log.info("step %d  L_g %.4f  L_d %.4f", rec.step, rec.loss_g, rec.loss_d)

    code = 0
    try:
        bundle, history = electra.train(seqs, tcfg, vocab, norm, on_step=on_step)
    except electra.TrainingDiverged as exc:
        log.error("training diverged: %s; keeping last finite parameters", exc)
        bundle, history, code = exc.bundle, exc.history, EXIT_NUMERIC
    checkpoint.save(bundle, tcfg, out / "checkpoint")
    with open(out / "losses.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss_g", "loss_d", "joint"])
        for r in history:
            w.writerow([r.step, repr(r.loss_g), repr(r.loss_d), repr(r.joint)])
    return code


def _iter_input(path, profile):
    fh = sys.stdin if path == "-" else open(path, encoding="utf-8", errors="replace", newline="")
    prof = None if profile == "raw" else corpus.get_profile(profile)
    try:
        for i, raw in enumerate(fh, start=1):
            raw = raw.rstrip("\r\n")
            if prof is None:
                yield i, raw, ""
                continue
            try:
                line = corpus.parse_line(raw, i, prof)
            except ValueError as exc:
                log.warning("line %d skipped: %s", i, exc)
                continue
            yield i, line.text, line.label
    finally:
        if fh is not sys.stdin:
            fh.close()


def _write_score_rows(writer, bundle, chunk):
    scores = detector.score_lines(bundle, [t for _, t, _ in chunk], [n for n, _, _ in chunk])
    for (n, _, label), s in zip(chunk, scores):
        writer.writerow([n, repr(s.value), label, s.n_tokens, "empty" if s.empty else ""])


def cmd_score(args) -> int:
    _need_file(args.input, "--input")
    bundle = _load_checkpoint(args.checkpoint)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "scores.csv", "w", newline="", encoding="utf-8")
        cfg = {"checkpoint": str(args.checkpoint), "input": args.input, "profile": args.profile}
        (out / "run_config.json").write_text(json.dumps(cfg, indent=2) + "\n", encoding="utf-8")
    else:
        fh = sys.stdout
    try:
        fh.write(f"# scores-csv-version: {detector.SCORES_CSV_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORES_HEADER)
        chunk = []
        for item in _iter_input(args.input, args.profile):
            chunk.append(item)
            if len(chunk) == SCORE_CHUNK:
                _write_score_rows(w, bundle, chunk)
                chunk = []
        if chunk:
            _write_score_rows(w, bundle, chunk)
        fh.flush()
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def read_scores_csv(path):
    """Rows of (line_no, score, label, n_tokens, flag) from a scored-lines CSV."""
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline()
        if not first.startswith("# scores-csv-version:"):
            raise ValueError(f"{path}: missing scores CSV version header")
        version = int(first.split(":", 1)[1])
        if version != detector.SCORES_CSV_VERSION:
            raise ValueError(f"{path}: scores CSV version {version} unsupported")
        reader = csv.DictReader(fh)
        return [(int(r["line_no"]), float(r["score"]), r["label"], int(r["n_tokens"]), r["flag"]) for r in reader]


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(cfg)
    if args.scores:
        _need_file(args.scores, "--scores")
        rows = read_scores_csv(args.scores)
        by_no = {}
        if cfg.dataset:
            _need_file(cfg.dataset, "--dataset")
            by_no = {l.line_no: l for l in corpus.load_dataset(cfg.dataset, cfg.profile)[0]}
        test = []
        for n, _, label, _, _ in rows:
            if label not in (corpus.NORMAL, corpus.ANOMALY):
                raise ValueError(f"line {n}: evaluation needs labels")
            src = by_no.get(n)
            test.append(corpus.RawLogLine(n, src.timestamp if src else None, label, src.text if src else ""))
        scores = {n: s for n, s, *_ in rows}
        train = None
        split_descr = "given"
    else:
        if not args.checkpoint:
            raise UsageError("evaluate needs --scores CSV or --checkpoint with --dataset")
        bundle = _load_checkpoint(args.checkpoint)
        _, train, test, _ = _load_split(cfg)
        values = detector.score_lines(bundle, [l.text for l in test], [l.line_no for l in test])
        scores = {l.line_no: s.value for l, s in zip(test, values)}
        split_descr = cfg.split_spec().describe()
    threshold = None if cfg.threshold == "auto" else float(cfg.threshold)
    report = build_report(test, scores, cfg.windows(), threshold=threshold, holdout=cfg.holdout,
                          split_spec=cfg.split_spec() if train is not None else None, train=train,
                          split_descr=split_descr)
    cfg.save(out / "run_config.json")
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    (out / "table.txt").write_text(format_table({split_descr: report}) + "\n", encoding="utf-8")
    print(format_table({split_descr: report}))
    return 0


# ---------------------------------------------------------------- parser


def _common(p, dataset=True):
    p.add_argument("--config", help="JSON RunConfig; flags override it")
    p.add_argument("--out", help="output directory")
    if dataset:
        p.add_argument("--dataset", help="labeled log file")
        p.add_argument("--profile", help="dataset column profile: bgl, spirit, thunderbird")
        p.add_argument("--split", help="random:SEED or chrono")
        p.add_argument("--train-fraction", dest="train_fraction", type=float)
        p.add_argument("--normalizer", help="normalizer config JSON")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rtdlog", description="Replaced-token-detection log anomaly detector")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-templates", type=int, default=20)
    p.add_argument("--n-lines", type=int, default=5000)
    p.add_argument("--n-anomalies", type=int, default=200)
    p.add_argument("--n-anomaly-templates", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mean-gap", type=float, default=3.0, help="mean seconds between lines")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-tokenizer", help="train a WordPiece vocabulary on normal training lines")
    _common(p)
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("train", help="train generator and discriminator")
    _common(p)
    p.add_argument("--vocab", help="vocab.txt (default: OUT/vocab.txt)")
    p.add_argument("--preset", choices=sorted(electra.PRESETS))
    p.add_argument("--paper-scale", action="store_true", help="same as --preset paper")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--mask-prob", dest="mask_prob", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score log lines with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", default="-", help="log file or - for stdin")
    p.add_argument("--profile", default="bgl", help="column profile, or raw for bare messages")
    p.add_argument("--out", help="output directory (default: CSV on stdout)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="thresholds and Prec/Rec/Spec/F1 at line and sequence level")
    _common(p)
    p.add_argument("--scores", help="scored-lines CSV from `score`")
    p.add_argument("--checkpoint", help="checkpoint directory (scores the test split of --dataset)")
    p.add_argument("--group", action="append", help="count:K or minutes:W (repeatable)")
    p.add_argument("--threshold", help="auto or a number")
    p.add_argument("--holdout", type=float, help="fraction of the test split used only to pick thresholds")
    p.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rtdlog: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, electra.TrainingDiverged) as exc:
        print(f"rtdlog: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, checkpoint.CheckpointError) as exc:
        print(f"rtdlog: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
