"""Run the benchmark protocol on one labeled dataset.

For each split (random 80:20 and chronological 80:20) this trains a
tokenizer and a model on the normal training lines, evaluates the test
lines at line level and for both groupings (100 messages, 60 minutes), and
prints the Prec/Rec/Spec/F1 table with "random / chronological" cells.

    python scripts/paper_protocol.py --dataset BGL.log --profile bgl --out runs/bgl
    python scripts/paper_protocol.py --dataset BGL.log --out runs/bgl --paper-scale
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from rtdlog import cli
from rtdlog.report import format_table

SPLITS = ("random:0", "chrono")
GROUPS = ("count:100", "minutes:60")


def run_protocol(dataset, profile, out, extra_train=(), vocab_size=8192, label="rtdlog"):
    out = Path(out)
    reports = {}
    for split in SPLITS:
        run = out / split.replace(":", "-")
        common = ["--dataset", str(dataset), "--profile", profile, "--split", split, "--out", str(run)]
        for argv in (
            ["train-tokenizer", *common, "--vocab-size", str(vocab_size)],
            ["train", *common, *extra_train],
        ):
            code = cli.main(argv)
            if code:
                raise SystemExit(f"{argv[0]} failed with exit code {code}")
        ev = run / "eval"
        argv = ["evaluate", "--dataset", str(dataset), "--profile", profile, "--split", split,
                "--checkpoint", str(run / "checkpoint"), "--out", str(ev)]
        for g in GROUPS:
            argv += ["--group", g]
        code = cli.main(argv)
        if code:
            raise SystemExit(f"evaluate failed with exit code {code}")
        reports[split] = json.loads((ev / "report.json").read_text())
    table = format_table({label: reports}, groupings=list(GROUPS), splits=list(SPLITS))
    (out / "table.txt").write_text(table + "\n", encoding="utf-8")
    return reports, table


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dataset", required=True)
    ap.add_argument("--profile", default="bgl")
    ap.add_argument("--out", required=True)
    ap.add_argument("--label", default="rtdlog")
    ap.add_argument("--vocab-size", type=int, default=8192)
    ap.add_argument("--paper-scale", action="store_true")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--max-steps", type=int)
    args = ap.parse_args(argv)
    extra = ["--paper-scale"] if args.paper_scale else []
    if args.epochs is not None:
        extra += ["--epochs", str(args.epochs)]
    if args.max_steps is not None:
        extra += ["--max-steps", str(args.max_steps)]
    _, table = run_protocol(args.dataset, args.profile, args.out, extra, args.vocab_size, args.label)
    print(table)
    return 0


if __name__ == "__main__":
    sys.exit(main())
