"""Evaluation reports and the per-grouping results table.

A report bundles the threshold choice, line-level metrics and, per grouping,
sequence-level metrics for one split. ``format_table`` lays several such
reports out with one column block per grouping and "random / chronological"
cells, the layout used by published log anomaly benchmarks.
"""

from __future__ import annotations

import random
from typing import Mapping, Sequence

from . import detector
from .corpus import RawLogLine, SplitSpec, Window, group
from .detector import REPORT_VERSION

METRICS = ("precision", "recall", "specificity", "f1")
HEADERS = ("Prec", "Rec", "Spec", "F1")


def chrono_check(train: Sequence[RawLogLine], test: Sequence[RawLogLine]) -> dict:
    """Verify that no test line precedes any training line (file order and timestamps)."""
    max_train = max((l.line_no for l in train), default=None)
    min_test = min((l.line_no for l in test), default=None)
    ok = max_train is None or min_test is None or max_train < min_test
    ts_train = [l.timestamp for l in train if l.timestamp is not None]
    ts_test = [l.timestamp for l in test if l.timestamp is not None]
    out = {"max_train_line_no": max_train, "min_test_line_no": min_test}
    if ts_train and ts_test:
        out["max_train_timestamp"] = max(ts_train)
        out["min_test_timestamp"] = min(ts_test)
        ok = ok and max(ts_train) <= min(ts_test)
    out["ok"] = ok
    return out


def holdout_split(lines: Sequence[RawLogLine], fraction: float, seed: int = 0):
    """Carve a threshold-selection subset off the test lines. Returns (select, evaluate)."""
    if fraction <= 0:
        return list(lines), list(lines)
    idx = list(range(len(lines)))
    random.Random(seed).shuffle(idx)
    k = int(fraction * len(lines))
    chosen = set(idx[:k])
    sel = [l for i, l in enumerate(lines) if i in chosen]
    ev = [l for i, l in enumerate(lines) if i not in chosen]
    if not sel or not ev:
        raise ValueError(f"holdout {fraction} leaves an empty side for {len(lines)} lines")
    return sel, ev


def build_report(test: Sequence[RawLogLine], scores: Mapping[int, float], windows: Sequence[Window],
                 threshold: float | None = None, holdout: float = 0.0, split_spec: SplitSpec | None = None,
                 train: Sequence[RawLogLine] | None = None, split_descr: str | None = None) -> dict:
    """Line- and sequence-level evaluation of scored test lines.

    With ``threshold=None`` the threshold is the F1 maximizer, chosen on the
    line scores for line metrics and on the per-sequence max scores for each
    grouping. ``holdout`` reserves that fraction of test lines for selection
    only; metrics are then computed on the remainder.
    """
    split_descr = split_descr or (split_spec.describe() if split_spec else None)
    seed = split_spec.seed if split_spec else 0
    sel, ev = holdout_split(test, holdout, seed)

    def line_vals(lines):
        try:
            return [scores[l.line_no] for l in lines], [l.label for l in lines]
        except KeyError as exc:
            raise KeyError(f"no score for line {exc.args[0]}") from None

    report: dict = {"report_version": REPORT_VERSION, "split": split_descr, "holdout": holdout,
                    "n_test_lines": len(test), "n_eval_lines": len(ev)}
    if train is not None:
        report["n_train_lines"] = len(train)
        if split_spec is not None and split_spec.mode == "chronological":
            report["chronological_check"] = chrono_check(train, test)

    if threshold is None:
        tr = detector.pick_threshold(*line_vals(sel))
        t_line = tr.threshold
        report["threshold"] = tr.to_dict()
    else:
        t_line = threshold
        report["threshold"] = {"threshold": threshold, "source": "fixed"}
    v, y = line_vals(ev)
    report["line"] = detector.evaluate_lines(v, y, t_line, split=split_descr).to_dict()
    try:
        report["auroc"] = detector.auroc(v, y)
    except ValueError:
        report["auroc"] = None

    report["sequence"] = {}
    for w in windows:
        name = w.describe()
        seqs_ev = group(ev, w)
        if threshold is None:
            seqs_sel = group(sel, w)
            try:
                tr = detector.pick_threshold(detector.sequence_scores(scores, seqs_sel), [s.label for s in seqs_sel])
            except ValueError as exc:
                report["sequence"][name] = {"error": str(exc), "n_sequences": len(seqs_ev)}
                continue
            t_seq, tdict = tr.threshold, tr.to_dict()
        else:
            t_seq, tdict = threshold, {"threshold": threshold, "source": "fixed"}
        m = detector.evaluate_sequences(scores, seqs_ev, t_seq, grouping=name, split=split_descr).to_dict()
        m["n_sequences"] = len(seqs_ev)
        m["threshold_report"] = tdict
        report["sequence"][name] = m
    return report


def grouping_label(name: str) -> str:
    kind, _, size = name.partition(":")
    return f"{size} messages" if kind == "count" else f"{size} minutes"


def _cell(reports: Sequence[dict | None], grouping: str, metric: str) -> str:
    parts = []
    for rep in reports:
        m = None if rep is None else rep["sequence"].get(grouping)
        parts.append("-" if not m or metric not in m else f"{m[metric]:.3f}")
    return " / ".join(parts)


def format_table(rows: Mapping[str, Mapping[str, dict]] | Mapping[str, dict], groupings: Sequence[str] | None = None,
                 splits: Sequence[str] | None = None) -> str:
    """Plain-text table: one row per entry, one Prec/Rec/Spec/F1 block per grouping.

    ``rows`` maps a row label to ``{split descriptor: report}``. A flat
    ``{split: report}`` mapping is accepted and shown as a single row.
    """
    if rows and all("sequence" in v for v in rows.values()):
        rows = {"rtdlog": rows}
    if splits is None:
        splits = list(dict.fromkeys(s for r in rows.values() for s in r))
        splits.sort(key=lambda s: (not s.startswith("random"), s))
    if groupings is None:
        groupings = list(dict.fromkeys(g for r in rows.values() for rep in r.values() for g in rep["sequence"]))
    split_names = " / ".join("chronological" if s == "chrono" else s.split(":")[0] for s in splits)
    cols = [(g, m) for g in groupings for m in METRICS]
    body = [[label] + [_cell([r.get(s) for s in splits], g, m) for g, m in cols] for label, r in rows.items()]
    head2 = ["Model"] + [h for _ in groupings for h in HEADERS]
    widths = [max(len(x) for x in col) for col in zip(head2, *body)]
    block_w = [sum(widths[1 + 4 * i:5 + 4 * i]) + 3 * 3 for i in range(len(groupings))]
    head1 = " " * widths[0] + " | " + " | ".join(
        f"{grouping_label(g)} grouping ({split_names})".center(bw) for g, bw in zip(groupings, block_w))

    def fmt(row):
        cells = [row[0].ljust(widths[0])]
        for i in range(len(groupings)):
            cells.append("   ".join(row[1 + 4 * i + j].rjust(widths[1 + 4 * i + j]) for j in range(4)))
        return " | ".join(cells)

    lines = [head1, fmt(head2), "-" * len(fmt(head2))] + [fmt(r) for r in body]
    return "\n".join(lines)
