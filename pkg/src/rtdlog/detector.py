"""Line anomaly scores, F1-maximizing thresholds and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import ANOMALY, LogSequence
from .electra import ModelBundle, _discriminator_forward
from .preprocess import normalize
from .tokenizer import TokenSequence, encode

SCORES_CSV_VERSION = 1
REPORT_VERSION = 1


@dataclass(frozen=True)
class AnomalyScore:
    value: float
    line_no: int | None
    n_tokens: int
    empty: bool = False  # nothing survived normalization; scored as a lone [UNK]


def score_from_probs(d: np.ndarray) -> float:
    """``-(1/N) sum log(1 - D_i)`` over the given (non-pad) positions."""
    d = np.asarray(d, dtype=np.float64)
    return float(-np.log1p(-d).mean())


def score_sequences(bundle: ModelBundle, seqs: Sequence[TokenSequence]) -> list[AnomalyScore]:
    """Score uncorrupted token sequences with the discriminator.

    Each distinct sequence goes through the encoder alone. Batching would let
    BLAS round differently depending on what else shares the matmul, so a
    line's score depends only on the line itself. Repeated sequences (common
    in logs) are scored once.
    """
    cache: dict[bytes, float] = {}
    out = []
    for s in seqs:
        ids = s.array() if isinstance(s, TokenSequence) else np.asarray(s, dtype=np.int64)
        empty = len(ids) == 0
        if empty:
            ids = np.array([bundle.vocab.unk_id], dtype=np.int64)
        key = ids.astype(np.int64).tobytes()
        value = cache.get(key)
        if value is None:
            d, _, _ = _discriminator_forward(bundle, [ids])
            value = cache[key] = float(-np.log1p(-d[0].astype(np.float64)).mean())
        out.append(AnomalyScore(value, getattr(s, "line_no", None), len(ids), empty))
    return out


def tokenize_line(bundle: ModelBundle, text: str, line_no: int | None = None) -> TokenSequence:
    return encode(normalize(text, bundle.normalizer, line_no), bundle.vocab, bundle.max_len)


def score_lines(bundle: ModelBundle, texts: Iterable[str], line_nos: Iterable[int] | None = None
                ) -> list[AnomalyScore]:
    texts = list(texts)
    nos = list(line_nos) if line_nos is not None else [None] * len(texts)
    seqs = [tokenize_line(bundle, t, n) for t, n in zip(texts, nos)]
    return score_sequences(bundle, seqs)


def score_line(bundle: ModelBundle, text: str, line_no: int | None = None) -> AnomalyScore:
    return score_lines(bundle, [text], [line_no])[0]


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    specificity: float
    f1: float
    threshold: float
    level: str = "line"
    degenerate: list[str] = field(default_factory=list)
    grouping: str | None = None
    split: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["threshold"] = _json_float(self.threshold)
        return d


def _json_float(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


def f1_score(tp: int, fp: int, fn: int) -> float:
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return 2 * prec * rec / (prec + rec) if prec + rec else 0.0


def metrics_from_counts(tp, fp, fn, tn, threshold=math.nan, level="line", grouping=None, split=None) -> MetricsReport:
    degenerate = []
    prec, bad = _ratio(tp, tp + fp)
    if bad:
        degenerate.append("precision")
    rec, bad = _ratio(tp, tp + fn)
    if bad:
        degenerate.append("recall")
    spec, bad = _ratio(tn, tn + fp)
    if bad:
        degenerate.append("specificity")
    if prec + rec:
        f1 = 2 * prec * rec / (prec + rec)
    else:
        f1 = 0.0
        degenerate.append("f1")
    return MetricsReport(tp, fp, fn, tn, prec, rec, spec, f1, threshold, level, degenerate, grouping, split)


def _values(scores) -> np.ndarray:
    return np.array([s.value if isinstance(s, AnomalyScore) else float(s) for s in scores], dtype=np.float64)


def _is_anom(labels) -> np.ndarray:
    return np.array([l == ANOMALY if isinstance(l, str) else bool(l) for l in labels], dtype=bool)


def evaluate_lines(scores, labels, threshold: float, **descr) -> MetricsReport:
    """Predict anomaly iff score > threshold (strict)."""
    v, y = _values(scores), _is_anom(labels)
    pred = v > threshold
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    tn = int((~pred & ~y).sum())
    return metrics_from_counts(tp, fp, fn, tn, threshold, "line", **descr)


def sequence_scores(line_scores: dict[int, float], sequences: Sequence[LogSequence]) -> np.ndarray:
    """Max member score per sequence; a sequence exceeds t iff some member does."""
    out = np.empty(len(sequences))
    for i, seq in enumerate(sequences):
        try:
            out[i] = max(line_scores[l.line_no] for l in seq.lines)
        except KeyError as exc:
            raise KeyError(f"no score for line {exc.args[0]}") from None
    return out


def evaluate_sequences(line_scores: dict[int, float], sequences: Sequence[LogSequence], threshold: float,
                       **descr) -> MetricsReport:
    """A sequence is predicted anomalous iff any member line scores above the threshold."""
    smax = sequence_scores(line_scores, sequences)
    rep = evaluate_lines(smax, [s.label for s in sequences], threshold, **descr)
    rep.level = "sequence"
    return rep


# ---------------------------------------------------------------- thresholds


@dataclass
class ThresholdReport:
    threshold: float
    f1_at_threshold: float
    precision: float
    recall: float
    specificity: float
    candidate_count: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["threshold"] = _json_float(self.threshold)
        return d


def candidate_thresholds(values) -> np.ndarray:
    """Midpoints between consecutive distinct scores, plus -inf and +inf."""
    u = np.unique(np.asarray(values, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([[-np.inf], mids, [np.inf]])


def pick_threshold(scores, labels) -> ThresholdReport:
    """F1-maximizing threshold over all candidate cut points.

    One sweep from the highest threshold down; ties in F1 keep the higher
    threshold (fewer positives).
    """
    v, y = _values(scores), _is_anom(labels)
    if y.all() or not y.any():
        raise ValueError("threshold selection needs both normal and anomaly labels")
    cands = candidate_thresholds(v)
    order = np.argsort(-v, kind="stable")
    vs, ys = v[order], y[order]
    P, Nn = int(y.sum()), int((~y).sum())
    best = None
    tp = fp = 0
    j = 0
    # candidates descending: +inf, mids..., -inf
    for t in cands[::-1]:
        while j < len(vs) and vs[j] > t:
            tp += int(ys[j])
            fp += int(not ys[j])
            j += 1
        f1 = f1_score(tp, fp, P - tp)
        if best is None or f1 > best[0]:
            best = (f1, t, tp, fp)
    f1, t, tp, fp = best
    rep = metrics_from_counts(tp, fp, P - tp, Nn - fp, t)
    return ThresholdReport(t, rep.f1, rep.precision, rep.recall, rep.specificity, len(cands))


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties count half)."""
    from scipy.stats import rankdata

    v, y = _values(scores), _is_anom(labels)
    P, N = int(y.sum()), int((~y).sum())
    if not P or not N:
        raise ValueError("AUROC needs both classes")
    ranks = rankdata(v)
    return float((ranks[y].sum() - P * (P + 1) / 2) / (P * N))
