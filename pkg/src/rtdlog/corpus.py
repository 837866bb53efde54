"""Labeled log ingestion, train/test splits, fixed-window grouping, synthetic corpora."""

from __future__ import annotations

import json
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

NORMAL = "normal"
ANOMALY = "anomaly"

Label = Literal["normal", "anomaly"]


@dataclass(frozen=True)
class DatasetProfile:
    """Column layout of a Loghub-style file: label, epoch seconds, then metadata."""

    name: str
    meta_columns: int  # fields before the message, label included
    timestamp_column: int | None = 1


PROFILES = {
    # - 1117838570 2005.06.03 R02-M1-N0-C:J12-U11 2005-06-03-15.42.50.363779 R02-M1-N0-C:J12-U11 RAS KERNEL INFO <msg>
    "bgl": DatasetProfile("bgl", 9),
    # - 1104566400 2005.01.01 sn209 Jan 1 00:00:00 sn209/sn209 <msg>
    "spirit": DatasetProfile("spirit", 8),
    "thunderbird": DatasetProfile("thunderbird", 8),
}


def get_profile(name: str) -> DatasetProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown dataset profile {name!r}; known: {sorted(PROFILES)}") from None


@dataclass(frozen=True)
class RawLogLine:
    line_no: int
    timestamp: float | None
    label: Label
    text: str

    @property
    def is_anomaly(self) -> bool:
        return self.label == ANOMALY


@dataclass(frozen=True)
class SkippedLine:
    line_no: int
    reason: str


def parse_line(raw: str, line_no: int, profile: DatasetProfile) -> RawLogLine:
    """Parse one file line; raises ValueError when it does not fit the profile."""
    parts = raw.split(None, profile.meta_columns)
    if len(parts) < profile.meta_columns:
        raise ValueError(f"expected at least {profile.meta_columns} fields, got {len(parts)}")
    label = NORMAL if parts[0] == "-" else ANOMALY
    ts = None
    if profile.timestamp_column is not None:
        try:
            ts = float(parts[profile.timestamp_column])
        except ValueError:
            raise ValueError(f"bad timestamp field {parts[profile.timestamp_column]!r}") from None
    text = parts[profile.meta_columns].strip() if len(parts) > profile.meta_columns else ""
    return RawLogLine(line_no, ts, label, text)


def load_dataset(path, profile: str | DatasetProfile = "bgl") -> tuple[list[RawLogLine], list[SkippedLine]]:
    """Read a labeled log file. Line numbers are 1-based file positions.

    Malformed lines are not fatal: they are returned in the skip report.
    """
    if isinstance(profile, str):
        profile = get_profile(profile)
    lines: list[RawLogLine] = []
    skipped: list[SkippedLine] = []
    with open(path, encoding="utf-8", errors="replace", newline="") as fh:
        for i, raw in enumerate(fh, start=1):
            raw = raw.rstrip("\r\n")
            try:
                lines.append(parse_line(raw, i, profile))
            except ValueError as exc:
                skipped.append(SkippedLine(i, str(exc)))
    return lines, skipped


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitSpec:
    mode: Literal["random", "chronological"] = "random"
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("random", "chronological"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")

    @classmethod
    def parse(cls, text: str, train_fraction: float = 0.8) -> "SplitSpec":
        """``random:SEED`` or ``chrono``."""
        if text in ("chrono", "chronological"):
            return cls("chronological", train_fraction)
        if text.startswith("random"):
            _, _, seed = text.partition(":")
            return cls("random", train_fraction, int(seed) if seed else 0)
        raise ValueError(f"bad split {text!r}; expected random:SEED or chrono")

    def describe(self) -> str:
        return "chrono" if self.mode == "chronological" else f"random:{self.seed}"


def split(lines: Sequence[RawLogLine], spec: SplitSpec) -> tuple[list[RawLogLine], list[RawLogLine]]:
    """Partition lines into (train, test) with ``floor(fraction * n)`` training lines.

    Both sides come back in file order; in random mode the membership is
    decided by a seeded shuffle.
    """
    n = len(lines)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    n_train = int(spec.train_fraction * n)
    if spec.mode == "chronological":
        ordered = list(lines)
        return ordered[:n_train], ordered[n_train:]
    order = list(range(n))
    random.Random(spec.seed).shuffle(order)
    train_idx = sorted(order[:n_train])
    test_idx = sorted(order[n_train:])
    return [lines[i] for i in train_idx], [lines[i] for i in test_idx]


# ---------------------------------------------------------------- grouping


@dataclass(frozen=True)
class Window:
    kind: Literal["count", "time"]
    size: float  # messages for count windows, minutes for time windows

    def __post_init__(self):
        if self.kind not in ("count", "time"):
            raise ValueError(f"unknown window kind {self.kind!r}")
        if self.size <= 0 or (self.kind == "count" and int(self.size) != self.size):
            raise ValueError(f"bad window size {self.size!r}")

    @classmethod
    def parse(cls, text: str) -> "Window":
        """``count:K`` or ``minutes:W``."""
        kind, _, value = text.partition(":")
        if kind == "count":
            return cls("count", int(value))
        if kind in ("minutes", "time"):
            return cls("time", float(value))
        raise ValueError(f"bad grouping {text!r}; expected count:K or minutes:W")

    def describe(self) -> str:
        if self.kind == "count":
            return f"count:{int(self.size)}"
        return f"minutes:{self.size:g}"


@dataclass(frozen=True)
class LogSequence:
    lines: tuple[RawLogLine, ...]
    window: Window

    @property
    def label(self) -> Label:
        return ANOMALY if any(l.is_anomaly for l in self.lines) else NORMAL

    @property
    def is_anomaly(self) -> bool:
        return self.label == ANOMALY

    @property
    def line_nos(self) -> list[int]:
        return [l.line_no for l in self.lines]


def group(lines: Sequence[RawLogLine], window: Window) -> list[LogSequence]:
    """Non-overlapping fixed windows in input order; the trailing partial window is kept."""
    if window.kind == "count":
        k = int(window.size)
        return [LogSequence(tuple(lines[i:i + k]), window) for i in range(0, len(lines), k)]

    width = window.size * 60.0
    for line in lines:
        if line.timestamp is None:
            raise ValueError(f"time window needs timestamps; line {line.line_no} has none")
    out: list[LogSequence] = []
    current: list[RawLogLine] = []
    lo = hi = 0.0
    for line in lines:
        t = line.timestamp
        if current and max(hi, t) - min(lo, t) < width:
            current.append(line)
            lo, hi = min(lo, t), max(hi, t)
        else:
            if current:
                out.append(LogSequence(tuple(current), window))
            current, lo, hi = [line], t, t
    if current:
        out.append(LogSequence(tuple(current), window))
    return out


# ---------------------------------------------------------------- synthesis

_COMPONENTS = ["kernel", "ciod", "mmcs", "sshd", "crond", "nfs", "ib_sm", "pbs_mom", "gm_mapper", "lustre"]
_WORDS = (
    "instruction cache parity error corrected data tlb interrupt node card status "
    "job started finished session opened closed for user root connection from port "
    "received request reply sent packet buffer allocated released memory page frame "
    "link up down ready state change detected clock synchronized polling idle "
    "service restart configuration loaded updated check passed scheduler queue "
    "message prefix control stream torus receiver sender retransmit timeout "
    "ethernet device driver registered mount point filesystem disk block write read "
    "temperature fan speed voltage nominal sensor reading daemon heartbeat ok"
).split()
_ALERT_WORDS = (
    "fatal panic failure unrecoverable machine check corrupted lost segfault "
    "abort killed oops halted rejected invalid exhausted denied unreachable"
).split()
_SLOTS = ("{num}", "{hex}", "{ip}", "{path}", "{node}", "{time}")


@dataclass(frozen=True)
class SynthSpec:
    n_templates: int = 20
    n_lines: int = 5000
    n_anomalies: int = 200
    n_anomaly_templates: int = 10
    seed: int = 0
    start_time: int = 1117838570
    mean_gap_seconds: float = 3.0

    def __post_init__(self):
        if self.n_templates < 2:
            raise ValueError("need at least two normal templates")
        if self.n_anomalies > 0 and self.n_anomaly_templates < 1:
            raise ValueError("anomalies requested but no anomaly templates")
        if min(self.n_lines, self.n_anomalies, self.n_anomaly_templates) < 0:
            raise ValueError("counts must be nonnegative")


@dataclass
class SynthCorpus:
    spec: SynthSpec
    lines: list[RawLogLine]
    normal_templates: list[str]
    anomaly_templates: list[str]
    template_of: list[int] = field(default_factory=list)  # per line; anomaly ids are offset by n_templates

    def manifest(self) -> dict:
        return {
            "format_version": 1,
            "spec": asdict(self.spec),
            "normal_templates": self.normal_templates,
            "anomaly_templates": self.anomaly_templates,
            "n_lines": len(self.lines),
            "anomaly_line_nos": [l.line_no for l in self.lines if l.is_anomaly],
            "template_of": self.template_of,
        }


def _make_template(rng: random.Random, pool: list[str], extra: list[str] | None = None) -> str:
    n_words = rng.randint(4, 9)
    words = [rng.choice(_COMPONENTS) + ":"]
    words += rng.sample(pool, n_words)
    if extra:
        for w in rng.sample(extra, rng.randint(1, 2)):
            words.insert(rng.randint(1, len(words)), w)
    for _ in range(rng.randint(1, 2)):
        words.insert(rng.randint(1, len(words)), rng.choice(_SLOTS))
    return " ".join(words)


def _fill(template: str, rng: random.Random) -> str:
    out = []
    for tok in template.split(" "):
        if tok == "{num}":
            tok = str(rng.randint(0, 99999))
        elif tok == "{hex}":
            tok = "0x%08x" % rng.getrandbits(32)
        elif tok == "{ip}":
            tok = "10.%d.%d.%d" % (rng.randint(0, 255), rng.randint(0, 255), rng.randint(1, 254))
        elif tok == "{path}":
            tok = "/" + "/".join(rng.choice(["var", "log", "tmp", "home", "p", "gpfs", "etc"]) for _ in range(rng.randint(1, 3)))
        elif tok == "{node}":
            tok = "R%02d-M%d-N%d-C:J%02d-U%02d" % (rng.randint(0, 7), rng.randint(0, 1), rng.randint(0, 15),
                                                     rng.randint(2, 17), rng.choice([1, 11]))
        elif tok == "{time}":
            tok = "%02d:%02d:%02d" % (rng.randint(0, 23), rng.randint(0, 59), rng.randint(0, 59))
        out.append(tok)
    return " ".join(out)


def synthesize(spec: SynthSpec) -> SynthCorpus:
    """Deterministic synthetic corpus with ground truth.

    Normal and anomaly templates draw words from a shared pool; anomaly
    templates additionally carry alert words and are guaranteed not to
    coincide with any normal template.
    """
    rng = random.Random(spec.seed)
    normal: list[str] = []
    while len(normal) < spec.n_templates:
        t = _make_template(rng, _WORDS)
        if t not in normal:
            normal.append(t)
    anomalous: list[str] = []
    while len(anomalous) < (spec.n_anomaly_templates if spec.n_anomalies else 0):
        t = _make_template(rng, _WORDS, _ALERT_WORDS)
        if t not in normal and t not in anomalous:
            anomalous.append(t)

    # Zipf-like template frequencies, as in real system logs.
    weights = [1.0 / (r + 1) ** 0.8 for r in range(len(normal))]
    kinds = [rng.choices(range(len(normal)), weights)[0] for _ in range(spec.n_lines)]
    for _ in range(spec.n_anomalies):
        kinds.insert(rng.randint(0, len(kinds)), len(normal) + rng.randrange(len(anomalous)))

    lines = []
    ts = float(spec.start_time)
    for i, kind in enumerate(kinds, start=1):
        ts += rng.expovariate(1.0 / spec.mean_gap_seconds)
        if kind < len(normal):
            lines.append(RawLogLine(i, float(int(ts)), NORMAL, _fill(normal[kind], rng)))
        else:
            lines.append(RawLogLine(i, float(int(ts)), ANOMALY, _fill(anomalous[kind - len(normal)], rng)))
    return SynthCorpus(spec, lines, normal, anomalous, kinds)


def format_bgl_line(line: RawLogLine, node: str = "R00-M0-N0-C:J02-U01") -> str:
    """Render a line in the BGL column layout so ``load_dataset(..., "bgl")`` reads it back."""
    ts = int(line.timestamp or 0)
    tm = time.gmtime(ts)
    tag = "-" if not line.is_anomaly else "SYNTH"
    level = "INFO" if not line.is_anomaly else "FATAL"
    return (f"{tag} {ts} {time.strftime('%Y.%m.%d', tm)} {node} "
            f"{time.strftime('%Y-%m-%d-%H.%M.%S', tm)}.000000 {node} RAS KERNEL {level} {line.text}")


def write_corpus(corpus: SynthCorpus, log_path, manifest_path) -> None:
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        for line in corpus.lines:
            fh.write(format_bgl_line(line) + "\n")
    Path(manifest_path).write_text(json.dumps(corpus.manifest(), indent=1) + "\n", encoding="utf-8")


def label_counts(lines: Iterable[RawLogLine]) -> dict[str, int]:
    counts = {NORMAL: 0, ANOMALY: 0}
    for l in lines:
        counts[l.label] += 1
    return counts
