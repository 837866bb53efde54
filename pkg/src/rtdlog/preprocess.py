"""Message normalization: lowercasing, placeholder substitution, stop words.

Rules are applied in order (dates, times, IPs, paths, hex, numbers) so that
composite values are consumed before their numeric pieces. Every default
pattern is anchored on word boundaries and free of nested quantifiers, which
keeps matching linear in the message length.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

CONFIG_VERSION = 1

DEFAULT_STOPWORDS = ("of", "have", "been", "the", "a", "an", "is", "are", "to")

DEFAULT_RULES = (
    # BGL full stamp 2005-06-03-15.42.50.363779, then ISO / BGL short dates.
    (r"\b\d{4}-\d{2}-\d{2}-\d{2}\.\d{2}\.\d{2}(?:\.\d+)?\b", "<date>"),
    (r"\b\d{4}[-./]\d{1,2}[-./]\d{1,2}(?:[t ]\d{1,2}:\d{2}(?::\d{2})?(?:[.,]\d+)?)?\b", "<date>"),
    (r"\b\d{1,2}:\d{2}(?::\d{2})?(?:[.,]\d+)?\b", "<time>"),
    (r"\b\d{1,3}\.\d{1,3}\.\d{1,3}\.\d{1,3}(?::\d{1,5})?\b", "<ip>"),
    (r"(?<![\w/.~-])/[\w.~-]+(?:/[\w.~-]+)*/?", "<path>"),
    (r"\b(?:0x[0-9a-f]+|(?=[0-9a-f]*\d)(?=[0-9a-f]*[a-f])[0-9a-f]{4,})\b", "<hex>"),
    (r"\b\d+(?:\.\d+)?\b", "<num>"),
)

_WORD = re.compile(r"\w+")


@dataclass(frozen=True)
class NormalizerConfig:
    stopwords: tuple[str, ...] = DEFAULT_STOPWORDS
    rules: tuple[tuple[str, str], ...] = DEFAULT_RULES
    lowercase: bool = True
    version: int = CONFIG_VERSION

    def __post_init__(self):
        for _, placeholder in self.rules:
            if not re.fullmatch(r"<[a-z_]+>", placeholder):
                raise ValueError(f"placeholder must look like <name>, got {placeholder!r}")

    @property
    def placeholders(self) -> tuple[str, ...]:
        seen = dict.fromkeys(p for _, p in self.rules)
        return tuple(seen)

    @cached_property
    def compiled(self) -> list[tuple[re.Pattern, str]]:
        return [(re.compile(pat), ph) for pat, ph in self.rules]

    @cached_property
    def splitter(self) -> re.Pattern:
        alts = "|".join(re.escape(p) for p in self.placeholders)
        return re.compile((alts + "|" if alts else "") + r"\w+|[^\w\s]")

    @cached_property
    def stopword_set(self) -> frozenset[str]:
        return frozenset(self.stopwords)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "lowercase": self.lowercase,
            "stopwords": list(self.stopwords),
            "rules": [[pat, ph] for pat, ph in self.rules],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NormalizerConfig":
        if data.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ValueError(f"unsupported normalizer config version {data.get('version')}")
        return cls(
            stopwords=tuple(data.get("stopwords", DEFAULT_STOPWORDS)),
            rules=tuple((p, ph) for p, ph in data.get("rules", DEFAULT_RULES)),
            lowercase=bool(data.get("lowercase", True)),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NormalizerConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class NormalizedMessage:
    text: str
    source_line_no: int | None = None

    @property
    def words(self) -> list[str]:
        return self.text.split()


def default_config() -> NormalizerConfig:
    return NormalizerConfig()


def normalize(text: str, cfg: NormalizerConfig | None = None, line_no: int | None = None) -> NormalizedMessage:
    """Normalize one raw message.

    Punctuation is split off into standalone characters (placeholders stay
    whole), so ``"downloaded."`` becomes ``"downloaded ."``.
    """
    cfg = cfg or _DEFAULT
    if cfg.lowercase:
        text = text.lower()
    for pattern, placeholder in cfg.compiled:
        text = pattern.sub(placeholder, text)
    stop = cfg.stopword_set
    words = [w for w in cfg.splitter.findall(text) if w not in stop]
    return NormalizedMessage(" ".join(words), line_no)


def word_count(text: str) -> int:
    """Number of alphanumeric runs; punctuation does not count as a word."""
    return len(_WORD.findall(text))


_DEFAULT = NormalizerConfig()
