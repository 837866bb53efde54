"""WordPiece vocabulary induction, encoding and decoding.

Training follows the likelihood-gain criterion: starting from characters
(with ``##`` marking word-internal pieces), repeatedly merge the adjacent
pair maximizing ``count(ab) / (count(a) * count(b))``.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .preprocess import DEFAULT_RULES, NormalizedMessage

PAD, UNK, MASK = "[PAD]", "[UNK]", "[MASK]"
SPECIALS = (PAD, UNK, MASK)
PREFIX = "##"
VOCAB_FORMAT_VERSION = 1
DEFAULT_PLACEHOLDERS = tuple(dict.fromkeys(ph for _, ph in DEFAULT_RULES))


@dataclass
class Vocabulary:
    tokens: list[str]
    placeholders: tuple[str, ...] = DEFAULT_PLACEHOLDERS
    max_vocab: int | None = None
    continuation_prefix: str = PREFIX
    index: dict[str, int] = field(init=False, repr=False)
    _cache: dict[str, tuple[int, ...]] = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for t in SPECIALS + tuple(self.placeholders):
            if t not in self.index:
                raise ValueError(f"vocabulary lacks required token {t!r}")
        self.atomic = frozenset(SPECIALS) | frozenset(self.placeholders)

    def __len__(self):
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    @property
    def specials(self) -> dict[str, int]:
        return {t: self.index[t] for t in SPECIALS}

    def sidecar(self) -> dict:
        return {
            "format_version": VOCAB_FORMAT_VERSION,
            "size": len(self.tokens),
            "specials": self.specials,
            "placeholders": list(self.placeholders),
            "continuation_prefix": self.continuation_prefix,
            "max_vocab": self.max_vocab,
        }

    def save(self, vocab_path, sidecar_path=None):
        """Write ``vocab.txt`` (line number = id) and a JSON sidecar."""
        vocab_path = Path(vocab_path)
        vocab_path.write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")
        sidecar_path = Path(sidecar_path) if sidecar_path else vocab_path.with_suffix(".json")
        sidecar_path.write_text(json.dumps(self.sidecar(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, vocab_path, sidecar_path=None) -> "Vocabulary":
        vocab_path = Path(vocab_path)
        sidecar_path = Path(sidecar_path) if sidecar_path else vocab_path.with_suffix(".json")
        meta = json.loads(sidecar_path.read_text(encoding="utf-8"))
        if meta.get("format_version") != VOCAB_FORMAT_VERSION:
            raise ValueError(f"unsupported vocabulary format {meta.get('format_version')}")
        tokens = vocab_path.read_text(encoding="utf-8").split("\n")[:-1]
        vocab = cls(tokens, tuple(meta["placeholders"]), meta.get("max_vocab"), meta["continuation_prefix"])
        if vocab.specials != meta["specials"] or len(vocab) != meta["size"]:
            raise ValueError("vocabulary file does not match its sidecar")
        return vocab

    # ------------------------------------------------------------ encoding

    def encode_word(self, word: str) -> tuple[int, ...]:
        """Greedy longest-match-first; an unmatched residue becomes one [UNK]."""
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        if word in self.atomic:
            out = (self.index[word],)
        else:
            ids = []
            start = 0
            while start < len(word):
                end = len(word)
                found = None
                while end > start:
                    piece = word[start:end] if start == 0 else self.continuation_prefix + word[start:end]
                    found = self.index.get(piece)
                    if found is not None:
                        break
                    end -= 1
                if found is None:
                    ids.append(self.unk_id)
                    break
                ids.append(found)
                start = end
            out = tuple(ids)
        if len(self._cache) < 1_000_000:
            self._cache[word] = out
        return out


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    line_no: int | None = None

    def __len__(self):
        return len(self.ids)

    @property
    def n(self) -> int:
        return len(self.ids)

    def array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)


def _as_text(msg) -> str:
    return msg.text if isinstance(msg, NormalizedMessage) else msg


def encode(msg: NormalizedMessage | str, vocab: Vocabulary, max_len: int = 128) -> TokenSequence:
    ids: list[int] = []
    for word in _as_text(msg).split():
        ids.extend(vocab.encode_word(word))
        if len(ids) >= max_len:
            break
    return TokenSequence(tuple(ids[:max_len]), getattr(msg, "source_line_no", None))


def decode(seq: TokenSequence | Sequence[int], vocab: Vocabulary) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    parts: list[str] = []
    p = vocab.continuation_prefix
    for i in ids:
        if not 0 <= i < len(vocab.tokens):
            raise ValueError(f"token id {i} outside vocabulary of size {len(vocab)}")
        tok = vocab.tokens[i]
        if tok.startswith(p) and parts and len(tok) > len(p):
            parts[-1] += tok[len(p):]
        else:
            parts.append(tok)
    return " ".join(parts)


# ------------------------------------------------------------ training


def _alphabet(words: Iterable[str]) -> list[str]:
    chars = set()
    for w in words:
        chars.add(w[0])
        chars.update(PREFIX + c for c in w[1:])
    return sorted(chars)


def train_vocab(corpus: Iterable[NormalizedMessage | str], max_vocab: int = 8192,
                placeholders: Sequence[str] = DEFAULT_PLACEHOLDERS) -> Vocabulary:
    """Induce a WordPiece vocabulary from normalized messages.

    Specials and placeholders come first, then the character alphabet, then
    merged pieces in the order they were created. Ties between equally
    scored pairs go to the more frequent pair, then the lexicographically
    smaller one, so training is deterministic.
    """
    placeholders = tuple(placeholders)
    word_freq: Counter[str] = Counter()
    n_msgs = 0
    atomic = set(SPECIALS) | set(placeholders)
    for msg in corpus:
        n_msgs += 1
        word_freq.update(w for w in _as_text(msg).split() if w not in atomic)
    if n_msgs == 0:
        raise ValueError("cannot train a vocabulary on an empty corpus")

    tokens = list(SPECIALS) + [p for p in placeholders if p not in SPECIALS]
    alphabet = [c for c in _alphabet(word_freq) if c not in tokens]
    if max_vocab < len(tokens) + len(alphabet):
        raise ValueError(f"max_vocab={max_vocab} is smaller than specials + alphabet "
                         f"({len(tokens) + len(alphabet)})")
    tokens += alphabet
    known = set(tokens)

    words = sorted(word_freq)
    freqs = [word_freq[w] for w in words]
    splits = [[w[0]] + [PREFIX + c for c in w[1:]] for w in words]

    tok_freq: Counter[str] = Counter()
    pair_freq: Counter[tuple[str, str]] = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, (sp, f) in enumerate(zip(splits, freqs)):
        for t in sp:
            tok_freq[t] += f
        for pair in zip(sp, sp[1:]):
            pair_freq[pair] += f
            where[pair].add(wi)

    while len(tokens) < max_vocab and pair_freq:
        best = min(pair_freq, key=lambda p: (-pair_freq[p] / (tok_freq[p[0]] * tok_freq[p[1]]), -pair_freq[p], p))
        a, b = best
        merged = a + b[len(PREFIX):] if b.startswith(PREFIX) else a + b
        if merged not in known:
            tokens.append(merged)
            known.add(merged)
        for wi in sorted(where.pop(best, ())):
            sp, f = splits[wi], freqs[wi]
            for pair in zip(sp, sp[1:]):
                pair_freq[pair] -= f
                if pair_freq[pair] <= 0:
                    del pair_freq[pair]
                if pair != best:
                    where[pair].discard(wi)
            for t in sp:
                tok_freq[t] -= f
            new = []
            i = 0
            while i < len(sp):
                if i + 1 < len(sp) and sp[i] == a and sp[i + 1] == b:
                    new.append(merged)
                    i += 2
                else:
                    new.append(sp[i])
                    i += 1
            splits[wi] = new
            for t in new:
                tok_freq[t] += f
            for pair in zip(new, new[1:]):
                pair_freq[pair] += f
                where[pair].add(wi)
        pair_freq.pop(best, None)

    return Vocabulary(tokens, placeholders, max_vocab)
