"""Report text handling: normalization, section extraction, wordpiece vocabulary,
tokenization and regex labels."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, SOS, EOS, MASK = "[PAD]", "[UNK]", "[SOS]", "[EOS]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, SOS, EOS, MASK)
PAD_ID, UNK_ID, SOS_ID, EOS_ID, MASK_ID = range(5)

MAX_CAPTION_LEN = 170
CONT = "##"


class AbsentSectionError(KeyError):
    pass


# ---------------------------------------------------------------------------
# normalization and sections

_PUNCT = re.compile(r"([^\w\s])")
_WS = re.compile(r"\s+")


def normalize(text: str) -> str:
    """Lowercase, split punctuation off as its own word, collapse whitespace."""
    text = _PUNCT.sub(r" \1 ", text.lower())
    return _WS.sub(" ", text).strip()


_HEADER = re.compile(r"(?:^|(?<=\s))([A-Z][A-Z ]*[A-Z]):")


@dataclass
class ReportDoc:
    raw: str
    sections: dict[str, str] = field(default_factory=dict)

    @classmethod
    def parse(cls, raw: str) -> "ReportDoc":
        """Split on upper-case ``HEADER:`` markers; text before the first header is dropped."""
        matches = list(_HEADER.finditer(raw))
        sections = {}
        for i, m in enumerate(matches):
            end = matches[i + 1].start() if i + 1 < len(matches) else len(raw)
            sections[m.group(1).strip()] = raw[m.end():end].strip()
        return cls(raw, sections)


def extract_findings(doc: ReportDoc | str) -> str:
    if isinstance(doc, str):
        doc = ReportDoc.parse(doc)
    try:
        return doc.sections["FINDINGS"]
    except KeyError:
        raise AbsentSectionError("report has no FINDINGS section") from None


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    def __init__(self, pieces: Sequence[str]):
        pieces = list(pieces)
        if tuple(pieces[:5]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(pieces)) != len(pieces):
            raise ValueError("duplicate pieces in vocabulary")
        self.pieces = pieces
        self.index = {p: i for i, p in enumerate(pieces)}

    def __len__(self) -> int:
        return len(self.pieces)

    def __contains__(self, piece: str) -> bool:
        return piece in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.pieces == other.pieces

    def id(self, piece: str) -> int:
        return self.index.get(piece, UNK_ID)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.pieces) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def _alphabet(words: Iterable[str]) -> list[str]:
    chars = sorted({c for w in words for c in w})
    return [c for c in chars] + [CONT + c for c in chars]


def train_vocab(corpus: Iterable[str], target_size: int = 1000) -> Vocabulary:
    """Grow a wordpiece inventory by repeatedly merging the most frequent adjacent pair.

    Both the word-initial and ``##``-continuation form of every character are
    seeded first, so any word over the corpus alphabet can be tokenized.
    Frequency ties go to the lexicographically smallest pair.  Growth stops at
    ``target_size`` or when no word has two pieces left.
    """
    counts = Counter()
    for text in corpus:
        counts.update(normalize(text).split())
    words = sorted(counts)
    alphabet = _alphabet(words)
    if target_size < len(alphabet) + len(SPECIAL_TOKENS):
        raise ValueError(
            f"target_size {target_size} is below alphabet+reserved ({len(alphabet) + len(SPECIAL_TOKENS)})")
    pieces = list(SPECIAL_TOKENS) + alphabet
    seen = set(pieces)
    splits = {w: [w[0]] + [CONT + c for c in w[1:]] for w in words}

    while len(pieces) < target_size:
        pairs = Counter()
        for w in words:
            s = splits[w]
            for a, b in zip(s, s[1:]):
                pairs[a, b] += counts[w]
        if not pairs:
            break
        best = max(pairs.values())
        a, b = min(p for p, c in pairs.items() if c == best)
        merged = a + b[len(CONT):]
        for w in words:
            s = splits[w]
            if len(s) < 2:
                continue
            out, i = [], 0
            while i < len(s):
                if i + 1 < len(s) and s[i] == a and s[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(s[i])
                    i += 1
            splits[w] = out
        if merged not in seen:
            seen.add(merged)
            pieces.append(merged)
    return Vocabulary(pieces)


# ---------------------------------------------------------------------------
# tokenization


def wordpiece(word: str, vocab: Vocabulary) -> list[int]:
    """Greedy longest-match split of one word; unmatched characters become [UNK]."""
    ids, start = [], 0
    while start < len(word):
        end = len(word)
        hit = None
        while end > start:
            piece = word[start:end] if start == 0 else CONT + word[start:end]
            if piece in vocab.index:
                hit = vocab.index[piece]
                break
            end -= 1
        if hit is None:
            ids.append(UNK_ID)
            start += 1
        else:
            ids.append(hit)
            start = end
    return ids


def tokenize(text: str, vocab: Vocabulary, max_len: int = MAX_CAPTION_LEN) -> list[int]:
    """[SOS] + wordpieces of the (already normalized) text + [EOS], capped at ``max_len``."""
    if max_len < 2:
        raise ValueError("max_len must leave room for [SOS] and [EOS]")
    body = []
    for word in text.split():
        body.extend(wordpiece(word, vocab))
    return [SOS_ID] + body[:max_len - 2] + [EOS_ID]


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    words: list[str] = []
    for i in ids:
        piece = vocab.pieces[int(i)]
        if piece in (PAD, SOS, EOS, MASK):
            continue
        if piece.startswith(CONT) and words:
            words[-1] += piece[len(CONT):]
        else:
            words.append(piece)
    return " ".join(words)


def pad_batch(seqs: Sequence[Sequence[int]], length: int | None = None):
    length = length or max(len(s) for s in seqs)
    out = np.full((len(seqs), length), PAD_ID, dtype=np.int64)
    for r, s in enumerate(seqs):
        out[r, :len(s)] = s
    return out


def percentile_length(lengths: Sequence[int], p: float = 95) -> int:
    """Nearest-rank percentile."""
    if not lengths:
        raise ValueError("percentile of an empty list")
    if not 0 < p <= 100:
        raise ValueError("p must lie in (0, 100]")
    ordered = sorted(lengths)
    rank = math.ceil(p / 100 * len(ordered))
    return ordered[max(rank, 1) - 1]


# ---------------------------------------------------------------------------
# regex labels

SEVERITY_RULES = (
    (3, re.compile(r"\bsevere pulmonary edema\b")),
    (2, re.compile(r"\bmoderate pulmonary edema\b")),
    (1, re.compile(r"\bmild pulmonary edema\b")),
    (0, re.compile(r"\bno pulmonary edema\b")),
)


def severity_label(findings_text: str) -> int | None:
    """Edema grade 0-3 from the rule table; the highest matching grade wins."""
    for grade, rule in SEVERITY_RULES:
        if rule.search(findings_text):
            return grade
    return None
