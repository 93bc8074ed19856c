"""Vocabulary construction and contiguous-lane segment batching."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DomainError

UNK = "<unk>"
_ESCAPE = re.compile(r"\\u\{([0-9A-Fa-f]{4,6})\}")


@dataclass
class Vocab:
    """Token <-> id mapping. Id 0 is always the unknown token."""

    tokens: list[str]
    counts: list[int]
    mode: str = "char"
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.mode not in ("char", "word"):
            raise DomainError(f"vocab mode must be 'char' or 'word', got {self.mode!r}")
        if not self.tokens or self.tokens[0] != UNK:
            raise DataError("vocab must start with the unknown token")
        if len(self.tokens) != len(self.counts):
            raise DataError("vocab tokens and counts differ in length")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("vocab contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def split(self, text: str) -> list[str]:
        return list(text) if self.mode == "char" else text.split()

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.index.get(t, 0) for t in self.split(text)], dtype=np.int64)

    def decode(self, ids) -> str:
        n = len(self.tokens)
        out = []
        for i in np.asarray(ids, dtype=np.int64).reshape(-1):
            if not 0 <= i < n:
                raise IndexError(f"token id {i} outside vocab of size {n}")
            out.append(self.tokens[i])
        return ("" if self.mode == "char" else " ").join(out)

    # -- file format: one "token<TAB>count" line per id

    def dumps(self) -> str:
        lines = []
        for i, (tok, n) in enumerate(zip(self.tokens, self.counts)):
            if i and self.mode == "char" and ord(tok) < 0x21:
                tok = f"\\u{{{ord(tok):04X}}}"
            lines.append(f"{tok}\t{n}\n")
        return "".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "Vocab":
        """Parse the line format; the mode is char iff every regular token is one character."""
        tokens, counts = [], []
        for lineno, line in enumerate(text.split("\n"), 1):
            if not line:
                continue
            tok, sep, count = line.rpartition("\t")
            if not sep or not count.isdigit():
                raise DataError(f"vocab line {lineno}: expected 'token<TAB>count'")
            tokens.append(tok)
            counts.append(int(count))
        if not tokens or tokens[0] != UNK:
            raise DataError(f"vocab must start with {UNK!r}")
        body = [_ESCAPE.sub(lambda m: chr(int(m.group(1), 16)), t) for t in tokens[1:]]
        mode = "char" if all(len(t) == 1 for t in body) else "word"
        if mode == "word":
            body = tokens[1:]
        return cls([UNK] + body, counts, mode)

    @classmethod
    def load(cls, path) -> "Vocab":
        try:
            return cls.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError) as exc:
            raise DataError(f"cannot read vocab {path}: {exc}") from exc


def build_vocab(text: str, mode: str = "char", max_size: int | None = None) -> Vocab:
    """Rank tokens by count (descending) then lexicographically.

    ``max_size`` bounds the total vocabulary including the unknown token;
    the truncated tail is folded into the unknown count.
    """
    if not text:
        raise DomainError("cannot build a vocabulary from empty text")
    if mode not in ("char", "word"):
        raise DomainError(f"vocab mode must be 'char' or 'word', got {mode!r}")
    counts = Counter(list(text) if mode == "char" else text.split())
    if not counts:
        raise DomainError("text contains no tokens")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_size is not None:
        if max_size < 2:
            raise DomainError(f"max_size must be >= 2, got {max_size}")
        kept, dropped = ranked[: max_size - 1], ranked[max_size - 1:]
    else:
        kept, dropped = ranked, []
    return Vocab([UNK] + [t for t, _ in kept],
                 [sum(n for _, n in dropped)] + [n for _, n in kept], mode)


def encode(vocab: Vocab, text: str) -> np.ndarray:
    return vocab.encode(text)


def decode(vocab: Vocab, ids) -> str:
    return vocab.decode(ids)


@dataclass
class Segment:
    inputs: np.ndarray   # [batch, l_seq]
    targets: np.ndarray  # [batch, l_seq]
    is_stream_start: np.ndarray  # [batch] bool


class SegmentStream:
    """Split a token stream into ``batch_size`` contiguous lanes read ``l_seq`` at a time.

    Segment ``k + 1`` of a lane starts where segment ``k`` ended, so
    carrying memory between consecutive segments is meaningful. Tokens
    that cannot fill a whole segment at a lane's end are dropped.
    """

    def __init__(self, tokens, batch_size: int, l_seq: int):
        self.tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if batch_size < 1 or l_seq < 1:
            raise DomainError("batch_size and l_seq must be positive")
        self.batch_size = batch_size
        self.l_seq = l_seq
        self.lane_len = len(self.tokens) // batch_size
        self.lanes = self.tokens[: self.lane_len * batch_size].reshape(batch_size, self.lane_len)
        self.n_segments = max(0, (self.lane_len - 1) // l_seq)
        self.cursor = 0

    def __len__(self) -> int:
        return self.n_segments

    def reset(self) -> None:
        self.cursor = 0

    def lane_span(self, lane: int) -> tuple[int, int]:
        start = lane * self.lane_len
        return start, start + self.lane_len

    def next_segment(self) -> Segment | None:
        """The next segment, or None once the stream is exhausted."""
        if self.cursor >= self.n_segments:
            return None
        p = self.cursor * self.l_seq
        seg = Segment(self.lanes[:, p:p + self.l_seq].copy(),
                      self.lanes[:, p + 1:p + self.l_seq + 1].copy(),
                      np.full(self.batch_size, self.cursor == 0))
        self.cursor += 1
        return seg

    def __iter__(self):
        while (seg := self.next_segment()) is not None:
            yield seg
