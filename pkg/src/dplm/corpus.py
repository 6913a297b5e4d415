"""Corpus ingestion: shared vocabulary, sentence encoding, context windows.

Text corpora are UTF-8 plain text, one sentence per line. Tokenization is
whitespace splitting after lowercasing. The vocabulary is shared between the
public and the private corpus and is fixed before any training starts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
BOS_TOKEN = "<s>"
EOS_TOKEN = "</s>"

SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN)


class CorpusError(ValueError):
    """Raised for malformed corpora or invalid corpus parameters."""


@dataclass
class Vocabulary:
    """Bidirectional token <-> id map with reserved special ids 0-3."""

    tokens: tuple[str, ...]
    _ids: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise CorpusError(f"vocabulary must start with {SPECIAL_TOKENS}")
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise CorpusError("vocabulary contains duplicate tokens")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def token_id(self, token: str) -> int:
        """Id of `token`, or UNK_ID if out of vocabulary."""
        return self._ids.get(token, UNK_ID)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def token_string(self, token_id: int) -> str:
        return self.tokens[token_id]

    def save(self, path: str | Path) -> None:
        """One token per line; the line number is the id, specials first."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            tokens = tuple(line.rstrip("\n") for line in fh)
        return cls(tokens)


def tokenize(line: str) -> list[str]:
    """Lowercase and split on whitespace."""
    return line.lower().split()


def read_lines(path: str | Path) -> Iterator[str]:
    """Yield lines of a UTF-8 text file; decode failures report the position."""
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                yield raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise IOError(f"{path}: line {lineno}: not valid UTF-8 ({exc})") from exc


def build_vocabulary(
    public_lines: Iterable[str],
    private_lines: Iterable[str],
    min_count: int = 2,
) -> Vocabulary:
    """Build the shared vocabulary over both corpora combined.

    Keeps every token occurring at least `min_count` times across the two
    corpora, ordered by descending count with lexicographic tie-break, after
    the four reserved specials.
    """
    if min_count < 1:
        raise CorpusError("min_count must be a positive integer")
    counts: dict[str, int] = {}
    total = 0
    for lines in (public_lines, private_lines):
        for line in lines:
            for tok in tokenize(line):
                counts[tok] = counts.get(tok, 0) + 1
                total += 1
    if total == 0:
        raise CorpusError("empty corpus")
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_count),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary(SPECIAL_TOKENS + tuple(kept))


def encode(line: str, vocab: Vocabulary) -> list[int]:
    """Token ids of `line` with OOV mapped to UNK and EOS appended."""
    return [vocab.token_id(tok) for tok in tokenize(line)] + [EOS_ID]


def decode(token_ids: Sequence[int], vocab: Vocabulary) -> str:
    """Whitespace-joined surface strings of `token_ids`."""
    return " ".join(vocab.token_string(i) for i in token_ids)


def encode_corpus(lines: Iterable[str], vocab: Vocabulary) -> list[list[int]]:
    return [encode(line, vocab) for line in lines]


@dataclass
class ContextWindowDataset:
    """Fixed-length context windows with next-token targets.

    `contexts` has shape (N, k); positions before the sentence start are PAD.
    `sentence_offsets` (length S+1) gives the window range of each sentence,
    so splits can keep all windows of a sentence together.
    """

    contexts: np.ndarray
    targets: np.ndarray
    sentence_offsets: np.ndarray

    @property
    def n(self) -> int:
        return int(self.targets.shape[0])

    @property
    def context_len(self) -> int:
        return int(self.contexts.shape[1])

    @property
    def sentence_count(self) -> int:
        return int(self.sentence_offsets.shape[0]) - 1


def windows(sentences: Sequence[Sequence[int]], k: int = 20) -> ContextWindowDataset:
    """One example per token position: k most recent prior ids -> next id."""
    if k < 1:
        raise CorpusError("context length must be positive")
    total = sum(len(s) for s in sentences)
    contexts = np.full((total, k), PAD_ID, dtype=np.int64)
    targets = np.empty(total, dtype=np.int64)
    offsets = np.empty(len(sentences) + 1, dtype=np.int64)
    offsets[0] = 0
    row = 0
    for s, ids in enumerate(sentences):
        for pos, target in enumerate(ids):
            lo = max(0, pos - k)
            ctx = ids[lo:pos]
            if ctx:
                contexts[row, k - len(ctx):] = ctx
            targets[row] = target
            row += 1
        offsets[s + 1] = row
    return ContextWindowDataset(contexts, targets, offsets)


def _take_sentences(dataset: ContextWindowDataset, order: np.ndarray) -> ContextWindowDataset:
    """Dataset restricted to the sentences in `order`, in that order."""
    spans = [
        (int(dataset.sentence_offsets[s]), int(dataset.sentence_offsets[s + 1]))
        for s in order
    ]
    parts_ctx = [dataset.contexts[a:b] for a, b in spans]
    parts_tgt = [dataset.targets[a:b] for a, b in spans]
    k = dataset.context_len
    contexts = (
        np.concatenate(parts_ctx) if parts_ctx else np.empty((0, k), dtype=np.int64)
    )
    targets = np.concatenate(parts_tgt) if parts_tgt else np.empty(0, dtype=np.int64)
    offsets = np.zeros(len(spans) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([b - a for a, b in spans])
    return ContextWindowDataset(contexts, targets, offsets)


def split(
    dataset: ContextWindowDataset,
    fractions: tuple[float, float, float],
    seed: int,
) -> tuple[ContextWindowDataset, ContextWindowDataset, ContextWindowDataset]:
    """Partition into train/dev/test at sentence granularity.

    Sentence counts for dev and test are floored; the remainder goes to
    train. Deterministic for a given seed.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise CorpusError("fractions must be three nonnegative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise CorpusError("fractions must sum to 1")
    n_sent = dataset.sentence_count
    n_dev = int(n_sent * fractions[1])
    n_test = int(n_sent * fractions[2])
    n_train = n_sent - n_dev - n_test
    order = np.random.default_rng(seed).permutation(n_sent)
    train = _take_sentences(dataset, order[:n_train])
    dev = _take_sentences(dataset, order[n_train:n_train + n_dev])
    test = _take_sentences(dataset, order[n_train + n_dev:])
    return train, dev, test


def load_windows(path: str | Path, vocab: Vocabulary, k: int = 20) -> ContextWindowDataset:
    """Read a corpus file and materialize its context-window dataset."""
    return windows(encode_corpus(read_lines(path), vocab), k)
