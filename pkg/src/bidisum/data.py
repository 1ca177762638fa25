"""Vocabulary, corpus loading, synthetic tasks and padded batches.

Corpus files hold one pair per line, ``source<TAB>target``, whitespace
tokenised and lowercased on the way in.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import NUM_SPECIAL, PAD, SPECIAL_TOKENS, UNK

log = logging.getLogger(__name__)

TASKS = ("copy", "reverse", "anchor")


class DataError(ValueError):
    pass


class Vocab:
    """Token <-> id map with ids 0..3 reserved for PAD, UNK, START, STOP."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise DataError("vocabulary must start with the reserved tokens " + " ".join(SPECIAL_TOKENS))
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def lookup(self, token: str) -> int:
        return self.index.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.lookup(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(corpus, max_size: int) -> Vocab:
    """Keep the ``max_size - 4`` most frequent tokens; ties go to the smaller token.

    ``corpus`` is a token -> count mapping or an iterable of token sequences.
    """
    if max_size <= NUM_SPECIAL:
        raise ValueError(f"max_size must exceed {NUM_SPECIAL}")
    if isinstance(corpus, Mapping):
        counts = Counter(corpus)
    else:
        counts = Counter()
        for seq in corpus:
            counts.update(seq)
    for tok in SPECIAL_TOKENS:
        counts.pop(tok, None)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(list(SPECIAL_TOKENS) + [t for t, _ in ranked[: max_size - NUM_SPECIAL]])


def synthetic_vocab(vocab_size: int) -> Vocab:
    """Identity vocabulary for generated data: token ``w<i>`` has id ``i``."""
    return Vocab(list(SPECIAL_TOKENS) + [f"w{i}" for i in range(NUM_SPECIAL, vocab_size)])


def tokenize(line: str) -> list[str]:
    return line.lower().split()


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


@dataclass
class Example:
    source: list[int]
    target: list[int]


@dataclass
class LoadStats:
    loaded: int = 0
    malformed: int = 0
    empty: int = 0
    truncated_source: int = 0
    truncated_target: int = 0


def read_pairs(path, max_source_len: int = 400, max_target_len: int = 100):
    """Tokenised ``(source, target)`` string pairs plus a :class:`LoadStats`."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    stats = LoadStats()
    pairs = []
    for line in text.splitlines():
        if not line.strip():
            continue
        if "\t" not in line:
            stats.malformed += 1
            continue
        src_text, tgt_text = line.split("\t", 1)
        src, tgt = tokenize(src_text), tokenize(tgt_text)
        if not src or not tgt:
            stats.empty += 1
            continue
        if len(src) > max_source_len:
            stats.truncated_source += 1
            src = src[:max_source_len]
        if len(tgt) > max_target_len:
            stats.truncated_target += 1
            tgt = tgt[:max_target_len]
        pairs.append((src, tgt))
    stats.loaded = len(pairs)
    if stats.malformed or stats.empty:
        log.warning("%s: skipped %d malformed and %d empty-side lines",
                    path, stats.malformed, stats.empty)
    return pairs, stats


def load_pairs(path, vocab: Vocab, max_source_len: int = 400, max_target_len: int = 100):
    """Read a corpus file into id-level examples; returns ``(examples, stats)``."""
    pairs, stats = read_pairs(path, max_source_len, max_target_len)
    return [Example(vocab.encode(s), vocab.encode(t)) for s, t in pairs], stats


def write_pairs(path, examples: Iterable[Example], vocab: Vocab) -> None:
    lines = [f"{detokenize(vocab.decode(e.source))}\t{detokenize(vocab.decode(e.target))}"
             for e in examples]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def anchor_target(source: Sequence[int], vocab_size: int) -> list[int]:
    usable = vocab_size - NUM_SPECIAL
    check = NUM_SPECIAL + sum(source) % usable
    return [check] + list(source[: math.ceil(len(source) / 2)]) + [check]


def gen_synthetic(task: str, n: int, len_range: tuple[int, int], vocab_size: int,
                  seed: int) -> list[Example]:
    """Random sources over the non-reserved ids with task-specific targets.

    ``anchor`` puts a checksum token (sum of source ids modulo the usable
    vocabulary) at both ends of the first half of the source, so each end of
    the target depends on the whole input.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {', '.join(TASKS)}")
    if vocab_size <= NUM_SPECIAL:
        raise ValueError(f"vocab_size must exceed {NUM_SPECIAL}")
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad length range {len_range}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        src = rng.integers(NUM_SPECIAL, vocab_size, size=length).tolist()
        if task == "copy":
            tgt = list(src)
        elif task == "reverse":
            tgt = src[::-1]
        else:
            tgt = anchor_target(src, vocab_size)
        out.append(Example(src, tgt))
    return out


@dataclass
class Batch:
    src: np.ndarray  # [B, Tx] right-padded with PAD
    src_lengths: np.ndarray
    tgt: np.ndarray  # [B, Ty]
    tgt_lengths: np.ndarray
    tgt_mask: np.ndarray  # [B, Ty], 1.0 on real tokens
    examples: list[Example] = field(repr=False)

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def targets(self) -> list[list[int]]:
        return [e.target for e in self.examples]


def _pad(rows: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    out = np.full((len(rows), int(lengths.max())), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out, lengths


def collate(examples: Sequence[Example], max_source_len: int | None = None,
            max_target_len: int | None = None) -> Batch:
    exs = [Example(e.source[:max_source_len] if max_source_len else list(e.source),
                   e.target[:max_target_len] if max_target_len else list(e.target))
           for e in examples]
    if any(not e.source or not e.target for e in exs):
        raise DataError("examples need non-empty source and target")
    src, src_len = _pad([e.source for e in exs])
    tgt, tgt_len = _pad([e.target for e in exs])
    mask = (np.arange(tgt.shape[1])[None, :] < tgt_len[:, None]).astype(np.float64)
    return Batch(src, src_len, tgt, tgt_len, mask, exs)


def make_batches(examples: Sequence[Example], batch_size: int, seed: int | None = 0,
                 max_source_len: int | None = None,
                 max_target_len: int | None = None) -> list[Batch]:
    """One epoch of padded batches; ``seed=None`` keeps the input order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(examples))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(examples))
    return [collate([examples[i] for i in order[k:k + batch_size]], max_source_len, max_target_len)
            for k in range(0, len(examples), batch_size)]
