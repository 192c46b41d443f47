"""
Corpus ingestion, wordpiece vocabulary training, tokenization and dataset splitting.
"""

import hashlib
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
RESERVED_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
CONTINUATION = "##"
MAX_CHARS_PER_WORD = 100

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_ALNUM_RE = re.compile(r"[^\W_]+", re.UNICODE)


class CorpusFormatError(ValueError):
    """A corpus line could not be parsed into a message/reply record."""

    def __init__(self, message, line_number):
        super().__init__(message)
        self.line_number = line_number


@dataclass(frozen=True)
class MRPair:
    message: str
    reply: str

    def __post_init__(self):
        if not self.message.strip() or not self.reply.strip():
            raise ValueError("MRPair fields must be non-empty after trimming")


@dataclass
class LoadStats:
    loaded: int = 0
    skipped: int = 0


def load_corpus(path, stats: Optional[LoadStats] = None) -> Iterator[MRPair]:
    """
    Streams message/reply pairs from a JSON-lines file.

    Parameters:
    - path (str | Path): file with one {"message": ..., "reply": ...} record per line.
    - stats (LoadStats): optional counters, filled in as records are read.

    Returns:
    - Iterator[MRPair]: records in file order. Records with an empty field are skipped
      and counted; a malformed line raises CorpusFormatError naming the line.
    """
    stats = stats if stats is not None else LoadStats()
    path = Path(path)
    with path.open("r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                message, reply = record["message"], record["reply"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                logger.error(f"Malformed corpus record at {path}:{line_number}: {e}")
                raise CorpusFormatError(
                    f"Malformed corpus record at line {line_number}: {e}", line_number
                ) from e
            if not isinstance(message, str) or not isinstance(reply, str):
                raise CorpusFormatError(
                    f"Malformed corpus record at line {line_number}: fields must be text",
                    line_number,
                )
            if not message.strip() or not reply.strip():
                stats.skipped += 1
                continue
            stats.loaded += 1
            yield MRPair(message, reply)
    if stats.skipped:
        logger.warning(f"Skipped {stats.skipped} records with an empty field in {path}")
    logger.info(f"Loaded {stats.loaded} MR pairs from {path}")


def write_corpus(pairs: Iterable[MRPair], path) -> int:
    count = 0
    with Path(path).open("w", encoding="utf-8") as f:
        for pair in pairs:
            f.write(json.dumps({"message": pair.message, "reply": pair.reply}) + "\n")
            count += 1
    logger.info(f"Wrote {count} MR pairs to {path}")
    return count


def split_words(text: str) -> List[str]:
    """Lowercases and splits on whitespace, keeping punctuation marks as their own words."""
    return _WORD_RE.findall(text.lower())


def alnum_tokens(text: str) -> List[str]:
    """Lowercased runs of letters and digits; the word unit for metrics and n-gram filters."""
    return _ALNUM_RE.findall(text.lower())


def pairs_digest(pairs: Sequence[MRPair]) -> str:
    h = hashlib.sha256()
    for pair in pairs:
        h.update(pair.message.encode("utf-8"))
        h.update(b"\x1f")
        h.update(pair.reply.encode("utf-8"))
        h.update(b"\x1e")
    return h.hexdigest()[:16]


# ==========================================
# VOCABULARY
# ==========================================
@dataclass(frozen=True)
class Vocab:
    pieces: Tuple[str, ...]
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.pieces[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ValueError(f"Vocab must start with the reserved tokens {RESERVED_TOKENS}")
        if any(not p for p in self.pieces):
            raise ValueError("Vocab entries must be non-empty")
        index = {p: i for i, p in enumerate(self.pieces)}
        if len(index) != len(self.pieces):
            raise ValueError("Vocab entries must be unique")
        object.__setattr__(self, "_index", index)

    def __len__(self):
        return len(self.pieces)

    def __contains__(self, piece):
        return piece in self._index

    def id_of(self, piece: str) -> int:
        return self._index.get(piece, UNK_ID)

    @property
    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.pieces).encode("utf-8")).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.pieces) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        return cls(tuple(lines))


def _merge_symbols(symbols: List[str], a: str, b: str, merged: str) -> List[str]:
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(merged)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def train_vocab(corpus: Iterable[str], target_size: int = 2000) -> Vocab:
    """
    Learns a wordpiece-format vocabulary by iterative pair merging.

    Every character seen in the corpus enters the vocabulary in the form it was seen
    (word-initial, or "##"-prefixed continuation), then the most frequent adjacent pair
    is merged until ``target_size`` pieces exist or no pairs remain. Ties go to the
    lexicographically smallest pair.

    Parameters:
    - corpus (Iterable[str]): raw texts; lowercased before counting.
    - target_size (int): maximum vocabulary size including the 5 reserved tokens.

    Returns:
    - Vocab: the learned vocabulary.
    """
    if target_size < len(RESERVED_TOKENS) + 1:
        raise ValueError(
            f"target_size must be at least {len(RESERVED_TOKENS) + 1}, got {target_size}"
        )
    word_counts = Counter()
    for text in corpus:
        word_counts.update(split_words(text))
    if not word_counts:
        raise ValueError("Cannot train a vocabulary on an empty corpus")

    splits = {
        w: [w[0]] + [CONTINUATION + c for c in w[1:]]
        for w in word_counts
        if len(w) <= MAX_CHARS_PER_WORD
    }
    # every observed character, long words included, though only short words merge
    alphabet = sorted(
        {w[0] for w in word_counts} | {CONTINUATION + c for w in word_counts for c in w[1:]}
    )
    if len(RESERVED_TOKENS) + len(alphabet) > target_size:
        raise ValueError(
            f"target_size {target_size} cannot hold the {len(alphabet)} observed characters"
        )
    pieces = list(RESERVED_TOKENS) + alphabet
    known = set(pieces)

    while len(pieces) < target_size:
        pair_counts = Counter()
        for word, symbols in splits.items():
            count = word_counts[word]
            for a, b in zip(symbols, symbols[1:]):
                pair_counts[(a, b)] += count
        if not pair_counts:
            break
        (a, b), _ = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        merged = a + b[len(CONTINUATION):]
        for word, symbols in splits.items():
            if len(symbols) > 1:
                splits[word] = _merge_symbols(symbols, a, b, merged)
        if merged not in known:
            known.add(merged)
            pieces.append(merged)

    logger.info(
        f"Trained vocabulary of {len(pieces)} pieces from {len(word_counts)} word types"
    )
    return Vocab(tuple(pieces))


# ==========================================
# TOKENIZATION
# ==========================================
@dataclass(frozen=True)
class TokenSequence:
    ids: Tuple[int, ...]
    attention_mask: Tuple[bool, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.attention_mask):
            raise ValueError("ids and attention_mask must have the same length")

    @property
    def length(self) -> int:
        return sum(self.attention_mask)


def wordpiece_ids(vocab: Vocab, text: str) -> List[int]:
    """Greedy longest-match segmentation of ``text`` without special tokens or truncation."""
    ids = []
    for word in split_words(text):
        if len(word) > MAX_CHARS_PER_WORD:
            ids.append(UNK_ID)
            continue
        word_ids = []
        start = 0
        while start < len(word):
            end = len(word)
            match = None
            while start < end:
                candidate = word[start:end]
                if start > 0:
                    candidate = CONTINUATION + candidate
                if candidate in vocab:
                    match = candidate
                    break
                end -= 1
            if match is None:
                word_ids = [UNK_ID]
                break
            word_ids.append(vocab.id_of(match))
            start = end
        ids.extend(word_ids)
    return ids


def tokenize(vocab: Vocab, text: str, max_len: int = 32) -> TokenSequence:
    """
    Tokenizes one text into a padded [CLS] ... [SEP] sequence of exactly ``max_len`` ids.
    Truncation keeps the prefix.
    """
    if max_len < 3:
        raise ValueError(f"max_len must be at least 3, got {max_len}")
    body = wordpiece_ids(vocab, text)[: max_len - 2]
    ids = [CLS_ID] + body + [SEP_ID]
    pad = max_len - len(ids)
    return TokenSequence(
        ids=tuple(ids + [PAD_ID] * pad),
        attention_mask=tuple([True] * len(ids) + [False] * pad),
    )


@dataclass(frozen=True)
class TokenBatch:
    ids: torch.Tensor  # (B, T) int64
    mask: torch.Tensor  # (B, T) bool

    def __len__(self):
        return self.ids.shape[0]

    def select(self, index) -> "TokenBatch":
        return TokenBatch(self.ids[index], self.mask[index])


def to_batch(sequences: Sequence[TokenSequence], trim: bool = True) -> TokenBatch:
    """Stacks sequences; with ``trim`` the all-padding tail columns are dropped."""
    ids = torch.tensor([s.ids for s in sequences], dtype=torch.long)
    mask = torch.tensor([s.attention_mask for s in sequences], dtype=torch.bool)
    if trim and len(sequences):
        width = int(mask.sum(dim=1).max())
        ids, mask = ids[:, :width], mask[:, :width]
    return TokenBatch(ids, mask)


def encode_texts(
    vocab: Vocab, texts: Sequence[str], max_len: int = 32, trim: bool = True
) -> TokenBatch:
    return to_batch([tokenize(vocab, t, max_len) for t in texts], trim=trim)


# ==========================================
# SPLITTING
# ==========================================
@dataclass(frozen=True)
class DatasetSplit:
    train: List[MRPair]
    validation: List[MRPair]
    test: List[MRPair]
    seed: int
    sample_fraction: float

    @property
    def test_hash(self) -> str:
        return pairs_digest(self.test)


def split_dataset(
    corpus: Sequence[MRPair],
    val_count: int,
    test_count: int,
    sample_fraction: float = 1.0,
    seed: int = 0,
) -> DatasetSplit:
    """
    Carves validation and test sets first, then samples the training set.

    A single seeded permutation drives everything: validation and test come from its
    head, the training set is a prefix of the remainder, so every fraction shares the
    same evaluation sets and smaller fractions are subsets of larger ones.
    """
    n = len(corpus)
    if val_count < 0 or test_count < 0:
        raise ValueError("val_count and test_count must be non-negative")
    if val_count + test_count >= n:
        raise ValueError(
            f"val_count + test_count ({val_count + test_count}) must be smaller than the corpus ({n})"
        )
    if not 0 < sample_fraction <= 1:
        raise ValueError(f"sample_fraction must be in (0, 1], got {sample_fraction}")

    order = np.random.default_rng(seed).permutation(n)
    val_idx = order[:val_count]
    test_idx = order[val_count : val_count + test_count]
    rest = order[val_count + test_count :]
    # at least one training pair; the remainder is never empty here
    train_idx = rest[: max(1, int(round(sample_fraction * len(rest))))]

    split = DatasetSplit(
        train=[corpus[i] for i in train_idx],
        validation=[corpus[i] for i in val_idx],
        test=[corpus[i] for i in test_idx],
        seed=seed,
        sample_fraction=sample_fraction,
    )
    logger.info(
        f"Split {n} pairs: train {len(split.train)} (fraction {sample_fraction}), "
        f"validation {len(split.validation)}, test {len(split.test)}"
    )
    return split
