"""
Fixed candidate response set: frequency thresholding, n-gram blocklist filtering,
LM scoring from normalized log frequency, and the precomputed response encoding cache.
"""

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import FrozenSet, Iterable, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from .container import ContainerError, read_container, write_container
from .corpus import alnum_tokens, wordpiece_ids

logger = logging.getLogger(__name__)

MAX_NGRAM = 3


class StaleCacheError(RuntimeError):
    """A response encoding cache does not belong to the model or set it is used with."""


def normalize_reply(text: str) -> str:
    return " ".join(text.lower().split())


@dataclass(frozen=True)
class Blocklist:
    ngrams: FrozenSet[Tuple[str, ...]] = frozenset()

    def __post_init__(self):
        for gram in self.ngrams:
            if not 1 <= len(gram) <= MAX_NGRAM or not all(gram):
                raise ValueError(f"Blocklist n-grams must have 1..{MAX_NGRAM} tokens: {gram}")

    @classmethod
    def from_phrases(cls, phrases: Iterable[str]) -> "Blocklist":
        grams = set()
        for phrase in phrases:
            tokens = tuple(alnum_tokens(phrase))
            if not tokens:
                continue
            if len(tokens) > MAX_NGRAM:
                raise ValueError(f"Blocklist entry '{phrase}' is longer than {MAX_NGRAM} tokens")
            grams.add(tokens)
        return cls(frozenset(grams))

    @classmethod
    def load(cls, path) -> "Blocklist":
        """One n-gram per line; blank lines and ``#`` comments are ignored."""
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls.from_phrases(l for l in lines if l.strip() and not l.lstrip().startswith("#"))

    def blocks(self, text: str) -> bool:
        if not self.ngrams:
            return False
        tokens = alnum_tokens(text)
        for n in range(1, MAX_NGRAM + 1):
            for i in range(len(tokens) - n + 1):
                if tuple(tokens[i : i + n]) in self.ngrams:
                    return True
        return False

    @property
    def digest(self) -> str:
        joined = "\n".join(sorted(" ".join(g) for g in self.ngrams))
        return hashlib.sha256(joined.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class ResponseEntry:
    text: str
    frequency: int
    lm_score: float


@dataclass(frozen=True)
class Provenance:
    corpus_hash: str
    min_freq: int
    blocklist_hash: str


@dataclass(frozen=True)
class ResponseCache:
    encodings: torch.Tensor  # (entries, H)
    fingerprint: str
    set_digest: str


@dataclass(frozen=True)
class ResponseSet:
    entries: Tuple[ResponseEntry, ...]
    provenance: Provenance
    cache: Optional[ResponseCache] = field(default=None, compare=False)

    def __len__(self):
        return len(self.entries)

    @property
    def texts(self) -> Tuple[str, ...]:
        return tuple(e.text for e in self.entries)

    @property
    def lm_scores(self) -> Tuple[float, ...]:
        return tuple(e.lm_score for e in self.entries)

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(f"{e.text}\t{e.frequency}\n".encode("utf-8"))
        return h.hexdigest()[:16]

    def with_cache(self, cache: Optional[ResponseCache]) -> "ResponseSet":
        if cache is not None and cache.encodings.shape[0] != len(self):
            raise ValueError(
                f"Cache has {cache.encodings.shape[0]} rows for {len(self)} entries"
            )
        return replace(self, cache=cache)


def default_min_freq(num_replies: int, rate: float = 1e-4) -> int:
    """Corpus-relative threshold: a reply must make up at least ``rate`` of all replies."""
    return max(1, math.ceil(rate * num_replies))


def build_response_set(
    replies: Iterable[str], min_freq: int, blocklist: Optional[Blocklist] = None
) -> ResponseSet:
    """
    Builds the candidate set from corpus replies.

    Parameters:
    - replies (Iterable[str]): reply texts, normalized (lowercase, collapsed whitespace)
      before counting.
    - min_freq (int): minimum count to keep a reply.
    - blocklist (Blocklist): replies containing any listed n-gram are dropped.

    Returns:
    - ResponseSet: entries ordered by frequency descending, then text; lm_score is
      log(freq) / log(max_freq), or 1.0 for every entry when frequencies are all equal.
    """
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    blocklist = blocklist or Blocklist()

    corpus_hash = hashlib.sha256()
    normalized = []
    for reply in replies:
        text = normalize_reply(reply)
        corpus_hash.update(text.encode("utf-8") + b"\n")
        if text:
            normalized.append(text)

    counts = pd.Series(normalized, dtype=object).value_counts()
    frame = counts.rename_axis("text").reset_index(name="frequency")
    frame = frame[frame["frequency"] >= min_freq]
    frame = frame[~frame["text"].map(blocklist.blocks).astype(bool)]
    if frame.empty:
        logger.error(
            f"No reply out of {len(normalized)} meets min_freq={min_freq} and the blocklist"
        )
        raise ValueError("Response set is empty after thresholding and filtering")

    frame = frame.sort_values(["frequency", "text"], ascending=[False, True], kind="mergesort")
    freqs = frame["frequency"].to_numpy(dtype=np.int64)
    if freqs.min() == freqs.max():
        lm = np.ones(len(freqs))
    else:
        lm = np.log(freqs) / np.log(freqs.max())

    entries = tuple(
        ResponseEntry(text=t, frequency=int(f), lm_score=float(s))
        for t, f, s in zip(frame["text"], freqs, lm)
    )
    logger.info(
        f"Response set: {len(entries)} entries from {len(counts)} distinct replies "
        f"(min_freq={min_freq}, {len(blocklist.ngrams)} blocked n-grams)"
    )
    return ResponseSet(
        entries=entries,
        provenance=Provenance(corpus_hash.hexdigest()[:16], min_freq, blocklist.digest),
    )


# ==========================================
# ENCODING CACHE
# ==========================================
def _encode_shard(model, texts):
    return model.encode_responses(list(texts))


def encode_response_set(
    model, response_set: ResponseSet, *, shard_size: int = 256, max_workers: int = 4
) -> ResponseSet:
    """
    Precomputes response-encoder CLS vectors for every entry.

    Shards are encoded concurrently and joined in entry order; the cache records the
    model fingerprint so a later model cannot silently reuse it.
    """
    if not len(response_set):
        raise ValueError("Cannot encode an empty response set")
    limit = model.max_response_len
    for i, entry in enumerate(response_set.entries):
        needed = len(wordpiece_ids(model.vocab, entry.text)) + 2
        if needed > limit:
            raise ValueError(
                f"Response entry {i} ('{entry.text}') needs {needed} positions, "
                f"more than the {limit} the response encoder accepts"
            )

    texts = response_set.texts
    shards = [texts[i : i + shard_size] for i in range(0, len(texts), shard_size)]
    results = [None] * len(shards)
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_shard = {
            executor.submit(_encode_shard, model, shard): idx
            for idx, shard in enumerate(shards)
        }
        for future in as_completed(future_to_shard):
            idx = future_to_shard[future]
            try:
                results[idx] = future.result()
            except Exception as e:
                logger.error(f"Error encoding response shard {idx}: {e}")
                raise RuntimeError(f"Encoding response shard {idx} failed: {e}") from e

    encodings = torch.cat(results, dim=0)
    logger.info(f"Encoded {len(texts)} responses in {len(shards)} shards")
    return response_set.with_cache(
        ResponseCache(encodings, model.fingerprint(), response_set.digest)
    )


def check_cache(model, response_set: ResponseSet) -> ResponseCache:
    cache = response_set.cache
    if cache is None:
        raise StaleCacheError("Response set has no encoding cache; run encode_response_set")
    if cache.set_digest != response_set.digest:
        raise StaleCacheError("Response cache was built for a different response set")
    if cache.fingerprint != model.fingerprint():
        raise StaleCacheError(
            f"Response cache belongs to checkpoint {cache.fingerprint}, "
            f"model is {model.fingerprint()}"
        )
    return cache


# ==========================================
# PERSISTENCE
# ==========================================
def save_response_set(response_set: ResponseSet, path) -> None:
    payload = {
        "provenance": asdict(response_set.provenance),
        "entries": [asdict(e) for e in response_set.entries],
    }
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")
    logger.info(f"Saved {len(response_set)} responses to {path}")


def load_response_set(path) -> ResponseSet:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        entries = tuple(ResponseEntry(**e) for e in payload["entries"])
        provenance = Provenance(**payload["provenance"])
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        logger.error(f"Cannot parse response set {path}: {e}")
        raise ValueError(f"Malformed response set file {path}: {e}") from e
    return ResponseSet(entries=entries, provenance=provenance)


def save_response_cache(response_set: ResponseSet, path) -> None:
    cache = response_set.cache
    if cache is None:
        raise ValueError("Response set has no cache to save")
    header = {
        "fingerprint": cache.fingerprint,
        "set_digest": cache.set_digest,
        "provenance": asdict(response_set.provenance),
    }
    write_container(path, "response-cache", header, {"encodings": cache.encodings})


def load_response_cache(response_set: ResponseSet, path) -> ResponseSet:
    try:
        header, tensors = read_container(path, "response-cache")
    except ContainerError as e:
        logger.error(f"Cannot read response cache {path}: {e}")
        raise
    if header["set_digest"] != response_set.digest:
        raise StaleCacheError(f"Cache {path} was built for a different response set")
    cache = ResponseCache(tensors["encodings"], header["fingerprint"], header["set_digest"])
    return response_set.with_cache(cache)
