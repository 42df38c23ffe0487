"""Token vocabulary with a min-count/UNK policy, plus digit n-gram subword
units hashed into a fixed number of buckets.

Subword units follow the usual subword-skipgram convention: the token is
wrapped in boundary markers (``<`` and ``>``) and all character n-grams of
length n_min..n_max are extracted. The markers matter for digit tokens --
divisibility by 4, say, is a property of the *last* two digits, which only
the marked n-grams can pin down. The minus sign of negative tokens is an
ordinary character inside the marked string.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import IO, Iterable

from .corpus import SequenceRecord

UNK = "UNK"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class SubwordConfig:
    """Digit n-gram extraction and hashing parameters."""

    n_min: int = 3
    n_max: int = 6
    bucket_count: int = 2**21  # 2**18 is plenty at desk scale

    def __post_init__(self):
        if not (1 <= self.n_min <= self.n_max):
            raise ValueError(f"need 1 <= n_min <= n_max, got {self.n_min}..{self.n_max}")
        if self.bucket_count < 1:
            raise ValueError("bucket_count must be >= 1")


def token_ngrams(token: str, config: SubwordConfig) -> list[str]:
    """Character n-grams of the boundary-marked token, shortest first.

    Duplicates are retained; the whole-token unit is *not* included here
    (it lives in the vocabulary, not the bucket space).
    """
    marked = f"<{token}>"
    grams = []
    for n in range(config.n_min, config.n_max + 1):
        for i in range(len(marked) - n + 1):
            grams.append(marked[i : i + n])
    return grams


def subword_units(token: str, config: SubwordConfig) -> list[int]:
    """Hashed bucket ids for the token's n-grams (multiset, order stable).

    Together with the whole-token vector these are the units whose vectors
    get averaged by subword-aware lookups and training.
    """
    return [
        fnv1a_64(gram.encode("utf-8")) % config.bucket_count
        for gram in token_ngrams(token, config)
    ]


class Vocabulary:
    """Frequency-filtered token <-> id maps with a reserved UNK id.

    Ids are assigned by descending frequency, ties broken by numeric value
    ascending (then lexicographically, which never fires for canonical
    integer tokens). UNK always holds id 0 and absorbs the count mass of
    all dropped tokens.
    """

    def __init__(self, counts: dict[str, int], min_count: int = 3):
        if min_count < 1:
            raise ValueError("min_count must be >= 1")
        self.min_count = min_count
        kept = {t: c for t, c in counts.items() if c >= min_count and t != UNK}
        dropped_mass = sum(c for t, c in counts.items() if c < min_count or t == UNK)
        order = sorted(kept, key=lambda t: (-kept[t], int(t), t))
        self.id_to_token: list[str] = [UNK] + order
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        self.counts: list[int] = [dropped_mass] + [kept[t] for t in order]
        self.unk_id = 0

    def __len__(self) -> int:
        return len(self.id_to_token)

    def contains(self, token: str) -> bool:
        return token != UNK and token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)

    def token_of(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    @property
    def tokens(self) -> list[str]:
        return self.id_to_token

    def save(self, sink: IO[str]) -> None:
        """Write ``#vocab v1`` header plus one ``<token>\\t<count>`` line per id."""
        sink.write(f"#vocab v1 min_count={self.min_count}\n")
        for token, count in zip(self.id_to_token, self.counts):
            sink.write(f"{token}\t{count}\n")

    @classmethod
    def load(cls, source: Iterable[str]) -> "Vocabulary":
        lines = iter(source)
        header = next(lines, "").strip()
        if not header.startswith("#vocab v1"):
            raise ValueError(f"bad vocabulary header: {header!r}")
        min_count = int(header.split("min_count=")[1])
        vocab = cls.__new__(cls)
        vocab.min_count = min_count
        vocab.id_to_token = []
        vocab.counts = []
        for lineno, line in enumerate(lines, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            token, _, count = line.partition("\t")
            if not count:
                raise ValueError(f"vocabulary line {lineno}: expected '<token>\\t<count>'")
            vocab.id_to_token.append(token)
            vocab.counts.append(int(count))
        if not vocab.id_to_token or vocab.id_to_token[0] != UNK:
            raise ValueError("vocabulary must start with UNK")
        vocab.token_to_id = {t: i for i, t in enumerate(vocab.id_to_token)}
        vocab.unk_id = 0
        return vocab


def build_vocab(train: Iterable[SequenceRecord], min_count: int = 3) -> Vocabulary:
    """Count tokens over the training records and apply the min-count filter."""
    counts: Counter[str] = Counter()
    for rec in train:
        counts.update(rec.terms)
    if not counts:
        raise ValueError("empty corpus")
    return Vocabulary(dict(counts), min_count=min_count)


def encode(record: SequenceRecord, vocab: Vocabulary) -> list[int]:
    """Map terms to ids; out-of-vocabulary terms map to unk_id."""
    return [vocab.id_of(t) for t in record.terms]


def decode(ids: Iterable[int], vocab: Vocabulary) -> list[str]:
    return [vocab.token_of(i) for i in ids]
