"""Integer-sequence corpus ingestion: the OEIS "stripped" dump format,
reproducible train/dev/test splits, and corpus statistics.

Terms are kept as canonical signed decimal strings throughout; OEIS terms
routinely exceed 64 bits, and nothing downstream needs machine integers
except the probing oracles (which only ever look at small values).
"""

from __future__ import annotations

import gzip
import random
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, TYPE_CHECKING

if TYPE_CHECKING:
    from .vocab import Vocabulary

_ID_RE = re.compile(r"^A[0-9]{6}$")
# Canonical form: no leading zeros, no "-0".
_CANONICAL_RE = re.compile(r"^(0|-?[1-9][0-9]*)$")
_INTEGER_RE = re.compile(r"^-?[0-9]+$")

MIN_SPLIT_RECORDS = 20


class StrippedParseError(ValueError):
    """Malformed line in a stripped-format dump; carries the 1-based line number."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


def canonical_token(text: str) -> str:
    """Normalize an integer literal to its canonical decimal string.

    Raises ValueError for anything that is not an optionally-signed run
    of digits.
    """
    if _CANONICAL_RE.match(text):
        return text
    if _INTEGER_RE.match(text):
        return str(int(text))  # strips leading zeros and "-0"
    raise ValueError(f"not an integer token: {text!r}")


def is_canonical_token(text: str) -> bool:
    return bool(_CANONICAL_RE.match(text))


@dataclass(frozen=True)
class SequenceRecord:
    """One integer sequence: its A-number and ordered terms."""

    id: str
    terms: tuple[str, ...]

    def __post_init__(self):
        if not _ID_RE.match(self.id):
            raise ValueError(f"bad sequence id: {self.id!r}")
        if not self.terms:
            raise ValueError(f"{self.id}: empty term list")
        for t in self.terms:
            if not _CANONICAL_RE.match(t):
                raise ValueError(f"{self.id}: non-canonical term {t!r}")


def parse_stripped(source: Iterable[str]) -> list[SequenceRecord]:
    """Parse a stripped-format line stream into sequence records.

    Data lines look like ``A000040 ,2,3,5,7,`` (comma-delimited terms with
    leading and trailing commas); lines starting with ``#`` are comments.
    File order is preserved. Raises StrippedParseError on malformed lines.
    """
    records = []
    for lineno, raw in enumerate(source, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(None, 1)
        if not _ID_RE.match(parts[0]):
            raise StrippedParseError(f"no A-number: {line[:40]!r}", lineno)
        if len(parts) < 2:
            raise StrippedParseError(f"{parts[0]}: missing term list", lineno)
        body = parts[1].strip()
        terms = [t for t in body.split(",") if t.strip()]
        if not terms:
            raise StrippedParseError(f"{parts[0]}: empty term list", lineno)
        try:
            canon = tuple(canonical_token(t.strip()) for t in terms)
        except ValueError as exc:
            raise StrippedParseError(f"{parts[0]}: {exc}", lineno) from exc
        records.append(SequenceRecord(id=parts[0], terms=canon))
    return records


def read_stripped(path: str | Path) -> list[SequenceRecord]:
    """Read a stripped dump from disk; gzip-compressed input is accepted."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt", encoding="utf-8") as fh:
        return parse_stripped(fh)


def to_stripped_line(record: SequenceRecord) -> str:
    return f"{record.id} ,{','.join(record.terms)},"


def write_stripped(records: Iterable[SequenceRecord], sink: IO[str]) -> None:
    for rec in records:
        sink.write(to_stripped_line(rec) + "\n")


@dataclass
class CorpusSplit:
    """90/5/5 partition of a corpus, reproducible from the shuffle seed."""

    train: list[SequenceRecord]
    dev: list[SequenceRecord]
    test: list[SequenceRecord]
    seed: int

    def parts(self) -> dict[str, list[SequenceRecord]]:
        return {"train": self.train, "dev": self.dev, "test": self.test}


def split_corpus(records: list[SequenceRecord], seed: int) -> CorpusSplit:
    """Partition records 90/5/5 by a seeded uniform shuffle of their ids.

    Dev and test each get floor(0.05 * N) records, the remainder goes to
    train. Shuffling ids (after sorting) rather than input positions makes
    the split insensitive to comment lines and record order in the dump.
    """
    if len(records) < MIN_SPLIT_RECORDS:
        raise ValueError(
            f"need at least {MIN_SPLIT_RECORDS} records to split, got {len(records)}"
        )
    ids = sorted(rec.id for rec in records)
    if len(set(ids)) != len(ids):
        dupes = [i for i, c in Counter(ids).items() if c > 1]
        raise ValueError(f"duplicate sequence ids: {dupes[:5]}")
    rng = random.Random(seed)
    rng.shuffle(ids)
    n_eval = len(records) // 20  # floor(0.05 * N)
    dev_ids = set(ids[:n_eval])
    test_ids = set(ids[n_eval : 2 * n_eval])
    split = CorpusSplit(train=[], dev=[], test=[], seed=seed)
    for rec in records:  # keep input order within each part
        if rec.id in dev_ids:
            split.dev.append(rec)
        elif rec.id in test_ids:
            split.test.append(rec)
        else:
            split.train.append(rec)
    return split


def write_manifest(split: CorpusSplit, sink: IO[str]) -> None:
    """One ``<id>\\t<split-name>`` line per sequence, in input order."""
    names = [("train", split.train), ("dev", split.dev), ("test", split.test)]
    by_id = {}
    for name, part in names:
        for rec in part:
            by_id[rec.id] = name
    for rec_id in sorted(by_id):
        sink.write(f"{rec_id}\t{by_id[rec_id]}\n")


def read_manifest(source: Iterable[str]) -> dict[str, str]:
    assignment = {}
    for lineno, line in enumerate(source, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 2 or fields[1] not in ("train", "dev", "test"):
            raise ValueError(f"manifest line {lineno}: expected '<id>\\t<split>'")
        assignment[fields[0]] = fields[1]
    return assignment


def apply_manifest(
    records: list[SequenceRecord], assignment: dict[str, str], seed: int = -1
) -> CorpusSplit:
    """Rebuild a split from a pinned manifest. Records missing from the
    manifest are an error; manifest entries absent from the corpus are
    ignored (snapshots shrink occasionally)."""
    split = CorpusSplit(train=[], dev=[], test=[], seed=seed)
    for rec in records:
        name = assignment.get(rec.id)
        if name is None:
            raise ValueError(f"{rec.id} not covered by manifest")
        getattr(split, name).append(rec)
    return split


@dataclass
class CorpusStats:
    """Summary statistics for one split part."""

    sequence_count: int
    token_count: int
    mean_sequence_length: float
    type_count: int
    singleton_type_count: int
    oov_rate: float | None = None

    def as_record(self) -> dict:
        return {
            "sequences": self.sequence_count,
            "tokens": self.token_count,
            "mean_length": self.mean_sequence_length,
            "types": self.type_count,
            "singleton_types": self.singleton_type_count,
            "oov_rate": self.oov_rate,
        }


def compute_stats(
    records: list[SequenceRecord], vocab: "Vocabulary | None" = None
) -> CorpusStats:
    """Token/type statistics for one split part.

    Type counts are over raw distinct tokens, with no minimum-count
    filtering. When a vocabulary is given, oov_rate is the fraction of
    tokens it does not retain (UNK never counts as coverage).
    """
    counts: Counter[str] = Counter()
    n_tokens = 0
    for rec in records:
        counts.update(rec.terms)
        n_tokens += len(rec.terms)
    oov_rate = None
    if vocab is not None:
        oov = sum(c for tok, c in counts.items() if not vocab.contains(tok))
        oov_rate = oov / n_tokens if n_tokens else 0.0
    return CorpusStats(
        sequence_count=len(records),
        token_count=n_tokens,
        mean_sequence_length=n_tokens / len(records) if records else 0.0,
        type_count=len(counts),
        singleton_type_count=sum(1 for c in counts.values() if c == 1),
        oov_rate=oov_rate,
    )
