"""Shared fixtures: tiny synthetic corpora and discovery of optional
full-scale inputs (sequence dump, pretrained vectors, fetched question
sets). Full-scale tests skip cleanly when those inputs are absent."""

import os
from pathlib import Path

import numpy as np
import pytest

from intembed.corpus import SequenceRecord

DATA_DIR = Path(os.environ.get("INTEMBED_DATA_DIR", Path(__file__).parent / "data"))


def find_data_file(*names: str) -> Path | None:
    for name in names:
        candidate = DATA_DIR / name
        if candidate.is_file():
            return candidate
    return None


@pytest.fixture(scope="session")
def oeis_dump_path():
    path = find_data_file("stripped", "stripped.gz")
    if path is None:
        pytest.skip(f"sequence dump not present under {DATA_DIR} (set INTEMBED_DATA_DIR)")
    return path


def make_records(rows: list[list[int]], prefix: int = 0) -> list[SequenceRecord]:
    return [
        SequenceRecord(id=f"A{prefix + i:06d}", terms=tuple(str(t) for t in row))
        for i, row in enumerate(rows, start=1)
    ]


@pytest.fixture
def random_records():
    def build(n_records: int, seed: int = 0, low: int = 1, high: int = 50, length: int = 12):
        rng = np.random.default_rng(seed)
        rows = [list(map(int, rng.integers(low, high, size=length))) for _ in range(n_records)]
        return make_records(rows)

    return build


def parity_corpus(n_per_class: int = 400, max_value: int = 400, seed: int = 5):
    """Sequences of all-even or all-odd integers: co-occurrence carries
    parity, so trained embeddings should make evenness linearly readable."""
    rng = np.random.default_rng(seed)
    rows = []
    evens = np.arange(2, max_value + 1, 2)
    odds = np.arange(1, max_value + 1, 2)
    for pool in (evens, odds):
        for _ in range(n_per_class):
            rows.append(list(map(int, rng.choice(pool, size=20))))
    return make_records(rows)
