"""Latent semantic analysis over the sequence-by-integer count matrix.

Each corpus sequence is a row, each retained integer type (UNK included)
is a column, and cells hold raw occurrence counts -- term order inside a
sequence is deliberately discarded. Embeddings are the term-side factors
of a randomized truncated SVD, scaled by the singular values.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .corpus import SequenceRecord
from .embeddings import EmbeddingTable
from .vocab import Vocabulary, encode


@dataclass
class SparseCountMatrix:
    """Sequence x integer-type occurrence counts in CSR form."""

    matrix: sp.csr_matrix
    row_ids: list[str]  # sequence ids
    col_tokens: list[str]  # vocabulary tokens, id order

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def entries(self) -> list[tuple[int, int, int]]:
        """(row, col, count) triplets; unique pairs, positive counts."""
        coo = self.matrix.tocoo()
        return list(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()))


@dataclass
class SvdFactors:
    """Top-k factors A ~= U diag(S) V^T with orthonormal U/V columns."""

    u: np.ndarray  # rows x k
    s: np.ndarray  # k, descending, non-negative
    v: np.ndarray  # cols x k
    near_zero: int = 0  # trailing singular values at numerical-rank noise level


def build_count_matrix(train: list[SequenceRecord], vocab: Vocabulary) -> SparseCountMatrix:
    """Count token-id occurrences per sequence (OOV mass lands in the UNK column)."""
    indptr = [0]
    indices: list[int] = []
    data: list[int] = []
    for rec in train:
        counts = Counter(encode(rec, vocab))
        for col in sorted(counts):
            indices.append(col)
            data.append(counts[col])
        indptr.append(len(indices))
    matrix = sp.csr_matrix(
        (np.asarray(data, dtype=np.float64), indices, indptr),
        shape=(len(train), len(vocab)),
    )
    return SparseCountMatrix(
        matrix=matrix,
        row_ids=[rec.id for rec in train],
        col_tokens=list(vocab.tokens),
    )


def _orthonormalize(m: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(m)
    return q


def truncated_svd(
    m: SparseCountMatrix | sp.spmatrix | np.ndarray,
    k: int,
    oversample: int = 10,
    power_iters: int = 4,
    seed: int = 0,
) -> SvdFactors:
    """Randomized truncated SVD by Gaussian subspace iteration.

    Sketches the range with a Gaussian test matrix of width k + oversample,
    runs ``power_iters`` rounds of (A A^T) application with QR
    re-orthonormalization, then takes the exact SVD of the small projected
    matrix. Deterministic given the seed. Signs are fixed so the
    largest-magnitude entry of each right-singular vector is positive.
    """
    a = m.matrix if isinstance(m, SparseCountMatrix) else m
    n_rows, n_cols = a.shape
    if not 1 <= k <= min(n_rows, n_cols):
        raise ValueError(f"k={k} outside 1..min{(n_rows, n_cols)}")
    rng = np.random.default_rng(seed)
    width = min(k + oversample, min(n_rows, n_cols))
    omega = rng.standard_normal((n_cols, width))
    q = _orthonormalize(a @ omega)
    for _ in range(power_iters):
        q = _orthonormalize(a.T @ q)
        q = _orthonormalize(a @ q)
    b = q.T @ a  # width x cols, dense
    b = np.asarray(b)
    u_small, s, vt = np.linalg.svd(b, full_matrices=False)
    u = q @ u_small
    u, s, v = u[:, :k], s[:k], vt[:k].T
    # Sign convention for run-to-run determinism.
    flip = np.sign(v[np.argmax(np.abs(v), axis=0), np.arange(k)])
    flip[flip == 0] = 1.0
    v = v * flip
    u = u * flip
    tol = max(n_rows, n_cols) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    near_zero = int(np.sum(s <= tol))
    if near_zero:
        warnings.warn(
            f"{near_zero} trailing singular value(s) at noise level; "
            f"k={k} likely exceeds the numerical rank"
        )
    return SvdFactors(u=u, s=s, v=v, near_zero=near_zero)


def lsa_embeddings(
    train: list[SequenceRecord],
    vocab: Vocabulary,
    k: int = 65,
    oversample: int = 10,
    power_iters: int = 4,
    seed: int = 0,
) -> EmbeddingTable:
    """Integer-type vectors: rows of V diag(S) from the count-matrix SVD."""
    counts = build_count_matrix(train, vocab)
    factors = truncated_svd(counts, k=k, oversample=oversample, power_iters=power_iters, seed=seed)
    vectors = factors.v * factors.s[np.newaxis, :]
    return EmbeddingTable(
        counts.col_tokens,
        vectors.astype(np.float32),
        source_tag="OEIS-LSA",
        meta={"k": k, "seed": seed},
    )
