"""Embedding tables: storage, lookup (with optional subword composition),
vector arithmetic, text-format persistence, and pretrained-vector import.

All query operations are pure and tables are immutable after construction,
so concurrent reads are safe.
"""

from __future__ import annotations

import gzip
import json
import warnings
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import is_canonical_token
from .vocab import SubwordConfig, subword_units

_FLOAT_FMT = "%.9g"  # 9 significant digits round-trips float32 exactly


class TableFormatError(ValueError):
    """Malformed embedding-table text file."""


def _tie_key(token: str) -> tuple[int, int, str]:
    """Order integer tokens by value ascending; anything else sorts after."""
    if is_canonical_token(token):
        return (0, int(token), "")
    return (1, 0, token)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; raises on dimension mismatch or zero vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine undefined for zero vector")
    return float(np.dot(u, v) / (nu * nv))


class EmbeddingTable:
    """Dense vector per token, with optional hashed subword buckets.

    Without subword units, lookups return the stored row (or None for
    unknown tokens). With subword units, a lookup averages the vectors of
    all of the token's units: its n-gram buckets plus, for in-vocabulary
    tokens, the whole-token row -- so subword tables resolve every token.
    """

    def __init__(
        self,
        tokens: Sequence[str],
        matrix: np.ndarray,
        source_tag: str = "",
        subword: tuple[SubwordConfig, np.ndarray] | None = None,
        meta: dict | None = None,
        parents: tuple["EmbeddingTable", "EmbeddingTable"] | None = None,
    ):
        matrix = np.asarray(matrix, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[0] != len(tokens):
            raise ValueError(f"matrix shape {matrix.shape} does not match {len(tokens)} tokens")
        if matrix.size and not np.all(np.isfinite(matrix)):
            raise ValueError("non-finite entries in embedding matrix")
        self.tokens = list(tokens)
        self.matrix = matrix
        self.source_tag = source_tag
        self.meta = dict(meta or {})
        self.subword_config: SubwordConfig | None = None
        self.bucket_matrix: np.ndarray | None = None
        if subword is not None:
            config, buckets = subword
            buckets = np.asarray(buckets, dtype=np.float32)
            if buckets.shape != (config.bucket_count, self.dim):
                raise ValueError(
                    f"bucket matrix shape {buckets.shape} != "
                    f"({config.bucket_count}, {self.dim})"
                )
            if buckets.size and not np.all(np.isfinite(buckets)):
                raise ValueError("non-finite entries in bucket matrix")
            self.subword_config = config
            self.bucket_matrix = buckets
        self._parents = parents
        self._index = {t: i for i, t in enumerate(self.tokens)}
        self._composed: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def has_subword(self) -> bool:
        return self.subword_config is not None

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def lookup(self, token: str) -> np.ndarray | None:
        if self.has_subword:
            return self._compose(token)
        row = self._index.get(token)
        if row is not None:
            return self.matrix[row]
        if self._parents is not None:
            left = self._parents[0].lookup(token)
            right = self._parents[1].lookup(token)
            if left is not None and right is not None:
                return np.concatenate([left, right]).astype(np.float32)
        return None

    def _compose(self, token: str) -> np.ndarray | None:
        units = subword_units(token, self.subword_config)
        vecs = self.bucket_matrix[units] if units else np.zeros((0, self.dim), np.float32)
        row = self._index.get(token)
        if row is not None:
            vecs = np.vstack([self.matrix[row : row + 1], vecs])
        if vecs.shape[0] == 0:
            return None  # token shorter than any configured n-gram and out of vocab
        return vecs.mean(axis=0, dtype=np.float64).astype(np.float32)

    def all_vectors(self) -> np.ndarray:
        """Vectors for every explicit token, composed where subword is on."""
        if not self.has_subword:
            return self.matrix
        if self._composed is None:
            self._composed = np.vstack([self._compose(t) for t in self.tokens])
        return self._composed

    def centroid(self, tokens: Sequence[str]) -> np.ndarray:
        """Arithmetic mean of the tokens' vectors; all must resolve."""
        missing = [t for t in tokens if self.lookup(t) is None]
        if missing:
            raise KeyError(f"tokens not resolvable in {self.source_tag or 'table'}: {missing}")
        if not tokens:
            raise ValueError("centroid of empty token set")
        return np.mean([self.lookup(t) for t in tokens], axis=0).astype(np.float32)

    def nearest(
        self,
        query: np.ndarray,
        candidates: Sequence[str] | None = None,
        k: int = 10,
        exclude: Iterable[str] = (),
    ) -> list[tuple[str, float]]:
        """Top-k candidates by cosine similarity to the query vector.

        Ranking is by descending similarity with ties broken by numeric
        token value ascending. Excluded tokens, unresolvable candidates,
        and zero-norm vectors are never returned.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        query = np.asarray(query, dtype=np.float64)
        qnorm = np.linalg.norm(query)
        if qnorm == 0.0:
            raise ValueError("cosine undefined for zero query vector")
        excluded = set(exclude)
        if candidates is None:
            names = self.tokens
            mat = self.all_vectors().astype(np.float64)
        else:
            names, rows = [], []
            for tok in candidates:
                vec = self.lookup(tok)
                if vec is not None:
                    names.append(tok)
                    rows.append(vec)
            mat = np.asarray(rows, dtype=np.float64)
        keep = [i for i, t in enumerate(names) if t not in excluded]
        if not keep:
            raise ValueError("no candidates left after exclusion")
        mat = mat[keep]
        names = [names[i] for i in keep]
        norms = np.linalg.norm(mat, axis=1)
        nonzero = norms > 0
        if not np.any(nonzero):
            raise ValueError("no candidates with nonzero vectors")
        sims = (mat[nonzero] @ query) / (norms[nonzero] * qnorm)
        names = [t for t, ok in zip(names, nonzero) if ok]
        order = sorted(range(len(names)), key=lambda i: (-sims[i],) + _tie_key(names[i]))
        return [(names[i], float(sims[i])) for i in order[:k]]


def save_text(table: EmbeddingTable, path: str | Path) -> None:
    """Write the word-vector text format: ``<count> <dim>`` header, then one
    ``<token> <x1> ... <xdim>`` line per token.

    Subword bucket matrices go to a ``<path>.buckets`` sidecar in the same
    format keyed by bucket index; table metadata (source tag, subword
    configuration) goes to ``<path>.meta.json``.
    """
    path = Path(path)
    row_fmt = " ".join([_FLOAT_FMT] * table.dim)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(table)} {table.dim}\n")
        for token, row in zip(table.tokens, table.matrix):
            fh.write(token + " " + row_fmt % tuple(row) + "\n")
    meta = {
        "source_tag": table.source_tag,
        "meta": table.meta,
        "subword": None,
    }
    if table.has_subword:
        cfg = table.subword_config
        meta["subword"] = {
            "n_min": cfg.n_min,
            "n_max": cfg.n_max,
            "bucket_count": cfg.bucket_count,
        }
        with open(f"{path}.buckets", "w", encoding="utf-8") as fh:
            fh.write(f"{cfg.bucket_count} {table.dim}\n")
            for idx, row in enumerate(table.bucket_matrix):
                fh.write(str(idx) + " " + row_fmt % tuple(row) + "\n")
    with open(f"{path}.meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _parse_vector_file(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise TableFormatError(f"{path}: expected '<count> <dim>' header")
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError as exc:
            raise TableFormatError(f"{path}: bad header {header!r}") from exc
        tokens, rows = [], []
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) - 1 != dim:
                raise TableFormatError(
                    f"{path} line {lineno}: expected {dim} values, got {len(parts) - 1}"
                )
            tokens.append(parts[0])
            rows.append(np.array(parts[1:], dtype=np.float32))
        if len(tokens) != count:
            raise TableFormatError(
                f"{path}: header says {count} rows, file has {len(tokens)}"
            )
    matrix = np.vstack(rows) if rows else np.zeros((0, dim), np.float32)
    return tokens, matrix


def load_text(path: str | Path) -> EmbeddingTable:
    """Load a table written by save_text, including subword sidecars."""
    path = Path(path)
    tokens, matrix = _parse_vector_file(path)
    meta_path = Path(f"{path}.meta.json")
    bucket_path = Path(f"{path}.buckets")
    source_tag, meta, subword = "", {}, None
    cfg_fields = None
    if meta_path.exists():
        with open(meta_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        source_tag = raw.get("source_tag", "")
        meta = raw.get("meta", {})
        cfg_fields = raw.get("subword")
    if bucket_path.exists():
        _, buckets = _parse_vector_file(bucket_path)
        if cfg_fields is None:
            cfg_fields = {"n_min": 3, "n_max": 6, "bucket_count": buckets.shape[0]}
        config = SubwordConfig(
            n_min=cfg_fields["n_min"],
            n_max=cfg_fields["n_max"],
            bucket_count=cfg_fields["bucket_count"],
        )
        subword = (config, buckets)
    return EmbeddingTable(tokens, matrix, source_tag=source_tag, subword=subword, meta=meta)


def load_pretrained_integers(
    path: str | Path,
    headerless: bool | None = None,
    source_tag: str = "",
) -> EmbeddingTable:
    """Load only the integer-token rows of a published word-vector file.

    Tokens must be canonical signed decimal integers (no leading zeros,
    no separators, no decimal points); everything else is skipped. Plain
    and gzip-compressed text are both accepted. If ``headerless`` is None
    the ``<count> <dim>`` header is auto-detected (GloVe files have none).
    """
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    tokens: list[str] = []
    seen: set[str] = set()
    rows: list[np.ndarray] = []
    dim = None
    with opener(path, "rt", encoding="utf-8", errors="replace") as fh:
        first = fh.readline()
        if not first:
            raise TableFormatError(f"{path}: empty file")
        parts = first.split()
        is_header = len(parts) == 2 and all(p.isdigit() for p in parts)
        if headerless is None:
            headerless = not is_header
        if headerless:
            fh = _chain_first(first, fh)
        elif not is_header:
            raise TableFormatError(f"{path}: expected a '<count> <dim>' header")
        else:
            dim = int(parts[1])
        for lineno, line in enumerate(fh, start=1 if headerless else 2):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            token = parts[0]
            if not is_canonical_token(token):
                continue
            if dim is None:
                dim = len(parts) - 1
            if len(parts) - 1 != dim:
                raise TableFormatError(
                    f"{path} line {lineno}: integer token {token!r} has "
                    f"{len(parts) - 1} values, expected {dim}"
                )
            if token in seen:  # keep first occurrence
                continue
            seen.add(token)
            tokens.append(token)
            rows.append(np.array(parts[1:], dtype=np.float32))
    if dim is None:
        dim = 0
    if not tokens:
        warnings.warn(f"{path}: no integer tokens found")
    matrix = np.vstack(rows) if rows else np.zeros((0, dim), np.float32)
    return EmbeddingTable(tokens, matrix, source_tag=source_tag or path.stem)


def _chain_first(first_line: str, rest):
    yield first_line
    yield from rest


def concat_tables(a: EmbeddingTable, b: EmbeddingTable) -> EmbeddingTable:
    """Concatenate two tables over the tokens resolvable in both.

    The result's dimension is dim_a + dim_b and each vector is the pair of
    individual lookups joined. Explicit rows are materialized for the union
    of the input token lists; tokens outside both lists still resolve when
    both inputs can compose them (subword tables resolve everything).
    """
    seen = set()
    union = []
    for tok in list(a.tokens) + list(b.tokens):
        if tok not in seen:
            seen.add(tok)
            union.append(tok)
    tokens, rows = [], []
    for tok in union:
        left = a.lookup(tok)
        if left is None:
            continue
        right = b.lookup(tok)
        if right is None:
            continue
        tokens.append(tok)
        rows.append(np.concatenate([left, right]))
    dim = a.dim + b.dim
    if not tokens:
        warnings.warn("concatenated tables share no resolvable tokens")
    matrix = np.asarray(rows, dtype=np.float32) if rows else np.zeros((0, dim), np.float32)
    return EmbeddingTable(
        tokens,
        matrix,
        source_tag=f"Concat({a.source_tag},{b.source_tag})",
        parents=(a, b),
    )
