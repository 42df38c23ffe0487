"""Skipgram-with-negative-sampling embeddings over integer sequences,
optionally composing center vectors from digit n-gram subword units.

The hot loop is JIT-compiled (numba) over flat int32/float32 arrays; a
slow numpy reference update implementing the identical math lives in
``pair_loss``/``pair_gradients`` and ``reference_train`` so the kernel can
be cross-checked. Single-worker mode is bit-reproducible for a given
seed; multi-worker mode updates shared parameter matrices without locks
and is documented as nondeterministic.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from numba import njit, prange

from .corpus import SequenceRecord
from .embeddings import EmbeddingTable, save_text
from .vocab import SubwordConfig, Vocabulary, encode, subword_units

logger = logging.getLogger(__name__)

LR_FLOOR_FRACTION = 1e-4
_SCORE_CLAMP = 30.0

# 64-bit LCG (MMIX constants); kept inline in the kernels so deterministic
# mode does not depend on numba's RNG internals.
_LCG_MULT = np.uint64(6364136223846793005)
_LCG_INC = np.uint64(1442695040888963407)
_INV_2_53 = 1.0 / 9007199254740992.0


class TrainingDiverged(RuntimeError):
    """Non-finite parameters or loss encountered during training."""


@dataclass(frozen=True)
class SkipgramConfig:
    dim: int = 100
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    lr_start: float = 0.05
    min_count: int = 3
    subword: SubwordConfig | None = None
    sampling_power: float = 0.75
    subsample_threshold: float = 1e-4
    seed: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.dim < 1 or self.window < 1 or self.negatives < 1:
            raise ValueError("dim, window and negatives must all be >= 1")
        if not 0.0 < self.sampling_power <= 1.0:
            raise ValueError("sampling_power must be in (0, 1]")


class NegativeSampler:
    """Unigram^power distribution with a cumulative array for O(log n) draws."""

    def __init__(self, counts: Sequence[float], power: float):
        counts = np.asarray(counts, dtype=np.float64)
        if counts.size == 0:
            raise ValueError("empty count table")
        if np.any(counts < 0):
            raise ValueError("negative counts")
        weights = np.power(counts, power)
        total = weights.sum()
        if total <= 0:
            raise ValueError("all counts are zero")
        self.probs = weights / total
        self.cumulative = np.cumsum(self.probs)
        self.cumulative[-1] = 1.0  # guard against rounding past the end

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.searchsorted(self.cumulative, rng.random(size), side="right").astype(np.int64)


def negative_sampling_distribution(
    counts: Mapping[str, float] | Sequence[float], power: float = 0.75
) -> NegativeSampler:
    """Build the P(t) ~ count(t)^power sampling distribution."""
    if isinstance(counts, Mapping):
        counts = list(counts.values())
    return NegativeSampler(counts, power)


def subsample_keep_probability(count: float, total: float, threshold: float) -> float:
    """Keep probability sqrt(threshold / f) for corpus frequency f, capped at 1."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    freq = count / total
    if freq <= threshold:
        return 1.0
    return float(np.sqrt(threshold / freq))


def subsample_decision(
    token: str, counts: Mapping[str, float], threshold: float, rng: np.random.Generator
) -> bool:
    """True to keep the token, False to drop it (frequent-token subsampling)."""
    total = sum(counts.values())
    keep = subsample_keep_probability(counts[token], total, threshold)
    return bool(rng.random() < keep) if keep < 1.0 else True


def pair_loss(unit_vecs: np.ndarray, target_vec: np.ndarray, label: int) -> float:
    """Binary-logistic loss of one (center, target) pair in double precision.

    The center vector is the mean of the contributing unit rows; label 1
    marks the observed context token, label 0 a sampled negative.
    """
    h = np.mean(np.asarray(unit_vecs, dtype=np.float64), axis=0)
    score = float(h @ np.asarray(target_vec, dtype=np.float64))
    signed = score if label else -score
    return float(np.logaddexp(0.0, -signed))


def pair_gradients(
    unit_vecs: np.ndarray, target_vec: np.ndarray, label: int
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of pair_loss w.r.t. every unit row and the target row."""
    unit_vecs = np.asarray(unit_vecs, dtype=np.float64)
    target_vec = np.asarray(target_vec, dtype=np.float64)
    m = unit_vecs.shape[0]
    h = unit_vecs.mean(axis=0)
    score = h @ target_vec
    sigma = 1.0 / (1.0 + np.exp(-score))
    g = sigma - label
    grad_target = g * h
    grad_units = np.tile(g * target_vec / m, (m, 1))
    return grad_units, grad_target


@njit(cache=True, fastmath=True)
def _lcg_next(state):
    return state * _LCG_MULT + _LCG_INC


@njit(cache=True, fastmath=True)
def _lcg_uniform(state):
    state = _lcg_next(state)
    return state, np.float64(state >> np.uint64(11)) * _INV_2_53


@njit(cache=True, fastmath=True)
def _train_span(
    tokens,
    seq_offsets,
    seq_lo,
    seq_hi,
    unit_flat,
    unit_off,
    neg_cdf,
    keep_prob,
    in_vecs,
    out_vecs,
    window,
    negatives,
    lr_start,
    total_planned,
    processed0,
    worker_scale,
    state,
    kept_buf,
    h,
    grad_h,
):
    """Train on sequences [seq_lo, seq_hi); returns (tokens consumed, rng state)."""
    dim = in_vecs.shape[1]
    processed = np.int64(0)
    for s in range(seq_lo, seq_hi):
        start = seq_offsets[s]
        end = seq_offsets[s + 1]
        n_kept = 0
        for pos in range(start, end):
            tok = tokens[pos]
            processed += 1
            kp = keep_prob[tok]
            if kp < 1.0:
                state, u = _lcg_uniform(state)
                if u >= kp:
                    continue
            kept_buf[n_kept] = tok
            n_kept += 1
        frac = 1.0 - np.float64(processed0 + processed * worker_scale) / np.float64(total_planned)
        if frac < LR_FLOOR_FRACTION:
            frac = LR_FLOOR_FRACTION
        alpha = lr_start * frac
        for i in range(n_kept):
            center = kept_buf[i]
            state = _lcg_next(state)
            radius = 1 + np.int64(state >> np.uint64(33)) % window
            lo = i - radius
            if lo < 0:
                lo = 0
            hi = i + radius
            if hi > n_kept - 1:
                hi = n_kept - 1
            u_lo = unit_off[center]
            u_hi = unit_off[center + 1]
            n_units = u_hi - u_lo
            inv_units = 1.0 / np.float64(n_units)
            share = np.float32(inv_units)
            for j in range(lo, hi + 1):
                if j == i:
                    continue
                context = kept_buf[j]
                # Compose the center vector fresh for each pair.
                for d in range(dim):
                    acc = 0.0
                    for u_idx in range(u_lo, u_hi):
                        acc += in_vecs[unit_flat[u_idx], d]
                    h[d] = acc * inv_units
                    grad_h[d] = 0.0
                for neg in range(negatives + 1):
                    if neg == 0:
                        target = np.int64(context)
                        label = 1.0
                    else:
                        state, u = _lcg_uniform(state)
                        target = np.searchsorted(neg_cdf, u)
                        if target == np.int64(context):
                            continue
                        label = 0.0
                    score = 0.0
                    for d in range(dim):
                        score += np.float64(h[d]) * np.float64(out_vecs[target, d])
                    if score > _SCORE_CLAMP:
                        score = _SCORE_CLAMP
                    elif score < -_SCORE_CLAMP:
                        score = -_SCORE_CLAMP
                    sigma = 1.0 / (1.0 + np.exp(-score))
                    g = alpha * (label - sigma)
                    for d in range(dim):
                        grad_h[d] += np.float32(g) * out_vecs[target, d]
                        out_vecs[target, d] += np.float32(g) * h[d]
                for u_idx in range(u_lo, u_hi):
                    row = unit_flat[u_idx]
                    for d in range(dim):
                        in_vecs[row, d] += grad_h[d] * share
    return processed, state


@njit(cache=True, fastmath=True, parallel=True)
def _train_epoch_parallel(
    tokens,
    seq_offsets,
    unit_flat,
    unit_off,
    neg_cdf,
    keep_prob,
    in_vecs,
    out_vecs,
    window,
    negatives,
    lr_start,
    total_planned,
    processed0,
    seeds,
    max_len,
):
    n_seq = seq_offsets.shape[0] - 1
    n_workers = seeds.shape[0]
    dim = in_vecs.shape[1]
    consumed = np.zeros(n_workers, dtype=np.int64)
    for w in prange(n_workers):
        lo = n_seq * w // n_workers
        hi = n_seq * (w + 1) // n_workers
        kept_buf = np.empty(max_len, dtype=np.int32)
        h = np.empty(dim, dtype=np.float32)
        grad_h = np.empty(dim, dtype=np.float32)
        done, _ = _train_span(
            tokens, seq_offsets, lo, hi, unit_flat, unit_off, neg_cdf, keep_prob,
            in_vecs, out_vecs, window, negatives, lr_start, total_planned,
            processed0, np.int64(n_workers), seeds[w], kept_buf, h, grad_h,
        )
        consumed[w] = done
    return consumed.sum()


@njit(cache=True, fastmath=True)
def _eval_loss(
    tokens,
    seq_offsets,
    unit_flat,
    unit_off,
    neg_cdf,
    in_vecs,
    out_vecs,
    window,
    negatives,
    seed,
    max_len,
):
    """Mean pair loss (positive plus its negatives) with a fixed pair draw."""
    dim = in_vecs.shape[1]
    state = seed
    h = np.empty(dim, dtype=np.float32)
    total = 0.0
    n_pairs = np.int64(0)
    n_seq = seq_offsets.shape[0] - 1
    for s in range(n_seq):
        start = seq_offsets[s]
        end = seq_offsets[s + 1]
        length = end - start
        for i in range(length):
            center = tokens[start + i]
            state = _lcg_next(state)
            radius = 1 + np.int64(state >> np.uint64(33)) % window
            lo = i - radius
            if lo < 0:
                lo = 0
            hi = i + radius
            if hi > length - 1:
                hi = length - 1
            u_lo = unit_off[center]
            u_hi = unit_off[center + 1]
            inv_units = 1.0 / np.float64(u_hi - u_lo)
            for d in range(dim):
                acc = 0.0
                for u_idx in range(u_lo, u_hi):
                    acc += in_vecs[unit_flat[u_idx], d]
                h[d] = acc * inv_units
            for j in range(lo, hi + 1):
                if j == i:
                    continue
                loss = 0.0
                for neg in range(negatives + 1):
                    if neg == 0:
                        target = np.int64(tokens[start + j])
                        sign = 1.0
                    else:
                        state, u = _lcg_uniform(state)
                        target = np.searchsorted(neg_cdf, u)
                        if target == np.int64(tokens[start + j]):
                            continue
                        sign = -1.0
                    score = 0.0
                    for d in range(dim):
                        score += np.float64(h[d]) * np.float64(out_vecs[target, d])
                    z = sign * score
                    if z > _SCORE_CLAMP:
                        z = _SCORE_CLAMP
                    elif z < -_SCORE_CLAMP:
                        z = -_SCORE_CLAMP
                    loss += np.log(1.0 + np.exp(-z))
                total += loss
                n_pairs += 1
    if n_pairs == 0:
        return 0.0
    return total / np.float64(n_pairs)


def _flatten_corpus(
    records: Iterable[SequenceRecord], vocab: Vocabulary
) -> tuple[np.ndarray, np.ndarray, int]:
    ids: list[int] = []
    offsets = [0]
    max_len = 0
    for rec in records:
        enc = encode(rec, vocab)
        ids.extend(enc)
        offsets.append(len(ids))
        max_len = max(max_len, len(enc))
    return (
        np.asarray(ids, dtype=np.int32),
        np.asarray(offsets, dtype=np.int64),
        max_len,
    )


def _unit_table(vocab: Vocabulary, subword: SubwordConfig | None) -> tuple[np.ndarray, np.ndarray]:
    """Per-token unit lists: the token's own row, then its bucket rows
    offset by the vocabulary size. UNK carries no subword units."""
    flat: list[int] = []
    offsets = [0]
    n_vocab = len(vocab)
    for tid, token in enumerate(vocab.tokens):
        flat.append(tid)
        if subword is not None and tid != vocab.unk_id:
            flat.extend(n_vocab + b for b in subword_units(token, subword))
        offsets.append(len(flat))
    return np.asarray(flat, dtype=np.int32), np.asarray(offsets, dtype=np.int64)


def train_skipgram(
    train: list[SequenceRecord],
    vocab: Vocabulary,
    config: SkipgramConfig,
    heldout: list[SequenceRecord] | None = None,
    checkpoint_path: str | None = None,
    checkpoint_every: int = 0,
) -> EmbeddingTable:
    """Train input-side token vectors (plus bucket vectors when subword is on).

    Every (center, context) pair inside a per-position window radius drawn
    uniformly from 1..window gets one positive and ``negatives`` sampled
    negative binary-logistic updates; the learning rate decays linearly
    with consumed tokens down to a 1e-4 floor. When ``heldout`` is given,
    a fixed-draw mean pair loss over it is recorded before training and
    after every epoch in the returned table's ``meta["heldout_loss"]``.
    """
    if not train:
        raise ValueError("empty corpus")
    if vocab.min_count != config.min_count:
        raise ValueError(
            f"vocabulary min_count {vocab.min_count} != config min_count {config.min_count}"
        )
    tokens, seq_offsets, max_len = _flatten_corpus(train, vocab)
    if tokens.size == 0:
        raise ValueError("empty corpus")
    n_vocab = len(vocab)
    n_buckets = config.subword.bucket_count if config.subword else 0
    rng = np.random.default_rng(config.seed)
    bound = 0.5 / config.dim
    in_vecs = rng.uniform(-bound, bound, size=(n_vocab + n_buckets, config.dim)).astype(np.float32)
    out_vecs = np.zeros((n_vocab, config.dim), dtype=np.float32)
    unit_flat, unit_off = _unit_table(vocab, config.subword)

    sampler = negative_sampling_distribution(vocab.counts, config.sampling_power)
    neg_cdf = sampler.cumulative
    counts = np.asarray(vocab.counts, dtype=np.float64)
    total_tokens = counts.sum()
    keep_prob = np.ones(n_vocab, dtype=np.float64)
    if config.subsample_threshold > 0 and total_tokens > 0:
        freq = counts / total_tokens
        high = freq > config.subsample_threshold
        keep_prob[high] = np.sqrt(config.subsample_threshold / freq[high])

    total_planned = np.int64(config.epochs) * np.int64(tokens.size)
    eval_args = None
    history: list[float] = []
    if heldout:
        ho_tokens, ho_offsets, ho_max = _flatten_corpus(heldout, vocab)
        eval_args = (ho_tokens, ho_offsets, unit_flat, unit_off, neg_cdf,
                     in_vecs, out_vecs, np.int64(config.window),
                     np.int64(config.negatives), np.uint64(config.seed * 2 + 1),
                     np.int64(max(ho_max, 1)))
        history.append(float(_eval_loss(*eval_args)))

    processed = np.int64(0)
    seed64 = np.uint64(config.seed & 0xFFFFFFFFFFFFFFFF)
    for epoch in range(config.epochs):
        tic = time.perf_counter()
        if config.workers <= 1:
            kept_buf = np.empty(max_len, dtype=np.int32)
            h = np.empty(config.dim, dtype=np.float32)
            grad_h = np.empty(config.dim, dtype=np.float32)
            state = np.uint64(_lcg_next(seed64 + np.uint64(epoch)))
            done, _ = _train_span(
                tokens, seq_offsets, 0, len(seq_offsets) - 1, unit_flat, unit_off,
                neg_cdf, keep_prob, in_vecs, out_vecs, np.int64(config.window),
                np.int64(config.negatives), float(config.lr_start), total_planned,
                processed, np.int64(1), state, kept_buf, h, grad_h,
            )
        else:
            seeds = np.array(
                [_lcg_next(seed64 + np.uint64(epoch * config.workers + w))
                 for w in range(config.workers)],
                dtype=np.uint64,
            )
            done = _train_epoch_parallel(
                tokens, seq_offsets, unit_flat, unit_off, neg_cdf, keep_prob,
                in_vecs, out_vecs, np.int64(config.window), np.int64(config.negatives),
                float(config.lr_start), total_planned, processed, seeds,
                np.int64(max_len),
            )
        processed += done
        elapsed = time.perf_counter() - tic
        if not (np.all(np.isfinite(in_vecs)) and np.all(np.isfinite(out_vecs))):
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch + 1}")
        msg = f"epoch {epoch + 1}/{config.epochs}: {done / max(elapsed, 1e-9):,.0f} tokens/s"
        if eval_args is not None:
            loss = float(_eval_loss(*eval_args))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite held-out loss after epoch {epoch + 1}")
            history.append(loss)
            msg += f", heldout loss {loss:.4f}"
        logger.info(msg)
        if checkpoint_path and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_text(
                _build_table(vocab, config, in_vecs, out_vecs, history),
                f"{checkpoint_path}.epoch{epoch + 1}",
            )
    return _build_table(vocab, config, in_vecs, out_vecs, history)


def _build_table(
    vocab: Vocabulary,
    config: SkipgramConfig,
    in_vecs: np.ndarray,
    out_vecs: np.ndarray,
    history: list[float],
) -> EmbeddingTable:
    n_vocab = len(vocab)
    subword = None
    if config.subword is not None:
        subword = (config.subword, in_vecs[n_vocab:].copy())
    meta = {
        "seed": config.seed,
        "dim": config.dim,
        "window": config.window,
        "negatives": config.negatives,
        "epochs": config.epochs,
        "subword": config.subword is not None,
        "heldout_loss": list(history),
    }
    return EmbeddingTable(
        vocab.tokens,
        in_vecs[:n_vocab].copy(),
        source_tag="OEIS-FastText" if config.subword else "OEIS-FastText-nosub",
        subword=subword,
        meta=meta,
    )


def reference_train(
    train: list[SequenceRecord],
    vocab: Vocabulary,
    config: SkipgramConfig,
) -> EmbeddingTable:
    """Pure-numpy single-worker trainer mirroring the JIT kernel's update
    order and RNG, for equivalence testing on tiny corpora."""
    tokens, seq_offsets, _ = _flatten_corpus(train, vocab)
    n_vocab = len(vocab)
    n_buckets = config.subword.bucket_count if config.subword else 0
    rng = np.random.default_rng(config.seed)
    bound = 0.5 / config.dim
    in_vecs = rng.uniform(-bound, bound, size=(n_vocab + n_buckets, config.dim)).astype(np.float32)
    out_vecs = np.zeros((n_vocab, config.dim), dtype=np.float32)
    unit_flat, unit_off = _unit_table(vocab, config.subword)
    sampler = negative_sampling_distribution(vocab.counts, config.sampling_power)
    counts = np.asarray(vocab.counts, dtype=np.float64)
    total_tokens = counts.sum()
    keep_prob = np.ones(n_vocab)
    if config.subsample_threshold > 0:
        freq = counts / total_tokens
        high = freq > config.subsample_threshold
        keep_prob[high] = np.sqrt(config.subsample_threshold / freq[high])

    total_planned = config.epochs * tokens.size
    processed = 0
    mask64 = (1 << 64) - 1
    mult, inc = int(_LCG_MULT), int(_LCG_INC)

    def lcg_next(s: int) -> int:
        return (s * mult + inc) & mask64

    def lcg_uniform(s: int) -> tuple[int, float]:
        s = lcg_next(s)
        return s, float(s >> 11) * _INV_2_53

    for epoch in range(config.epochs):
        state = lcg_next((config.seed + epoch) & mask64)
        for s_idx in range(len(seq_offsets) - 1):
            seq = tokens[seq_offsets[s_idx] : seq_offsets[s_idx + 1]]
            kept = []
            for tok in seq:
                processed += 1
                if keep_prob[tok] < 1.0:
                    state, u = lcg_uniform(state)
                    if u >= keep_prob[tok]:
                        continue
                kept.append(int(tok))
            frac = max(LR_FLOOR_FRACTION, 1.0 - processed / total_planned)
            alpha = config.lr_start * frac
            for i, center in enumerate(kept):
                state = lcg_next(state)
                radius = 1 + (state >> 33) % config.window
                units = unit_flat[unit_off[center] : unit_off[center + 1]]
                for j in range(max(0, i - radius), min(len(kept), i + radius + 1)):
                    if j == i:
                        continue
                    h = in_vecs[units].mean(axis=0, dtype=np.float64).astype(np.float32)
                    grad_h = np.zeros(config.dim, dtype=np.float32)
                    for neg in range(config.negatives + 1):
                        if neg == 0:
                            target, label = kept[j], 1.0
                        else:
                            state, u = lcg_uniform(state)
                            target = int(np.searchsorted(sampler.cumulative, u))
                            if target == kept[j]:
                                continue
                            label = 0.0
                        score = float(np.clip(h.astype(np.float64) @ out_vecs[target].astype(np.float64),
                                              -_SCORE_CLAMP, _SCORE_CLAMP))
                        sigma = 1.0 / (1.0 + np.exp(-score))
                        g = np.float32(alpha * (label - sigma))
                        grad_h += g * out_vecs[target]
                        out_vecs[target] += g * h
                    in_vecs[units] += grad_h / np.float32(len(units))
    return _build_table(vocab, config, in_vecs, out_vecs, [])
