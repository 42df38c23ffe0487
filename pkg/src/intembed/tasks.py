"""Downstream evaluation battery: sequence completion (language model and
corpus-search baselines), multiple-choice analogies via vector offsets,
and seed-set expansion around an embedding centroid.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import SequenceRecord, canonical_token, is_canonical_token
from .embeddings import EmbeddingTable


class ProblemFormatError(ValueError):
    """Malformed problem file; carries the offending line number."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass(frozen=True)
class CompletionProblem:
    prompt: tuple[str, ...]
    answer: str
    source: str = ""

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("empty prompt")
        if not self.answer:
            raise ValueError("empty answer")


@dataclass(frozen=True)
class AnalogyProblem:
    a: str
    b: str
    c: str
    options: tuple[str, ...]
    answer: str
    source: str = ""

    def __post_init__(self):
        if self.answer not in self.options:
            raise ValueError(f"answer {self.answer} not among options {self.options}")
        if len(set(self.options)) != len(self.options):
            raise ValueError(f"duplicate options: {self.options}")


def load_problems(source, kind: str) -> list[CompletionProblem] | list[AnalogyProblem]:
    """Parse a line-delimited problem file (see the fixture files for the
    exact field layout). ``#`` comment lines are allowed; duplicates are
    preserved. Schema violations raise ProblemFormatError."""
    if kind not in ("completion", "analogy"):
        raise ValueError(f"unknown problem kind {kind!r}")
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return load_problems(fh.readlines(), kind)
    problems = []
    for lineno, raw in enumerate(source, start=1):
        line = raw.rstrip("\n")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        try:
            if kind == "completion":
                if len(fields) < 2:
                    raise ValueError("expected '<prompt>\\t<answer>[\\t<source>]'")
                prompt = tuple(canonical_token(t.strip()) for t in fields[0].split(",") if t.strip())
                problems.append(
                    CompletionProblem(
                        prompt=prompt,
                        answer=canonical_token(fields[1].strip()),
                        source=fields[2].strip() if len(fields) > 2 else "",
                    )
                )
            else:
                if len(fields) < 5:
                    raise ValueError(
                        "expected '<a>\\t<b>\\t<c>\\t<options>\\t<answer>[\\t<source>]'"
                    )
                options = tuple(
                    canonical_token(t.strip()) for t in fields[3].split(",") if t.strip()
                )
                if not 3 <= len(options) <= 5:
                    raise ValueError(f"expected 3-5 options, got {len(options)}")
                problems.append(
                    AnalogyProblem(
                        a=canonical_token(fields[0].strip()),
                        b=canonical_token(fields[1].strip()),
                        c=canonical_token(fields[2].strip()),
                        options=options,
                        answer=canonical_token(fields[4].strip()),
                        source=fields[5].strip() if len(fields) > 5 else "",
                    )
                )
        except ValueError as exc:
            raise ProblemFormatError(str(exc), lineno) from exc
    return problems


def completion_problems_from_records(records: Iterable[SequenceRecord]) -> list[CompletionProblem]:
    """Next-term prediction problems: prompt = all but the last term."""
    problems = []
    for rec in records:
        if len(rec.terms) >= 2:
            problems.append(
                CompletionProblem(prompt=rec.terms[:-1], answer=rec.terms[-1], source=rec.id)
            )
    return problems


class SuffixIndex:
    """Window -> next-token frequency counters over a corpus.

    A full index covers every in-sequence window of length 1..max_window;
    windows never span two sequences, and a window at the very end of a
    sequence (nothing follows it) contributes nothing. A restricted index
    counts only a caller-supplied window set (any lengths) in one corpus
    pass, which keeps batch evaluation exact without the memory of a full
    build. The corpus is retained for full-prompt scan fallback.
    """

    def __init__(
        self,
        counts: dict[tuple[str, ...], Counter],
        corpus: list[SequenceRecord],
        max_window: int | None,
        restricted_to: frozenset[tuple[str, ...]] | None = None,
    ):
        self.counts = counts
        self.corpus = corpus
        self.max_window = max_window
        self.restricted_to = restricted_to

    def covers(self, window: tuple[str, ...]) -> bool:
        if self.restricted_to is not None:
            return window in self.restricted_to
        return len(window) <= self.max_window

    def continuations(self, window: tuple[str, ...]) -> Counter:
        if not self.covers(window):
            raise KeyError(f"window of length {len(window)} not indexed")
        return self.counts.get(window, Counter())


def build_suffix_index(corpus: list[SequenceRecord], max_window: int = 8) -> SuffixIndex:
    """Index every window of length 1..max_window with its continuation counts."""
    if max_window < 1:
        raise ValueError("max_window must be >= 1")
    counts: dict[tuple[str, ...], Counter] = defaultdict(Counter)
    for rec in corpus:
        terms = rec.terms
        for i in range(1, len(terms)):
            for length in range(1, min(max_window, i) + 1):
                counts[terms[i - length : i]][terms[i]] += 1
    return SuffixIndex(dict(counts), corpus, max_window)


def build_suffix_index_for_windows(
    corpus: list[SequenceRecord], windows: Iterable[tuple[str, ...]]
) -> SuffixIndex:
    """Exact continuation counts for just the given windows (single pass)."""
    wanted = frozenset(tuple(w) for w in windows)
    lengths = sorted({len(w) for w in wanted})
    counts: dict[tuple[str, ...], Counter] = defaultdict(Counter)
    for rec in corpus:
        terms = rec.terms
        for i in range(1, len(terms)):
            for length in lengths:
                if length > i:
                    break
                window = terms[i - length : i]
                if window in wanted:
                    counts[window][terms[i]] += 1
    return SuffixIndex(dict(counts), corpus, None, restricted_to=wanted)


def _scan_continuations(corpus: list[SequenceRecord], window: tuple[str, ...]) -> Counter:
    """Linear scan: occurrences of the window as a contiguous in-sequence
    run followed by at least one term."""
    found: Counter = Counter()
    m = len(window)
    for rec in corpus:
        terms = rec.terms
        for start in range(len(terms) - m):
            if terms[start : start + m] == window:
                found[terms[start + m]] += 1
    return found


def search_complete(
    index: SuffixIndex, prompt: Sequence[str], mode: str = "full", k: int = 5
) -> list[tuple[str, int]]:
    """Continuations of the prompt ranked by corpus frequency.

    mode="full" queries the whole prompt (falling back to a corpus scan
    when the prompt exceeds the indexed window length); mode="last5"
    queries the last five (or fewer) prompt tokens. Ties break by numeric
    token value ascending; an unseen window yields an empty ranking.
    """
    if mode not in ("full", "last5"):
        raise ValueError(f"unknown mode {mode!r}")
    if k < 1:
        raise ValueError("k must be >= 1")
    prompt = tuple(prompt)
    if not prompt:
        raise ValueError("empty prompt")
    window = prompt if mode == "full" else prompt[-min(5, len(prompt)) :]
    if index.covers(window):
        found = index.continuations(window)
    elif mode == "full":
        found = _scan_continuations(index.corpus, window)
    else:
        raise KeyError("last-5 window not covered by this index")
    ranked = sorted(found.items(), key=lambda kv: (-kv[1], int(kv[0])))
    return ranked[:k]


def batch_search_complete(
    corpus: list[SequenceRecord],
    problems: Sequence[CompletionProblem],
    mode: str = "full",
    k: int = 5,
    tail_length: int = 8,
) -> list[list[tuple[str, int]]]:
    """search_complete for many problems in O(corpus) passes.

    Counts are identical to per-problem search_complete: short windows go
    through a restricted index; full prompts longer than ``tail_length``
    are found by matching their last ``tail_length`` tokens during the
    pass and verifying the whole prompt at each candidate position.
    """
    if mode not in ("full", "last5"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "last5":
        windows = [p.prompt[-min(5, len(p.prompt)) :] for p in problems]
        index = build_suffix_index_for_windows(corpus, windows)
        return [search_complete(index, p.prompt, "last5", k) for p in problems]
    short = {p.prompt for p in problems if len(p.prompt) <= tail_length}
    long_by_tail: dict[tuple[str, ...], list[tuple[str, ...]]] = defaultdict(list)
    for p in problems:
        if len(p.prompt) > tail_length:
            tail = p.prompt[-tail_length:]
            if p.prompt not in long_by_tail[tail]:
                long_by_tail[tail].append(p.prompt)
    index = build_suffix_index_for_windows(corpus, short) if short else None
    long_counts: dict[tuple[str, ...], Counter] = {
        prompt: Counter() for group in long_by_tail.values() for prompt in group
    }
    if long_by_tail:
        for rec in corpus:
            terms = rec.terms
            for i in range(tail_length, len(terms)):
                group = long_by_tail.get(terms[i - tail_length : i])
                if not group:
                    continue
                for prompt in group:
                    m = len(prompt)
                    if m <= i and terms[i - m : i] == prompt:
                        long_counts[prompt][terms[i]] += 1
    results = []
    for p in problems:
        if len(p.prompt) <= tail_length:
            found = index.continuations(p.prompt)
        else:
            found = long_counts[p.prompt]
        ranked = sorted(found.items(), key=lambda kv: (-kv[1], int(kv[0])))
        results.append(ranked[:k])
    return results


def lm_complete(model, problem: CompletionProblem, k: int = 5) -> list[tuple[str, float]]:
    """Rank continuations with the language model (prompt OOV maps to UNK).

    An out-of-vocabulary answer can never match a prediction: UNK is
    excluded from the ranking, so such problems count as failures.
    """
    from .lstm import next_token_topk

    return next_token_topk(model, list(problem.prompt), k)


def precision_at_k(
    predictions: Sequence[Sequence], golds: Sequence[str], k: int
) -> float:
    """Fraction of problems whose gold answer is in the top k predictions.

    Prediction entries may be tokens or (token, score) pairs; empty
    prediction lists count as misses.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(predictions) != len(golds):
        raise ValueError("predictions and golds differ in length")
    if not golds:
        raise ValueError("no problems")
    hits = 0
    for ranked, gold in zip(predictions, golds):
        top = [item[0] if isinstance(item, (tuple, list)) else item for item in ranked[:k]]
        if gold in top:
            hits += 1
    return hits / len(golds)


def solve_analogy(table: EmbeddingTable, problem: AnalogyProblem) -> str | None:
    """Pick the option closest (cosine) to v(c) - v(a) + v(b).

    Returns None (abstain, scored as wrong) when a, b, or c cannot be
    resolved, when no option resolves, or when the target vector is zero.
    Ties break by numeric option value ascending.
    """
    va = table.lookup(problem.a)
    vb = table.lookup(problem.b)
    vc = table.lookup(problem.c)
    if va is None or vb is None or vc is None:
        return None
    target = vc.astype(np.float64) - va.astype(np.float64) + vb.astype(np.float64)
    if np.linalg.norm(target) == 0.0:
        return None
    scored = []
    for opt in problem.options:
        vec = table.lookup(opt)
        if vec is None:
            continue
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            continue
        sim = float(vec @ target) / (norm * float(np.linalg.norm(target)))
        scored.append((opt, sim))
    if not scored:
        return None
    scored.sort(key=lambda item: (-item[1], int(item[0])))
    return scored[0][0]


def analogy_accuracy(
    table: EmbeddingTable, problems: Sequence[AnalogyProblem]
) -> tuple[float, list[dict]]:
    """Accuracy plus a per-problem log (chosen option, abstentions)."""
    if not problems:
        raise ValueError("no problems")
    log = []
    correct = 0
    for prob in problems:
        choice = solve_analogy(table, prob)
        hit = choice == prob.answer
        correct += hit
        log.append(
            {
                "a": prob.a, "b": prob.b, "c": prob.c,
                "options": list(prob.options),
                "answer": prob.answer,
                "chosen": choice,
                "correct": bool(hit),
            }
        )
    return correct / len(problems), log


def random_choice_accuracy(problems: Sequence[AnalogyProblem]) -> float:
    """Exact expectation of uniform guessing: mean of 1/|options|."""
    if not problems:
        raise ValueError("no problems")
    return float(np.mean([1.0 / len(p.options) for p in problems]))


def expand_seed_set(
    table: EmbeddingTable,
    seeds: Sequence[str],
    k: int = 6,
    scope: Sequence[str] | None = None,
) -> list[tuple[str, float]]:
    """Candidates nearest the centroid of the seed vectors, seeds excluded.

    The default candidate scope is every integer token the table lists
    explicitly; pass ``scope`` to restrict (e.g. to a numeric range).
    """
    center = table.centroid(list(seeds))
    if scope is None:
        scope = [t for t in table.tokens if is_canonical_token(t)]
    return table.nearest(center, candidates=scope, k=k, exclude=set(seeds))
