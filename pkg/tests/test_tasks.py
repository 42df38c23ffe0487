from collections import Counter
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intembed.embeddings import EmbeddingTable
from intembed.tasks import (
    AnalogyProblem,
    CompletionProblem,
    ProblemFormatError,
    analogy_accuracy,
    batch_search_complete,
    build_suffix_index,
    build_suffix_index_for_windows,
    completion_problems_from_records,
    expand_seed_set,
    load_problems,
    precision_at_k,
    random_choice_accuracy,
    search_complete,
    solve_analogy,
)

from conftest import make_records


def fixture_lines(name: str) -> list[str]:
    return (
        resources.files("intembed.data").joinpath(name).read_text(encoding="utf-8").splitlines()
    )


class TestLoadProblems:
    def test_completion_fixture_first_row(self):
        problems = load_problems(fixture_lines("completion_fixtures.tsv"), "completion")
        assert len(problems) == 5
        assert problems[0] == CompletionProblem(("0", "2", "4", "6"), "8", "nibcode")

    def test_analogy_fixture_first_row(self):
        problems = load_problems(fixture_lines("analogy_fixtures.tsv"), "analogy")
        assert len(problems) == 5
        first = problems[0]
        assert (first.a, first.b, first.c) == ("5", "36", "6")
        assert first.options == ("49", "48", "50", "56")
        assert first.answer == "49"

    def test_answer_must_be_an_option(self):
        with pytest.raises(ProblemFormatError) as err:
            load_problems(["1\t2\t3\t4,5,6\t7\tsrc"], "analogy")
        assert err.value.line_number == 1

    def test_option_count_bounds(self):
        with pytest.raises(ProblemFormatError):
            load_problems(["1\t2\t3\t4,5\t4\tsrc"], "analogy")
        with pytest.raises(ProblemFormatError):
            load_problems(["1\t2\t3\t4,5,6,7,8,9\t4\tsrc"], "analogy")

    def test_non_integer_rejected_with_line(self):
        with pytest.raises(ProblemFormatError) as err:
            load_problems(["# ok", "1,2,x\t3\tsrc"], "completion")
        assert err.value.line_number == 2

    def test_duplicates_preserved(self):
        lines = ["1,2\t3\tsrc", "1,2\t3\tsrc"]
        assert len(load_problems(lines, "completion")) == 2

    def test_problems_from_records(self):
        recs = make_records([[1, 2, 3], [9]])
        problems = completion_problems_from_records(recs)
        assert len(problems) == 1  # single-term record skipped
        assert problems[0].prompt == ("1", "2") and problems[0].answer == "3"


def brute_force_counts(records, max_window):
    """Independent O(n*L) recount of every window/continuation pair."""
    counts = {}
    for rec in records:
        terms = rec.terms
        for i in range(1, len(terms)):
            for length in range(1, min(max_window, i) + 1):
                key = terms[i - length : i]
                counts.setdefault(key, Counter())[terms[i]] += 1
    return counts


class TestSuffixIndex:
    def test_enumerated_example(self):
        index = build_suffix_index(make_records([[1, 2, 3]]), max_window=2)
        assert index.continuations(("1",)) == Counter({"2": 1})
        assert index.continuations(("2",)) == Counter({"3": 1})
        assert index.continuations(("1", "2")) == Counter({"3": 1})
        assert index.continuations(("3",)) == Counter()  # sequence end

    def test_repeated_window(self):
        index = build_suffix_index(make_records([[5, 1, 5, 1, 5]]), max_window=1)
        assert index.continuations(("5",)) == Counter({"1": 2})
        assert index.continuations(("1",)) == Counter({"5": 2})

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=25, deadline=None)
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        rows = [
            list(map(int, rng.integers(1, 8, size=rng.integers(1, 30))))
            for _ in range(rng.integers(1, 20))
        ]
        records = make_records(rows)
        assert sum(len(r.terms) for r in records) <= 1000
        index = build_suffix_index(records, max_window=4)
        expected = brute_force_counts(records, 4)
        assert index.counts == expected

    def test_restricted_matches_full(self):
        rng = np.random.default_rng(3)
        rows = [list(map(int, rng.integers(1, 6, size=15))) for _ in range(12)]
        records = make_records(rows)
        full = build_suffix_index(records, max_window=3)
        windows = [("1",), ("2", "3"), ("1", "2", "3"), ("5", "5")]
        restricted = build_suffix_index_for_windows(records, windows)
        for w in windows:
            assert restricted.continuations(w) == full.continuations(w)
        with pytest.raises(KeyError):
            restricted.continuations(("4",))


class TestSearchComplete:
    def test_frequency_ranking(self):
        index = build_suffix_index(make_records([[1, 2], [1, 3], [1, 3]]), max_window=2)
        assert search_complete(index, ["1"], mode="full", k=2) == [("3", 2), ("2", 1)]

    def test_unseen_window_empty(self):
        index = build_suffix_index(make_records([[1, 2, 3]]), max_window=2)
        assert search_complete(index, ["9"], mode="full") == []

    def test_tie_break_numeric(self):
        index = build_suffix_index(make_records([[1, 12], [1, 3], [1, 12], [1, 3]]), 2)
        assert search_complete(index, ["1"], k=2) == [("3", 2), ("12", 2)]

    def test_full_equals_last5_for_short_prompts(self):
        rng = np.random.default_rng(5)
        rows = [list(map(int, rng.integers(1, 5, size=12))) for _ in range(10)]
        records = make_records(rows)
        index = build_suffix_index(records, max_window=8)
        for _ in range(20):
            n = rng.integers(1, 6)
            prompt = [str(int(x)) for x in rng.integers(1, 5, size=n)]
            assert search_complete(index, prompt, "full", 5) == search_complete(
                index, prompt, "last5", 5
            )

    def test_long_prompt_falls_back_to_scan(self):
        terms = list(range(1, 15))
        records = make_records([terms, terms])
        index = build_suffix_index(records, max_window=4)
        prompt = [str(t) for t in terms[:10]]  # longer than the indexed window
        assert search_complete(index, prompt, mode="full", k=1) == [("11", 2)]

    def test_batch_matches_per_problem(self):
        rng = np.random.default_rng(6)
        rows = [list(map(int, rng.integers(1, 6, size=20))) for _ in range(15)]
        records = make_records(rows)
        problems = []
        for rec in records[:8]:
            for cut in (3, 12):
                problems.append(CompletionProblem(rec.terms[:cut], rec.terms[cut]))
        index = build_suffix_index(records, max_window=8)
        for mode in ("full", "last5"):
            batch = batch_search_complete(records, problems, mode=mode, k=5)
            single = [search_complete(index, list(p.prompt), mode, 5) for p in problems]
            assert batch == single


class TestPrecisionAtK:
    def test_gold_first(self):
        assert precision_at_k([["8", "9"]], ["8"], 1) == 1.0

    def test_gold_third(self):
        preds = [["1", "2", "8", "4", "5"]]
        assert precision_at_k(preds, ["8"], 1) == 0.0
        assert precision_at_k(preds, ["8"], 5) == 1.0

    def test_monotone_in_k(self):
        rng = np.random.default_rng(7)
        preds = [[str(x) for x in rng.permutation(10)] for _ in range(30)]
        golds = [str(rng.integers(0, 12)) for _ in range(30)]
        values = [precision_at_k(preds, golds, k) for k in range(1, 11)]
        assert values == sorted(values)

    def test_scored_pairs_accepted(self):
        assert precision_at_k([[("8", 0.9), ("9", 0.1)]], ["8"], 1) == 1.0

    def test_empty_prediction_counts_zero(self):
        assert precision_at_k([[], ["8"]], ["8", "8"], 1) == 0.5

    def test_no_problems_rejected(self):
        with pytest.raises(ValueError):
            precision_at_k([], [], 1)


def exact_table(tokens_vectors: dict[str, np.ndarray], tag="exact") -> EmbeddingTable:
    tokens = list(tokens_vectors)
    return EmbeddingTable(tokens, np.array([tokens_vectors[t] for t in tokens]), source_tag=tag)


class TestSolveAnalogy:
    def test_exact_arithmetic_instance(self):
        rng = np.random.default_rng(8)
        va, vb, vc = rng.normal(size=(3, 6))
        vd = vc - va + vb
        table = exact_table(
            {"1": va, "2": vb, "3": vc, "4": vd, "5": rng.normal(size=6), "6": rng.normal(size=6)}
        )
        problem = AnalogyProblem("1", "2", "3", ("4", "5", "6"), "4")
        assert solve_analogy(table, problem) == "4"

    def test_unresolvable_abc_abstains(self):
        table = exact_table({"4": np.ones(3), "5": np.zeros(3) + 2})
        problem = AnalogyProblem("1", "2", "3", ("4", "5", "6"), "4")
        assert solve_analogy(table, problem) is None

    def test_unresolvable_options_skipped(self):
        rng = np.random.default_rng(9)
        va, vb, vc = rng.normal(size=(3, 4))
        table = exact_table({"1": va, "2": vb, "3": vc, "5": vc - va + vb})
        problem = AnalogyProblem("1", "2", "3", ("4", "5", "9"), "5")  # 4 and 9 missing
        assert solve_analogy(table, problem) == "5"

    def test_all_options_unresolvable_abstains(self):
        rng = np.random.default_rng(15)
        table = exact_table({"1": rng.normal(size=3), "2": rng.normal(size=3), "3": rng.normal(size=3)})
        problem = AnalogyProblem("1", "2", "3", ("7", "8", "9"), "7")
        assert solve_analogy(table, problem) is None

    def test_random_table_hits_chance(self):
        rng = np.random.default_rng(10)
        problems = []
        for i in range(0, 400, 8):
            options = tuple(str(i + j) for j in range(3, 7))
            problems.append(AnalogyProblem(str(i), str(i + 1), str(i + 2), options, options[0]))
        hits = []
        for trial in range(40):
            rng_t = np.random.default_rng(trial)
            tokens = {str(v): rng_t.normal(size=8) for v in range(0, 410)}
            table = exact_table(tokens)
            accuracy, _ = analogy_accuracy(table, problems)
            hits.append(accuracy)
        assert np.mean(hits) == pytest.approx(0.25, abs=0.03)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(11)
        tokens = {str(v): rng.normal(size=7) for v in range(40)}
        table = exact_table(tokens)
        q, _ = np.linalg.qr(rng.normal(size=(7, 7)))
        rotated = exact_table({t: q @ v for t, v in tokens.items()})
        problems = [
            AnalogyProblem(
                str(a), str(a + 1), str(a + 2),
                tuple(str(x) for x in range(a + 3, a + 7)), str(a + 3),
            )
            for a in range(0, 30, 3)
        ]
        for problem in problems:
            assert solve_analogy(table, problem) == solve_analogy(rotated, problem)


class TestRandomChoice:
    def test_uniform_four_options(self):
        problems = [
            AnalogyProblem("1", "2", "3", ("4", "5", "6", "7"), "4") for _ in range(10)
        ]
        assert random_choice_accuracy(problems) == 0.25

    def test_mixed_option_counts(self):
        problems = [
            AnalogyProblem("1", "2", "3", ("4", "5", "6"), "4"),
            AnalogyProblem("1", "2", "3", ("4", "5", "6", "7", "8"), "4"),
        ]
        assert random_choice_accuracy(problems) == pytest.approx((1 / 3 + 1 / 5) / 2)

    def test_fixture_value(self):
        problems = load_problems(fixture_lines("analogy_fixtures.tsv"), "analogy")
        assert random_choice_accuracy(problems) == pytest.approx(0.25)


class TestExpandSeedSet:
    def test_duplicate_vector_ranks_first(self):
        rng = np.random.default_rng(12)
        base = rng.normal(size=5)
        table = exact_table(
            {"7": base, "8": base.copy(), "9": rng.normal(size=5), "10": rng.normal(size=5)}
        )
        ranked = expand_seed_set(table, ["7"], k=2)
        assert ranked[0][0] == "8"
        assert ranked[0][1] == pytest.approx(1.0)

    def test_seeds_never_returned(self):
        rng = np.random.default_rng(13)
        table = exact_table({str(v): rng.normal(size=4) for v in range(20)})
        ranked = expand_seed_set(table, ["1", "2", "3"], k=17)
        names = {t for t, _ in ranked}
        assert names.isdisjoint({"1", "2", "3"})

    def test_scope_restriction(self):
        rng = np.random.default_rng(14)
        table = exact_table({str(v): rng.normal(size=4) for v in range(20)})
        ranked = expand_seed_set(table, ["1"], k=5, scope=[str(v) for v in range(10)])
        assert all(int(t) < 10 for t, _ in ranked)
