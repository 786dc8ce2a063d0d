import json
import math
import random

import pytest

from cts.backends import ToyBackend, ToyLmSpec
from cts.dataset import CotInstance, compressed_to_dict
from cts.errors import ConfigError, ScoringError
from cts.selector import (
    SelectionConfig,
    Segment,
    TokenScoreRow,
    build_contexts,
    compress_instance,
    kept_count_for,
    score_tokens,
    segment_thinking,
    select_tokens,
)

from conftest import uniform_spec

CONDITION = "{answer}:"  # renders inside the toy vocabularies used here


def config(**overrides) -> SelectionConfig:
    fields = dict(alpha=0.5, conditional=True, condition_template=CONDITION)
    fields.update(overrides)
    return SelectionConfig(**fields)


def instance(thinking: str, answer: str = "42", problem: str = "", iid: str = "t-0") -> CotInstance:
    return CotInstance(id=iid, problem=problem, thinking=thinking, answer=answer)


def rows_from(scores: list[float]) -> list[TokenScoreRow]:
    return [TokenScoreRow(i, 0, "x", 1.0, 1.0, s) for i, s in enumerate(scores)]


def one_segment(n: int) -> list[Segment]:
    return [Segment(0, n, 0)]


class RecordingBackend:
    """Delegates to a ToyBackend while logging every scoring request."""

    def __init__(self, inner: ToyBackend):
        self.inner = inner
        self.requests: list[tuple[tuple[int, ...], int, int]] = []

    def tokenize(self, text):
        return self.inner.tokenize(text)

    def logprobs(self, request):
        self.requests.append((tuple(request.context), request.start, request.end))
        return self.inner.logprobs(request)

    def logprobs_batch(self, requests_):
        return [self.logprobs(r) for r in requests_]


class TestBuildContexts:
    def test_unconditional_contexts_are_equal(self, shift_backend):
        ctx = build_contexts(instance("ABC"), config(conditional=False), shift_backend)
        assert ctx.cond_ids == ctx.uncond_ids
        assert ctx.cond_start == ctx.uncond_start == 0

    def test_condition_prefix_prepended(self):
        backend = ToyBackend(uniform_spec(list("ANS: 42")))
        cfg = config(condition_template="ANS: {answer} ")
        ctx = build_contexts(instance("AA"), cfg, backend)
        prefix = [t for t, _ in backend.tokenize("ANS: 42 ")]
        thinking = [t for t, _ in backend.tokenize("AA")]
        assert ctx.cond_ids == prefix + thinking
        assert ctx.cond_start == len(prefix)

    def test_thinking_ids_bit_identical_between_contexts(self, shift_backend):
        ctx = build_contexts(instance("AB C"), config(), shift_backend)
        n = len(ctx.thinking_ids)
        assert ctx.uncond_ids[ctx.uncond_start : ctx.uncond_start + n] == ctx.thinking_ids
        assert ctx.cond_ids[ctx.cond_start : ctx.cond_start + n] == ctx.thinking_ids

    def test_template_without_answer_placeholder_rejected(self, shift_backend):
        cfg = config(condition_template="no placeholder here")
        with pytest.raises(ConfigError):
            build_contexts(instance("A"), cfg, shift_backend)

    def test_empty_template_is_explicit_no_op(self, shift_backend):
        ctx = build_contexts(instance("AB"), config(condition_template=""), shift_backend)
        assert ctx.cond_ids == ctx.uncond_ids

    def test_unknown_placeholder_rejected(self, shift_backend):
        cfg = config(condition_template="{answer}{oops}")
        with pytest.raises(ConfigError):
            build_contexts(instance("A"), cfg, shift_backend)

    def test_empty_thinking_rejected(self, shift_backend):
        with pytest.raises(ScoringError):
            build_contexts(instance(""), config(), shift_backend)


class TestScoreTokens:
    def test_quarter_vs_half_scores_two(self, shift_backend):
        # P(A | START) = 0.25 -> ppl 4; P(A | ":") = 0.5 -> ppl 2; score 4 - 2 = 2
        rows = score_tokens(instance("A"), config(), shift_backend)
        assert rows[0].ppl_uncond == 4.0
        assert rows[0].ppl_cond == 2.0
        assert rows[0].score == 2.0

    def test_condition_with_no_effect_gives_all_zero(self):
        backend = ToyBackend(uniform_spec(list("AB:42")))
        rows = score_tokens(instance("ABAB"), config(), backend)
        assert all(r.score == 0.0 for r in rows)
        assert all(r.ppl_uncond == r.ppl_cond for r in rows)

    def test_six_token_instance_matches_table_arithmetic(self, shift_backend):
        # hand-computed from the shift table, thinking "ABCABC", condition "42:":
        #   pos0 P(A|START)=0.25 vs P(A|:)=0.5 -> 4, 2, score 2
        #   pos1 P(B|A)=0.5 both -> 2, 2, 0       pos2 P(C|B)=0.5 -> 2, 2, 0
        #   pos3 P(A|C)=0.4 -> 2.5, 2.5, 0        pos4, pos5 repeat pos1, pos2
        rows = score_tokens(instance("ABCABC"), config(), shift_backend)
        expected = [(4.0, 2.0, 2.0), (2.0, 2.0, 0.0), (2.0, 2.0, 0.0),
                    (2.5, 2.5, 0.0), (2.0, 2.0, 0.0), (2.0, 2.0, 0.0)]
        assert len(rows) == 6
        for row, (ppl_u, ppl_c, score) in zip(rows, expected):
            assert row.ppl_uncond == pytest.approx(ppl_u, abs=1e-12)
            assert row.ppl_cond == pytest.approx(ppl_c, abs=1e-12)
            assert row.score == pytest.approx(score, abs=1e-12)

    def test_unconditional_score_is_plain_perplexity(self, shift_backend):
        rows = score_tokens(instance("ABCABC"), config(conditional=False), shift_backend)
        for row in rows:
            assert row.ppl_cond == row.ppl_uncond
            assert row.score == row.ppl_uncond

    def test_bits_diff_space(self, shift_backend):
        rows = score_tokens(instance("A"), config(score_space="bits_diff"), shift_backend)
        # log2(4) - log2(2) = 1 bit of shift
        assert rows[0].score == pytest.approx(1.0, abs=1e-12)

    def test_bits_diff_unconditional_is_self_information(self, shift_backend):
        rows = score_tokens(
            instance("A"), config(conditional=False, score_space="bits_diff"), shift_backend
        )
        assert rows[0].score == pytest.approx(2.0, abs=1e-12)  # log2(ppl 4)

    def test_zero_probability_token_ranks_maximally_surprising(self):
        spec = ToyLmSpec(
            vocabulary=["A", "B"],
            table={"START": {"A": 1.0}, "A": {"A": 1.0}, "B": {"A": 0.5, "B": 0.5}},
        )
        backend = ToyBackend(spec)
        rows = score_tokens(instance("AB", answer="A"), config(condition_template=""), backend)
        assert rows[1].ppl_uncond == math.inf
        # identical impossible context in both passes carries no shift signal
        assert rows[1].score == 0.0

    def test_infinite_uncond_finite_cond_scores_positive_infinity(self):
        # conditioning makes an impossible token possible -> maximal importance
        spec = ToyLmSpec(
            vocabulary=["A", "B", ":"],
            table={
                "START": {"A": 1.0},
                ":": {"A": 0.5, "B": 0.5},
                "A": {"A": 0.5, "B": 0.5},
                "B": {"A": 1.0},
            },
        )
        backend = ToyBackend(spec)
        rows = score_tokens(instance("BA", answer=""), config(condition_template="{answer}:"), backend)
        assert rows[0].ppl_uncond == math.inf
        assert rows[0].ppl_cond == 2.0
        assert rows[0].score == math.inf

    def test_zero_condition_reduction_is_exact(self, shift_backend):
        rows = score_tokens(instance("ABCABC"), config(condition_template=""), shift_backend)
        assert all(r.ppl_cond == r.ppl_uncond for r in rows)
        assert all(r.score == 0.0 for r in rows)

    def test_backend_error_carries_instance_id(self, shift_backend):
        bad = instance("ABCX")  # X not in vocabulary
        with pytest.raises(ScoringError) as exc:
            compress_instance(bad, config(), shift_backend)
        assert "t-0" in str(exc.value)


class TestSegmentThinking:
    def test_under_budget_single_segment(self):
        segs = segment_thinking(10, ["x"] * 10, config(segment_budget=512))
        assert segs == [Segment(0, 10, 0)]

    def test_forced_split_without_candidates(self):
        segs = segment_thinking(1000, ["x"] * 1000, config(segment_budget=512, boundary_slack=32))
        assert [(s.start, s.end) for s in segs] == [(0, 512), (512, 1000)]

    def test_snaps_to_whitespace_boundary(self):
        # oracle: last qualifying cut in [480, 512) is 500 (span 499 ends in space)
        spans = ["x"] * 520
        spans[499] = "x "
        segs = segment_thinking(520, spans, config(segment_budget=512, boundary_slack=32))
        assert [(s.start, s.end) for s in segs] == [(0, 500), (500, 520)]

    def test_prefers_latest_qualifying_boundary(self):
        spans = ["x"] * 520
        spans[489] = "x."
        spans[505] = "x\n"
        segs = segment_thinking(520, spans, config(segment_budget=512, boundary_slack=32))
        assert segs[0].end == 506

    def test_candidate_outside_slack_ignored(self):
        spans = ["x"] * 520
        spans[470] = "x "  # cut 471 < 512 - 32
        segs = segment_thinking(520, spans, config(segment_budget=512, boundary_slack=32))
        assert [(s.start, s.end) for s in segs] == [(0, 512), (512, 520)]

    def test_partition_properties_random(self):
        rng = random.Random(11)
        for _ in range(100):
            n = rng.randint(1, 400)
            budget = rng.randint(1, 60)
            slack = rng.randint(0, budget - 1)
            spans = [rng.choice(["x", "x ", "y.", "z"]) for _ in range(n)]
            segs = segment_thinking(n, spans, config(segment_budget=budget, boundary_slack=slack))
            assert segs[0].start == 0
            assert segs[-1].end == n
            for a, b in zip(segs, segs[1:]):
                assert a.end == b.start
            assert all(s.end - s.start >= 1 for s in segs)
            assert all(s.end - s.start <= budget for s in segs)
            assert [s.ordinal for s in segs] == list(range(len(segs)))


class TestSelectTokens:
    def test_distinct_scores_keep_top_half(self):
        rows = rows_from([1, 2, 3, 4, 5, 6, 7, 8, 9, 10])
        result = select_tokens(rows, one_segment(10), config(alpha=0.5))
        assert [i for i, k in enumerate(result.kept_mask) if k] == [5, 6, 7, 8, 9]
        assert result.threshold == 6
        assert result.kept_count == 5

    def test_alpha_one_keeps_everything(self):
        rows = rows_from([3.0, 1.0, 2.0])
        result = select_tokens(rows, one_segment(3), config(alpha=1.0))
        assert result.kept_mask == [True, True, True]

    def test_all_equal_scores_tie_break_by_position(self):
        rows = rows_from([7.0] * 10)
        result = select_tokens(rows, one_segment(10), config(alpha=0.5))
        assert [i for i, k in enumerate(result.kept_mask) if k] == [0, 1, 2, 3, 4]

    def test_minimum_one_token_kept(self):
        rows = rows_from([1.0, 2.0, 3.0])
        result = select_tokens(rows, one_segment(3), config(alpha=0.01))
        assert result.kept_count == 1

    def test_round_half_up(self):
        assert kept_count_for(0.5, 10) == 5
        assert kept_count_for(0.15, 10) == 2
        assert kept_count_for(0.25, 10) == 3  # 2.5 rounds up
        assert kept_count_for(0.7, 10) == 7
        assert kept_count_for(0.29, 100) == 29
        assert kept_count_for(1.0, 7) == 7
        assert kept_count_for(0.01, 5) == 1  # floor is the minimum retention

    def test_per_segment_scope_selects_within_each_segment(self):
        rows = rows_from([10, 9, 8, 7, 1, 2, 3, 4])
        segments = [Segment(0, 4, 0), Segment(4, 8, 1)]
        cfg = config(alpha=0.5, selection_scope="per_segment")
        result = select_tokens(rows, segments, cfg)
        assert [i for i, k in enumerate(result.kept_mask) if k] == [0, 1, 6, 7]

    def test_global_scope_ignores_segments(self):
        rows = rows_from([10, 9, 8, 7, 1, 2, 3, 4])
        segments = [Segment(0, 4, 0), Segment(4, 8, 1)]
        result = select_tokens(rows, segments, config(alpha=0.5))
        assert [i for i, k in enumerate(result.kept_mask) if k] == [0, 1, 2, 3]

    def test_nesting_under_increasing_alpha(self):
        rng = random.Random(3)
        for trial in range(30):
            n = rng.randint(1, 80)
            scores = [rng.choice([rng.random(), 0.5]) for _ in range(n)]  # include ties
            rows = rows_from(scores)
            previous: set[int] = set()
            for alpha in (0.1, 0.3, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0):
                result = select_tokens(rows, one_segment(n), config(alpha=alpha))
                kept = {i for i, k in enumerate(result.kept_mask) if k}
                assert previous <= kept
                previous = kept

    def test_exact_count_bound(self):
        rng = random.Random(5)
        for _ in range(50):
            n = rng.randint(1, 300)
            alpha = rng.choice([0.5, 0.6, 0.7, 0.8, 0.9])
            k = kept_count_for(alpha, n)
            assert abs(k / n - alpha) <= 0.5 / n + 1.0 / n

    def test_empty_rows_rejected(self):
        with pytest.raises(ConfigError):
            select_tokens([], one_segment(0), config())


class TestCompressInstance:
    def test_alpha_one_is_identity(self, shift_backend):
        inst = instance("ABC AB C CAB")
        record, _, _ = compress_instance(inst, config(alpha=1.0), shift_backend)
        assert record.compressed_thinking == inst.thinking
        assert record.actual_ratio == 1.0
        assert record.kept_count == record.original_count

    def test_ten_token_instance_matches_full_sort_oracle(self, shift_backend):
        inst = instance("ABCABCABCA")
        cfg = config(alpha=0.5)
        record, rows, selection = compress_instance(inst, cfg, shift_backend)
        # brute force: rank every position by (score desc, position asc), keep 5
        order = sorted(range(10), key=lambda i: (-rows[i].score, i))
        kept = sorted(order[:5])
        expected = "".join(inst.thinking[i] for i in kept)
        assert record.compressed_thinking == expected
        assert record.kept_count == 5
        assert record.actual_ratio == 0.5
        assert [i for i, k in enumerate(selection.kept_mask) if k] == kept

    def test_conditioning_noop_table_gives_byte_identical_outputs(self):
        backend = ToyBackend(uniform_spec(list("AB:42")))
        inst = instance("ABABAB")
        rec_cond, _, _ = compress_instance(inst, config(conditional=True), backend)
        rec_uncond, _, _ = compress_instance(inst, config(conditional=False), backend)
        assert json.dumps(compressed_to_dict(rec_cond)) == json.dumps(compressed_to_dict(rec_uncond))

    def test_kept_spans_form_subsequence(self, shift_backend):
        rng = random.Random(17)
        for _ in range(20):
            thinking = "".join(rng.choice("ABC ") for _ in range(rng.randint(1, 40)))
            inst = instance(thinking)
            record, _, sel = compress_instance(inst, config(alpha=rng.choice([0.3, 0.5, 0.8])), shift_backend)
            spans = [s for _, s in shift_backend.tokenize(thinking)]
            rebuilt = "".join(s for s, keep in zip(spans, sel.kept_mask) if keep)
            assert record.compressed_thinking == rebuilt
            it = iter(thinking)
            assert all(ch in it for ch in record.compressed_thinking)

    def test_deterministic_across_runs(self, shift_backend):
        inst = instance("ABC ABCA B")
        cfg = config(alpha=0.6)
        first = compress_instance(inst, cfg, shift_backend)
        second = compress_instance(inst, cfg, shift_backend)
        assert first[0] == second[0]
        assert first[1] == second[1]
        assert first[2] == second[2]

    def test_sign_consistency_between_score_spaces(self, shift_backend):
        rng = random.Random(23)
        for _ in range(10):
            thinking = "".join(rng.choice("ABC") for _ in range(rng.randint(2, 30)))
            rows_ppl = score_tokens(instance(thinking), config(score_space="ppl_diff"), shift_backend)
            rows_bits = score_tokens(instance(thinking), config(score_space="bits_diff"), shift_backend)
            for a, b in zip(rows_ppl, rows_bits):
                sign = lambda x: (x > 0) - (x < 0)
                assert sign(a.score) == sign(b.score)

    def test_extras_carried_through(self, shift_backend):
        inst = CotInstance("x", "p", "ABC", "42", extras={"k": 1})
        record, _, _ = compress_instance(inst, config(), shift_backend)
        assert record.extras == {"k": 1}

    def test_invalid_alpha_rejected(self, shift_backend):
        for alpha in (0.0, -0.5, 1.5):
            with pytest.raises(ConfigError):
                compress_instance(instance("A"), config(alpha=alpha), shift_backend)


class TestIterativeSegments:
    def test_segment_two_conditions_on_kept_prefix(self):
        backend = RecordingBackend(ToyBackend(uniform_spec(list("abcdefgh"))))
        inst = instance("abcdefgh", answer="")
        cfg = config(
            alpha=0.5,
            condition_template="",
            selection_scope="per_segment",
            segment_budget=4,
            boundary_slack=0,
        )
        _, _, selection = compress_instance(inst, cfg, backend)
        ids = [t for t, _ in backend.tokenize("abcdefgh")]
        # zero condition shift -> position tie-break keeps the first half
        assert [i for i, k in enumerate(selection.kept_mask) if k] == [0, 1, 4, 5]
        seg2_scoring = [r for r in backend.requests if r[1] == 2 and r[2] == 6]
        assert seg2_scoring, "second segment was not scored against a 2-token prefix"
        kept_prefix = tuple(ids[:2])
        for context, start, end in seg2_scoring:
            assert context == kept_prefix + tuple(ids[4:8])

    def test_original_prefix_flag_restores_full_history(self):
        backend = RecordingBackend(ToyBackend(uniform_spec(list("abcdefgh"))))
        inst = instance("abcdefgh", answer="")
        cfg = config(
            alpha=0.5,
            condition_template="",
            selection_scope="per_segment",
            segment_budget=4,
            boundary_slack=0,
            iterative_original_prefix=True,
        )
        compress_instance(inst, cfg, backend)
        ids = [t for t, _ in backend.tokenize("abcdefgh")]
        seg2_scoring = [r for r in backend.requests if r[1] == 4 and r[2] == 8]
        assert seg2_scoring
        for context, start, end in seg2_scoring:
            assert context == tuple(ids)

    def test_prefix_flavor_changes_selection_on_crafted_table(self):
        # Segment 1 drops its tail token, so the kept prefix ends in "b" while
        # the original prefix ends in "d"; P(c | b) = 0.5 but P(c | d) = 0.05,
        # which flips whether position 4 survives unconditional ranking.
        vocab = ["a", "b", "c", "d"]
        uniform = {t: 0.25 for t in vocab}
        table = {
            "START": {"a": 0.1, "b": 0.3, "c": 0.3, "d": 0.3},
            "a": {"a": 0.2, "b": 0.2, "c": 0.3, "d": 0.3},
            "b": {"a": 0.1, "b": 0.2, "c": 0.5, "d": 0.2},
            "c": {"a": 0.05, "b": 0.05, "d": 0.9, "c": 0.0},
            "d": {"a": 0.4, "b": 0.4, "c": 0.05, "d": 0.15},
        }
        backend = ToyBackend(ToyLmSpec(vocabulary=vocab, table=table))
        inst = instance("abcdcabd", answer="")
        base = dict(
            alpha=0.5,
            conditional=False,
            condition_template="",
            selection_scope="per_segment",
            segment_budget=4,
            boundary_slack=0,
        )
        _, _, sel_kept = compress_instance(inst, config(**base), backend)
        _, _, sel_orig = compress_instance(
            inst, config(**base, iterative_original_prefix=True), backend
        )
        assert sel_kept.kept_mask != sel_orig.kept_mask

    def test_single_segment_per_segment_equals_global(self, shift_backend):
        inst = instance("ABCABC")
        rec_global, _, _ = compress_instance(inst, config(alpha=0.5), shift_backend)
        rec_seg, _, _ = compress_instance(
            inst, config(alpha=0.5, selection_scope="per_segment"), shift_backend
        )
        assert rec_global == rec_seg
