"""Score thinking tokens by conditional importance and keep the top fraction.

The importance score of a thinking token is the drop in its per-token
perplexity when the final answer is prepended as conditioning context:

    score = PPL(token | preceding thinking)
          - PPL(token | condition, preceding thinking)

A large positive score marks a token made much more predictable by knowing
the answer. Given a retention ratio alpha, the top alpha fraction of tokens
by score is kept (ties broken toward earlier positions) and the kept surface
spans are concatenated in original order to form the compressed thinking
text. Long sequences can be split into segments and compressed iteratively,
each segment conditioned on the already-compressed prefix.

With ``conditional`` off the score degenerates to the plain unconditional
perplexity, i.e. the classic keep-the-most-surprising-tokens baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence

from .backends import LogprobBackend, LogprobRequest, ppl_of
from .dataset import CompressedInstance, CotInstance
from .errors import BackendError, BackendUnavailable, ConfigError, CtsError, ScoringError

DEFAULT_CONDITION_TEMPLATE = "The correct answer is: {answer}\n"

SCORE_SPACES = ("ppl_diff", "bits_diff")
SELECTION_SCOPES = ("global", "per_segment")

# A segment boundary may snap back to a span ending in whitespace or
# sentence punctuation.
_BOUNDARY_PUNCT = ".!?。！？"


@dataclass
class SelectionConfig:
    """Knobs for scoring and selection.

    alpha: fraction of thinking tokens to retain, in (0, 1].
    conditional: score against the answer-conditioned context; off gives the
        pure-perplexity baseline.
    condition_template: text prepended as conditioning context; must contain
        {answer} unless empty ({problem} optional). An empty template is an
        explicit no-op condition.
    segment_budget / boundary_slack: maximum thinking tokens per segment and
        how far a cut may move back to land on a clean span boundary.
    score_space: "ppl_diff" (difference of perplexities) or "bits_diff"
        (difference of self-information).
    selection_scope: "global" ranks all tokens together; "per_segment"
        selects the top fraction inside each segment, scoring segment j
        against the already-compressed earlier segments.
    iterative_original_prefix: in per_segment scope, condition each segment
        on the original (uncompressed) preceding thinking instead of the
        compressed prefix.
    """

    alpha: float
    conditional: bool = True
    condition_template: str = DEFAULT_CONDITION_TEMPLATE
    segment_budget: int = 512
    boundary_slack: int = 32
    score_space: str = "ppl_diff"
    selection_scope: str = "global"
    iterative_original_prefix: bool = False

    def validate(self) -> None:
        if not (0.0 < self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha!r}")
        if self.segment_budget < 1:
            raise ConfigError(f"segment_budget must be >= 1, got {self.segment_budget!r}")
        if not (0 <= self.boundary_slack < self.segment_budget):
            raise ConfigError(
                f"boundary_slack must be in [0, segment_budget), got {self.boundary_slack!r}"
            )
        if self.score_space not in SCORE_SPACES:
            raise ConfigError(f"score_space must be one of {SCORE_SPACES}, got {self.score_space!r}")
        if self.selection_scope not in SELECTION_SCOPES:
            raise ConfigError(
                f"selection_scope must be one of {SELECTION_SCOPES}, got {self.selection_scope!r}"
            )
        if self.conditional and self.condition_template and "{answer}" not in self.condition_template:
            raise ConfigError("condition_template must contain {answer} (or be empty) when conditional")


@dataclass
class TokenScoreRow:
    """Per-token alignment of id, surface span, both perplexities, and score."""

    position: int
    token: int
    span: str
    ppl_uncond: float
    ppl_cond: float
    score: float


@dataclass
class Segment:
    """Half-open token index range [start, end) over the thinking tokens."""

    start: int
    end: int
    ordinal: int


@dataclass
class SelectionResult:
    threshold: float
    kept_mask: list[bool]
    kept_count: int


@dataclass
class ScoringContexts:
    """Token id contexts for the two scoring passes.

    The thinking ids occupy [uncond_start, uncond_start + n) in uncond_ids
    and [cond_start, cond_start + n) in cond_ids, bit-identical in both:
    positions align one-to-one between the passes.
    """

    thinking_ids: list[int]
    thinking_spans: list[str]
    uncond_ids: list[int]
    uncond_start: int
    cond_ids: list[int]
    cond_start: int


def render_condition(config: SelectionConfig, instance: CotInstance) -> str:
    if not config.conditional:
        return ""
    try:
        return config.condition_template.format_map(
            {"answer": instance.answer, "problem": instance.problem}
        )
    except (KeyError, IndexError, ValueError) as exc:
        raise ConfigError(f"bad condition template {config.condition_template!r}: {exc}") from exc


def build_contexts(
    instance: CotInstance, config: SelectionConfig, backend: LogprobBackend
) -> ScoringContexts:
    """Tokenize the thinking text once and assemble both scoring contexts."""
    config.validate()
    tokens = backend.tokenize(instance.thinking)
    if not tokens:
        raise ScoringError(
            f"instance {instance.id}: thinking text produced no tokens", instance.id
        )
    ids = [t for t, _ in tokens]
    spans = [s for _, s in tokens]
    condition = render_condition(config, instance)
    if condition:
        prefix = [t for t, _ in backend.tokenize(condition)]
    else:
        prefix = []
    return ScoringContexts(
        thinking_ids=ids,
        thinking_spans=spans,
        uncond_ids=ids,
        uncond_start=0,
        cond_ids=prefix + ids,
        cond_start=len(prefix),
    )


def _diff(a: float, b: float) -> float:
    # equal values (including inf == inf) carry no shift signal
    if a == b:
        return 0.0
    return a - b


def _make_row(
    position: int, token: int, span: str, lp_uncond: float, lp_cond: float, config: SelectionConfig
) -> TokenScoreRow:
    ppl_u = ppl_of(lp_uncond)
    if not config.conditional:
        score = ppl_u if config.score_space == "ppl_diff" else math.log2(ppl_u)
        return TokenScoreRow(position, token, span, ppl_u, ppl_u, score)
    ppl_c = ppl_of(lp_cond)
    if config.score_space == "ppl_diff":
        score = _diff(ppl_u, ppl_c)
    else:
        score = _diff(math.log2(ppl_u), math.log2(ppl_c))
    return TokenScoreRow(position, token, span, ppl_u, ppl_c, score)


def _score_span(
    instance_id: str,
    config: SelectionConfig,
    backend: LogprobBackend,
    uncond_ids: Sequence[int],
    uncond_start: int,
    cond_ids: Sequence[int],
    cond_start: int,
    spans: Sequence[str],
    first_position: int,
) -> list[TokenScoreRow]:
    n = len(spans)
    reqs = [LogprobRequest(uncond_ids, uncond_start, uncond_start + n)]
    if config.conditional:
        reqs.append(LogprobRequest(cond_ids, cond_start, cond_start + n))
    try:
        responses = backend.logprobs_batch(reqs)
    except BackendUnavailable:
        raise
    except BackendError as exc:
        raise ScoringError(
            f"instance {instance_id}: backend failed scoring thinking tokens "
            f"[{first_position}, {first_position + n}): {exc}",
            instance_id,
            (first_position, first_position + n),
        ) from exc
    lp_uncond = responses[0].logprobs_bits
    lp_cond = responses[1].logprobs_bits if config.conditional else lp_uncond
    return [
        _make_row(
            first_position + i,
            uncond_ids[uncond_start + i],
            spans[i],
            lp_uncond[i],
            lp_cond[i],
            config,
        )
        for i in range(n)
    ]


def score_tokens(
    instance: CotInstance, config: SelectionConfig, backend: LogprobBackend
) -> list[TokenScoreRow]:
    """Score every thinking token against the full (unsegmented) contexts."""
    ctx = build_contexts(instance, config, backend)
    return _score_span(
        instance.id,
        config,
        backend,
        ctx.uncond_ids,
        ctx.uncond_start,
        ctx.cond_ids,
        ctx.cond_start,
        ctx.thinking_spans,
        first_position=0,
    )


def segment_thinking(n_tokens: int, spans: Sequence[str], config: SelectionConfig) -> list[Segment]:
    """Partition [0, n) into contiguous segments of at most segment_budget tokens.

    Oversized cuts move backward up to boundary_slack positions to the
    nearest boundary whose preceding span ends with whitespace or sentence
    punctuation; with no candidate the cut stays at the budget.
    """
    if n_tokens < 1:
        raise ConfigError("cannot segment an empty token sequence")
    budget = config.segment_budget
    slack = config.boundary_slack
    segments: list[Segment] = []
    start = 0
    while n_tokens - start > budget:
        end = start + budget
        cut = end
        lowest = max(start + 1, end - slack)
        for j in range(end - 1, lowest - 1, -1):
            if _ends_on_boundary(spans[j - 1]):
                cut = j
                break
        segments.append(Segment(start, cut, len(segments)))
        start = cut
    segments.append(Segment(start, n_tokens, len(segments)))
    return segments


def _ends_on_boundary(span: str) -> bool:
    if not span:
        return False
    last = span[-1]
    return last.isspace() or last in _BOUNDARY_PUNCT


def kept_count_for(alpha: float, n: int) -> int:
    """Number of tokens to keep: max(1, round-half-up(alpha * n)), capped at n.

    Decimal arithmetic on the printed value of alpha keeps the half-up rule
    exact and platform-independent (0.15 * 10 rounds to 2, not 1).
    """
    k = int((Decimal(str(alpha)) * n).to_integral_value(rounding=ROUND_HALF_UP))
    return min(n, max(1, k))


def _top_positions(rows: Sequence[TokenScoreRow], k: int) -> list[int]:
    ranked = sorted(rows, key=lambda r: (-r.score, r.position))
    return [r.position for r in ranked[:k]]


def select_tokens(
    rows: Sequence[TokenScoreRow], segments: Sequence[Segment], config: SelectionConfig
) -> SelectionResult:
    """Keep the top alpha fraction by (score desc, position asc).

    Global scope ranks all rows together; per_segment applies the same rule
    inside each segment. At least one token is kept per scope unit. The
    reported threshold is the lowest kept score.
    """
    if not rows:
        raise ConfigError("select_tokens requires at least one scored row")
    by_position = sorted(rows, key=lambda r: r.position)
    n = len(by_position)
    mask = [False] * n
    if config.selection_scope == "global":
        for pos in _top_positions(by_position, kept_count_for(config.alpha, n)):
            mask[pos] = True
    else:
        for seg in segments:
            seg_rows = by_position[seg.start : seg.end]
            for pos in _top_positions(seg_rows, kept_count_for(config.alpha, len(seg_rows))):
                mask[pos] = True
    kept_count = sum(mask)
    threshold = min(by_position[i].score for i in range(n) if mask[i])
    return SelectionResult(threshold=threshold, kept_mask=mask, kept_count=kept_count)


def _compress_iterative(
    instance: CotInstance,
    config: SelectionConfig,
    backend: LogprobBackend,
    ids: list[int],
    spans: list[str],
    segments: list[Segment],
) -> tuple[list[TokenScoreRow], SelectionResult]:
    condition = render_condition(config, instance)
    cond_prefix = [t for t, _ in backend.tokenize(condition)] if condition else []
    mask = [False] * len(ids)
    rows: list[TokenScoreRow] = []
    kept_prefix: list[int] = []
    for seg in segments:
        seg_ids = ids[seg.start : seg.end]
        history = ids[: seg.start] if config.iterative_original_prefix else kept_prefix
        uncond_ids = history + seg_ids
        cond_ids = cond_prefix + uncond_ids
        seg_rows = _score_span(
            instance.id,
            config,
            backend,
            uncond_ids,
            len(history),
            cond_ids,
            len(cond_prefix) + len(history),
            spans[seg.start : seg.end],
            first_position=seg.start,
        )
        rows.extend(seg_rows)
        for pos in _top_positions(seg_rows, kept_count_for(config.alpha, len(seg_rows))):
            mask[pos] = True
        kept_prefix = kept_prefix + [ids[p] for p in range(seg.start, seg.end) if mask[p]]
    kept_count = sum(mask)
    threshold = min(rows[i].score for i in range(len(rows)) if mask[i])
    return rows, SelectionResult(threshold=threshold, kept_mask=mask, kept_count=kept_count)


def compress_instance(
    instance: CotInstance, config: SelectionConfig, backend: LogprobBackend
) -> tuple[CompressedInstance, list[TokenScoreRow], SelectionResult]:
    """Run the full pipeline for one instance: tokenize, score, select, join.

    Deterministic end to end for a fixed (instance, config, backend). The
    compressed thinking text is the concatenation of kept spans in original
    order; actual_ratio is exactly kept_count / original_count.
    """
    config.validate()
    try:
        tokens = backend.tokenize(instance.thinking)
    except BackendUnavailable:
        raise
    except CtsError as exc:
        raise ScoringError(
            f"instance {instance.id}: cannot tokenize thinking: {exc}", instance.id
        ) from exc
    if not tokens:
        raise ScoringError(f"instance {instance.id}: thinking text produced no tokens", instance.id)
    ids = [t for t, _ in tokens]
    spans = [s for _, s in tokens]
    segments = segment_thinking(len(ids), spans, config)

    if config.selection_scope == "per_segment" and len(segments) > 1:
        rows, selection = _compress_iterative(instance, config, backend, ids, spans, segments)
    else:
        rows = score_tokens(instance, config, backend)
        selection = select_tokens(rows, segments, config)

    compressed = "".join(span for span, keep in zip(spans, selection.kept_mask) if keep)
    record = CompressedInstance(
        id=instance.id,
        problem=instance.problem,
        compressed_thinking=compressed,
        answer=instance.answer,
        nominal_ratio=config.alpha,
        actual_ratio=selection.kept_count / len(ids),
        kept_count=selection.kept_count,
        original_count=len(ids),
        extras=dict(instance.extras),
    )
    return record, rows, selection


def score_rows_to_dicts(instance_id: str, rows: Sequence[TokenScoreRow], mask: Sequence[bool]) -> list[dict]:
    """Rows of the per-token score dump: one object per thinking token."""
    return [
        {
            "instance_id": instance_id,
            "position": row.position,
            "span": row.span,
            "ppl_uncond": row.ppl_uncond,
            "ppl_cond": row.ppl_cond,
            "score": row.score,
            "kept": bool(mask[row.position]),
        }
        for row in rows
    ]
