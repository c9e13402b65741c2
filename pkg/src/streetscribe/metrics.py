"""Entity-level transcription scoring and group statistics.

A transcript counts as correct for an entity when the canonical spelling or
any accepted alias appears, after normalization, as a contiguous token run
inside the transcript. This is deliberately stricter than word error rate:
a transcript can be one harmless word off and still lose the street name,
or mangle every filler word and still keep it.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np

from .errors import ValidationError

if TYPE_CHECKING:
    from .corpus import EntitySpec

# Curly quotes show up in provider transcripts; treat them as apostrophes.
_APOSTROPHES = {"'", "‘", "’"}


def normalize_text(raw: str) -> str:
    """Uppercase, strip punctuation, collapse whitespace.

    Apostrophes between word characters are deleted (O'SHAUGHNESSY ->
    OSHAUGHNESSY); every other non-alphanumeric character becomes a space.
    """
    upper = raw.upper()
    out: list[str] = []
    for i, ch in enumerate(upper):
        if ch.isalnum():
            out.append(ch)
        elif ch in _APOSTROPHES:
            prev_ok = i > 0 and upper[i - 1].isalnum()
            next_ok = i + 1 < len(upper) and upper[i + 1].isalnum()
            if not (prev_ok and next_ok):
                out.append(" ")
            # intra-word apostrophe: drop it
        else:
            out.append(" ")
    return " ".join("".join(out).split())


def _tokens(text: str) -> tuple[str, ...]:
    return tuple(normalize_text(text).split())


def _contains_run(haystack: Sequence[str], needle: Sequence[str]) -> bool:
    """True when needle occurs as a contiguous subsequence of haystack."""
    n = len(needle)
    if n == 0 or n > len(haystack):
        return False
    return any(tuple(haystack[i : i + n]) == tuple(needle) for i in range(len(haystack) - n + 1))


@dataclass(frozen=True)
class MatchVerdict:
    """Outcome of matching one transcript against one entity."""

    correct: bool
    matched_form: str | None
    normalized_transcript: str

    def __post_init__(self) -> None:
        if self.correct != (self.matched_form is not None):
            raise ValidationError("matched_form must be present iff correct")


def match_entity(transcript: str, entity: "EntitySpec") -> MatchVerdict:
    """Alias-aware containment match of an entity inside a transcript.

    The canonical spelling wins ties over aliases; aliases are tried in
    catalog order.
    """
    normalized = normalize_text(transcript)
    haystack = tuple(normalized.split())
    for form in (entity.canonical_name, *entity.aliases):
        if _contains_run(haystack, _tokens(form)):
            return MatchVerdict(correct=True, matched_form=form, normalized_transcript=normalized)
    return MatchVerdict(correct=False, matched_form=None, normalized_transcript=normalized)


def entity_error_rate(verdicts: Sequence[MatchVerdict]) -> float:
    """Fraction of verdicts that failed to recover the entity."""
    if not verdicts:
        raise ValidationError("entity_error_rate requires at least one verdict")
    return sum(1 for v in verdicts if not v.correct) / len(verdicts)


def word_error_rate(reference: str, hypothesis: str) -> float:
    """Word-level edit distance over reference length, after normalization."""
    ref = _tokens(reference)
    hyp = _tokens(hypothesis)
    if not ref:
        raise ValidationError("word_error_rate requires a non-empty reference")
    return _levenshtein(ref, hyp) / len(ref)


def _levenshtein(a: Sequence[str], b: Sequence[str]) -> int:
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, wa in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, wb in enumerate(b, start=1):
            cost = 0 if wa == wb else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class GroupStat:
    """Accuracy of one stratum with a bootstrap confidence interval."""

    group_key: str
    n: int
    accuracy: float
    ci_low: float
    ci_high: float

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValidationError(f"group {self.group_key!r}: n must be >= 1")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValidationError(f"group {self.group_key!r}: accuracy outside [0, 1]")
        if not self.ci_low <= self.accuracy <= self.ci_high:
            raise ValidationError(f"group {self.group_key!r}: CI does not bracket accuracy")


def bootstrap_ci(
    values: Sequence[float],
    resamples: int = 10_000,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile bootstrap CI for the mean of 0/1 outcomes.

    Resamples n-with-replacement `resamples` times and returns the empirical
    ((1-level)/2, 1-(1-level)/2) quantiles of the resampled means.
    Deterministic for a given seed.
    """
    if len(values) == 0:
        raise ValidationError("bootstrap_ci requires a non-empty sample")
    if not 0.0 < level < 1.0:
        raise ValidationError("level must be strictly between 0 and 1")
    data = np.asarray(values, dtype=float)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(data), size=(resamples, len(data)))
    means = data[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    low, high = np.quantile(means, [alpha, 1.0 - alpha])
    return float(low), float(high)


def _group_of(row: Any, key: str | Callable[[Any], Any]) -> Any:
    if callable(key):
        return key(row)
    if isinstance(row, dict):
        if key not in row:
            raise ValidationError(f"row {row!r} is missing grouping attribute {key!r}")
        return row[key]
    try:
        return getattr(row, key)
    except AttributeError:
        raise ValidationError(f"row {row!r} is missing grouping attribute {key!r}") from None


def _correct_of(row: Any) -> bool:
    if isinstance(row, dict):
        if "correct" not in row:
            raise ValidationError(f"row {row!r} is missing 'correct'")
        return bool(row["correct"])
    try:
        return bool(row.correct)
    except AttributeError:
        raise ValidationError(f"row {row!r} is missing 'correct'") from None


def stratify(
    rows: Iterable[Any],
    key: str | Callable[[Any], Any],
    resamples: int = 10_000,
    level: float = 0.95,
    seed: int = 0,
) -> list[GroupStat]:
    """Group rows by a key and report per-group accuracy with bootstrap CIs.

    Rows may be mappings or objects; each must expose the grouping attribute
    and a boolean `correct`. Groups are returned sorted by key.
    """
    buckets: dict[str, list[int]] = {}
    for row in rows:
        group = str(_group_of(row, key))
        buckets.setdefault(group, []).append(1 if _correct_of(row) else 0)
    stats = []
    for group in sorted(buckets):
        outcomes = buckets[group]
        low, high = bootstrap_ci(outcomes, resamples=resamples, level=level, seed=seed)
        stats.append(
            GroupStat(
                group_key=group,
                n=len(outcomes),
                accuracy=sum(outcomes) / len(outcomes),
                ci_low=low,
                ci_high=high,
            )
        )
    return stats
