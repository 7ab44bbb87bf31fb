"""Survival metrics and attention diagnostics.

Harrell's concordance index, the Kaplan-Meier product-limit estimator, the
two-group log-rank test (chi-square tail via the complementary error
function, no statistics library), median-risk stratification and
cross-attention dispersion summaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BlockEmpty, NoComparablePairs, NoEvents


@dataclass
class KmCurve:
    times: np.ndarray  # sorted distinct event times
    survival: np.ndarray  # product-limit estimate after each event time
    at_risk: np.ndarray  # risk-set size at each event time


@dataclass
class LogRankResult:
    statistic: float  # chi-square with 1 degree of freedom
    p_value: float


@dataclass
class AttentionSummary:
    query_block: str
    key_block: str
    ranking: list[tuple[str, float]]  # (key token name, dispersion), descending


def _arrays(records):
    times = np.asarray([r.time for r in records], dtype=float)
    events = np.asarray([r.event for r in records], dtype=int)
    return times, events


def concordance_index(risks, records) -> float:
    """Harrell's C. A pair is comparable when the earlier time is an event
    and times differ, or when times tie with exactly one event (the event
    subject counts as earlier). Risk ties score one half."""
    times, events = _arrays(records)
    risks = np.asarray(risks, dtype=float)
    n = times.shape[0]
    if n < 2:
        raise NoComparablePairs("need at least two records")
    concordant = 0.0
    comparable = 0
    for i in range(n):
        for j in range(i + 1, n):
            if times[i] == times[j]:
                if events[i] + events[j] != 1:
                    continue
                early, late = (i, j) if events[i] == 1 else (j, i)
            elif times[i] < times[j]:
                if events[i] != 1:
                    continue
                early, late = i, j
            else:
                if events[j] != 1:
                    continue
                early, late = j, i
            comparable += 1
            if risks[early] > risks[late]:
                concordant += 1.0
            elif risks[early] == risks[late]:
                concordant += 0.5
    if comparable == 0:
        raise NoComparablePairs("no comparable pair of records")
    return concordant / comparable


def km_curve(records) -> KmCurve:
    """Product-limit survival estimate over the distinct event times."""
    times, events = _arrays(records)
    if times.size == 0:
        raise ValueError("no records")
    event_times = np.unique(times[events == 1])
    survival = []
    at_risk = []
    running = 1.0
    for t in event_times:
        n_risk = int((times >= t).sum())
        deaths = int(((times == t) & (events == 1)).sum())
        running *= 1.0 - deaths / n_risk
        survival.append(running)
        at_risk.append(n_risk)
    return KmCurve(event_times, np.asarray(survival), np.asarray(at_risk, dtype=int))


def chi2_1df_sf(statistic: float) -> float:
    """Upper tail of the chi-square(1) distribution via erfc."""
    return math.erfc(math.sqrt(statistic / 2.0))


def log_rank(group_a, group_b) -> LogRankResult:
    """Two-group log-rank test over the pooled distinct event times."""
    times_a, events_a = _arrays(group_a)
    times_b, events_b = _arrays(group_b)
    if times_a.size == 0 or times_b.size == 0:
        raise ValueError("both groups must be nonempty")
    times = np.concatenate([times_a, times_b])
    events = np.concatenate([events_a, events_b])
    in_a = np.concatenate([np.ones_like(times_a), np.zeros_like(times_b)])
    event_times = np.unique(times[events == 1])
    if event_times.size == 0:
        raise NoEvents("no observed event in either group")

    observed_a = 0.0
    expected_a = 0.0
    variance = 0.0
    for t in event_times:
        risk = times >= t
        n_total = int(risk.sum())
        n_a = int((risk & (in_a == 1)).sum())
        dying = (times == t) & (events == 1)
        d_total = int(dying.sum())
        d_a = int((dying & (in_a == 1)).sum())
        observed_a += d_a
        expected_a += d_total * n_a / n_total
        if n_total > 1:
            variance += (
                d_total
                * (n_a / n_total)
                * (1.0 - n_a / n_total)
                * (n_total - d_total)
                / (n_total - 1)
            )
    if variance == 0.0:
        return LogRankResult(0.0, 1.0)
    statistic = (observed_a - expected_a) ** 2 / variance
    return LogRankResult(float(statistic), chi2_1df_sf(float(statistic)))


def stratify_median(risks) -> list[str]:
    """Label each patient high/low against the cohort median; strictly above
    goes high, the median itself goes low."""
    risks = np.asarray(risks, dtype=float)
    if risks.size < 2:
        raise ValueError("need at least two risks to stratify")
    median = float(np.median(risks))
    return ["high" if r > median else "low" for r in risks]


def cross_attention_summary(
    attention,
    block_spans,
    key_names,
    query_block: str,
    key_block: str,
    query_validity=None,
    key_validity=None,
) -> AttentionSummary:
    """Rank the keys of one modality by how unevenly another modality's
    queries attend to them: per key token, the (population) standard
    deviation of its attention weights across the valid query rows.

    ``block_spans`` maps block name -> (start, stop) within the attention
    matrix; ``key_names`` names the key block's tokens in order.
    """
    attention = np.asarray(attention, dtype=float)
    if query_block not in block_spans or key_block not in block_spans:
        raise BlockEmpty(f"unknown block in ({query_block!r}, {key_block!r})")
    q_start, q_stop = block_spans[query_block]
    k_start, k_stop = block_spans[key_block]
    sub = attention[q_start:q_stop, k_start:k_stop]
    if query_validity is not None:
        sub = sub[np.asarray(query_validity, dtype=float) > 0.5]
    if sub.shape[0] == 0 or sub.shape[1] == 0:
        raise BlockEmpty(f"empty attention block {query_block!r} -> {key_block!r}")
    dispersion = sub.std(axis=0)
    if key_validity is not None:
        dispersion = np.where(np.asarray(key_validity, dtype=float) > 0.5, dispersion, -np.inf)
    names = list(key_names)
    if len(names) != dispersion.shape[0]:
        raise ValueError(f"{len(names)} key names for {dispersion.shape[0]} keys")
    order = np.lexsort((np.arange(dispersion.shape[0]), -dispersion))
    ranking = [(names[i], float(max(dispersion[i], 0.0))) for i in order if dispersion[i] > -np.inf]
    return AttentionSummary(query_block, key_block, ranking)
