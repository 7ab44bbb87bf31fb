import numpy as np
import pytest

from protosurv.errors import BlockEmpty, NoComparablePairs, NoEvents
from protosurv.evaluation import (
    chi2_1df_sf,
    concordance_index,
    cross_attention_summary,
    km_curve,
    log_rank,
    stratify_median,
)
from protosurv.survival import SurvivalRecord


def _rec(times, events):
    return [SurvivalRecord(f"p{i}", float(t), int(e)) for i, (t, e) in enumerate(zip(times, events))]


def brute_force_cindex(risks, times, events):
    """All-pairs oracle, written directly from the comparability rules."""
    concordant = 0.0
    comparable = 0
    n = len(risks)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if times[i] < times[j] and events[i] == 1:
                pass  # i observed first
            elif times[i] == times[j] and events[i] == 1 and events[j] == 0:
                pass  # tied time, the event subject counts as earlier
            else:
                continue
            comparable += 1
            if risks[i] > risks[j]:
                concordant += 1
            elif risks[i] == risks[j]:
                concordant += 0.5
    return concordant / comparable


# ---------------------------------------------------------------------------
# concordance
# ---------------------------------------------------------------------------

def test_cindex_perfect_concordance():
    assert concordance_index([3.0, 2.0, 1.0], _rec([1, 2, 3], [1, 1, 1])) == 1.0


def test_cindex_perfect_discordance():
    assert concordance_index([1.0, 2.0, 3.0], _rec([1, 2, 3], [1, 1, 1])) == 0.0


def test_cindex_risk_tie_hand_case():
    assert abs(concordance_index([2.0, 2.0, 1.0], _rec([1, 2, 3], [1, 1, 1])) - 5.0 / 6.0) < 1e-15


def test_cindex_constant_risks_give_half():
    assert concordance_index([1.0, 1.0, 1.0], _rec([1, 2, 3], [1, 1, 1])) == 0.5


def test_cindex_no_comparable_pairs():
    with pytest.raises(NoComparablePairs):
        concordance_index([1.0, 2.0], _rec([1, 2], [0, 0]))


def test_cindex_tied_time_mixed_event_convention():
    # equal times, one event: the event subject counts as earlier
    assert concordance_index([2.0, 1.0], _rec([5, 5], [1, 0])) == 1.0
    assert concordance_index([1.0, 2.0], _rec([5, 5], [1, 0])) == 0.0
    with pytest.raises(NoComparablePairs):
        concordance_index([1.0, 2.0], _rec([5, 5], [1, 1]))


def test_cindex_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100)[:60]:
        n = int(rng.integers(2, 30))
        times = rng.integers(1, 12, size=n).astype(float)  # many ties
        events = rng.integers(0, 2, size=n)
        risks = rng.integers(0, 6, size=n).astype(float)  # many risk ties
        records = _rec(times, events)
        try:
            got = concordance_index(risks, records)
        except NoComparablePairs:
            continue
        assert got == brute_force_cindex(risks, times, events)


def test_cindex_complement_and_monotone_invariance():
    rng = np.random.default_rng(1)
    n = 20
    times = rng.uniform(1, 100, size=n)
    events = rng.integers(0, 2, size=n)
    events[0] = 1
    risks = rng.normal(size=n)  # continuous: no ties
    records = _rec(times, events)
    assert abs(concordance_index(risks, records) + concordance_index(-risks, records) - 1.0) < 1e-15
    assert concordance_index(np.exp(risks), records) == concordance_index(risks, records)


# ---------------------------------------------------------------------------
# Kaplan-Meier
# ---------------------------------------------------------------------------

def test_km_two_events():
    curve = km_curve(_rec([1, 2], [1, 1]))
    np.testing.assert_allclose(curve.survival, [0.5, 0.0])
    np.testing.assert_array_equal(curve.at_risk, [2, 1])


def test_km_censoring_stops_drop():
    curve = km_curve(_rec([1, 2], [1, 0]))
    np.testing.assert_allclose(curve.survival, [0.5])


def test_km_tied_events():
    curve = km_curve(_rec([2, 2], [1, 1]))
    np.testing.assert_allclose(curve.survival, [0.0])


def test_km_matches_direct_product_formula():
    rng = np.random.default_rng(2)
    times = rng.integers(1, 15, size=25).astype(float)
    events = rng.integers(0, 2, size=25)
    curve = km_curve(_rec(times, events))
    running = 1.0
    for t, s in zip(curve.times, curve.survival):
        n_i = (times >= t).sum()
        d_i = ((times == t) & (events == 1)).sum()
        running *= 1 - d_i / n_i
        assert abs(s - running) < 1e-12
    assert np.all(np.diff(curve.survival) <= 1e-15)
    assert np.all((curve.survival >= 0) & (curve.survival <= 1))


def test_km_no_censoring_ends_at_zero():
    rng = np.random.default_rng(3)
    times = rng.uniform(1, 50, size=12)
    curve = km_curve(_rec(times, np.ones(12, dtype=int)))
    assert abs(curve.survival[-1]) < 1e-15


# ---------------------------------------------------------------------------
# log-rank
# ---------------------------------------------------------------------------

def test_log_rank_identical_groups():
    group = _rec([1, 2, 3, 4], [1, 1, 0, 1])
    result = log_rank(group, group)
    assert result.statistic == 0.0 and result.p_value == 1.0


def test_log_rank_matches_textbook_formula():
    a = _rec([1, 2, 3], [1, 1, 1])
    b = _rec([10, 20, 30], [1, 1, 1])
    result = log_rank(a, b)
    times = np.array([1, 2, 3, 10, 20, 30], dtype=float)
    in_a = np.array([1, 1, 1, 0, 0, 0])
    observed = expected = variance = 0.0
    for t in np.unique(times):
        risk = times >= t
        n, n_a = risk.sum(), (risk & (in_a == 1)).sum()
        d = (times == t).sum()
        d_a = ((times == t) & (in_a == 1)).sum()
        observed += d_a
        expected += d * n_a / n
        if n > 1:
            variance += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)
    expect_stat = (observed - expected) ** 2 / variance
    assert abs(result.statistic - expect_stat) < 1e-9


def test_log_rank_symmetry():
    rng = np.random.default_rng(4)
    a = _rec(rng.uniform(1, 40, 15), rng.integers(0, 2, 15))
    b = _rec(rng.uniform(1, 40, 12), np.maximum(rng.integers(0, 2, 12), [1] + [0] * 11))
    assert abs(log_rank(a, b).statistic - log_rank(b, a).statistic) < 1e-12


def test_log_rank_no_events():
    with pytest.raises(NoEvents):
        log_rank(_rec([1, 2], [0, 0]), _rec([3], [0]))


def test_chi2_tail_quantile():
    assert abs(chi2_1df_sf(3.841) - 0.05) < 1e-3
    assert abs(chi2_1df_sf(3.841458820694124) - 0.05) < 1e-9


# ---------------------------------------------------------------------------
# stratification
# ---------------------------------------------------------------------------

def test_stratify_median_median_goes_low():
    assert stratify_median([1.0, 2.0, 3.0]) == ["low", "low", "high"]


def test_stratify_all_equal():
    assert stratify_median([2.0, 2.0, 2.0]) == ["low", "low", "low"]


def test_stratify_even_count():
    assert stratify_median([1.0, 2.0, 3.0, 4.0]) == ["low", "low", "high", "high"]


# ---------------------------------------------------------------------------
# attention summaries
# ---------------------------------------------------------------------------

def test_attention_summary_uniform_is_zero_with_index_ties():
    att = np.full((4, 4), 0.25)
    spans = {"pathway": (0, 2), "text": (2, 4)}
    summary = cross_attention_summary(att, spans, ["PW_A", "PW_B"], "text", "pathway")
    assert summary.ranking == [("PW_A", 0.0), ("PW_B", 0.0)]


def test_attention_summary_selective_key_ranks_first():
    # queries are the text block (rows 2..4); key block is pathway (cols 0..2)
    att = np.zeros((4, 4))
    att[2] = [1.0, 0.0, 0.0, 0.0]  # first text query locks onto pathway key 0
    att[3] = [0.25, 0.25, 0.25, 0.25]
    spans = {"pathway": (0, 2), "text": (2, 4)}
    summary = cross_attention_summary(att, spans, ["PW_A", "PW_B"], "text", "pathway")
    assert summary.ranking[0][0] == "PW_A"
    expect = np.std([1.0, 0.25])
    assert abs(summary.ranking[0][1] - expect) < 1e-12


def test_attention_summary_single_query_row_zero_dispersion():
    att = np.array([[0.2, 0.8], [0.5, 0.5]])
    spans = {"text": (0, 1), "pathway": (0, 2)}
    summary = cross_attention_summary(att, spans, ["PW_A", "PW_B"], "text", "pathway")
    assert all(score == 0.0 for _, score in summary.ranking)


def test_attention_summary_empty_block_rejected():
    att = np.ones((2, 2)) / 2
    spans = {"text": (0, 0), "pathway": (0, 2)}
    with pytest.raises(BlockEmpty):
        cross_attention_summary(att, spans, ["A", "B"], "text", "pathway")
