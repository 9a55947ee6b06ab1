import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybrid_aid.metrics import (
    REPORT_FIELDS, MetricsError, cohort_flags, cohort_summary_csv, count_events, events,
    insulin_partition, ranges, report, report_csv, risk_transform, summarize, variability_and_risk,
)

from .oracles import risk

TOL = 1e-9


def synthetic_trace(rng, days=2):
    n = 288 * days
    bg = np.clip(140 + np.cumsum(rng.normal(0, 6, n)), 40, 400)
    basal = rng.uniform(0, 2, n)
    pran = np.where(rng.random(n) < 0.01, rng.uniform(1, 8, n), 0.0)
    corr = np.where(rng.random(n) < 0.005, rng.uniform(0.5, 3, n), 0.0)
    return {"bg": bg, "cgm": bg, "basal": basal, "prandial": pran, "correction": corr}


# --- ranges -----------------------------------------------------------------

def test_ranges_all_in_range():
    r = ranges([100.0] * 10)
    assert r.TIR == r.TITR == 100.0
    assert r.TAR == r.TBR == r.TAR_gt250 == r.TBR_lt54 == 0.0


def test_ranges_half_and_half():
    r = ranges([60.0] * 5 + [200.0] * 5)
    assert (r.TBR, r.TAR, r.TIR) == (50.0, 50.0, 0.0)


def test_ranges_boundaries():
    r = ranges([69.0, 70.0, 180.0, 181.0])
    assert abs(r.TIR - 50.0) < TOL and abs(r.TBR - 25.0) < TOL and abs(r.TAR - 25.0) < TOL
    assert ranges([140.0, 141.0]).TITR == 50.0
    assert ranges([54.0, 53.9]).TBR_lt54 == 50.0
    assert ranges([250.0, 250.1]).TAR_gt250 == 50.0


def test_ranges_empty():
    with pytest.raises(MetricsError):
        ranges([])


# --- variability and risk ---------------------------------------------------

def test_cv_hand():
    v = variability_and_risk([100.0, 140.0])
    assert abs(v.CV - 100.0 * math.sqrt(800.0) / 120.0) < TOL
    assert v.mean == 120.0


def test_risk_neutral_point():
    # root of the transform: ln(BG) = 5.381^(1/1.084)
    root = math.exp(5.381 ** (1 / 1.084))
    assert root == pytest.approx(112.5, abs=0.1)
    v = variability_and_risk([root, root])
    assert v.CV == 0.0 and v.HBGI < 1e-20 and v.LBGI < 1e-20


def test_high_only_risk():
    v = variability_and_risk([200.0] * 4)
    assert v.LBGI == 0.0 and v.HBGI == pytest.approx(risk(200.0)[0], rel=1e-12)


def test_risk_matches_independent_formula():
    bg = np.array([45.0, 70.0, 112.0, 180.0, 300.0, 400.0])
    r = [risk(b) for b in bg]
    np.testing.assert_allclose(risk_transform(bg), [f for _, f in r], rtol=1e-12)
    v = variability_and_risk(bg)
    assert v.HBGI == pytest.approx(sum(x for x, f in r if f > 0) / bg.size, rel=1e-12)
    assert v.LBGI == pytest.approx(sum(x for x, f in r if f < 0) / bg.size, rel=1e-12)


def test_variability_needs_two_samples():
    with pytest.raises(MetricsError):
        variability_and_risk([100.0])


# --- events -----------------------------------------------------------------

def test_event_short_dip_ignored():
    assert events([100] * 5 + [65] + [100] * 5)[0] == 0


def test_event_single_excursion():
    assert events([100] * 5 + [65] * 6 + [100] * 5)[0] == 1


def test_event_not_rearmed_by_short_recovery():
    bg = [100] * 3 + [65] * 4 + [100] * 2 + [65] * 4 + [100] * 5
    assert events(bg)[0] == 1


def test_event_rearmed_after_dwell():
    bg = [100] * 3 + [65] * 4 + [100] * 3 + [65] * 4 + [100] * 5
    assert events(bg)[0] == 2


def test_hyper_events_strict_threshold():
    assert events([180.0] * 10)[1] == 0
    assert events([181.0] * 10)[1] == 1
    assert count_events([69.9] * 3, below=70.0) == 1


# --- insulin partition --------------------------------------------------------

def test_partition_basal_only():
    p = insulin_partition([1.0] * 288, [0.0] * 288, [0.0] * 288, bw=70.0)
    assert p.basal_pct == 100.0 and p.bolus_pct == 0.0
    assert abs(p.TDI - 24.0) < TOL and abs(p.TDI_per_kg - 24.0 / 70.0) < TOL


def test_partition_hand_ratio():
    pran = [0.0] * 288
    pran[100] = 12.0
    p = insulin_partition([1.0] * 288, pran, [0.0] * 288, bw=70.0)
    assert abs(p.basal_pct - 200.0 / 3.0) < TOL
    assert abs(p.prandial_pct - 100.0 / 3.0) < TOL
    assert p.correction_pct == 0.0
    assert abs(p.TDI - 36.0) < TOL


def test_partition_multi_day_average():
    p = insulin_partition([1.0] * 576, [0.0] * 576, [0.0] * 576, bw=60.0)
    assert abs(p.TDI - 24.0) < TOL


# --- reports ----------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_report_closure_property(seed, days):
    rep = report(synthetic_trace(np.random.default_rng(seed), days), bw=70.0)
    assert abs(rep.TIR + rep.TAR + rep.TBR - 100.0) <= TOL
    assert rep.TITR <= rep.TIR and rep.TBR_lt54 <= rep.TBR and rep.TAR_gt250 <= rep.TAR
    assert abs(rep.basal_pct + rep.bolus_pct - 100.0) <= TOL
    assert abs(rep.correction_pct + rep.prandial_pct - rep.bolus_pct) <= TOL
    assert rep.hypo_events_per_day == rep.hypo_events / days


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
def test_day_split_additivity(seed, days):
    bg = synthetic_trace(np.random.default_rng(seed), days)["bg"]
    whole = ranges(bg)
    parts = [ranges(bg[d * 288:(d + 1) * 288]) for d in range(days)]
    for name in ("TIR", "TITR", "TAR", "TAR_gt250", "TBR", "TBR_lt54"):
        recombined = sum(getattr(p, name) for p in parts) / days
        assert abs(recombined - getattr(whole, name)) <= TOL


def test_report_uses_cgm_behind_flag():
    tr = synthetic_trace(np.random.default_rng(1))
    tr["cgm"] = np.full_like(tr["bg"], 100.0)
    assert report(tr, 70.0, use_cgm=True).TIR == 100.0
    assert report(tr, 70.0).TIR != 100.0 or np.all((tr["bg"] >= 70) & (tr["bg"] <= 180))


def test_cohort_flags_and_summary():
    rng = np.random.default_rng(3)
    reps = [report(synthetic_trace(rng), 70.0) for _ in range(4)]
    flags = cohort_flags(reps)
    assert flags["share_TIR_gt70"] == 100.0 * sum(r.TIR > 70 for r in reps) / 4
    assert summarize([1, 2, 3, 4, 5]) == "3.0 [2.0 4.0], 3.0 (1.6)"
    rows = [(i, "S0", r) for i, r in enumerate(reps)]
    per_run = list(csv.reader(io.StringIO(report_csv(rows))))
    assert per_run[0] == ["subject", "scenario", *REPORT_FIELDS] and len(per_run) == 5
    summary = list(csv.reader(io.StringIO(cohort_summary_csv(rows))))
    assert len(summary) == 6 and summary[-1][0] == "cohort"
