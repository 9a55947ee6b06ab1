"""Consensus glycemic outcomes and insulin partitioning for simulation traces."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

STEP_MIN = 5.0


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class RangeStats:
    TIR: float
    TITR: float
    TAR: float
    TAR_gt250: float
    TBR: float
    TBR_lt54: float


def ranges(bg: Sequence[float]) -> RangeStats:
    """Percent of samples per band; 70 and 180 count as in range."""
    g = np.asarray(bg, dtype=float)
    if g.size == 0:
        raise MetricsError("empty glucose series")
    n = g.size

    def pct(mask):
        return 100.0 * np.count_nonzero(mask) / n

    tbr = pct(g < 70)
    tar = pct(g > 180)
    # derive TIR from the complement so the three bands close exactly
    return RangeStats(TIR=100.0 - tbr - tar, TITR=pct((g >= 70) & (g <= 140)), TAR=tar,
                      TAR_gt250=pct(g > 250), TBR=tbr, TBR_lt54=pct(g < 54))


def risk_transform(bg: np.ndarray) -> np.ndarray:
    """Symmetrized log-glucose scale; zero near 112.5 mg/dL."""
    return 1.509 * (np.log(bg) ** 1.084 - 5.381)


@dataclass(frozen=True)
class Variability:
    CV: float
    mean: float
    HBGI: float
    LBGI: float


def variability_and_risk(bg: Sequence[float]) -> Variability:
    g = np.asarray(bg, dtype=float)
    if g.size < 2:
        raise MetricsError("need at least two samples")
    f = risk_transform(g)
    r = 10.0 * f * f
    return Variability(
        CV=100.0 * float(np.std(g, ddof=1)) / float(np.mean(g)),
        mean=float(np.mean(g)),
        HBGI=float(np.mean(np.where(f > 0, r, 0.0))),
        LBGI=float(np.mean(np.where(f < 0, r, 0.0))),
    )


def count_events(bg: Sequence[float], below: float | None = None, above: float | None = None,
                 dwell: float = 15.0, step: float = STEP_MIN) -> int:
    """Excursions lasting ``dwell`` minutes, closed by ``dwell`` minutes back in range."""
    need = int(math.ceil(dwell / step - 1e-9))
    g = np.asarray(bg, dtype=float)
    out_of_range = (g < below) if below is not None else (g > above)
    count, in_event, run_out, run_in = 0, False, 0, 0
    for flag in out_of_range:
        if flag:
            run_out += 1
            run_in = 0
            if not in_event and run_out >= need:
                in_event = True
                count += 1
        else:
            run_in += 1
            run_out = 0
            if in_event and run_in >= need:
                in_event = False
    return count


def events(bg: Sequence[float], step: float = STEP_MIN) -> tuple[int, int]:
    """(hypo, hyper) event counts over the whole trace."""
    return count_events(bg, below=70.0, step=step), count_events(bg, above=180.0, step=step)


@dataclass(frozen=True)
class InsulinPartition:
    TDI: float  # U/day
    TDI_per_kg: float
    basal_pct: float
    bolus_pct: float
    correction_pct: float
    prandial_pct: float


def insulin_partition(basal_rate: Sequence[float], prandial: Sequence[float], correction: Sequence[float],
                      bw: float, step: float = STEP_MIN) -> InsulinPartition:
    """Daily insulin split by kind; ``basal_rate`` in U/h per step, boluses in U."""
    basal = float(np.sum(basal_rate)) * step / 60.0
    pran = float(np.sum(prandial))
    corr = float(np.sum(correction))
    total = basal + pran + corr
    days = len(basal_rate) * step / 1440.0
    if total <= 0:
        return InsulinPartition(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    tdi = total / days
    corr_pct = 100.0 * corr / total
    pran_pct = 100.0 * pran / total
    bolus_pct = corr_pct + pran_pct
    return InsulinPartition(tdi, tdi / bw, 100.0 - bolus_pct, bolus_pct, corr_pct, pran_pct)


REPORT_FIELDS = (
    "TIR", "TITR", "TAR", "TAR_gt250", "TBR", "TBR_lt54", "CV", "daily_bg_avg", "HBGI", "LBGI",
    "hypo_events", "hyper_events", "hypo_events_per_day", "hyper_events_per_day",
    "TDI_per_kg", "basal_pct", "bolus_pct", "correction_pct", "prandial_pct",
)


@dataclass(frozen=True)
class GlycemicReport:
    TIR: float
    TITR: float
    TAR: float
    TAR_gt250: float
    TBR: float
    TBR_lt54: float
    CV: float
    daily_bg_avg: float
    HBGI: float
    LBGI: float
    hypo_events: int
    hyper_events: int
    hypo_events_per_day: float
    hyper_events_per_day: float
    TDI_per_kg: float
    basal_pct: float
    bolus_pct: float
    correction_pct: float
    prandial_pct: float

    def as_row(self) -> dict:
        return asdict(self)

    def check_closure(self, tol: float = 1e-9) -> None:
        if abs(self.TIR + self.TAR + self.TBR - 100.0) > tol:
            raise MetricsError("range percentages do not sum to 100")
        if self.TITR > self.TIR + tol or self.TBR_lt54 > self.TBR + tol or self.TAR_gt250 > self.TAR + tol:
            raise MetricsError("sub-band exceeds its parent band")
        if self.TDI_per_kg > 0:
            if abs(self.basal_pct + self.bolus_pct - 100.0) > tol:
                raise MetricsError("basal + bolus != 100")
            if abs(self.correction_pct + self.prandial_pct - self.bolus_pct) > tol:
                raise MetricsError("correction + prandial != bolus")


def report(trace, bw: float, use_cgm: bool = False) -> GlycemicReport:
    """Report for one trace, on plant glucose unless ``use_cgm``."""
    bg = np.asarray(trace["cgm" if use_cgm else "bg"], dtype=float)
    rs = ranges(bg)
    var = variability_and_risk(bg)
    hypo, hyper = events(bg)
    part = insulin_partition(trace["basal"], trace["prandial"], trace["correction"], bw)
    days = len(bg) * STEP_MIN / 1440.0
    rep = GlycemicReport(
        TIR=rs.TIR, TITR=rs.TITR, TAR=rs.TAR, TAR_gt250=rs.TAR_gt250, TBR=rs.TBR, TBR_lt54=rs.TBR_lt54,
        CV=var.CV, daily_bg_avg=var.mean, HBGI=var.HBGI, LBGI=var.LBGI,
        hypo_events=hypo, hyper_events=hyper, hypo_events_per_day=hypo / days, hyper_events_per_day=hyper / days,
        TDI_per_kg=part.TDI_per_kg, basal_pct=part.basal_pct, bolus_pct=part.bolus_pct,
        correction_pct=part.correction_pct, prandial_pct=part.prandial_pct,
    )
    rep.check_closure()
    return rep


# --- cohort aggregation -----------------------------------------------------

COHORT_FLAGS = (
    ("share_TIR_gt70", "TIR", lambda v: v > 70.0),
    ("share_TBR_lt4", "TBR", lambda v: v < 4.0),
    ("share_TAR_lt25", "TAR", lambda v: v < 25.0),
    ("share_TAR250_lt5", "TAR_gt250", lambda v: v < 5.0),
)


def cohort_flags(reports: Sequence[GlycemicReport]) -> dict[str, float]:
    n = len(reports)
    return {name: 100.0 * sum(bool(pred(getattr(r, fld))) for r in reports) / n
            for name, fld, pred in COHORT_FLAGS}


def summarize(values: Sequence[float]) -> str:
    """``median [q1 q3], mean (sd)``, one decimal."""
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return f"{med:.1f} [{q1:.1f} {q3:.1f}], {np.mean(v):.1f} ({sd:.1f})"


def report_csv(rows: Sequence[tuple[int, str, GlycemicReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("subject", "scenario") + REPORT_FIELDS)
    for subject, scenario, rep in rows:
        w.writerow([subject, scenario] + [_num(getattr(rep, f)) for f in REPORT_FIELDS])
    return buf.getvalue()


def cohort_summary_csv(rows: Sequence[tuple[int, str, GlycemicReport]]) -> str:
    """Per-run rows followed by one aggregate row per scenario."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    flag_names = [f[0] for f in COHORT_FLAGS]
    w.writerow(("subject", "scenario") + REPORT_FIELDS + tuple(flag_names))
    for subject, scenario, rep in rows:
        w.writerow([subject, scenario] + [_num(getattr(rep, f)) for f in REPORT_FIELDS] + [""] * len(flag_names))
    by_scenario: dict[str, list[GlycemicReport]] = {}
    for _, scenario, rep in rows:
        by_scenario.setdefault(scenario, []).append(rep)
    for scenario, reps in by_scenario.items():
        flags = cohort_flags(reps)
        w.writerow(["cohort", scenario] + [summarize([getattr(r, f) for r in reps]) for f in REPORT_FIELDS]
                   + [_num(flags[n]) for n in flag_names])
    return buf.getvalue()


def _num(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


__all__ = [
    "MetricsError", "RangeStats", "ranges", "Variability", "variability_and_risk", "risk_transform",
    "count_events", "events", "InsulinPartition", "insulin_partition", "GlycemicReport", "report",
    "cohort_flags", "summarize", "report_csv", "cohort_summary_csv", "REPORT_FIELDS",
]
