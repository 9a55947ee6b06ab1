"""Trend-aware prandial and automatic correction boluses."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

from .mpc import TherapyProfile


class Arrow(str, enum.Enum):
    DOUBLE_UP = "double-up"
    SINGLE_UP = "single-up"
    DIAGONAL_UP = "diagonal-up"
    FLAT = "flat"
    DIAGONAL_DOWN = "diagonal-down"
    SINGLE_DOWN = "single-down"
    DOUBLE_DOWN = "double-down"

    @property
    def direction(self) -> int:
        if self is Arrow.FLAT:
            return 0
        return 1 if self.value.endswith("up") else -1

    @property
    def magnitude(self) -> str:
        return self.value.split("-")[0]


@dataclass(frozen=True)
class TrendArrow:
    category: Arrow
    roc: float

    @classmethod
    def from_roc(cls, roc: float) -> TrendArrow:
        a = abs(roc)
        up = roc > 0
        if a >= 3.0:
            cat = Arrow.DOUBLE_UP if up else Arrow.DOUBLE_DOWN
        elif a >= 2.0:
            cat = Arrow.SINGLE_UP if up else Arrow.SINGLE_DOWN
        elif a >= 1.0:
            cat = Arrow.DIAGONAL_UP if up else Arrow.DIAGONAL_DOWN
        else:
            cat = Arrow.FLAT
        return cls(cat, roc)


# glucose offset per arrow magnitude, mg/dL
GLUCOSE_OFFSET = {"double": 100.0, "single": 75.0, "diagonal": 50.0, "flat": 0.0}

# CF band lower edges (mg/dL/U); a CF on an edge belongs to the band above it
CF_BANDS = (0.0, 25.0, 50.0, 75.0)
ROC_CF_TABLE = {
    "double": (4.5, 3.0, 1.5, 1.0),
    "single": (3.0, 2.0, 1.0, 0.5),
    "diagonal": (1.5, 1.0, 0.5, 0.25),
    "flat": (0.0, 0.0, 0.0, 0.0),
}

G_ADJ_RANGE = (40.0, 600.0)


def cf_band(cf: float) -> int:
    if not cf > 0:
        raise ValueError(f"CF must be positive, got {cf}")
    band = 0
    for i, edge in enumerate(CF_BANDS):
        if cf >= edge:
            band = i
    return band


def adjusted_glucose(G_cur: float, arrow: TrendArrow) -> float:
    g = G_cur + arrow.category.direction * GLUCOSE_OFFSET[arrow.category.magnitude]
    return min(max(g, G_ADJ_RANGE[0]), G_ADJ_RANGE[1])


def roc_cf_adjustment(arrow: TrendArrow, CF: float) -> float:
    """Signed trend/CF bolus component in U."""
    return arrow.category.direction * ROC_CF_TABLE[arrow.category.magnitude][cf_band(CF)]


@dataclass(frozen=True)
class BolusRequest:
    t: float
    CHO_announced: float
    G_cur: float
    arrow: TrendArrow
    profile: TherapyProfile
    iob: float
    G_tar: float = 120.0

    def __post_init__(self):
        if self.CHO_announced < 0:
            raise ValueError("announced CHO must be non-negative")
        if not 20.0 <= self.G_cur <= 600.0:
            raise ValueError(f"G_cur {self.G_cur} outside [20, 600]")


@dataclass(frozen=True)
class BolusTerms:
    """Formula terms kept for logging; ``amount`` is what gets delivered."""

    carbs: float
    roc_cf: float
    glucose: float
    iob: float
    raw: float
    amount: float
    G_adj: float
    alpha: float = 1.0


def prandial_bolus_terms(req: BolusRequest) -> BolusTerms:
    p = req.profile
    g_adj = adjusted_glucose(req.G_cur, req.arrow)
    carbs = req.CHO_announced / p.CR
    roc_cf = roc_cf_adjustment(req.arrow, p.CF)
    glucose = (g_adj - req.G_tar) / p.CF
    raw = carbs + roc_cf + glucose - req.iob
    return BolusTerms(carbs, roc_cf, glucose, req.iob, raw, max(raw, 0.0), g_adj)


def prandial_bolus(req: BolusRequest) -> float:
    """Meal bolus in U, floored at zero."""
    return prandial_bolus_terms(req).amount


ALPHA_MAP = {
    Arrow.DOUBLE_UP: 1.5,
    Arrow.SINGLE_UP: 1.4,
    Arrow.DIAGONAL_UP: 1.3,
    Arrow.FLAT: 1.0,
    Arrow.DIAGONAL_DOWN: 1.0,
    Arrow.SINGLE_DOWN: 1.0,
    Arrow.DOUBLE_DOWN: 1.0,
}


@dataclass
class CorrectionGate:
    bg_threshold: float = 180.0
    min_since_meal: float = 180.0
    min_since_correction: float = 30.0
    alpha_map: dict = field(default_factory=lambda: dict(ALPHA_MAP))
    last_meal: float = -math.inf
    last_correction: float = -math.inf

    def open(self, t: float, G_cur: float) -> bool:
        return (G_cur > self.bg_threshold
                and t - self.last_meal >= self.min_since_meal
                and t - self.last_correction >= self.min_since_correction)

    def meal_announced(self, t: float) -> None:
        self.last_meal = t


def correction_bolus_terms(G_cur: float, arrow: TrendArrow, profile: TherapyProfile, iob: float,
                           gate: CorrectionGate, t: float, G_tar: float = 120.0) -> BolusTerms | None:
    """Correction bolus terms, or ``None`` when the gate is closed.

    The gate's correction timestamp only moves when insulin is actually given.
    """
    if not gate.open(t, G_cur):
        return None
    alpha = gate.alpha_map[arrow.category]
    g_adj = adjusted_glucose(G_cur, arrow)
    glucose = (g_adj - G_tar) / profile.CF
    raw = alpha * (glucose - iob)
    amount = max(raw, 0.0)
    if amount > 0:
        gate.last_correction = t
    return BolusTerms(0.0, 0.0, glucose, iob, raw, amount, g_adj, alpha)


def correction_bolus(G_cur: float, arrow: TrendArrow, profile: TherapyProfile, iob: float,
                     gate: CorrectionGate, t: float, G_tar: float = 120.0) -> float | None:
    terms = correction_bolus_terms(G_cur, arrow, profile, iob, gate, t, G_tar)
    return None if terms is None else terms.amount
