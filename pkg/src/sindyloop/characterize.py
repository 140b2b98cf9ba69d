"""Empirical state summaries, structural priors and the prior-violation penalty.

The heuristics (zero-crossing counts, last-decile saturation test, penalty
weights) are deliberately simple; they only need to be reliable on
noise-free simulation data.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Any, Sequence

import numpy as np

from .errors import InvalidTrajectory
from .grammar import TRUTH_ONLY_FUNCS, EquationTemplate, Expr, walk
from .regress import Trajectory

OSCILLATION_MIN_CROSSINGS = 4
SATURATION_FRACTION = 0.05
DISCOURAGED_WEIGHT = 0.5
PROLIFERATION_WEIGHT = 0.25
MAX_FREE_FAMILIES = 2


class Family(str, enum.Enum):
    POLYNOMIAL = "polynomial"
    TRIG = "trig"
    EXPONENTIAL = "exponential"
    BILINEAR = "bilinear-cross"
    RATIONAL = "rational-surrogate"


class Preference(str, enum.Enum):
    PREFERRED = "preferred"
    OPTIONAL = "optional"
    DISCOURAGED = "discouraged"


@dataclass(frozen=True)
class StateSummary:
    name: str
    min: float
    max: float
    std: float
    monotonic: bool
    oscillatory: bool
    saturating: bool
    sign_definite: bool
    period: float | None = None
    degenerate: bool = False

    @property
    def range(self) -> float:
        return self.max - self.min

    def to_doc(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class DataSummary:
    states: tuple[StateSummary, ...]

    def to_doc(self) -> list[dict[str, Any]]:
        return [s.to_doc() for s in self.states]


def _crossings(centered: np.ndarray, times: np.ndarray, tol: float) -> tuple[int, list[tuple[float, int]]]:
    """Count zero crossings; return the count and interpolated (time, direction) pairs.

    A run of samples within ``tol`` of zero counts as one crossing. Only
    strict sign changes between neighbours get a direction and a time.
    """
    signs = np.where(np.abs(centered) <= tol, 0, np.sign(centered)).astype(int)
    count = 0
    events: list[tuple[float, int]] = []
    prev = 0
    k = 0
    n = len(signs)
    while k < n:
        s = signs[k]
        if s == 0:
            count += 1
            while k < n and signs[k] == 0:
                k += 1
            prev = 0
            continue
        if prev != 0 and s != prev:
            count += 1
            a, b = centered[k - 1], centered[k]
            tc = times[k - 1] + (times[k] - times[k - 1]) * a / (a - b)
            events.append((float(tc), int(s)))
        prev = s
        k += 1
    return count, events


def summarize_state(series: Sequence[float], times: Sequence[float], name: str = "x") -> StateSummary:
    x = np.asarray(series, dtype=float)
    t = np.asarray(times, dtype=float)
    if len(x) < 10 or len(x) != len(t) or not np.all(np.isfinite(x)):
        raise InvalidTrajectory("summarize_state needs >= 10 finite samples aligned with times")
    lo, hi = float(x.min()), float(x.max())
    rng = hi - lo
    if rng == 0.0:
        return StateSummary(name, lo, hi, 0.0, False, False, False, False, None, degenerate=True)
    tol = 1e-9 * rng
    d = np.diff(x)
    monotonic = bool(np.all(d >= -tol) or np.all(d <= tol))
    centered = x - x.mean()
    count, events = _crossings(centered, t, tol)
    oscillatory = count >= OSCILLATION_MIN_CROSSINGS
    period = None
    if oscillatory:
        gaps = []
        for direction in (1, -1):
            ts = [tc for tc, s in events if s == direction]
            gaps.extend(np.diff(ts))
        if gaps:
            period = float(np.mean(gaps))
        elif len(events) >= 2:
            period = float(2.0 * np.mean(np.diff([tc for tc, _ in events])))
    tail = x[int(np.floor(0.9 * len(x))):]
    saturating = bool(np.ptp(tail) < SATURATION_FRACTION * rng and not oscillatory)
    sign_definite = bool(lo > 0 or hi < 0)
    return StateSummary(name, lo, hi, float(x.std()), monotonic, oscillatory, saturating, sign_definite, period)


def summarize(traj: Trajectory) -> DataSummary:
    """Summaries of every state over the training segment."""
    t, x, _ = traj.train()
    return DataSummary(tuple(summarize_state(x[:, i], t, traj.state_names[i]) for i in range(traj.n_states)))


@dataclass(frozen=True)
class PriorSpec:
    """One preference per function family, for each state derivative."""

    per_state: tuple[dict[Family, Preference], ...]

    def preference(self, state: int, family: Family) -> Preference:
        return self.per_state[state][family]

    def families_with(self, state: int, pref: Preference) -> list[Family]:
        return [f for f in Family if self.per_state[state][f] is pref]

    def to_doc(self) -> list[dict[str, str]]:
        return [{f.value: p.value for f, p in m.items()} for m in self.per_state]

    def render(self) -> str:
        lines = []
        for i, m in enumerate(self.per_state):
            parts = ", ".join(f"{f.value}={p.value}" for f, p in m.items())
            lines.append(f"dx{i}/dt: {parts}")
        return "\n".join(lines)


def _state_priors(s: StateSummary, multi_state: bool) -> dict[Family, Preference]:
    prefs = {
        Family.POLYNOMIAL: Preference.PREFERRED,
        Family.TRIG: Preference.OPTIONAL,
        Family.EXPONENTIAL: Preference.OPTIONAL,
        Family.BILINEAR: Preference.OPTIONAL if multi_state else Preference.DISCOURAGED,
        Family.RATIONAL: Preference.OPTIONAL,
    }
    if not s.oscillatory:
        prefs[Family.TRIG] = Preference.DISCOURAGED
    if s.monotonic and s.saturating:
        prefs[Family.EXPONENTIAL] = Preference.PREFERRED
    return prefs


def derive_priors(summary: DataSummary) -> PriorSpec:
    """Rule table from behavioural flags to per-derivative family preferences.

    Oscillation keeps trig optional and prefers polynomials (a harmonic
    oscillator is linear); no observed oscillation discourages trig; a
    monotone saturating state prefers exponentials.
    """
    multi = len(summary.states) > 1
    return PriorSpec(tuple(_state_priors(s, multi) for s in summary.states))


def feature_families(feature: Expr) -> frozenset[Family]:
    fams: set[Family] = set()
    for node in walk(feature):
        k = node.kind
        if k in ("sin", "cos") or k in TRUTH_ONLY_FUNCS:
            fams.add(Family.TRIG)
        elif k in ("exp", "log"):
            fams.add(Family.EXPONENTIAL)
        elif k == "div" or (k == "pow" and node.children[1].value < 0):
            fams.add(Family.RATIONAL)
    if _has_state_cross_product(feature):
        fams.add(Family.BILINEAR)
    if not fams:
        fams.add(Family.POLYNOMIAL)
    return frozenset(fams)


def _has_state_cross_product(node: Expr) -> bool:
    if node.kind == "mul":
        left = {i for i in _states_in(node.children[0])}
        right = {i for i in _states_in(node.children[1])}
        if left and right and (left | right) != left & right:
            return True
    return any(_has_state_cross_product(c) for c in node.children)


def _states_in(node: Expr) -> set[int]:
    return {n.value for n in walk(node) if n.kind == "x"}


def prior_penalty(template: EquationTemplate, priors: PriorSpec) -> float:
    """0.5 per feature touching a discouraged family, plus 0.25 per family beyond two in one equation."""
    total = 0.0
    for i, eq in enumerate(template.equations):
        used: set[Family] = set()
        for f in eq:
            fams = feature_families(f)
            used |= fams
            if any(priors.preference(i, fam) is Preference.DISCOURAGED for fam in fams):
                total += DISCOURAGED_WEIGHT
        total += PROLIFERATION_WEIGHT * max(0, len(used) - MAX_FREE_FAMILIES)
    return total
