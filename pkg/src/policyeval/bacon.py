"""Goodman-Bacon decomposition of the two-way fixed-effects DiD estimate.

Units are grouped by the first period in which they are treated.  On a
balanced panel without covariates the TWFE coefficient equals the
variance-weighted average of every 2x2 DiD between pairs of groups, and the
weights sum to one.

With covariates, the residualized treatment is split into a part that
varies within timing groups and a part that does not.  The within share
``omega`` and its coefficient form the "Within group" row.  The remaining
2x2 comparisons are computed on the covariate-adjusted outcome and share the
weight ``1 - omega``.  In this case the weighted sum only approximates the
controlled TWFE estimate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .did import TREATMENT, TreatmentSchedule, align, treatment_for
from .errors import SingleCohortNoControlGroup, UnbalancedPanel
from .panel import PanelDataset
from .regress import independent_columns

CATEGORIES = (
    "Timing groups",
    "Timing vs always treated",
    "Never treated vs timing",
    "Never treated vs always treated",
    "Within group",
)
ALWAYS_CATEGORIES = ("Timing vs always treated", "Never treated vs always treated")


@dataclass(frozen=True)
class TwoByTwoComparison:
    treated_cohort: str
    comparison: str
    category: str
    estimate: float
    weight: float


@dataclass(frozen=True)
class BaconResult:
    comparisons: tuple
    category_aggregates: dict
    twfe_reference: float
    twfe_controlled: float = math.nan
    omega: float = 0.0
    dropped_entities: tuple = ()
    excluded_entities: tuple = ()

    @property
    def total_weight(self) -> float:
        return float(sum(c.weight for c in self.comparisons))

    @property
    def weighted_estimate(self) -> float:
        return float(sum(c.weight * c.estimate for c in self.comparisons if c.weight != 0))

    def pair_rows(self) -> list[list[str]]:
        rows = [["treated_cohort", "comparison", "estimate", "weight"]]
        for c in self.comparisons:
            rows.append([c.treated_cohort, c.comparison, _fmt(c.estimate), _fmt(c.weight)])
        return rows

    def category_rows(self) -> list[list[str]]:
        rows = [["category", "estimate", "weight"]]
        for cat, (est, w) in self.category_aggregates.items():
            rows.append([cat, _fmt(est), _fmt(w)])
        return rows

    def to_dict(self) -> dict:
        return {
            "twfe_reference": _num(self.twfe_reference),
            "twfe_controlled": _num(self.twfe_controlled),
            "weighted_estimate": _num(self.weighted_estimate),
            "total_weight": _num(self.total_weight),
            "omega": _num(self.omega),
            "categories": {
                k: {"estimate": _num(e), "weight": _num(w)}
                for k, (e, w) in self.category_aggregates.items()
            },
            "dropped_entities": list(self.dropped_entities),
            "excluded_entities": list(self.excluded_entities),
        }


def _fmt(x):
    return "" if x is None or math.isnan(x) else repr(float(x))


def _num(x):
    return None if x is None or not math.isfinite(x) else float(x)


def _two_way_demean_balanced(a: np.ndarray) -> np.ndarray:
    # a has shape (N, T) or (N, T, k)
    return a - a.mean(axis=1, keepdims=True) - a.mean(axis=0, keepdims=True) + a.mean(axis=(0, 1), keepdims=True)


@dataclass
class _Group:
    first: int  # index of first treated period; T means never
    label: str
    members: np.ndarray
    share: float = 0.0
    dbar: float = 0.0
    means: np.ndarray = field(default=None)


def _diff(means, post, pre):
    return means[post].mean() - means[pre].mean()


def bacon_decompose(
    ds: PanelDataset,
    schedule: TreatmentSchedule,
    outcome: str,
    lag: int = 1,
    controls: Sequence[str] = (),
    drop_treated_before: int | None = None,
    balance: bool = False,
) -> BaconResult:
    """Decompose the TWFE DiD estimate into all 2x2 group comparisons.

    The panel must be balanced in ``outcome`` and ``controls``.  With
    ``balance=True`` entities with any missing cell are dropped first
    (listed in ``dropped_entities``); otherwise UnbalancedPanel is raised.
    """
    treatment, excluded = treatment_for(ds, schedule, lag, drop_treated_before)
    data = align(ds, treatment)
    cols = [outcome, *controls]
    complete = np.ones(data.n_entities, dtype=bool)
    for c in cols:
        complete &= ~np.isnan(data.column(c)).any(axis=1)
    dropped = tuple(e for e, ok in zip(data.entities, complete) if not ok)
    if dropped:
        if not balance:
            raise UnbalancedPanel(
                f"{len(dropped)} entities have missing cells; pass balance=True to drop them"
            )
        data = data.select_entities(complete)
    if data.n_entities == 0:
        raise UnbalancedPanel("no complete entities left")

    y = data.column(outcome)
    D = data.column(TREATMENT)
    N, T = D.shape
    years = data.years
    has_any = D.any(axis=1)
    first = np.where(has_any, np.argmax(D > 0, axis=1), T)

    groups = []
    for f in np.unique(first):
        members = np.flatnonzero(first == f)
        if f == 0:
            label = "always"
        elif f == T:
            label = "never"
        else:
            label = str(int(years[f]) - lag)
        g = _Group(int(f), label, members)
        g.share = members.size / N
        g.dbar = (T - f) / T
        groups.append(g)
    timing = [g for g in groups if 0 < g.first < T]
    if len(groups) < 2 or not timing:
        raise SingleCohortNoControlGroup(
            "need a treatment-timing group plus at least one other group"
        )

    Dd = _two_way_demean_balanced(D)
    VD = float(np.mean(Dd ** 2))

    omega = 0.0
    delta_w = math.nan
    controlled = math.nan
    y_adj = y
    if controls:
        X = np.stack([data.column(c) for c in controls], axis=-1)
        yd = _two_way_demean_balanced(y).ravel()
        Xd = _two_way_demean_balanced(X).reshape(N * T, -1)
        keep = independent_columns(Xd)
        Xk = Xd[:, keep]
        gamma = np.linalg.lstsq(Xk, Dd.ravel(), rcond=None)[0]
        r = Dd.ravel() - Xk @ gamma
        r_panel = r.reshape(N, T)
        r_between = np.empty_like(r_panel)
        for gi, g in enumerate(groups):
            r_between[g.members] = r_panel[g.members].mean(axis=0)
        r_within = r_panel - r_between
        ssr = float(r @ r)
        ssw = float(np.sum(r_within ** 2))
        omega = ssw / ssr if ssr > 0 else 0.0
        delta_w = float(r_within.ravel() @ yd) / ssw if ssw > 1e-14 * max(ssr, 1.0) else math.nan
        full = np.column_stack([Dd.ravel(), Xk])
        coef = np.linalg.lstsq(full, yd, rcond=None)[0]
        controlled = float(coef[0])
        b = np.zeros(len(controls))
        b[keep] = coef[1:]
        y_adj = y - X @ b
        if math.isnan(delta_w):
            omega = 0.0

    for g in groups:
        g.means = y_adj[g.members].mean(axis=0)

    periods = np.arange(T)
    rows = []
    for a_i, g in enumerate(groups):
        for h in groups[a_i + 1:]:
            # g has the earlier (or equal-never) start: g.first < h.first
            nsum = g.share + h.share
            ngh = g.share / nsum
            if g.first == 0 and h.first == T:
                rows.append(TwoByTwoComparison("always", "never-treated",
                                               "Never treated vs always treated", math.nan, 0.0))
            elif g.first == 0:
                pre, post = periods < h.first, periods >= h.first
                est = _diff(h.means, post, pre) - _diff(g.means, post, pre)
                w = nsum ** 2 * ngh * (1 - ngh) * h.dbar * (1 - h.dbar) / VD
                rows.append(TwoByTwoComparison(h.label, "always-treated",
                                               "Timing vs always treated", est, w))
            elif h.first == T:
                pre, post = periods < g.first, periods >= g.first
                est = _diff(g.means, post, pre) - _diff(h.means, post, pre)
                w = nsum ** 2 * ngh * (1 - ngh) * g.dbar * (1 - g.dbar) / VD
                rows.append(TwoByTwoComparison(g.label, "never-treated",
                                               "Never treated vs timing", est, w))
            else:
                k, l = g, h
                # earlier group treated, later group not yet treated
                pre = periods < k.first
                mid = (periods >= k.first) & (periods < l.first)
                est = _diff(k.means, mid, pre) - _diff(l.means, mid, pre)
                w = ((nsum * (1 - l.dbar)) ** 2 * ngh * (1 - ngh)
                     * ((k.dbar - l.dbar) / (1 - l.dbar)) * ((1 - k.dbar) / (1 - l.dbar)) / VD)
                rows.append(TwoByTwoComparison(k.label, f"later-cohort({l.label})",
                                               "Timing groups", est, w))
                # later group treated, earlier group already treated
                post = periods >= l.first
                est = _diff(l.means, post, mid) - _diff(k.means, post, mid)
                w = ((nsum * k.dbar) ** 2 * ngh * (1 - ngh)
                     * (l.dbar / k.dbar) * ((k.dbar - l.dbar) / k.dbar) / VD)
                rows.append(TwoByTwoComparison(l.label, f"earlier-cohort({k.label})",
                                               "Timing groups", est, w))

    if controls:
        rows = [TwoByTwoComparison(c.treated_cohort, c.comparison, c.category,
                                   c.estimate, c.weight * (1 - omega)) for c in rows]
        rows.append(TwoByTwoComparison("", "within", "Within group", delta_w, omega))

    aggregates = {}
    for cat in CATEGORIES:
        members = [c for c in rows if c.category == cat]
        if not members:
            continue
        wsum = float(sum(c.weight for c in members))
        if wsum > 0:
            est = float(sum(c.weight * c.estimate for c in members if c.weight > 0)) / wsum
        else:
            est = math.nan
        aggregates[cat] = (est, wsum)

    reference = float(np.sum(Dd * y) / np.sum(Dd ** 2))
    return BaconResult(
        comparisons=tuple(rows),
        category_aggregates=aggregates,
        twfe_reference=reference,
        twfe_controlled=controlled,
        omega=omega,
        dropped_entities=dropped,
        excluded_entities=tuple(excluded),
    )


@dataclass(frozen=True)
class BadControlReport:
    always_weight: float
    always_estimate: float
    overall_estimate: float
    flagged: bool
    reasons: tuple

    def to_dict(self) -> dict:
        return {
            "always_weight": _num(self.always_weight),
            "always_estimate": _num(self.always_estimate),
            "overall_estimate": _num(self.overall_estimate),
            "flagged": self.flagged,
            "reasons": list(self.reasons),
        }


def flag_bad_controls(result: BaconResult, threshold: float = 0.05) -> BadControlReport:
    """Diagnose comparisons that use always-treated units as controls.

    Flags when their combined weight exceeds ``threshold`` or their weighted
    estimate has the opposite sign to the overall estimate.
    """
    members = [c for c in result.comparisons if c.category in ALWAYS_CATEGORIES and c.weight > 0]
    weight = float(sum(c.weight for c in members))
    est = float(sum(c.weight * c.estimate for c in members)) / weight if weight > 0 else math.nan
    overall = result.twfe_controlled if math.isfinite(result.twfe_controlled) else result.twfe_reference
    reasons = []
    if weight > threshold:
        reasons.append(f"always-treated comparisons carry weight {weight:.4f} > {threshold}")
    if weight > 0 and math.isfinite(est) and est * overall < 0:
        reasons.append("always-treated comparison estimate has the opposite sign")
    return BadControlReport(weight, est, overall, bool(reasons), tuple(reasons))
