"""Staggered difference-in-differences on top of the fixed-effects core.

Treatment is absorbing: an entity is treated from ``first_event_year + lag``
onward, and later events in the same entity are folded into the first.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    EmptySubset,
    NonNumericValue,
    RaggedHeader,
    UnknownVariable,
    ValidationError,
)
from .panel import PanelDataset, _read_rows
from .regress import (
    DesignSpec,
    FitResult,
    _panel_sample,
    independent_columns,
    logit_fit,
    twfe_fit,
    within_transform,
)

TREATMENT = "hightech"
PLACEBO_MODES = ("permute-both", "permute-entities", "permute-years")


@dataclass(frozen=True)
class TreatmentSchedule:
    """Event years per entity.  Entities absent from the map are never treated."""

    all_event_years: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for ent, years in dict(self.all_event_years).items():
            clean[str(ent)] = tuple(sorted(int(y) for y in years))
        object.__setattr__(self, "all_event_years", clean)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, int | None]]) -> TreatmentSchedule:
        events: dict[str, list] = {}
        for ent, year in pairs:
            events.setdefault(str(ent), [])
            if year is not None:
                events[str(ent)].append(int(year))
        return cls(events)

    @classmethod
    def from_first_years(cls, first: Mapping[str, int | None]) -> TreatmentSchedule:
        return cls({e: (() if y is None else (int(y),)) for e, y in first.items()})

    @property
    def first_event_year(self) -> dict[str, int | None]:
        return {e: (ys[0] if ys else None) for e, ys in self.all_event_years.items()}

    def first(self, entity: str) -> int | None:
        ys = self.all_event_years.get(str(entity), ())
        return ys[0] if ys else None

    @property
    def has_repeats(self) -> bool:
        return any(len(ys) > 1 for ys in self.all_event_years.values())

    def to_rows(self) -> list[list[str]]:
        rows = [["entity", "event_year"]]
        for ent, ys in self.all_event_years.items():
            if not ys:
                rows.append([ent, ""])
            rows.extend([ent, str(y)] for y in ys)
        return rows


def load_schedule(source) -> TreatmentSchedule:
    """Read ``entity,event_year`` rows; repeats allowed, blank year = never."""
    rows = [r for r in _read_rows(source) if r]
    if not rows or [h.strip() for h in rows[0]] != ["entity", "event_year"]:
        raise RaggedHeader("schedule header must be entity,event_year")
    pairs = []
    for rownum, r in enumerate(rows[1:], start=2):
        if len(r) != 2:
            raise RaggedHeader(f"row {rownum} has {len(r)} fields")
        txt = r[1].strip()
        if txt == "":
            pairs.append((r[0].strip(), None))
            continue
        try:
            pairs.append((r[0].strip(), int(txt)))
        except ValueError:
            raise NonNumericValue(f"unparseable event year {txt!r} at row {rownum}", rownum) from None
    return TreatmentSchedule.from_pairs(pairs)


@dataclass(frozen=True)
class TreatmentPanel:
    entities: tuple
    years: np.ndarray
    D: np.ndarray
    first_event_year: Mapping[str, int | None]
    lag: int = 1
    collapsed: bool = False

    def first_treated_year(self, entity: str) -> int | None:
        y = self.first_event_year.get(entity)
        return None if y is None else y + self.lag


def build_treatment(
    schedule: TreatmentSchedule,
    entities: Sequence[str],
    years: Sequence[int],
    lag: int = 1,
    drop_treated_before: int | None = None,
) -> tuple[TreatmentPanel, list[str]]:
    """Absorbing 0/1 treatment panel, D(i,t) = 1 iff t >= first event + lag.

    Entities whose first event precedes ``drop_treated_before`` are removed
    and returned as the second element.
    """
    if lag < 0:
        raise ValidationError("lag must be >= 0")
    years = np.asarray(years, dtype=int)
    kept, excluded = [], []
    for ent in entities:
        first = schedule.first(ent)
        if drop_treated_before is not None and first is not None and first < drop_treated_before:
            excluded.append(str(ent))
        else:
            kept.append(str(ent))
    D = np.zeros((len(kept), years.size))
    firsts = {}
    for i, ent in enumerate(kept):
        first = schedule.first(ent)
        firsts[ent] = first
        if first is not None:
            D[i] = years >= first + lag
    return (
        TreatmentPanel(tuple(kept), years, D, firsts, lag, schedule.has_repeats),
        excluded,
    )


def treatment_for(ds: PanelDataset, schedule: TreatmentSchedule, lag: int = 1,
                  drop_treated_before: int | None = None):
    return build_treatment(schedule, ds.entities, ds.years, lag, drop_treated_before)


def align(ds: PanelDataset, treatment: TreatmentPanel, name: str = TREATMENT) -> PanelDataset:
    """Restrict ``ds`` to the treatment panel's entities and add the D column."""
    if not np.array_equal(ds.years, treatment.years):
        raise ValidationError("treatment panel years differ from dataset years")
    missing = set(treatment.entities) - set(ds.entities)
    if missing:
        raise ValidationError(f"treatment entities missing from dataset: {sorted(missing)[:5]}")
    keep = set(treatment.entities)
    sub = ds.select_entities([e in keep for e in ds.entities])
    order = {e: i for i, e in enumerate(treatment.entities)}
    D = treatment.D[[order[e] for e in sub.entities]]
    return sub.with_column(name, D, overwrite=True)


def att_estimate(
    ds: PanelDataset,
    treatment: TreatmentPanel,
    outcome: str,
    controls: Sequence[str] = (),
    cluster: str | None = None,
) -> FitResult:
    """Two-way fixed-effects DiD; the effect is the coefficient ``hightech``."""
    data = align(ds, treatment)
    spec = DesignSpec(outcome, (TREATMENT, *controls), cluster=cluster)
    return twfe_fit(data, spec)


# --------------------------------------------------------------------------
# event study


@dataclass(frozen=True)
class EventStudyResult:
    coefficients: Mapping[int, tuple]
    window: tuple
    reference_period: int = -1
    binned_endpoints: bool = True
    df_resid: int = 0
    fit: FitResult | None = field(default=None, repr=False, compare=False)

    def coef(self, k: int) -> float:
        return self.coefficients[k][0]

    def se(self, k: int) -> float:
        return self.coefficients[k][1]

    def tstat(self, k: int) -> float:
        c, s = self.coefficients[k]
        return c / s if s > 0 else math.nan

    @property
    def pre_periods(self) -> list[int]:
        return [k for k in self.coefficients if k < self.reference_period]

    def to_rows(self) -> list[list[str]]:
        rows = [["rel_time", "coef", "se"]]
        for k in sorted(self.coefficients):
            c, s = self.coefficients[k]
            rows.append([str(k), _fmt(c), _fmt(s)])
        return rows


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _rel_name(k: int) -> str:
    return f"rel_m{-k}" if k < 0 else f"rel_{k}"


def event_study(
    ds: PanelDataset,
    schedule: TreatmentSchedule,
    outcome: str,
    controls: Sequence[str] = (),
    window: tuple[int, int] = (-5, 5),
    cluster: str | None = None,
    lag: int = 1,
    drop_treated_before: int | None = None,
) -> EventStudyResult:
    """Relative-time dynamic specification with k = -1 omitted.

    Relative times at or beyond the window ends accumulate into the endpoint
    bins.  A relative time no entity reaches is reported as NaN.
    """
    a, b = int(window[0]), int(window[1])
    if not a <= -1 < 0 <= b:
        raise ValidationError("event window must contain -1 and 0")
    treatment, _ = treatment_for(ds, schedule, lag, drop_treated_before)
    data = align(ds, treatment)
    years = data.years
    rel = np.full(data.shape, np.nan)
    for i, ent in enumerate(data.entities):
        start = treatment.first_treated_year(ent)
        if start is not None:
            rel[i] = np.clip(years - start, a, b)
    if np.all(~np.isnan(rel)):
        raise ValidationError("event study needs never-treated entities")
    ks = [k for k in range(a, b + 1) if k != -1]
    for k in ks:
        data = data.with_column(_rel_name(k), (rel == k).astype(float), overwrite=True)
    spec = DesignSpec(outcome, tuple(_rel_name(k) for k in ks) + tuple(controls), cluster=cluster)
    fit = twfe_fit(data, spec, on_no_variation="drop")
    coefs = {-1: (0.0, 0.0)}
    est = fit.coefficients
    ses = fit.se
    for k in ks:
        nm = _rel_name(k)
        coefs[k] = (est[nm], ses[nm]) if nm in est else (math.nan, math.nan)
    return EventStudyResult(dict(sorted(coefs.items())), (a, b), -1, True, fit.df_resid, fit)


# --------------------------------------------------------------------------
# placebo


@dataclass(frozen=True)
class PlaceboResult:
    draws: np.ndarray
    observed: float
    p_value: float
    seed: int
    mode: str = "permute-both"

    def to_rows(self) -> list[list[str]]:
        return [["rep", "delta"]] + [[str(r), _fmt(d)] for r, d in enumerate(self.draws)]

    def to_dict(self) -> dict:
        draws = self.draws[~np.isnan(self.draws)]
        return {
            "observed": self.observed,
            "p_value": self.p_value,
            "n_reps": int(self.draws.size),
            "seed": int(self.seed),
            "mode": self.mode,
            "mean": float(draws.mean()) if draws.size else None,
            "sd": float(draws.std(ddof=1)) if draws.size > 1 else None,
        }


def pseudo_schedule(entities: Sequence[str], firsts: Sequence[int | None],
                    rng: np.random.Generator, mode: str) -> list[int | None]:
    """Reassign event years, keeping the treated count and the year multiset."""
    n = len(entities)
    treated = [i for i, y in enumerate(firsts) if y is not None]
    years = [firsts[i] for i in treated]
    out: list[int | None] = [None] * n
    if mode == "permute-years":
        for i, y in zip(treated, rng.permutation(np.array(years, dtype=int))):
            out[i] = int(y)
    elif mode == "permute-entities":
        chosen = np.sort(rng.choice(n, size=len(treated), replace=False))
        for i, y in zip(chosen, years):
            out[int(i)] = int(y)
    elif mode == "permute-both":
        chosen = rng.choice(n, size=len(treated), replace=False)
        for i, y in zip(chosen, rng.permutation(np.array(years, dtype=int))):
            out[int(i)] = int(y)
    else:
        raise ValidationError(f"unknown placebo mode {mode!r}")
    return out


class _FastATT:
    """Re-estimates the treatment coefficient for many treatment paths.

    The estimation sample and the transformed outcome/controls do not depend
    on D, so only D is re-transformed for each draw (Frisch-Waugh-Lovell).
    """

    def __init__(self, data: PanelDataset, outcome: str, controls: Sequence[str]):
        s = _panel_sample(data, outcome, tuple(controls))
        self.mask = s.mask
        self.ent, self.yr = s.ent, s.yr
        self.ei, self.ti = np.nonzero(s.mask)
        yd = within_transform(s.y, s.ent, s.yr)
        if s.X.shape[1]:
            Xd = within_transform(s.X, s.ent, s.yr)
            keep = independent_columns(Xd)
            self.Q = np.linalg.qr(Xd[:, keep])[0] if keep else None
        else:
            self.Q = None
        self.yd = yd
        self.years = data.years

    def delta(self, D_panel: np.ndarray) -> float:
        d = D_panel[self.ei, self.ti]
        dd = within_transform(d, self.ent, self.yr)
        if self.Q is not None:
            dd = dd - self.Q @ (self.Q.T @ dd)
        den = float(dd @ dd)
        if den <= 1e-12 * max(1.0, float(d @ d)):
            return math.nan
        return float(dd @ self.yd) / den


def placebo(
    ds: PanelDataset,
    schedule: TreatmentSchedule,
    outcome: str,
    controls: Sequence[str] = (),
    n_reps: int = 500,
    seed: int = 0,
    mode: str = "permute-both",
    lag: int = 1,
    drop_treated_before: int | None = None,
    threads: int = 1,
) -> PlaceboResult:
    """Permutation distribution of the DiD coefficient under random assignment.

    Replication ``r`` draws from ``default_rng([seed, r])`` so the output does
    not depend on ``threads``.
    """
    if n_reps < 1:
        raise ValidationError("n_reps must be >= 1")
    if mode not in PLACEBO_MODES:
        raise ValidationError(f"mode must be one of {PLACEBO_MODES}")
    treatment, _ = treatment_for(ds, schedule, lag, drop_treated_before)
    data = align(ds, treatment)
    engine = _FastATT(data, outcome, controls)
    observed = engine.delta(data.column(TREATMENT))
    entities = data.entities
    firsts = [treatment.first_event_year[e] for e in entities]
    years = data.years

    def one(rep: int) -> float:
        rng = np.random.default_rng([int(seed), int(rep)])
        pseudo = pseudo_schedule(entities, firsts, rng, mode)
        D = np.zeros(data.shape)
        for i, y in enumerate(pseudo):
            if y is not None:
                D[i] = years >= y + lag
        return engine.delta(D)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            draws = np.array(list(pool.map(one, range(n_reps))))
    else:
        draws = np.array([one(r) for r in range(n_reps)])
    valid = draws[~np.isnan(draws)]
    p = float(np.mean(np.abs(valid) >= abs(observed))) if valid.size else math.nan
    return PlaceboResult(draws, observed, p, int(seed), mode)


# --------------------------------------------------------------------------
# selection, moderation, heterogeneity


def treatment_status(ds: PanelDataset, treatment: TreatmentPanel, name: str = TREATMENT,
                     ever: bool = False) -> PanelDataset:
    """Aligned dataset with a 0/1 status column (current D, or ever-treated)."""
    data = align(ds, treatment, name)
    if ever:
        D = data.column(name)
        data = data.with_column(name, np.repeat(D.max(axis=1, keepdims=True), data.n_years, 1),
                                overwrite=True)
    return data


def selection_test(ds: PanelDataset, status: str, predictors: Sequence[str],
                   year: int | None = None) -> FitResult:
    """Logit of treatment status on candidate predictors (pooled or one year)."""
    return logit_fit(ds, DesignSpec(status, tuple(predictors), fixed_effects=()), year=year)


@dataclass(frozen=True)
class ModerationSpec:
    moderator: str
    center: bool = False

    def __post_init__(self):
        if self.moderator == TREATMENT:
            raise ValidationError("moderator cannot be the treatment column")


def moderation_fit(
    ds: PanelDataset,
    treatment: TreatmentPanel,
    spec: ModerationSpec,
    outcome: str,
    controls: Sequence[str] = (),
    cluster: str | None = None,
) -> FitResult:
    """TWFE with D, the moderator M and D x M (named ``hightech_<M>``)."""
    data = align(ds, treatment)
    if spec.moderator not in data.columns:
        raise UnknownVariable(f"unknown moderator {spec.moderator!r}")
    M = data.column(spec.moderator)
    if spec.center:
        M = M - np.nanmean(M)
        data = data.with_column(spec.moderator, M, overwrite=True)
    inter = f"{TREATMENT}_{spec.moderator}"
    data = data.with_column(inter, data.column(TREATMENT) * M, overwrite=True)
    design = DesignSpec(outcome, (TREATMENT, spec.moderator, inter, *controls), cluster=cluster)
    return twfe_fit(data, design)


def subset(ds: PanelDataset, predicate: Callable[[dict], bool] | Mapping) -> PanelDataset:
    """Keep entities whose meta attributes satisfy ``predicate``.

    ``predicate`` is either a callable on the entity's attribute dict or a
    mapping ``attribute -> value`` (or collection of accepted values).
    """
    if isinstance(predicate, Mapping):
        for attr in predicate:
            if attr not in ds.meta and attr != "entity":
                raise UnknownVariable(f"unknown meta attribute {attr!r}")
        rules = {
            a: ({v} if isinstance(v, (str, int, float)) else set(v))
            for a, v in predicate.items()
        }

        def test(row):
            return all(row[a] in allowed for a, allowed in rules.items())
    else:
        test = predicate
    keep = []
    for i, ent in enumerate(ds.entities):
        row = {"entity": ent, **{k: v[i] for k, v in ds.meta.items()}}
        keep.append(bool(test(row)))
    if not any(keep):
        raise EmptySubset("predicate matches no entity")
    return ds.select_entities(keep)


def write_rows(rows: list[list[str]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
