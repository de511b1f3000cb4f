import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_panel
from policyeval.bacon import (
    CATEGORIES,
    BaconResult,
    TwoByTwoComparison,
    bacon_decompose,
    flag_bad_controls,
)
from policyeval.did import TREATMENT, TreatmentSchedule, att_estimate, treatment_for
from policyeval.errors import SingleCohortNoControlGroup, UnbalancedPanel
from policyeval.regress import DesignSpec, twfe_fit
from policyeval.synth import DgpSpec, simulate_did


def panel_from(firsts, y):
    ents = [f"e{i}" for i in range(len(firsts))]
    ds = make_panel({"y": y}, entities=ents, start=2000)
    return ds, TreatmentSchedule.from_first_years(dict(zip(ents, firsts)))


def twfe_coef(ds, sched, controls=()):
    return att_estimate(ds, treatment_for(ds, sched)[0], "y", list(controls)).coefficients[TREATMENT]


def group_2x2(ds, sched, treated, control, years):
    """Run a two-group TWFE regression restricted to the given entities and years."""
    keep = [e for e in ds.entities if e in treated or e in control]
    sub = ds.select_entities(np.isin(ds.entities, keep))
    tp, _ = treatment_for(sub, sched)
    D = tp.D.copy()
    cols = np.isin(sub.years, years)
    ctrl_rows = np.isin(sub.entities, list(control))
    D[ctrl_rows] = 0
    y = sub["y"][:, cols]
    ents = list(sub.entities)
    small = make_panel({"y": y, TREATMENT: D[:, cols]}, entities=ents, start=int(years[0]))
    return twfe_fit(small, DesignSpec("y", (TREATMENT,))).coefficients[TREATMENT]


class TestHomogeneous:
    def test_unit_effect_everywhere(self):
        # first events 2000 and 2001 with lag 1 put treatment start at periods 1 and 2
        firsts = [2000, 2000, 2001, 2001, None, None]
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(6, 1)), rng.normal(size=(1, 4))
        ds, sched = panel_from(firsts, a + b)
        tp, _ = treatment_for(ds, sched)
        ds = ds.with_column("y", ds["y"] + tp.D, overwrite=True)
        res = bacon_decompose(ds, sched, "y")
        assert len(res.comparisons) == 4
        for c in res.comparisons:
            assert c.estimate == pytest.approx(1.0, abs=1e-12)
        assert res.total_weight == pytest.approx(1.0, abs=1e-12)
        assert res.twfe_reference == pytest.approx(1.0, abs=1e-12)
        assert {c.comparison for c in res.comparisons} == {
            "never-treated", "later-cohort(2001)", "earlier-cohort(2000)"}


def random_design(seed, always=True):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(4, 9))
    n = int(rng.integers(8, 25))
    options = [None] + list(range(2000, 1999 + T - 1))
    if always:
        options.append(1995)
    firsts = [options[i] for i in rng.integers(0, len(options), size=n)]
    firsts[0] = 2001  # at least one timing group
    firsts[1] = None
    return panel_from(firsts, rng.normal(size=(n, T)) * 3 + rng.normal(size=(n, 1)))


class TestAddingUp:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10 ** 6), st.booleans())
    def test_weights_and_estimate(self, seed, always):
        ds, sched = random_design(seed, always)
        res = bacon_decompose(ds, sched, "y")
        assert res.total_weight == pytest.approx(1.0, abs=1e-10)
        assert all(c.weight >= 0 for c in res.comparisons)
        expected = twfe_coef(ds, sched)
        assert res.weighted_estimate == pytest.approx(expected, rel=1e-8, abs=1e-10)
        assert res.twfe_reference == pytest.approx(expected, rel=1e-8, abs=1e-10)

    def test_pair_estimates_match_subsample_regressions(self):
        ds, sched = random_design(3, always=True)
        res = bacon_decompose(ds, sched, "y")
        tp, _ = treatment_for(ds, sched)
        first = {e: tp.first_treated_year(e) for e in ds.entities}

        def members(label):
            if label == "never":
                return {e for e, f in first.items() if f is None}
            if label == "always":
                return {e for e, f in first.items() if f is not None and f <= ds.years[0]}
            return {e for e, f in first.items() if f == int(label) + 1}

        years = np.asarray(ds.years)
        checked = 0
        for c in res.comparisons:
            if c.weight == 0:
                continue
            treated = members(c.treated_cohort)
            start = int(c.treated_cohort) + 1
            if c.comparison.startswith("later-cohort("):
                other = c.comparison[len("later-cohort("):-1]
                control = members(other)
                window = years[years < int(other) + 1]
            elif c.comparison.startswith("earlier-cohort("):
                other = c.comparison[len("earlier-cohort("):-1]
                control = members(other)
                window = years[years >= int(other) + 1]
            else:
                control = members(c.comparison.split("-")[0])
                window = years
            assert window.min() < start <= window.max()
            assert c.estimate == pytest.approx(group_2x2(ds, sched, treated, control, window),
                                               rel=1e-9, abs=1e-9)
            checked += 1
        assert checked >= 3

    def test_affine_transform(self):
        ds, sched = random_design(11)
        base = bacon_decompose(ds, sched, "y")
        scaled = bacon_decompose(ds.with_column("y", 2.5 * ds["y"] + 7.0, overwrite=True), sched, "y")
        for a, b in zip(base.comparisons, scaled.comparisons):
            assert b.weight == pytest.approx(a.weight, abs=1e-14)
            if a.weight > 0:
                assert b.estimate == pytest.approx(2.5 * a.estimate, rel=1e-9, abs=1e-9)


class TestAlwaysTreated:
    def test_no_always_no_weight(self):
        ds, sched = random_design(5, always=False)
        res = bacon_decompose(ds, sched, "y")
        assert "Timing vs always treated" not in res.category_aggregates
        assert flag_bad_controls(res).always_weight == 0

    def test_never_vs_always_placeholder(self):
        ds, sched = random_design(6)
        res = bacon_decompose(ds, sched, "y")
        row = [c for c in res.comparisons if c.category == "Never treated vs always treated"]
        assert len(row) == 1 and row[0].weight == 0 and math.isnan(row[0].estimate)

    def test_contaminated_controls_flagged(self):
        # always-treated units keep growing after treatment, biasing comparisons that use them
        spec = DgpSpec(120, 12, delta=2.0, cohort_fractions={1995: 0.15, 2005: 0.3, 2008: 0.3},
                       noise_sd=0.2, seed=3)
        ds, sched = simulate_did(spec)
        tp, _ = treatment_for(ds, sched)
        always = np.array([(tp.first_treated_year(e) or 9999) <= ds.years[0] for e in ds.entities])
        trend = np.arange(12.0)[None, :] * 0.6 * always[:, None]
        ds = ds.with_column("y", ds["y"] + trend, overwrite=True)
        res = bacon_decompose(ds, sched, "y")
        report = flag_bad_controls(res)
        assert report.flagged
        assert report.always_estimate < 0 < res.twfe_reference


class TestErrors:
    def test_unbalanced(self):
        ds, sched = random_design(7)
        y = ds["y"].copy()
        y[2, 1] = np.nan
        ds = ds.with_column("y", y, overwrite=True)
        with pytest.raises(UnbalancedPanel):
            bacon_decompose(ds, sched, "y")
        res = bacon_decompose(ds, sched, "y", balance=True)
        assert res.dropped_entities == (ds.entities[2],)
        assert res.total_weight == pytest.approx(1.0)

    def test_single_group(self):
        ds, sched = panel_from([2001] * 4, np.zeros((4, 5)))
        with pytest.raises(SingleCohortNoControlGroup):
            bacon_decompose(ds, sched, "y")

    def test_only_never_and_always(self):
        ds, sched = panel_from([1990, 1990, None, None], np.arange(20.0).reshape(4, 5))
        with pytest.raises(SingleCohortNoControlGroup):
            bacon_decompose(ds, sched, "y")


class TestCovariates:
    def test_within_row_and_weights(self):
        spec = DgpSpec(150, 10, delta=1.5, cohort_fractions={2003: 0.3, 2006: 0.3},
                       beta=(0.8,), seed=8)
        ds, sched = simulate_did(spec)
        res = bacon_decompose(ds, sched, "y", controls=["x1"])
        assert "Within group" in res.category_aggregates
        assert 0 <= res.omega < 1
        assert res.total_weight == pytest.approx(1.0, abs=1e-10)
        assert res.twfe_controlled == pytest.approx(twfe_coef(ds, sched, ["x1"]), rel=1e-8)
        assert res.weighted_estimate == pytest.approx(res.twfe_controlled, abs=0.25)
        names = [r[0] for r in res.category_rows()[1:]]
        assert names == [c for c in CATEGORIES if c in names]

    def test_irrelevant_control_is_near_exact(self):
        ds, sched = random_design(9, always=False)
        x = np.tile(np.arange(ds.n_years, dtype=float) ** 2, (ds.n_entities, 1))
        ds = ds.with_column("x", x)
        res = bacon_decompose(ds, sched, "y", controls=["x"])
        assert res.omega == pytest.approx(0.0, abs=1e-12)
        assert res.weighted_estimate == pytest.approx(twfe_coef(ds, sched), rel=1e-8)


class TestFlagging:
    def reported(self):
        rows = [
            ("Timing groups", 4000.0, 0.179087985),
            ("Timing vs always treated", -14195.31, 0.203117354),
            ("Never treated vs timing", 9000.0, 0.601346382),
            ("Never treated vs always treated", 1000.0, 0.000102218),
            ("Within group", 2000.0, 0.016346062),
        ]
        comps = tuple(TwoByTwoComparison("c", "x", cat, est, w) for cat, est, w in rows)
        total = sum(e * w for _, e, w in rows)
        return BaconResult(comps, {cat: (e, w) for cat, e, w in rows}, total)

    def test_weights_sum_to_one(self):
        assert self.reported().total_weight == pytest.approx(1.0, abs=1e-6)

    def test_flags_large_negative_always_weight(self):
        report = flag_bad_controls(self.reported())
        assert report.flagged
        assert report.always_weight == pytest.approx(0.203219572)
        assert len(report.reasons) == 2

    def test_threshold(self):
        res = self.reported()
        assert len(flag_bad_controls(res, threshold=0.5).reasons) == 1

    def test_csv_rows(self):
        res = self.reported()
        assert res.category_rows()[0] == ["category", "estimate", "weight"]
        assert res.pair_rows()[0] == ["treated_cohort", "comparison", "estimate", "weight"]
        assert set(res.to_dict()["categories"]) == set(CATEGORIES)
