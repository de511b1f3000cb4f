import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policyeval.did import TREATMENT, att_estimate, treatment_for
from policyeval.errors import DegenerateSample, InvalidSpec, SingularSystem, TooLarge
from policyeval.regress import DesignSpec
from policyeval.spatial import row_normalize
from policyeval.synth import (
    DgpSpec,
    entity_names,
    lattice_weights,
    normals,
    oracle_dummy_ols,
    simulate_did,
    simulate_rings,
    simulate_sdm,
    patent_fixture,
    uniforms,
    write_patent_fixture,
)


class TestRng:
    def test_streams(self):
        np.testing.assert_array_equal(uniforms(1, 2, 50), uniforms(1, 2, 50))
        assert not np.array_equal(uniforms(1, 2, 50), uniforms(1, 3, 50))
        assert not np.array_equal(uniforms(1, 2, 50), uniforms(2, 2, 50))
        u = uniforms(0, 0, 10000)
        assert 0 < u.min() and u.max() < 1
        assert abs(u.mean() - 0.5) < 0.01

    def test_prefix_stable(self):
        np.testing.assert_array_equal(uniforms(5, 1, 20), uniforms(5, 1, 40)[:20])

    def test_normals(self):
        z = normals(3, 0, (200, 50))
        assert z.shape == (200, 50)
        assert abs(z.mean()) < 0.02 and abs(z.std() - 1) < 0.02

    def test_names(self):
        assert entity_names(3) == ("e001", "e002", "e003")


class TestSimulateDid:
    def test_deterministic(self):
        spec = DgpSpec(20, 6, delta=1.0, cohort_fractions={2002: 0.5}, beta=(1.0, -1.0), seed=9)
        (a, sa), (b, sb) = simulate_did(spec), simulate_did(spec)
        for c in a.columns:
            np.testing.assert_array_equal(a[c], b[c])
        assert sa.first_event_year == sb.first_event_year
        c, _ = simulate_did(spec.replace(seed=10))
        assert not np.array_equal(a["y"], c["y"])

    def test_noiseless_exact(self):
        spec = DgpSpec(50, 10, delta=5.0, cohort_fractions={2003: 0.2, 2006: 0.2},
                       noise_sd=0.0, seed=2)
        ds, sched = simulate_did(spec)
        fit = att_estimate(ds, treatment_for(ds, sched)[0], "y")
        assert fit.coefficients[TREATMENT] == pytest.approx(5.0, abs=1e-10)

    def test_cohort_counts(self):
        ds, sched = simulate_did(DgpSpec(100, 5, cohort_fractions={2001: 0.25, 2003: 0.1}, seed=1))
        firsts = list(sched.first_event_year.values())
        assert firsts.count(2001) == 25 and firsts.count(2003) == 10
        assert sum(f is None for f in firsts) == 65

    def test_heterogeneous_effects(self):
        spec = DgpSpec(100, 10, cohort_fractions={2003: 0.3, 2006: 0.3},
                       effect_heterogeneity={2003: 1.0, 2006: 4.0}, noise_sd=0.0, seed=3)
        ds, sched = simulate_did(spec)
        early = [i for i, e in enumerate(ds.entities) if sched.first(e) == 2003]
        jump = ds["y"][early, 5] - ds["y"][early, 3]
        never = [i for i, e in enumerate(ds.entities) if sched.first(e) is None]
        base = (ds["y"][never, 5] - ds["y"][never, 3]).mean()
        # entities in the 2003 cohort are treated from 2004, so 2005 vs 2003 spans the switch
        gain = jump - base
        np.testing.assert_allclose(gain, 1.0, atol=1e-9)

    def test_pre_trend_shows_before_treatment(self):
        ds, sched = simulate_did(DgpSpec(40, 10, cohort_fractions={2006: 0.5}, pre_trend=0.5,
                                         noise_sd=0.0, entity_fe_sd=0.0, year_fe_sd=0.0, seed=1))
        treated = [i for i, e in enumerate(ds.entities) if sched.first(e) == 2006]
        assert np.ptp(ds["y"][treated, :6]) > 0

    @pytest.mark.parametrize("bad", [
        dict(n_entities=0, n_years=5),
        dict(n_entities=5, n_years=5, cohort_fractions={2001: 0.7, 2002: 0.5}),
        dict(n_entities=5, n_years=5, noise_sd=-1),
        dict(n_entities=5, n_years=5, rho=1.0),
        dict(n_entities=5, n_years=5, seed=-1),
        dict(n_entities=5, n_years=5, beta=(1.0,), gamma=(1.0, 2.0)),
        dict(n_entities=5, n_years=5, effect_heterogeneity={2004: 1.0}),
    ])
    def test_invalid(self, bad):
        with pytest.raises(InvalidSpec):
            DgpSpec(**bad)


class TestSimulateSdm:
    def test_solves_the_system(self):
        W = row_normalize(lattice_weights(4, 5))
        spec = DgpSpec(20, 6, delta=2.0, cohort_fractions={2002: 0.3}, rho=0.4,
                       beta=(1.0,), gamma=(0.7,), seed=4)
        ds, _ = simulate_sdm(spec, W)
        plain, _ = simulate_sdm(spec.replace(rho=None), W)
        M = W.matrix
        np.testing.assert_allclose((np.eye(20) - 0.4 * M) @ ds["y"], plain["y"], atol=1e-10)

    def test_zero_rho_is_did(self):
        W = row_normalize(lattice_weights(3, 3))
        spec = DgpSpec(9, 5, delta=1.0, cohort_fractions={2002: 0.3}, beta=(1.0,), seed=5)
        a, _ = simulate_sdm(spec.replace(rho=0.0), W)
        b, _ = simulate_did(spec)
        np.testing.assert_array_equal(a["y"], b["y"])

    def test_near_singular(self):
        W = row_normalize(lattice_weights(3, 3))
        with pytest.warns(RuntimeWarning):
            simulate_sdm(DgpSpec(9, 4, rho=0.999, seed=1), W)

    def test_singular(self):
        W = lattice_weights(3, 3)  # raw contiguity, largest eigenvalue above 2
        with pytest.raises(SingularSystem):
            simulate_sdm(DgpSpec(9, 4, rho=0.5, seed=1), W)


class TestRings:
    def test_hosts_far_apart(self):
        from policyeval.spatial import haversine
        spec = DgpSpec(150, 8, delta=1.0, cohort_fractions={2003: 0.2, 2005: 0.2}, seed=1)
        ds, sched, cents, zones = simulate_rings(spec, radius_km=20)
        assert zones
        for i, a in enumerate(zones):
            assert sched.first(a.entity) == a.year
            for b in zones[i + 1:]:
                assert haversine(a.point, b.point) > 40


class TestOracle:
    def test_too_large(self):
        ds, _ = simulate_did(DgpSpec(501, 10, beta=(1.0,), seed=1))
        with pytest.raises(TooLarge):
            oracle_dummy_ols(ds, DesignSpec("y", ("x1",)))

    def test_degenerate(self):
        ds, _ = simulate_did(DgpSpec(1, 5, beta=(1.0,), seed=1))
        with pytest.raises(DegenerateSample):
            oracle_dummy_ols(ds, DesignSpec("y", ("x1",)))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_agrees_with_within_estimator(self, seed):
        from policyeval.regress import twfe_fit
        ds, _ = simulate_did(DgpSpec(15, 6, beta=(1.0, 2.0), seed=seed))
        spec = DesignSpec("y", ("x1", "x2"))
        a, b = twfe_fit(ds, spec), oracle_dummy_ols(ds, spec)
        np.testing.assert_allclose(a.params, b.params, rtol=1e-8)
        np.testing.assert_allclose(a.vcov, b.vcov, rtol=1e-8)


class TestPatentFixture:
    def test_structure(self):
        ds, sched = patent_fixture()
        pat = ds["patentapplied"]
        obs = pat[~np.isnan(pat)]
        assert ds.shape == (345, 20)
        assert obs.size == 6888
        assert obs.min() == 1 and obs.max() == 239892
        assert round(obs.mean(), 2) == 3821.17
        assert np.all(obs == np.round(obs))
        assert np.nansum(ds[TREATMENT]) == 1722

    def test_shipped_files_match_generator(self, tmp_path, fixtures_dir):
        write_patent_fixture(tmp_path)
        for name in ("patent_panel.csv", "patent_schedule.csv"):
            assert (tmp_path / name).read_bytes() == (fixtures_dir / name).read_bytes()
