import io
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policyeval.did import TREATMENT, att_estimate, treatment_for
from policyeval.errors import (
    NonNormalizedWeights,
    RaggedHeader,
    RhoAtBoundary,
    SelfLoop,
    UnbalancedPanel,
    UnknownEntity,
    ValidationError,
)
from policyeval.regress import DesignSpec, twfe_fit
from policyeval.spatial import (
    GeoPoint,
    SdmProfile,
    Zone,
    build_weights_adjacency,
    build_weights_distance,
    build_weights_knn,
    check_row_normalized,
    default_ring_count,
    destination_point,
    haversine,
    load_adjacency,
    load_centroids,
    load_zones,
    ring_dummies,
    ring_index,
    ring_regression,
    ring_rows,
    row_normalize,
    sdm_fit,
)
from policyeval.synth import DgpSpec, lattice_weights, simulate_did, simulate_sdm

lons = st.floats(-180, 180, allow_nan=False)
lats = st.floats(-90, 90, allow_nan=False)
points = st.builds(GeoPoint, lons, lats)


class TestHaversine:
    def test_one_degree_on_equator(self):
        assert haversine(GeoPoint(0, 0), GeoPoint(1, 0)) == pytest.approx(111.19492664, abs=1e-6)

    def test_antipodes(self):
        assert haversine(GeoPoint(0, 0), GeoPoint(180, 0)) == pytest.approx(20015.0866, abs=1e-3)

    def test_range_checked(self):
        with pytest.raises(ValidationError):
            GeoPoint(181, 0)
        with pytest.raises(ValidationError):
            GeoPoint(0, -91)

    @settings(max_examples=200)
    @given(points, points)
    def test_symmetric_nonnegative(self, a, b):
        d = haversine(a, b)
        assert d >= 0
        assert d == pytest.approx(haversine(b, a), abs=1e-9)
        assert haversine(a, a) == 0

    @settings(max_examples=200)
    @given(points, points, points)
    def test_triangle(self, a, b, c):
        assert haversine(a, c) <= haversine(a, b) + haversine(b, c) + 1e-6

    @settings(max_examples=100)
    @given(st.floats(-170, 170), st.floats(-60, 60), st.floats(0, 360), st.floats(0.1, 500))
    def test_destination_roundtrip(self, lon, lat, bearing, km):
        p = destination_point(GeoPoint(lon, lat), bearing, km)
        assert haversine(GeoPoint(lon, lat), p) == pytest.approx(km, rel=1e-7)


class TestWeights:
    def test_adjacency(self):
        W = build_weights_adjacency(["a", "b", "c"], [("a", "b"), ("b", "c")])
        np.testing.assert_array_equal(W.matrix, [[0, 1, 0], [1, 0, 1], [0, 1, 0]])
        with pytest.raises(SelfLoop):
            build_weights_adjacency(["a", "b"], [("a", "a")])
        with pytest.raises(UnknownEntity):
            build_weights_adjacency(["a", "b"], [("a", "z")])

    def test_empty_pairs(self):
        W = row_normalize(build_weights_adjacency(["a", "b"], []))
        assert not W.matrix.any()
        assert W.zero_rows == ("a", "b")

    def test_row_normalize(self):
        W = row_normalize(build_weights_adjacency(["a", "b", "c"], [("a", "b"), ("b", "c")]))
        np.testing.assert_allclose(W.matrix, [[0, 1, 0], [0.5, 0, 0.5], [0, 1, 0]])
        np.testing.assert_array_equal(row_normalize(W).matrix, W.matrix)
        check_row_normalized(W)

    def test_zero_row_kept(self):
        W = row_normalize(build_weights_adjacency(["a", "b", "c"], [("a", "b")]))
        assert W.zero_rows == ("c",)
        np.testing.assert_array_equal(W.matrix[2], 0)

    def test_not_normalized(self):
        W = build_weights_adjacency(["a", "b", "c"], [("a", "b"), ("b", "c")])
        with pytest.raises(NonNormalizedWeights):
            check_row_normalized(W)

    def test_reorder(self):
        W = build_weights_adjacency(["a", "b", "c"], [("a", "b")])
        R = W.reorder(["c", "b", "a"])
        assert R.matrix[1, 2] == 1 and R.matrix[0].sum() == 0
        with pytest.raises(UnknownEntity):
            W.reorder(["a", "b", "z"])
        with pytest.raises(UnbalancedPanel):
            W.reorder(["a", "b"])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 6), st.integers(2, 6), st.booleans())
    def test_eigen_bound(self, r, c, queen):
        W = row_normalize(lattice_weights(r, c, queen))
        lam = np.linalg.eigvals(W.matrix)
        assert np.max(lam.real) == pytest.approx(1.0, abs=1e-10)
        assert np.max(np.abs(lam)) <= 1 + 1e-10

    def test_distance_and_knn(self):
        cents = {"a": GeoPoint(0, 0), "b": GeoPoint(0.1, 0), "c": GeoPoint(1, 0)}
        Wd = build_weights_distance(cents, 50)
        assert Wd.matrix[0, 1] == pytest.approx(1 / haversine(cents["a"], cents["b"]))
        assert Wd.matrix[0, 2] == 0
        Wk = build_weights_knn(cents, 1)
        np.testing.assert_array_equal(Wk.matrix, [[0, 1, 0], [1, 0, 0], [0, 1, 0]])

    def test_loaders(self):
        W = load_adjacency(io.StringIO("entity_a,entity_b\na,b\n"), ["a", "b"])
        assert W.matrix[0, 1] == 1
        with pytest.raises(RaggedHeader):
            load_adjacency(io.StringIO("x,y\na,b\n"), ["a", "b"])
        cents = load_centroids(io.StringIO("entity,lon,lat\na,110.5,30.25\n"))
        assert cents["a"] == GeoPoint(110.5, 30.25)
        zones = load_zones(io.StringIO("lon,lat,year,entity\n110.5,30.25,2005,a\n111,30,2007,\n"))
        assert zones[0] == Zone(GeoPoint(110.5, 30.25), 2005, "a")
        assert zones[1].entity is None


def brute_loglik(ds, W, treatment, outcome, controls, rho):
    """Concentrated log-likelihood from an explicit dummy regression and a direct log-determinant."""
    tp = treatment
    N, T = ds.shape
    M = W.reorder(ds.entities).matrix
    y = ds[outcome]
    ystar = (np.eye(N) - rho * M) @ y
    cols = [tp.D] + [ds[c] for c in controls] + [M @ ds[c] for c in controls]
    Z = np.column_stack([c.ravel() for c in cols])
    ent = np.kron(np.eye(N), np.ones((T, 1)))
    yr = np.kron(np.ones((N, 1)), np.eye(T))[:, 1:]
    X = np.column_stack([Z, ent, yr])
    e = ystar.ravel() - X @ np.linalg.lstsq(X, ystar.ravel(), rcond=None)[0]
    n = N * T
    s2 = e @ e / n
    sign, logdet = np.linalg.slogdet(np.eye(N) - rho * M)
    return -n / 2 * (math.log(2 * math.pi * s2) + 1) + T * logdet


class TestSdm:
    def data(self, rho=0.4, seed=0, n=6):
        W = row_normalize(lattice_weights(n, n))
        spec = DgpSpec(n * n, 8, delta=1.0, cohort_fractions={2003: 0.3, 2005: 0.3},
                       rho=rho, beta=(1.0,), gamma=(0.5,), seed=seed)
        ds, sched = simulate_sdm(spec, W)
        return ds, W, treatment_for(ds, sched)[0]

    def test_loglik_matches_explicit_oracle(self):
        ds, W, tp = self.data()
        prof = SdmProfile(ds, W, tp, "y", ["x1"])
        for rho in (-0.5, 0.0, 0.3, 0.8):
            assert prof.loglik(rho) == pytest.approx(brute_loglik(ds, W, tp, "y", ["x1"], rho), rel=1e-9)

    def test_golden_beats_grid(self):
        ds, W, tp = self.data(seed=3)
        prof = SdmProfile(ds, W, tp, "y", ["x1"])
        fit = sdm_fit(ds, W, tp, "y", ["x1"])
        grid = np.linspace(-0.99, 0.99, 199)
        values = [prof.loglik(r) for r in grid]
        assert fit.log_likelihood >= max(values) - 1e-9
        assert abs(fit.rho - grid[int(np.argmax(values))]) <= grid[1] - grid[0]

    def test_coefficients_from_filtered_twfe(self):
        ds, W, tp = self.data(seed=4)
        fit = sdm_fit(ds, W, tp, "y", ["x1"])
        M = W.matrix
        d = ds.with_column("ys", ds["y"] - fit.rho * (M @ ds["y"])).with_column("W_x1", M @ ds["x1"])
        d = d.with_column(TREATMENT, tp.D, overwrite=True)
        ref = twfe_fit(d, DesignSpec("ys", (TREATMENT, "x1", "W_x1")))
        assert fit.delta == pytest.approx(ref.coefficients[TREATMENT], rel=1e-9)
        assert fit.gamma["W_x1"] == pytest.approx(ref.coefficients["W_x1"], rel=1e-9)

    def test_fixed_zero_rho_is_twfe(self):
        ds, W, tp = self.data(seed=5)
        fit = sdm_fit(ds, W, tp, "y", ["x1"], rho=0.0)
        d = ds.with_column("W_x1", W.matrix @ ds["x1"]).with_column(TREATMENT, tp.D, overwrite=True)
        ref = twfe_fit(d, DesignSpec("y", (TREATMENT, "x1", "W_x1")))
        assert fit.delta == pytest.approx(ref.coefficients[TREATMENT], rel=1e-10)
        assert fit.rho_fixed and math.isnan(fit.se["rho"])

    def test_zero_weights_warns(self):
        ds, sched = simulate_did(DgpSpec(10, 6, delta=2.0, cohort_fractions={2002: 0.4}, beta=(1.0,), seed=1))
        W = row_normalize(build_weights_adjacency(ds.entities, []))
        tp, _ = treatment_for(ds, sched)
        with pytest.warns(RuntimeWarning):
            fit = sdm_fit(ds, W, tp, "y", ["x1"])
        ref = att_estimate(ds, tp, "y", ["x1"])
        assert fit.rho == 0
        assert fit.delta == pytest.approx(ref.coefficients[TREATMENT], abs=1e-8)
        assert fit.beta["x1"] == pytest.approx(ref.coefficients["x1"], abs=1e-8)

    def test_not_normalized_rejected(self):
        ds, W, tp = self.data()
        with pytest.raises(NonNormalizedWeights):
            sdm_fit(ds, lattice_weights(6, 6), tp, "y")

    @pytest.mark.parametrize("rho", [0.99995, -0.99995])
    def test_boundary(self, rho):
        W = row_normalize(lattice_weights(5, 5))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ds, sched = simulate_sdm(DgpSpec(25, 6, delta=1.0, cohort_fractions={2002: 0.4},
                                             rho=rho, noise_sd=0.0, seed=1), W)
        with pytest.raises(RhoAtBoundary) as info:
            sdm_fit(ds, W, treatment_for(ds, sched)[0], "y")
        assert info.value.rho == pytest.approx(rho, abs=1e-4)

    def test_recovers_parameters(self):
        ds, W, tp = self.data(rho=0.5, seed=7, n=10)
        fit = sdm_fit(ds, W, tp, "y", ["x1"])
        assert fit.rho == pytest.approx(0.5, abs=0.08)
        assert fit.se["rho"] > 0 and fit.se[TREATMENT] > 0
        assert set(fit.to_dict()["coef"]) == {"rho", TREATMENT, "x1", "W_x1"}


class TestRings:
    def test_ring_index(self):
        assert ring_index(10.0, 10.0) == 1
        assert ring_index(15.0, 10.0) == 2
        assert ring_index(20.0000000001, 10.0) == 2
        assert ring_index(0.0, 10.0) == 0
        assert default_ring_count(10) == 4 and default_ring_count(7) == 6

    def geometry(self):
        origin = GeoPoint(110, 30)
        cents = {"a": origin, "b": destination_point(origin, 90, 30)}
        zones = [Zone(destination_point(origin, 0, 15), 2008),
                 Zone(destination_point(origin, 180, 10), 2010),
                 Zone(origin, 2005, "a")]
        return cents, zones

    def test_boundaries_and_timing(self):
        cents, zones = self.geometry()
        rp = ring_dummies(cents, zones, range(2005, 2013), d=10, m=4)
        a = list(rp.entities).index("a")
        np.testing.assert_array_equal(rp.R[a, :, 1], rp.years >= 2009)
        np.testing.assert_array_equal(rp.R[a, :, 0], rp.years >= 2011)
        assert not rp.R[a, :, 2:].any()
        assert rp.names == ["ring_1", "ring_2", "ring_3", "ring_4"]

    def test_own_zone(self):
        cents, zones = self.geometry()
        excl = ring_dummies(cents, zones[2:], range(2005, 2010), d=10, m=4)
        incl = ring_dummies(cents, zones[2:], range(2005, 2010), d=10, m=4, exclude_own=False)
        a = list(excl.entities).index("a")
        assert not excl.R[a].any()
        assert incl.R[a, :, 0].any()
        b = list(excl.entities).index("b")
        assert excl.R[b, :, 2].any()

    def test_zone_order_irrelevant(self):
        cents, zones = self.geometry()
        a = ring_dummies(cents, zones, range(2005, 2013), d=10)
        b = ring_dummies(cents, zones[::-1], range(2005, 2013), d=10)
        np.testing.assert_array_equal(a.R, b.R)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 360), st.floats(0, 60), st.integers(2000, 2010)),
                    min_size=1, max_size=6))
    def test_monotone_in_time(self, specs):
        origin = GeoPoint(110, 30)
        zones = [Zone(destination_point(origin, b, km), yr) for b, km, yr in specs]
        rp = ring_dummies({"a": origin}, zones, range(2000, 2013), d=10, lag=1)
        assert np.all(np.diff(rp.R.astype(int), axis=1) >= 0)

    def test_no_zones_gives_att(self):
        ds, sched = simulate_did(DgpSpec(30, 8, delta=2.0, cohort_fractions={2003: 0.4}, seed=2))
        cents = {e: GeoPoint(110 + i * 0.01, 30) for i, e in enumerate(ds.entities)}
        rp = ring_dummies(cents, [], ds.years, d=10)
        tp, _ = treatment_for(ds, sched)
        fit = ring_regression(ds, tp, rp, "y")
        assert set(fit.dropped_columns) == set(rp.names)
        assert fit.coefficients[TREATMENT] == pytest.approx(
            att_estimate(ds, tp, "y").coefficients[TREATMENT], rel=1e-12)
        assert ring_rows(fit, rp.m)[1:] == [[str(n), "", ""] for n in range(1, rp.m + 1)]

    def test_unknown_entity(self):
        with pytest.raises(UnknownEntity):
            ring_dummies({"a": GeoPoint(0, 0)}, [], range(2000, 2003), d=10, entities=["a", "b"])
        with pytest.raises(ValidationError):
            ring_dummies({"a": GeoPoint(0, 0)}, [], range(2000, 2003), d=0)
