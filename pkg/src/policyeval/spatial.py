"""Spatial weights, spatial Durbin panel model, and ring-distance spillovers."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .did import TREATMENT, TreatmentPanel, align
from .errors import (
    NonNormalizedWeights,
    NonNumericValue,
    RaggedHeader,
    RhoAtBoundary,
    SelfLoop,
    UnbalancedPanel,
    UnknownEntity,
    ValidationError,
)
from .panel import PanelDataset, _read_rows, parse_number
from .regress import DesignSpec, FitResult, twfe_fit, within_transform

EARTH_RADIUS_KM = 6371.0
RHO_TOL = 1e-6
BOUNDARY_TOL = 1e-4
ROW_SUM_TOL = 1e-12


# --------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class GeoPoint:
    lon: float
    lat: float

    def __post_init__(self):
        if not (-180.0 <= self.lon <= 180.0) or not (-90.0 <= self.lat <= 90.0):
            raise ValidationError(f"coordinates out of range: ({self.lon}, {self.lat})")


@dataclass(frozen=True)
class Zone:
    point: GeoPoint
    year: int
    entity: str | None = None  # city the zone sits in, if known


def haversine(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in km."""
    lon1, lat1, lon2, lat2 = map(math.radians, (a.lon, a.lat, b.lon, b.lat))
    h = (math.sin((lat2 - lat1) / 2) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_KM * math.asin(math.sqrt(min(1.0, h)))


def destination_point(origin: GeoPoint, bearing_deg: float, km: float) -> GeoPoint:
    """Point reached by travelling ``km`` from ``origin`` along an initial bearing."""
    lat1, lon1 = math.radians(origin.lat), math.radians(origin.lon)
    brg = math.radians(bearing_deg)
    ang = km / EARTH_RADIUS_KM
    lat2 = math.asin(math.sin(lat1) * math.cos(ang) + math.cos(lat1) * math.sin(ang) * math.cos(brg))
    lon2 = lon1 + math.atan2(math.sin(brg) * math.sin(ang) * math.cos(lat1),
                             math.cos(ang) - math.sin(lat1) * math.sin(lat2))
    lon = (math.degrees(lon2) + 540.0) % 360.0 - 180.0
    return GeoPoint(lon, math.degrees(lat2))


# --------------------------------------------------------------------------
# weights


@dataclass(frozen=True)
class SpatialWeights:
    """Dense n x n weights; rows and columns follow ``entities``."""

    entities: tuple
    matrix: np.ndarray
    row_normalized: bool = False
    construction: str = "adjacency"
    zero_rows: tuple = ()

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        n = len(self.entities)
        if m.shape != (n, n):
            raise ValidationError(f"weights matrix must be {n}x{n}")
        if np.any(np.diag(m) != 0):
            raise SelfLoop("weights matrix has a non-zero diagonal")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ValidationError("weights must be finite and non-negative")
        m.setflags(write=False)
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return len(self.entities)

    def reorder(self, entities: Sequence[str]) -> SpatialWeights:
        pos = {e: i for i, e in enumerate(self.entities)}
        missing = [e for e in entities if e not in pos]
        if missing:
            raise UnknownEntity(f"entities missing from the weights: {missing[:5]}")
        if len(entities) != self.n:
            raise UnbalancedPanel(
                f"weights cover {self.n} entities but the sample has {len(entities)}"
            )
        idx = [pos[e] for e in entities]
        zero = tuple(e for e in self.zero_rows if e in set(entities))
        return SpatialWeights(tuple(entities), self.matrix[np.ix_(idx, idx)],
                              self.row_normalized, self.construction, zero)


def build_weights_adjacency(entities: Sequence[str], pairs: Iterable[tuple[str, str]]) -> SpatialWeights:
    """Symmetric 0/1 contiguity matrix from undirected pairs."""
    entities = tuple(str(e) for e in entities)
    pos = {e: i for i, e in enumerate(entities)}
    m = np.zeros((len(entities), len(entities)))
    for a, b in pairs:
        a, b = str(a), str(b)
        for e in (a, b):
            if e not in pos:
                raise UnknownEntity(f"unknown entity {e!r} in adjacency")
        if a == b:
            raise SelfLoop(f"self-pair for {a!r}")
        m[pos[a], pos[b]] = m[pos[b], pos[a]] = 1.0
    return SpatialWeights(entities, m, False, "adjacency")


def build_weights_distance(centroids: Mapping[str, GeoPoint], cutoff_km: float,
                           power: float = 1.0) -> SpatialWeights:
    """Inverse-distance weights ``1/d**power`` for pairs within ``cutoff_km``."""
    entities = tuple(centroids)
    pts = [centroids[e] for e in entities]
    n = len(pts)
    m = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = haversine(pts[i], pts[j])
            if 0 < d <= cutoff_km:
                m[i, j] = m[j, i] = d ** -power
    return SpatialWeights(entities, m, False, "inverse-distance")


def build_weights_knn(centroids: Mapping[str, GeoPoint], k: int) -> SpatialWeights:
    """0/1 weights on each entity's ``k`` nearest neighbours (ties by order)."""
    entities = tuple(centroids)
    pts = [centroids[e] for e in entities]
    n = len(pts)
    if not 0 < k < n:
        raise ValidationError("k must be between 1 and n-1")
    m = np.zeros((n, n))
    for i in range(n):
        d = np.array([haversine(pts[i], pts[j]) if j != i else np.inf for j in range(n)])
        m[i, np.argsort(d, kind="stable")[:k]] = 1.0
    return SpatialWeights(entities, m, False, "k-nearest")


def row_normalize(W: SpatialWeights) -> SpatialWeights:
    """Scale every non-zero row to sum to one; all-zero rows are listed in ``zero_rows``."""
    sums = W.matrix.sum(axis=1)
    zero = sums == 0
    m = W.matrix / np.where(zero, 1.0, sums)[:, None]
    return SpatialWeights(W.entities, m, True, W.construction,
                          tuple(e for e, z in zip(W.entities, zero) if z))


def check_row_normalized(W: SpatialWeights, tol: float = ROW_SUM_TOL) -> None:
    sums = W.matrix.sum(axis=1)
    bad = (sums != 0) & (np.abs(sums - 1.0) > tol * max(1, W.n))
    if bad.any():
        raise NonNormalizedWeights(f"{int(bad.sum())} rows do not sum to one")


# --------------------------------------------------------------------------
# file readers


def _header(rows, expected, name):
    if not rows or [h.strip() for h in rows[0]][: len(expected)] != list(expected):
        raise RaggedHeader(f"{name} header must start with {','.join(expected)}")


def load_adjacency(source, entities: Sequence[str]) -> SpatialWeights:
    rows = [r for r in _read_rows(source) if r]
    _header(rows, ["entity_a", "entity_b"], "adjacency")
    pairs = []
    for num, r in enumerate(rows[1:], start=2):
        if len(r) != 2:
            raise RaggedHeader(f"adjacency row {num} has {len(r)} fields")
        pairs.append((r[0].strip(), r[1].strip()))
    return build_weights_adjacency(entities, pairs)


def _point(lon_txt, lat_txt, num):
    lon, lat = parse_number(lon_txt.strip(), num), parse_number(lat_txt.strip(), num)
    if math.isnan(lon) or math.isnan(lat):
        raise NonNumericValue(f"missing coordinate at row {num}", num)
    return GeoPoint(lon, lat)


def load_centroids(source) -> dict[str, GeoPoint]:
    rows = [r for r in _read_rows(source) if r]
    _header(rows, ["entity", "lon", "lat"], "centroids")
    out = {}
    for num, r in enumerate(rows[1:], start=2):
        if len(r) != 3:
            raise RaggedHeader(f"centroids row {num} has {len(r)} fields")
        out[r[0].strip()] = _point(r[1], r[2], num)
    return out


def load_zones(source) -> list[Zone]:
    """Zones CSV ``lon,lat,year`` with an optional fourth ``entity`` column."""
    rows = [r for r in _read_rows(source) if r]
    _header(rows, ["lon", "lat", "year"], "zones")
    width = len(rows[0])
    out = []
    for num, r in enumerate(rows[1:], start=2):
        if len(r) != width:
            raise RaggedHeader(f"zones row {num} has {len(r)} fields")
        try:
            year = int(r[2].strip())
        except ValueError:
            raise NonNumericValue(f"bad zone year at row {num}", num) from None
        ent = r[3].strip() or None if width > 3 else None
        out.append(Zone(_point(r[0], r[1], num), year, ent))
    return out


# --------------------------------------------------------------------------
# spatial Durbin model


@dataclass(frozen=True)
class SdmFit:
    rho: float
    delta: float
    beta: Mapping[str, float]
    gamma: Mapping[str, float]
    se: Mapping[str, float]
    log_likelihood: float
    rho_interval: tuple
    sigma2: float
    nobs: int
    names: tuple = ()
    rho_fixed: bool = False
    fit: FitResult | None = field(default=None, repr=False, compare=False)

    def pvalue(self, name: str) -> float:
        value = self.rho if name == "rho" else self.coefficients()[name]
        se = self.se.get(name, math.nan)
        if not se > 0:
            return math.nan
        return float(2 * stats.norm.sf(abs(value / se)))

    def coefficients(self) -> dict[str, float]:
        out = {TREATMENT: self.delta}
        out.update(self.beta)
        out.update(self.gamma)
        return out

    def to_dict(self) -> dict:
        def num(x):
            return float(x) if x is not None and math.isfinite(x) else None

        coefs = self.coefficients()
        return {
            "coef": {"rho": num(self.rho), **{k: num(v) for k, v in coefs.items()}},
            "se": {k: num(v) for k, v in self.se.items()},
            "log_likelihood": num(self.log_likelihood),
            "rho_interval": [num(self.rho_interval[0]), num(self.rho_interval[1])],
            "sigma2": num(self.sigma2),
            "nobs": self.nobs,
            "rho_fixed": self.rho_fixed,
        }


def _golden_max(f, lo, hi, tol=RHO_TOL):
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2


class SdmProfile:
    """Concentrated log-likelihood of the spatial Durbin panel model.

    Both ``y`` and ``Wy`` are regressed once on the two-way demeaned design
    ``[D, X, WX]``; for any rho the residual is ``e0 - rho * e1``.
    """

    def __init__(self, ds: PanelDataset, W: SpatialWeights, treatment: TreatmentPanel,
                 outcome: str, controls: Sequence[str] = (), lag_controls: bool = True):
        check_row_normalized(W)
        data = align(ds, treatment)
        W = W.reorder(data.entities)
        cols = [outcome, TREATMENT, *controls]
        for c in cols:
            if np.isnan(data.column(c)).any():
                raise UnbalancedPanel(
                    f"{c!r} has missing cells; impute before spatial estimation"
                )
        N, T = data.shape
        if N < 2 or T < 2:
            raise UnbalancedPanel("spatial model needs at least two entities and years")
        M = W.matrix
        self.zero_weights = not M.any()
        y = data.column(outcome)
        Wy = M @ y
        self.lag_names = []
        data = data.with_column("_Wy", Wy, overwrite=True)
        if lag_controls and not self.zero_weights:
            for c in controls:
                name = f"W_{c}"
                data = data.with_column(name, M @ data.column(c), overwrite=True)
                self.lag_names.append(name)
        self.data = data
        self.W = W
        self.outcome = outcome
        self.controls = tuple(controls)
        self.regressors = (TREATMENT, *controls, *self.lag_names)
        self.N, self.T = N, T

        ent = np.repeat(np.arange(N), T)
        yr = np.tile(np.arange(T), N)
        Z = np.column_stack([data.column(c).ravel() for c in self.regressors])
        both = within_transform(np.column_stack([y.ravel(), Wy.ravel(), Z]), ent, yr)
        self.yd, self.Wyd, self.Zd = both[:, 0], both[:, 1], both[:, 2:]
        coef, *_ = np.linalg.lstsq(self.Zd, np.column_stack([self.yd, self.Wyd]), rcond=None)
        self.e0 = self.yd - self.Zd @ coef[:, 0]
        self.e1 = self.Wyd - self.Zd @ coef[:, 1]

        lam = np.linalg.eigvals(M)
        self.eigenvalues = lam
        real = lam.real
        if self.zero_weights:
            self.interval = (-1.0, 1.0)
        else:
            lmin, lmax = real.min(), real.max()
            lo = 1.0 / lmin if lmin < 0 else -1.0
            self.interval = (float(lo), float(1.0 / lmax))

    def loglik(self, rho: float) -> float:
        n = self.N * self.T
        e = self.e0 - rho * self.e1
        s2 = float(e @ e) / n
        logdet = float(np.sum(np.log(np.abs(1.0 - rho * self.eigenvalues))))
        return -n / 2 * (math.log(2 * math.pi * s2) + 1) + self.T * logdet

    def maximize(self) -> float:
        lo, hi = self.interval
        eps = 1e-9 * (hi - lo)
        return _golden_max(self.loglik, lo + eps, hi - eps)


def sdm_fit(
    ds: PanelDataset,
    W: SpatialWeights,
    treatment: TreatmentPanel,
    outcome: str,
    controls: Sequence[str] = (),
    lag_controls: bool = True,
    rho: float | None = None,
) -> SdmFit:
    """Spatial Durbin model with entity and year effects by concentrated ML.

    ``W`` must be row-normalized.  ``rho`` fixes the spatial parameter instead
    of estimating it.  An all-zero ``W`` pins rho at 0 with a warning.
    """
    prof = SdmProfile(ds, W, treatment, outcome, controls, lag_controls)
    lo, hi = prof.interval
    fixed = rho is not None
    if prof.zero_weights:
        warnings.warn("weights matrix is all zero; likelihood is flat in rho, pinned at 0",
                      RuntimeWarning)
        rho_hat, fixed = 0.0, True
    elif fixed:
        rho_hat = float(rho)
        if not lo < rho_hat < hi:
            raise ValidationError(f"rho {rho_hat} outside the admissible interval ({lo}, {hi})")
    else:
        rho_hat = prof.maximize()
        if rho_hat - lo < BOUNDARY_TOL or hi - rho_hat < BOUNDARY_TOL:
            raise RhoAtBoundary(f"rho estimate {rho_hat:.6f} is at the edge of ({lo:.4f}, {hi:.4f})",
                                rho_hat)

    data = prof.data
    ystar = data.column(outcome) - rho_hat * data.column("_Wy")
    data = data.with_column("_ystar", ystar, overwrite=True)
    fit = twfe_fit(data, DesignSpec("_ystar", prof.regressors), inference=False)
    if fit.dropped_columns:
        raise ValidationError(f"collinear regressors in spatial model: {list(fit.dropped_columns)}")
    b = fit.params
    N, T = prof.N, prof.T
    n = N * T
    e = prof.e0 - rho_hat * prof.e1
    sse = float(e @ e)
    k = b.size
    dof = n - (N + T - 1) - k - (0 if fixed else 1)
    s2 = sse / dof

    # information matrix for (b, rho, sigma2), sigma2 bias-corrected for the absorbed effects
    Zd = prof.Zd
    M = prof.W.matrix
    info_bb = Zd.T @ Zd / s2
    if fixed:
        vcov = np.linalg.inv(info_bb)
        se_rho = math.nan
    else:
        A = np.linalg.solve(np.eye(N) - rho_hat * M, M)  # W (I - rho W)^-1
        xb = (Zd @ b).reshape(N, T)
        wxb = within_transform((A @ xb).ravel(), np.repeat(np.arange(N), T), np.tile(np.arange(T), N))
        tr1 = float(np.trace(A))
        tr2 = float(np.sum(A * A.T) + np.sum(A * A))
        info = np.zeros((k + 2, k + 2))
        info[:k, :k] = info_bb
        info[:k, k] = info[k, :k] = Zd.T @ wxb / s2
        info[k, k] = T * tr2 + float(wxb @ wxb) / s2
        info[k, k + 1] = info[k + 1, k] = T * tr1 / s2
        info[k + 1, k + 1] = n / (2 * s2 ** 2)
        full = np.linalg.inv(info)
        vcov = full[:k, :k]
        se_rho = math.sqrt(full[k, k])
    se = {"rho": se_rho}
    se.update({name: math.sqrt(vcov[j, j]) for j, name in enumerate(fit.names)})
    coefs = dict(zip(fit.names, map(float, b)))
    return SdmFit(
        rho=float(rho_hat),
        delta=coefs[TREATMENT],
        beta={c: coefs[c] for c in prof.controls},
        gamma={c: coefs[c] for c in prof.lag_names},
        se=se,
        log_likelihood=prof.loglik(rho_hat),
        rho_interval=(lo, hi),
        sigma2=s2,
        nobs=n,
        names=fit.names,
        rho_fixed=fixed,
        fit=fit,
    )


# --------------------------------------------------------------------------
# ring spillovers


@dataclass(frozen=True)
class RingPanel:
    entities: tuple
    years: np.ndarray
    d: float
    m: int
    R: np.ndarray  # (entity, year, ring)
    zone_points: tuple

    def column(self, n: int) -> np.ndarray:
        return self.R[:, :, n - 1].astype(float)

    @property
    def names(self) -> list[str]:
        return [f"ring_{n}" for n in range(1, self.m + 1)]


def ring_index(distance_km: float, d: float) -> int:
    """Ring number n with distance in ((n-1)d, nd]; 0 for a zero distance."""
    q = distance_km / d
    return max(0, math.ceil(q - 1e-9 * max(1.0, q)))


def default_ring_count(d: float, horizon_km: float = 40.0) -> int:
    return max(1, int(round(horizon_km / d)))


def ring_dummies(
    centroids: Mapping[str, GeoPoint],
    zones: Sequence[Zone],
    years: Sequence[int],
    d: float,
    m: int | None = None,
    lag: int = 1,
    exclude_own: bool = True,
    entities: Sequence[str] | None = None,
) -> RingPanel:
    """R(i,t,n) = 1 when some zone in ring n of entity i is active by year t.

    A zone is active from ``year + lag``.  With ``exclude_own`` a zone tagged
    with entity i, or sitting exactly on i's centroid, is left out of i's rings.
    """
    if not d > 0:
        raise ValidationError("ring width must be positive")
    m = default_ring_count(d) if m is None else int(m)
    if m < 1:
        raise ValidationError("ring count must be at least 1")
    entities = tuple(centroids) if entities is None else tuple(entities)
    years = np.asarray(list(years), dtype=int)
    R = np.zeros((len(entities), years.size, m), dtype=bool)
    for i, ent in enumerate(entities):
        if ent not in centroids:
            raise UnknownEntity(f"no centroid for entity {ent!r}")
        c = centroids[ent]
        for z in zones:
            dist = haversine(c, z.point)
            if exclude_own and (z.entity == ent or dist == 0):
                continue
            n = max(1, ring_index(dist, d))
            if n <= m:
                R[i, years >= z.year + lag, n - 1] = True
    return RingPanel(entities, years, float(d), m, R, tuple((z.point.lon, z.point.lat, z.year) for z in zones))


def ring_regression(
    ds: PanelDataset,
    treatment: TreatmentPanel,
    rings: RingPanel,
    outcome: str,
    controls: Sequence[str] = (),
    cluster: str | None = None,
) -> FitResult:
    """TWFE fit on treatment, controls and ring indicators ``ring_1..ring_m``.

    Rings with no within variation are dropped and listed in ``dropped_columns``.
    """
    data = align(ds, treatment)
    if not np.array_equal(rings.years, data.years):
        raise ValidationError("ring panel years differ from dataset years")
    pos = {e: i for i, e in enumerate(rings.entities)}
    missing = [e for e in data.entities if e not in pos]
    if missing:
        raise UnknownEntity(f"entities without ring data: {missing[:5]}")
    idx = [pos[e] for e in data.entities]
    for n, name in enumerate(rings.names, start=1):
        data = data.with_column(name, rings.column(n)[idx], overwrite=True)
    spec = DesignSpec(outcome, (TREATMENT, *controls, *rings.names), cluster=cluster)
    return twfe_fit(data, spec, on_no_variation="drop")


def ring_rows(fit: FitResult, m: int) -> list[list[str]]:
    rows = [["ring_n", "coef", "se"]]
    coefs, ses = fit.coefficients, fit.se
    for n in range(1, m + 1):
        name = f"ring_{n}"
        if name in coefs:
            rows.append([str(n), repr(float(coefs[name])), repr(float(ses[name]))])
        else:
            rows.append([str(n), "", ""])
    return rows
