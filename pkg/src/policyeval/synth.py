"""Synthetic panels with known ground truth, and a brute-force OLS oracle.

Random numbers are counter based: every stream is a Philox generator keyed
by ``(seed, component)``, and cell ``(i, t)`` of an N x T draw takes position
``i * T + t`` of that stream.  Draws therefore do not depend on the order in
which entities or components are generated.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import ndtri

from .did import TREATMENT, TreatmentSchedule
from .errors import DegenerateSample, EmptySample, InvalidSpec, SingularSystem, TooLarge
from .panel import PanelDataset
from .regress import DesignSpec, FitResult, WorkingData, _hc1, _lstsq, _panel_sample
from .spatial import GeoPoint, SpatialWeights, Zone, build_weights_adjacency, haversine

ORACLE_MAX_CELLS = 5000

# stream identifiers
_ENTITY_FE, _YEAR_FE, _NOISE, _ASSIGN = 1, 2, 3, 4
_CONTROL0 = 10
_MODERATOR = 40
_LON, _LAT = 50, 51


def uniforms(seed: int, component: int, size: int) -> np.ndarray:
    """Open-interval uniforms from the ``(seed, component)`` stream."""
    key = np.array([seed, component], dtype=np.uint64)
    bits = np.random.Generator(np.random.Philox(key=key)).integers(
        0, 2 ** 53, size=size, dtype=np.int64)
    return (bits.astype(float) + 0.5) / 2.0 ** 53


def normals(seed: int, component: int, shape) -> np.ndarray:
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    return ndtri(uniforms(seed, component, int(np.prod(shape)))).reshape(shape)


def entity_names(n: int) -> tuple:
    width = max(3, len(str(n)))
    return tuple(f"e{i:0{width}d}" for i in range(1, n + 1))


@dataclass(frozen=True)
class DgpSpec:
    """Ground truth for a simulated staggered-adoption panel.

    ``cohort_fractions`` maps event year to the share of entities with that
    first event; the remainder is never treated.  Event years before
    ``start_year - lag + 1`` make always-treated units.  ``noise_ar`` is the
    within-entity AR(1) coefficient of the noise.  ``beta`` gives one
    coefficient per simulated control ``x1, x2, ...`` and ``gamma`` the
    coefficients on their spatial lags.
    """

    n_entities: int
    n_years: int
    delta: float = 0.0
    cohort_fractions: Mapping[int, float] = field(default_factory=dict)
    effect_heterogeneity: Mapping[int, float] | None = None
    pre_trend: float = 0.0
    entity_fe_sd: float = 1.0
    year_fe_sd: float = 1.0
    noise_sd: float = 1.0
    rho: float | None = None
    interaction: tuple | None = None
    seed: int = 0
    start_year: int = 2000
    lag: int = 1
    noise_ar: float = 0.0
    effect_growth: float = 0.0
    beta: tuple = ()
    gamma: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "cohort_fractions",
                           {int(k): float(v) for k, v in dict(self.cohort_fractions).items()})
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        if self.n_entities < 1 or self.n_years < 1:
            raise InvalidSpec("n_entities and n_years must be positive")
        fr = self.cohort_fractions.values()
        if any(f < 0 for f in fr) or sum(fr) > 1 + 1e-12:
            raise InvalidSpec("cohort fractions must be non-negative and sum to at most 1")
        for name in ("entity_fe_sd", "year_fe_sd", "noise_sd"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{name} must be >= 0")
        if self.rho is not None and not -1 < self.rho < 1:
            raise InvalidSpec("rho must lie in (-1, 1)")
        if not -1 < self.noise_ar < 1:
            raise InvalidSpec("noise_ar must lie in (-1, 1)")
        if self.seed < 0:
            raise InvalidSpec("seed must be non-negative")
        if self.lag < 0:
            raise InvalidSpec("lag must be non-negative")
        if self.gamma and len(self.gamma) != len(self.beta):
            raise InvalidSpec("gamma needs one entry per control")
        if self.effect_heterogeneity:
            extra = set(self.effect_heterogeneity) - set(self.cohort_fractions)
            if extra:
                raise InvalidSpec(f"effects given for unknown cohorts {sorted(extra)}")
        if self.interaction is not None and len(self.interaction) != 2:
            raise InvalidSpec("interaction must be (moderator name, slope)")

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.start_year, self.start_year + self.n_years)

    def replace(self, **changes) -> DgpSpec:
        from dataclasses import replace
        return replace(self, **changes)


def _cohorts(spec: DgpSpec) -> list:
    """First event year (or None) per entity."""
    N = spec.n_entities
    order = np.argsort(uniforms(spec.seed, _ASSIGN, N), kind="stable")
    firsts: list = [None] * N
    pos = 0
    for year in sorted(spec.cohort_fractions):
        count = int(math.floor(spec.cohort_fractions[year] * N + 1e-9))
        for i in order[pos:pos + count]:
            firsts[i] = year
        pos += count
    return firsts


def _structural(spec: DgpSpec, firsts: list | None = None):
    """Right-hand side pieces shared by the DiD and spatial simulators."""
    N, T = spec.n_entities, spec.n_years
    years = spec.years
    if firsts is None:
        firsts = _cohorts(spec)
    start = np.array([np.inf if f is None else f + spec.lag for f in firsts])
    rel = years[None, :] - start[:, None]
    D = (rel >= 0).astype(float)
    treated = np.isfinite(start)[:, None]

    alpha = spec.entity_fe_sd * normals(spec.seed, _ENTITY_FE, N)
    lam = spec.year_fe_sd * normals(spec.seed, _YEAR_FE, T)
    u = normals(spec.seed, _NOISE, (N, T))
    if spec.noise_ar:
        a = spec.noise_ar
        e = np.empty_like(u)
        e[:, 0] = u[:, 0]
        for t in range(1, T):
            e[:, t] = a * e[:, t - 1] + math.sqrt(1 - a * a) * u[:, t]
        u = e
    eps = spec.noise_sd * u

    tau = np.array([
        (spec.effect_heterogeneity or {}).get(f, spec.delta) if f is not None else 0.0
        for f in firsts
    ])
    y = alpha[:, None] + lam[None, :] + eps + tau[:, None] * D
    if spec.effect_growth:
        y = y + spec.effect_growth * np.where(D > 0, rel, 0.0)
    if spec.pre_trend:
        y = y + spec.pre_trend * np.where(treated & (D == 0), rel, 0.0)

    columns = {TREATMENT: D}
    X = []
    for j, b in enumerate(spec.beta):
        x = normals(spec.seed, _CONTROL0 + j, (N, T))
        columns[f"x{j + 1}"] = x
        X.append(x)
        y = y + b * x
    if spec.interaction is not None:
        name, slope = spec.interaction
        m = normals(spec.seed, _MODERATOR, (N, T))
        columns[str(name)] = m
        y = y + float(slope) * D * m
    return y, columns, X, firsts


def _schedule(spec: DgpSpec, firsts) -> TreatmentSchedule:
    return TreatmentSchedule.from_first_years(dict(zip(entity_names(spec.n_entities), firsts)))


def simulate_did(spec: DgpSpec) -> tuple[PanelDataset, TreatmentSchedule]:
    """Panel with outcome ``y``, treatment ``hightech`` and controls ``x1..``."""
    y, columns, _, firsts = _structural(spec)
    ds = PanelDataset(entity_names(spec.n_entities), spec.years, {"y": y, **columns})
    return ds, _schedule(spec, firsts)


def simulate_sdm(spec: DgpSpec, W: SpatialWeights) -> tuple[PanelDataset, TreatmentSchedule]:
    """Solve ``(I - rho W) y_t = rhs_t`` for every year.

    ``rhs`` is the DiD structural part plus ``W X gamma``.  With rho = 0 and
    no gamma the output equals :func:`simulate_did` for the same spec.
    """
    names = entity_names(spec.n_entities)
    M = W.reorder(names).matrix
    y, columns, X, firsts = _structural(spec)
    for g, x in zip(spec.gamma, X):
        y = y + g * (M @ x)
    rho = spec.rho or 0.0
    if rho:
        lam_max = float(np.max(np.abs(np.linalg.eigvals(M))))
        if abs(rho) * lam_max >= 1:
            raise SingularSystem(f"I - rho W is singular for rho={rho}")
        A = np.eye(spec.n_entities) - rho * M
        if abs(rho) * lam_max > 0.99:
            warnings.warn(f"I - rho W is near singular (rho={rho})", RuntimeWarning)
        y = np.linalg.solve(A, y)
    ds = PanelDataset(names, spec.years, {"y": y, **columns})
    return ds, _schedule(spec, firsts)


def lattice_weights(n_rows: int, n_cols: int, queen: bool = False) -> SpatialWeights:
    """Contiguity on a grid, entities numbered row by row as in :func:`entity_names`."""
    names = entity_names(n_rows * n_cols)
    steps = [(0, 1), (1, 0)] + ([(1, 1), (1, -1)] if queen else [])
    pairs = []
    for r in range(n_rows):
        for c in range(n_cols):
            for dr, dc in steps:
                r2, c2 = r + dr, c + dc
                if 0 <= r2 < n_rows and 0 <= c2 < n_cols:
                    pairs.append((names[r * n_cols + c], names[r2 * n_cols + c2]))
    return build_weights_adjacency(names, pairs)


def simulate_rings(spec: DgpSpec, spill: float = 2.0, radius_km: float = 20.0,
                   box_deg: float = 2.0, origin: GeoPoint = GeoPoint(110.0, 30.0)):
    """DiD panel whose outcome gains ``spill`` once another zone within
    ``radius_km`` becomes active.

    Centroids are uniform in a ``box_deg`` square.  Each treated entity hosts
    one zone at its centroid, tagged with the entity and dated by its event
    year.  Treated entities closer than ``2 * radius_km`` to an earlier host
    are made never-treated, so no entity has two zones within the radius.
    Returns ``(ds, schedule, centroids, zones)``.
    """
    N = spec.n_entities
    names = entity_names(N)
    lon = origin.lon + box_deg * uniforms(spec.seed, _LON, N)
    lat = origin.lat + box_deg * uniforms(spec.seed, _LAT, N)
    centroids = {e: GeoPoint(float(a), float(b)) for e, a, b in zip(names, lon, lat)}
    firsts = _cohorts(spec)
    hosts: list = []
    for i, f in enumerate(firsts):
        if f is None:
            continue
        if any(haversine(centroids[names[i]], centroids[names[h]]) <= 2 * radius_km for h in hosts):
            firsts[i] = None
        else:
            hosts.append(i)
    y, columns, _, firsts = _structural(spec, firsts)
    zones = [Zone(centroids[names[i]], firsts[i], names[i]) for i in hosts]
    years = spec.years
    for i, e in enumerate(names):
        for z in zones:
            if z.entity != e and haversine(centroids[e], z.point) <= radius_km:
                y[i, years >= z.year + spec.lag] += spill
    ds = PanelDataset(names, years, {"y": y, **columns})
    return ds, _schedule(spec, firsts), centroids, zones


# --------------------------------------------------------------------------
# brute-force regression oracle


def oracle_dummy_ols(ds: PanelDataset, spec: DesignSpec) -> FitResult:
    """OLS on the explicit dummy design: entity dummies, year dummies
    (first year omitted) and the regressors.  Only for small panels."""
    if ds.n_entities * ds.n_years > ORACLE_MAX_CELLS:
        raise TooLarge(f"{ds.n_entities * ds.n_years} cells exceeds {ORACLE_MAX_CELLS}")
    s = _panel_sample(ds, spec.outcome, spec.regressors)
    n = s.y.size
    if n == 0:
        raise EmptySample("no complete observations")
    n_ent, n_yr = int(s.ent.max()) + 1, int(s.yr.max()) + 1
    fe = spec.fixed_effects
    if ("entity" in fe and n_ent < 2) or ("year" in fe and n_yr < 2):
        raise DegenerateSample(f"need at least 2 entities and 2 years (have {n_ent} and {n_yr})")
    blocks = []
    if "entity" in fe:
        blocks.append(np.eye(n_ent)[s.ent])
    if "year" in fe:
        yd = np.eye(n_yr)[s.yr]
        blocks.append(yd[:, 1:] if "entity" in fe else yd)
    if not fe:
        blocks.append(np.ones((n, 1)))
    n_dummies = sum(b.shape[1] for b in blocks)
    Z = np.column_stack(blocks + [s.X])
    fit = _lstsq(Z, s.y)
    names = list(spec.regressors)
    keep = [j - n_dummies for j in fit.keep if j >= n_dummies]
    pos = [i for i, j in enumerate(fit.keep) if j >= n_dummies]
    dropped = tuple(names[j] for j in range(len(names)) if j not in keep)
    Zk = Z[:, fit.keep]
    vcov_full = _hc1(Zk, fit.resid, fit.bread, Zk.shape[1])
    vcov = vcov_full[np.ix_(pos, pos)]
    return FitResult(
        names=tuple(names[j] for j in keep),
        params=fit.beta[pos],
        vcov=vcov,
        residuals=fit.resid,
        nobs=n,
        df_resid=n - Zk.shape[1],
        dropped_columns=dropped,
        cov_type="robust",
        work=WorkingData(Zk, fit.resid, s.ent_full, ds.entities, Zk.shape[1] - len(pos)),
    )


# --------------------------------------------------------------------------
# descriptive-statistics fixture


PATENT_ENTITIES = 345
PATENT_YEARS = (2000, 2019)
PATENT_MISSING = 12
PATENT_PATENTS = dict(n=6888, total=26320219, minimum=1, maximum=239892, sd=12934.28)
PATENT_TREATED_CELLS = 1722


def _integer_sample(n, total, lo, hi, sd, seed):
    """Integers with exact sum, min and max and a sample sd close to ``sd``."""
    z = normals(seed, 1, n - 2)

    def draw(sigma):
        v = np.exp(sigma * z)
        v = v * ((total - lo - hi) / v.sum())
        return np.clip(np.rint(v), lo, hi - 1)

    def sd_of(v):
        return np.std(np.concatenate([v, [lo, hi]]), ddof=1)

    a, b = 0.5, 4.0
    for _ in range(100):
        mid = (a + b) / 2
        if sd_of(draw(mid)) < sd:
            a = mid
        else:
            b = mid
    v = draw((a + b) / 2)
    # exact sum: spread the rounding residue over mid-sized cells
    order = np.argsort(v, kind="stable")
    while (gap := int(total - lo - hi - v.sum())) != 0:
        movable = order[(v[order] < hi - 1) if gap > 0 else (v[order] > lo)]
        start = len(movable) // 4
        v[movable[start:start + abs(gap)]] += np.sign(gap)
    # sd: move units between the largest free cell and a small one
    full = lambda: np.concatenate([v, [lo, hi]])
    big = int(np.argmax(np.where(v < hi - 1, v, -1)))
    small = int(order[len(order) // 2])
    for _ in range(200):
        cur = np.std(full(), ddof=1)
        if abs(cur - sd) < 0.004:
            break
        ss_needed = (sd ** 2 - cur ** 2) * (n - 1)
        # moving k units from small to big changes the sum of squares by about 2k(big - small)
        k = int(round(ss_needed / (2 * (v[big] - v[small]))))
        if k == 0:
            k = 1 if ss_needed > 0 else -1
        k = int(np.clip(k, -(v[big] - lo), v[small] - lo))
        k = min(k, int(hi - 1 - v[big]))
        v[big] += k
        v[small] -= k
    out = np.concatenate([[lo], v[: (n - 2) // 2], [hi], v[(n - 2) // 2:]])
    assert out.sum() == total
    return out


def patent_fixture(seed: int = 20240101):
    """Patent panel with fixed summary statistics for ``patentapplied`` and ``hightech``.

    345 entities over 2000-2019 with 12 missing cells.  ``patentapplied`` is
    integer valued with N 6888, mean 3821.17, min 1, max 239892;
    ``hightech`` has 1722 treated cells.  A control ``lngdp`` is included.
    The schedule has always-treated, timing and never-treated entities.
    Returns ``(ds, schedule)``.
    """
    N = PATENT_ENTITIES
    years = np.arange(PATENT_YEARS[0], PATENT_YEARS[1] + 1)
    T = years.size
    names = tuple(f"city{i:03d}" for i in range(1, N + 1))

    # treatment: 10 always-treated, timing cohorts, remainder never treated
    firsts: list = [None] * N
    remaining = PATENT_TREATED_CELLS
    cohort_cycle = [2001, 2004, 2007, 2010, 2013, 2016]
    i = 0
    for _ in range(10):
        firsts[i] = 1997
        remaining -= T
        i += 1
    c = 0
    while remaining > 0:
        event = cohort_cycle[c % len(cohort_cycle)]
        cells = int(years[-1] - event)
        if cells > remaining:
            event = int(years[-1] - remaining)
            cells = remaining
        firsts[i] = event
        remaining -= cells
        i += 1
        c += 1
    D = np.zeros((N, T))
    for k, f in enumerate(firsts):
        if f is not None:
            D[k] = years >= f + 1

    spec = PATENT_PATENTS
    pat = _integer_sample(spec["n"], spec["total"], spec["minimum"], spec["maximum"], spec["sd"], seed)
    values = np.full(N * T, np.nan)
    # missing cells sit in the last never-treated entities
    missing = set(range(N * T - PATENT_MISSING, N * T))
    observed = [k for k in range(N * T) if k not in missing]
    perm = np.argsort(uniforms(seed, 2, len(observed)), kind="stable")
    values[observed] = pat[perm]
    pat_panel = values.reshape(N, T)
    ht = D.copy()
    ht[np.isnan(pat_panel)] = np.nan
    lngdp = 10.0 + 0.9 * normals(seed, 3, N)[:, None] + 0.05 * (years - years[0])[None, :] \
        + 0.1 * normals(seed, 4, (N, T))
    lngdp = np.round(lngdp, 4)
    ds = PanelDataset(names, years, {"patentapplied": pat_panel, TREATMENT: ht, "lngdp": lngdp})
    schedule = TreatmentSchedule.from_first_years(dict(zip(names, firsts)))
    return ds, schedule


def write_rows_csv(rows, path) -> None:
    import csv
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def write_patent_fixture(directory) -> None:
    from pathlib import Path
    d = Path(directory)
    ds, schedule = patent_fixture()
    ds.to_csv(d / "patent_panel.csv")
    write_rows_csv(schedule.to_rows(), d / "patent_schedule.csv")
