"""Least squares, two-way fixed-effects (within) estimation, clustered
covariance and pooled logit.

All fits return a :class:`FitResult`.  Fixed effects are absorbed by
alternating demeaning, so only slope coefficients are reported.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.linalg import solve_triangular

from .errors import (
    AllColumnsCollinear,
    DegenerateSample,
    EmptySample,
    NoVariation,
    NonBinaryOutcome,
    PerfectSeparation,
    SingleCluster,
    UnknownVariable,
    ValidationError,
)
from .panel import PanelDataset

DEMEAN_TOL = 1e-10
DEMEAN_MAX_ITER = 10_000
COLLINEAR_TOL = 1e-10
FIXED_EFFECTS = frozenset({"entity", "year"})


@dataclass(frozen=True)
class DesignSpec:
    outcome: str
    regressors: tuple = ()
    fixed_effects: frozenset = FIXED_EFFECTS
    cluster: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "regressors", tuple(self.regressors))
        fe = frozenset(self.fixed_effects)
        if not fe <= FIXED_EFFECTS:
            raise ValidationError(f"fixed effects must be a subset of {set(FIXED_EFFECTS)}")
        object.__setattr__(self, "fixed_effects", fe)
        if self.outcome in self.regressors:
            raise ValidationError("outcome listed among regressors")
        if len(set(self.regressors)) != len(self.regressors):
            raise ValidationError("duplicate regressor names")


@dataclass(frozen=True)
class ClusterSpec:
    """Entity -> cluster id map; the small-sample correction is always CR1."""

    assignment: Mapping[str, object]
    correction: str = "CR1"

    @classmethod
    def from_panel(cls, ds: PanelDataset, attribute: str) -> ClusterSpec:
        values = ds.meta_values(attribute)
        return cls(dict(zip(ds.entities, values)))


@dataclass(frozen=True)
class WorkingData:
    """Transformed design actually used by a fit (kept for covariance work)."""

    X: np.ndarray
    resid: np.ndarray
    entity_idx: np.ndarray
    entities: tuple
    n_absorbed: int


@dataclass(frozen=True)
class FitResult:
    names: tuple
    params: np.ndarray
    vcov: np.ndarray
    residuals: np.ndarray
    nobs: int
    df_resid: int
    r2_within: float = math.nan
    r2_between: float = math.nan
    r2_overall: float = math.nan
    r2_adjusted: float = math.nan
    dropped_columns: tuple = ()
    cov_type: str = "robust"
    n_clusters: int | None = None
    extra: Mapping = field(default_factory=dict)
    work: WorkingData | None = field(default=None, repr=False, compare=False)

    @property
    def coefficients(self) -> dict[str, float]:
        return {n: float(b) for n, b in zip(self.names, self.params)}

    @property
    def se(self) -> dict[str, float]:
        return {n: float(s) for n, s in zip(self.names, self.bse)}

    @property
    def bse(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def tvalues(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.params / self.bse

    @property
    def pvalues(self) -> np.ndarray:
        if self.df_resid <= 0:
            return np.full(len(self.names), math.nan)
        return 2 * stats.t.sf(np.abs(self.tvalues), self.df_resid)

    def pvalue(self, name: str) -> float:
        return float(self.pvalues[self.names.index(name)])

    def conf_int(self, name: str, level: float = 0.95) -> tuple[float, float]:
        i = self.names.index(name)
        q = stats.t.ppf(0.5 + level / 2, max(self.df_resid, 1))
        return float(self.params[i] - q * self.bse[i]), float(self.params[i] + q * self.bse[i])

    def to_dict(self) -> dict:
        out = {
            "coef": {n: _num(v) for n, v in self.coefficients.items()},
            "se": {n: _num(v) for n, v in self.se.items()},
            "nobs": int(self.nobs),
            "r2": {
                "within": _num(self.r2_within),
                "between": _num(self.r2_between),
                "overall": _num(self.r2_overall),
                "adjusted": _num(self.r2_adjusted),
            },
            "dropped_columns": list(self.dropped_columns),
            "cov_type": self.cov_type,
            "df_resid": int(self.df_resid),
        }
        if self.n_clusters is not None:
            out["n_clusters"] = int(self.n_clusters)
        for k, v in self.extra.items():
            out[k] = _jsonable(v)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _num(x):
    x = float(x)
    return None if not math.isfinite(x) else x


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return _num(v)
    return v


# --------------------------------------------------------------------------
# least-squares kernel


def independent_columns(X: np.ndarray, tol: float = COLLINEAR_TOL) -> list[int]:
    """Indices of columns kept by a greedy left-to-right rank scan.

    A column is dropped when its component orthogonal to the columns already
    kept is below ``tol`` relative to its own norm, so among a collinear set
    the right-most columns go first.
    """
    basis = []
    keep = []
    for j in range(X.shape[1]):
        col = X[:, j].astype(float)
        norm = np.linalg.norm(col)
        if norm == 0.0 or not np.isfinite(norm):
            continue
        v = col.copy()
        for _ in range(2):
            for q in basis:
                v -= (q @ v) * q
        r = np.linalg.norm(v)
        if r <= tol * norm:
            continue
        basis.append(v / r)
        keep.append(j)
    return keep


@dataclass(frozen=True)
class _LSQ:
    keep: list
    beta: np.ndarray
    resid: np.ndarray
    bread: np.ndarray


def _lstsq(X: np.ndarray, y: np.ndarray) -> _LSQ:
    n, k = X.shape
    if n == 0:
        raise EmptySample("no observations")
    keep = independent_columns(X) if k else []
    if not keep:
        raise AllColumnsCollinear("no linearly independent regressors")
    Xk = X[:, keep]
    Q, R = np.linalg.qr(Xk)
    beta = solve_triangular(R, Q.T @ y)
    resid = y - Xk @ beta
    Rinv = solve_triangular(R, np.eye(len(keep)))
    bread = Rinv @ Rinv.T
    return _LSQ(keep, beta, resid, bread)


def _hc1(X, resid, bread, df_k):
    n = X.shape[0]
    scores = X * resid[:, None]
    meat = scores.T @ scores
    c = n / (n - df_k) if n > df_k else math.nan
    v = c * bread @ meat @ bread
    return (v + v.T) / 2


def _cr1(X, resid, bread, groups, k):
    n = X.shape[0]
    _, g_idx = np.unique(groups, return_inverse=True)
    G = int(g_idx.max()) + 1 if n else 0
    if G < 2:
        raise SingleCluster("clustered covariance needs at least two clusters")
    scores = np.zeros((G, X.shape[1]))
    np.add.at(scores, g_idx, X * resid[:, None])
    meat = scores.T @ scores
    c = (G / (G - 1)) * ((n - 1) / (n - k)) if n > k else math.nan
    v = c * bread @ meat @ bread
    return (v + v.T) / 2, G


def ols_fit(X, y, names: Sequence[str] | None = None) -> FitResult:
    """Ordinary least squares with HC1 standard errors.

    Include a column of ones in ``X`` for an intercept.  Linearly dependent
    columns are dropped (right-most first) and listed in ``dropped_columns``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[0]:
        raise ValidationError("X and y have different numbers of rows")
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    fit = _lstsq(X, y)
    kept = tuple(names[j] for j in fit.keep)
    dropped = tuple(n for j, n in enumerate(names) if j not in fit.keep)
    Xk = X[:, fit.keep]
    n, k = Xk.shape
    vcov = _hc1(Xk, fit.resid, fit.bread, k)
    has_const = any(np.ptp(Xk[:, j]) == 0 for j in range(k))
    tss = np.sum((y - y.mean()) ** 2) if has_const else np.sum(y ** 2)
    r2 = 1 - np.sum(fit.resid ** 2) / tss if tss > 0 else math.nan
    dfm = k - 1 if has_const else k
    adj = 1 - (1 - r2) * (n - 1) / (n - dfm - 1) if n - dfm - 1 > 0 else math.nan
    return FitResult(
        names=kept,
        params=fit.beta,
        vcov=vcov,
        residuals=fit.resid,
        nobs=n,
        df_resid=n - k,
        r2_overall=r2,
        r2_adjusted=adj,
        dropped_columns=dropped,
        cov_type="robust",
        work=WorkingData(Xk, fit.resid, np.arange(n), tuple(range(n)), 0),
    )


# --------------------------------------------------------------------------
# within transformation


def within_transform(
    values: np.ndarray,
    entity_idx: np.ndarray,
    year_idx: np.ndarray,
    effects: frozenset = FIXED_EFFECTS,
    tol: float = DEMEAN_TOL,
    max_iter: int = DEMEAN_MAX_ITER,
) -> np.ndarray:
    """Sweep out entity and/or year means by alternating projections.

    ``values`` has shape ``(n_rows,)`` or ``(n_rows, k)``.  Iterates until
    the largest absolute change in a sweep is below ``tol`` times the scale
    of the data (max(1, max |x|)).
    """
    x = np.array(values, dtype=float, copy=True)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    groups = []
    if "entity" in effects:
        groups.append(np.asarray(entity_idx))
    if "year" in effects:
        groups.append(np.asarray(year_idx))
    if not groups or x.shape[0] == 0:
        return x[:, 0] if squeeze else x
    counts = [np.bincount(g) for g in groups]
    scale = max(1.0, float(np.max(np.abs(x))) if x.size else 1.0)

    def sweep(arr):
        biggest = 0.0
        for g, c in zip(groups, counts):
            sums = np.zeros((c.size, arr.shape[1]))
            np.add.at(sums, g, arr)
            with np.errstate(invalid="ignore", divide="ignore"):
                means = np.where(c[:, None] > 0, sums / np.maximum(c, 1)[:, None], 0.0)
            step = means[g]
            arr -= step
            biggest = max(biggest, float(np.max(np.abs(step))) if step.size else 0.0)
        return biggest

    if len(groups) == 1:
        sweep(x)
        return x[:, 0] if squeeze else x
    limit = max(tol, 64 * np.finfo(float).eps * scale)
    for _ in range(max_iter):
        if sweep(x) <= limit:
            break
    else:
        warnings.warn("alternating demeaning hit the iteration cap", RuntimeWarning)
    return x[:, 0] if squeeze else x


# --------------------------------------------------------------------------
# panel fits


@dataclass(frozen=True)
class _Sample:
    mask: np.ndarray  # (N, T) rows used
    ent: np.ndarray  # long entity index (compact)
    yr: np.ndarray  # long year index (compact)
    ent_full: np.ndarray  # long entity index into ds.entities
    y: np.ndarray
    X: np.ndarray
    entities: tuple


def _panel_sample(ds: PanelDataset, outcome: str, regressors: Sequence[str],
                  cluster: str | None = None) -> _Sample:
    y = ds.column(outcome)
    Xs = [ds.column(r) for r in regressors]
    mask = ~np.isnan(y)
    for x in Xs:
        mask &= ~np.isnan(x)
    if cluster is not None:
        vals = ds.meta_values(cluster)
        has = np.array([v not in (None, "") for v in vals])
        mask &= has[:, None]
    ei, ti = np.nonzero(mask)
    _, ent = np.unique(ei, return_inverse=True)
    _, yr = np.unique(ti, return_inverse=True)
    X = np.column_stack([x[ei, ti] for x in Xs]) if Xs else np.empty((ei.size, 0))
    return _Sample(mask, ent, yr, ei, y[ei, ti], X, ds.entities)


def _check_cluster(ds: PanelDataset, cluster: str | None):
    if cluster is None:
        return
    if cluster != "entity" and cluster not in ds.meta:
        raise UnknownVariable(f"cluster attribute {cluster!r} not found in meta")


def _absorbed_count(effects, n_ent, n_yr):
    if effects == FIXED_EFFECTS:
        return n_ent + n_yr - 1
    if effects == frozenset({"entity"}):
        return n_ent
    if effects == frozenset({"year"}):
        return n_yr
    return 0


def twfe_fit(
    ds: PanelDataset,
    spec: DesignSpec,
    *,
    on_no_variation: str = "raise",
    inference: bool = True,
) -> FitResult:
    """Fixed-effects regression by within transformation.

    Rows with any missing outcome/regressor value are dropped (listwise).
    Standard errors are CR1 clustered on ``spec.cluster`` when given, HC1
    otherwise.  With no fixed effects an intercept ``_cons`` is added.

    ``on_no_variation`` controls regressors that are constant after the
    transformation: ``"raise"`` (NoVariation) or ``"drop"`` (listed in
    ``dropped_columns``).
    """
    _check_cluster(ds, spec.cluster)
    s = _panel_sample(ds, spec.outcome, spec.regressors, spec.cluster)
    n = s.y.size
    if n == 0:
        raise EmptySample("no complete observations")
    n_ent = int(s.ent.max()) + 1
    n_yr = int(s.yr.max()) + 1
    effects = spec.fixed_effects
    if ("entity" in effects and n_ent < 2) or ("year" in effects and n_yr < 2):
        raise DegenerateSample(
            f"need at least 2 entities and 2 years (have {n_ent} and {n_yr})"
        )
    names = list(spec.regressors)
    X = s.X
    if not effects:
        X = np.column_stack([np.ones(n), X])
        names = ["_cons"] + names
    both = within_transform(np.column_stack([s.y, X]), s.ent, s.yr, effects)
    yd, Xd = both[:, 0], both[:, 1:]

    dropped = []
    usable = []
    for j, name in enumerate(names):
        scale = max(1.0, float(np.max(np.abs(X[:, j])))) if n else 1.0
        if np.max(np.abs(Xd[:, j])) <= 1e-9 * scale:
            dropped.append(name)
        else:
            usable.append(j)
    if dropped and on_no_variation == "raise":
        raise NoVariation(f"no within variation in {dropped}", columns=dropped)
    if not usable:
        raise AllColumnsCollinear("no regressor with variation")
    fit = _lstsq(Xd[:, usable], yd)
    keep = [usable[j] for j in fit.keep]
    dropped += [names[j] for j in usable if j not in keep]
    kept_names = tuple(names[j] for j in keep)
    Xk = Xd[:, keep]
    k = len(keep)
    n_abs = _absorbed_count(effects, n_ent, n_yr)
    df_k = k + n_abs

    resid_panel = np.full(ds.shape, np.nan)
    ei, ti = np.nonzero(s.mask)
    resid_panel[ei, ti] = fit.resid
    work = WorkingData(Xk, fit.resid, s.ent_full, ds.entities, n_abs)

    if not inference:
        return FitResult(kept_names, fit.beta, np.full((k, k), np.nan), resid_panel,
                         n, n - df_k, dropped_columns=tuple(dropped), cov_type="none",
                         work=work)

    if spec.cluster is not None:
        groups = np.asarray(ds.meta_values(spec.cluster), dtype=object)[s.ent_full]
        vcov, G = _cr1(Xk, fit.resid, fit.bread, groups.astype(str), k)
        cov_type, df_resid = "cluster", G - 1
    else:
        vcov, G = _hc1(Xk, fit.resid, fit.bread, df_k), None
        cov_type, df_resid = "robust", n - df_k

    within, between, overall, adjusted = _r2_values(
        s, X[:, keep], yd, fit.resid, fit.beta, effects, kept_names
    )
    return FitResult(
        names=kept_names,
        params=fit.beta,
        vcov=vcov,
        residuals=resid_panel,
        nobs=n,
        df_resid=df_resid,
        r2_within=within,
        r2_between=between,
        r2_overall=overall,
        r2_adjusted=adjusted,
        dropped_columns=tuple(dropped),
        cov_type=cov_type,
        n_clusters=G,
        work=work,
    )


def _sq_corr(a, b):
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return math.nan
    sa, sb = a - a.mean(), b - b.mean()
    den = np.sqrt(np.sum(sa ** 2) * np.sum(sb ** 2))
    if den == 0:
        return math.nan
    return float((sa @ sb / den) ** 2)


def _r2_values(s: _Sample, X_levels, yd, resid, beta, effects, names):
    n = s.y.size
    slope = np.array([nm != "_cons" for nm in names])
    fitted = X_levels[:, slope] @ beta[slope] if slope.any() else np.zeros(n)
    if effects:
        tss = float(yd @ yd)
        within = 1 - float(resid @ resid) / tss if tss > 1e-12 * max(1.0, float(s.y @ s.y)) else 0.0
    else:
        yw = within_transform(s.y, s.ent, s.yr, frozenset({"entity"}))
        fw = within_transform(fitted, s.ent, s.yr, frozenset({"entity"}))
        within = _sq_corr(fw, yw)
        if math.isnan(within) and np.ptp(yw) == 0:
            within = 0.0
    counts = np.bincount(s.ent)
    ybar = np.bincount(s.ent, weights=s.y) / counts
    fbar = np.bincount(s.ent, weights=fitted) / counts
    between = _sq_corr(fbar, ybar)
    overall = _sq_corr(fitted, s.y)
    k = int(slope.sum())
    if math.isnan(within) or n - k - 1 <= 0:
        adjusted = math.nan
    else:
        adjusted = 1 - (1 - within) * (n - 1) / (n - k - 1)
    return within, between, overall, adjusted


def r2_suite(fit: FitResult, ds: PanelDataset, spec: DesignSpec):
    """(within, between, overall, adjusted) R-squared of a :func:`twfe_fit` result."""
    s = _panel_sample(ds, spec.outcome, spec.regressors, spec.cluster)
    names = list(spec.regressors)
    X = s.X
    if not spec.fixed_effects:
        X = np.column_stack([np.ones(s.y.size), X])
        names = ["_cons"] + names
    cols = [names.index(nm) for nm in fit.names]
    yd = within_transform(s.y, s.ent, s.yr, spec.fixed_effects)
    resid = fit.residuals[s.mask]
    return _r2_values(s, X[:, cols], yd, resid, fit.params, spec.fixed_effects, fit.names)


def cluster_vcov(fit: FitResult, work: WorkingData | None, clusters: ClusterSpec) -> FitResult:
    """Replace the covariance of ``fit`` by the CR1 cluster-robust sandwich.

    Scaling is G/(G-1) * (N-1)/(N-K) with K the number of estimated slopes.
    """
    work = work if work is not None else fit.work
    if work is None:
        raise ValidationError("fit carries no working data")
    try:
        groups = np.array(
            [str(clusters.assignment[work.entities[i]]) for i in work.entity_idx]
        )
    except KeyError as exc:
        raise ValidationError(f"entity {exc.args[0]!r} has no cluster id") from None
    Q, R = np.linalg.qr(work.X)
    Rinv = solve_triangular(R, np.eye(R.shape[0]))
    bread = Rinv @ Rinv.T
    vcov, G = _cr1(work.X, work.resid, bread, groups, work.X.shape[1])
    return replace(fit, vcov=vcov, cov_type="cluster", n_clusters=G, df_resid=G - 1)


# --------------------------------------------------------------------------
# logit


LOGIT_GTOL = 1e-8
LOGIT_MAX_ITER = 100
LOGIT_DIVERGENCE = 30.0


def _loglik(eta, y):
    # log(1 + exp(eta)) computed stably
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def logit_arrays(X: np.ndarray, y: np.ndarray, names: Sequence[str]) -> FitResult:
    """Binary logit by Newton-Raphson on column-scaled regressors.

    Columns are divided by their standard deviation (constants left alone)
    so the convergence test and the divergence guard are scale free; the
    reported coefficients are on the original scale.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    names = tuple(names)
    if y.size == 0:
        raise EmptySample("no observations")
    if not np.all((y == 0) | (y == 1)):
        raise NonBinaryOutcome("logit outcome must be 0/1")
    if y.min() == y.max():
        raise PerfectSeparation("outcome does not vary")
    keep = independent_columns(X)
    if not keep:
        raise AllColumnsCollinear("no linearly independent regressors")
    dropped = tuple(n for j, n in enumerate(names) if j not in keep)
    X = X[:, keep]
    names = tuple(names[j] for j in keep)
    sd = X.std(axis=0)
    scale = np.where(sd > 0, sd, 1.0)
    Z = X / scale
    n, k = Z.shape
    b = np.zeros(k)
    converged = False
    for it in range(LOGIT_MAX_ITER + 1):
        eta = Z @ b
        p = 1.0 / (1.0 + np.exp(-eta))
        grad = Z.T @ (y - p)
        if np.max(np.abs(grad)) < LOGIT_GTOL:
            converged = True
            break
        if it == LOGIT_MAX_ITER:
            break
        w = p * (1 - p)
        H = (Z * w[:, None]).T @ Z
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise PerfectSeparation("singular Hessian; outcome perfectly predicted") from None
        b = b + step
        if np.max(np.abs(b)) > LOGIT_DIVERGENCE:
            raise PerfectSeparation(
                "coefficient diverging; outcome perfectly predicted by regressors"
            )
    if not converged:
        warnings.warn("logit did not converge within 100 iterations", RuntimeWarning)
    eta = Z @ b
    if eta[y == 1].min() > eta[y == 0].max():
        raise PerfectSeparation("linear predictor separates the outcome completely")
    p = 1.0 / (1.0 + np.exp(-eta))
    w = p * (1 - p)
    H = (Z * w[:, None]).T @ Z
    Hinv = np.linalg.inv(H)
    scores = Z * (y - p)[:, None]
    meat = scores.T @ scores
    v = (n / (n - k)) * Hinv @ meat @ Hinv
    v = (v + v.T) / 2
    beta = b / scale
    vcov = v / np.outer(scale, scale)
    ll = _loglik(eta, y)
    pbar = y.mean()
    ll0 = float(n * (pbar * np.log(pbar) + (1 - pbar) * np.log(1 - pbar)))
    extra = {
        "pseudo_r2": 1 - ll / ll0,
        "loglik": ll,
        "loglik_null": ll0,
        "iterations": it,
        "converged": converged,
        "gradient_max": float(np.max(np.abs(Z.T @ (y - p)))),
    }
    return FitResult(
        names=names,
        params=beta,
        vcov=vcov,
        residuals=y - p,
        nobs=n,
        df_resid=n - k,
        dropped_columns=dropped,
        cov_type="robust",
        extra=extra,
    )


def logit_fit(ds: PanelDataset, spec: DesignSpec, year: int | None = None) -> FitResult:
    """Pooled logit of a 0/1 panel column on ``spec.regressors`` plus intercept.

    Pass ``year`` to use a single cross-section instead of all rows.
    """
    if spec.fixed_effects:
        raise ValidationError("logit_fit supports no fixed effects (pooled logit only)")
    s = _panel_sample(ds, spec.outcome, spec.regressors)
    y, X = s.y, s.X
    if year is not None:
        j = ds.year_index(year)
        sel = np.nonzero(s.mask)[1] == j
        y, X = y[sel], X[sel]
    X = np.column_stack([np.ones(y.size), X])
    return logit_arrays(X, y, ("_cons",) + spec.regressors)
