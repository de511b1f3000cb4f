"""Entity-by-year panel container, CSV ingestion, imputation and transforms.

Missing cells are stored as ``NaN``.  Ingestion rejects any textual
non-finite value ("nan", "inf"), so inside a :class:`PanelDataset` a NaN
always means "not observed" and never a parsed number.
"""
from __future__ import annotations

import csv
import io
import math
import os
import re
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import (
    DuplicateCell,
    NonNumericValue,
    RaggedHeader,
    TargetCollision,
    UnknownVariable,
    ValidationError,
    ZeroDenominator,
)

MISSING = np.nan

_NUMBER = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")
_INTEGER = re.compile(r"^[+-]?\d+$")


def is_missing(values):
    return np.isnan(values)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PanelDataset:
    """Dense entity x year table of numeric variables.

    Parameters
    ----------
    entities : sequence of str
        Unique entity identifiers; their order fixes the row order of every
        column array.
    years : sequence of int
        Consecutive calendar years, strictly increasing.
    columns : mapping
        Variable name -> array of shape ``(n_entities, n_years)``.  Missing
        cells are NaN.
    meta : mapping
        Attribute name -> sequence of per-entity values (time-invariant).
    """

    entities: tuple
    years: np.ndarray
    columns: Mapping[str, np.ndarray]
    meta: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        entities = tuple(str(e) for e in self.entities)
        if len(set(entities)) != len(entities):
            raise ValidationError("entity identifiers must be unique")
        years = np.asarray(self.years, dtype=np.int64).copy()
        if years.ndim != 1 or years.size == 0:
            raise ValidationError("years must be a non-empty 1-d sequence")
        if years.size > 1 and not np.all(np.diff(years) == 1):
            raise ValidationError("years must be strictly increasing without gaps")
        years.setflags(write=False)
        shape = (len(entities), years.size)
        cols = {}
        for name, values in self.columns.items():
            arr = _frozen(values)
            if arr.shape != shape:
                raise ValidationError(
                    f"column {name!r} has shape {arr.shape}, expected {shape}"
                )
            cols[str(name)] = arr
        meta = {}
        for name, values in dict(self.meta).items():
            values = tuple(values)
            if len(values) != len(entities):
                raise ValidationError(f"meta attribute {name!r} has wrong length")
            meta[str(name)] = values
        object.__setattr__(self, "entities", entities)
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "columns", MappingProxyType(cols))
        object.__setattr__(self, "meta", MappingProxyType(meta))

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.entities), int(self.years.size)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_years(self) -> int:
        return int(self.years.size)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.column(name)

    def __contains__(self, name) -> bool:
        return name in self.columns

    def column(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise UnknownVariable(f"unknown variable {name!r}") from None

    def entity_index(self, entity: str) -> int:
        try:
            return self.entities.index(str(entity))
        except ValueError:
            raise ValidationError(f"unknown entity {entity!r}") from None

    def year_index(self, year: int) -> int:
        i = int(year) - int(self.years[0])
        if not 0 <= i < self.n_years:
            raise ValidationError(f"year {year} outside panel span")
        return i

    def meta_values(self, attribute: str) -> tuple:
        if attribute == "entity":
            return self.entities
        try:
            return self.meta[attribute]
        except KeyError:
            raise UnknownVariable(f"unknown meta attribute {attribute!r}") from None

    def with_column(self, name: str, values, overwrite: bool = False) -> PanelDataset:
        if name in self.columns and not overwrite:
            raise TargetCollision(f"column {name!r} already exists")
        cols = dict(self.columns)
        cols[name] = values
        return PanelDataset(self.entities, self.years, cols, self.meta)

    def with_meta(self, name: str, values: Sequence) -> PanelDataset:
        meta = dict(self.meta)
        meta[name] = tuple(values)
        return PanelDataset(self.entities, self.years, self.columns, meta)

    def select_entities(self, keep) -> PanelDataset:
        """Restrict to entities where boolean mask ``keep`` is true."""
        keep = np.asarray(keep, dtype=bool)
        idx = np.flatnonzero(keep)
        return PanelDataset(
            tuple(self.entities[i] for i in idx),
            self.years,
            {k: v[idx] for k, v in self.columns.items()},
            {k: tuple(v[i] for i in idx) for k, v in self.meta.items()},
        )

    def drop_entities(self, entities: Iterable[str]) -> PanelDataset:
        drop = {str(e) for e in entities}
        return self.select_entities([e not in drop for e in self.entities])

    def missing_count(self, name: str) -> int:
        return int(np.isnan(self.column(name)).sum())

    def to_rows(self, columns: Sequence[str] | None = None) -> list[list[str]]:
        """Long-format rows (header first) in the ingestion CSV layout."""
        names = list(self.columns) if columns is None else list(columns)
        meta_names = list(self.meta)
        rows = [["entity", "year", *meta_names, *names]]
        arrays = [self.column(n) for n in names]
        for i, ent in enumerate(self.entities):
            for j, year in enumerate(self.years):
                row = [ent, str(int(year))]
                row += [str(self.meta[m][i]) for m in meta_names]
                row += [_format_number(a[i, j]) for a in arrays]
                rows.append(row)
        return rows

    def to_csv(self, path, columns: Sequence[str] | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.to_rows(columns))


def _format_number(x: float) -> str:
    if math.isnan(x):
        return ""
    return repr(float(x))


def parse_number(text: str, row: int | None = None) -> float:
    s = text.strip()
    if s == "":
        return MISSING
    if not _NUMBER.match(s):
        raise NonNumericValue(f"non-numeric value {text!r} at row {row}", row=row)
    return float(s)


def _read_rows(source) -> list[list[str]]:
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="", encoding="utf-8") as fh:
            return [r for r in csv.reader(fh)]
    if isinstance(source, io.IOBase) or hasattr(source, "read"):
        return [r for r in csv.reader(source)]
    return [list(r) for r in source]


def load_panel(source, meta_columns: Sequence[str] = ()) -> PanelDataset:
    """Read a long-format CSV (``entity,year,<vars...>``) into a dense panel.

    ``source`` may be a path, an open text file or an iterable of already
    split rows (header first).  Columns named in ``meta_columns`` are kept as
    per-entity string attributes and must not vary over time.  Entities keep
    their order of first appearance; the year span runs from the smallest to
    the largest year seen, and cells with no record are missing.
    """
    rows = _read_rows(source)
    rows = [r for r in rows if r]
    if not rows:
        raise RaggedHeader("empty input: header row required")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0] != "entity" or header[1] != "year":
        raise RaggedHeader("header must start with 'entity,year'")
    if len(set(header)) != len(header):
        raise RaggedHeader("duplicate column names in header")
    meta_columns = list(meta_columns)
    for m in meta_columns:
        if m not in header[2:]:
            raise UnknownVariable(f"meta column {m!r} not in header")
    var_pos = [k for k in range(2, len(header)) if header[k] not in meta_columns]
    meta_pos = [header.index(m) for m in meta_columns]

    records = {}
    order = []
    meta_seen: dict[str, list] = {}
    for rownum, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise RaggedHeader(
                f"row {rownum} has {len(r)} fields, header has {len(header)}"
            )
        ent = r[0].strip()
        if ent == "":
            raise ValidationError(f"empty entity identifier at row {rownum}")
        ytxt = r[1].strip()
        if not _INTEGER.match(ytxt):
            raise NonNumericValue(f"unparseable year {ytxt!r} at row {rownum}", rownum)
        year = int(ytxt)
        key = (ent, year)
        if key in records:
            raise DuplicateCell(f"duplicate cell ({ent}, {year}) at row {rownum}")
        records[key] = [parse_number(r[k], rownum) for k in var_pos]
        if ent not in meta_seen:
            order.append(ent)
            meta_seen[ent] = [r[k].strip() for k in meta_pos]
        elif meta_seen[ent] != [r[k].strip() for k in meta_pos]:
            raise ValidationError(f"meta attributes of {ent!r} vary over time")
    if not records:
        raise ValidationError("no data rows")

    all_years = [y for _, y in records]
    years = np.arange(min(all_years), max(all_years) + 1)
    index = {e: i for i, e in enumerate(order)}
    data = np.full((len(var_pos), len(order), years.size), MISSING)
    for (ent, year), vals in records.items():
        data[:, index[ent], year - years[0]] = vals
    columns = {header[k]: data[n] for n, k in enumerate(var_pos)}
    meta = {m: tuple(meta_seen[e][n] for e in order) for n, m in enumerate(meta_columns)}
    return PanelDataset(tuple(order), years, columns, meta)


def load_meta(ds: PanelDataset, source) -> PanelDataset:
    """Attach per-entity attributes from a CSV ``entity,<attr...>``."""
    rows = [r for r in _read_rows(source) if r]
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "entity":
        raise RaggedHeader("meta header must start with 'entity'")
    found: dict[str, list[str]] = {}
    for rownum, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise RaggedHeader(f"row {rownum} has {len(r)} fields")
        if r[0].strip() in found:
            raise DuplicateCell(f"duplicate entity {r[0]!r} in meta file")
        found[r[0].strip()] = [v.strip() for v in r[1:]]
    missing = [e for e in ds.entities if e not in found]
    if missing:
        raise ValidationError(f"meta file lacks entities: {missing[:5]}")
    for k, name in enumerate(header[1:]):
        ds = ds.with_meta(name, [found[e][k] for e in ds.entities])
    return ds


def _require(ds: PanelDataset, var: str) -> np.ndarray:
    if var not in ds.columns:
        raise UnknownVariable(f"unknown variable {var!r}")
    return ds.columns[var]


def interpolate_series(values: np.ndarray) -> np.ndarray:
    """Linear interpolation of interior gaps along the last axis; no extrapolation."""
    out = np.array(values, dtype=float, copy=True)
    flat = out.reshape(-1, out.shape[-1])
    pos = np.arange(flat.shape[1])
    for row in flat:
        obs = ~np.isnan(row)
        if obs.sum() < 2:
            continue
        idx = pos[obs]
        inner = (pos > idx[0]) & (pos < idx[-1]) & ~obs
        if inner.any():
            row[inner] = np.interp(pos[inner], idx, row[obs])
    return out


def interpolate_missing(ds: PanelDataset, var: str) -> PanelDataset:
    """Fill interior missing runs of ``var`` within each entity.

    Leading and trailing runs stay missing.
    """
    values = _require(ds, var)
    return ds.with_column(var, interpolate_series(values), overwrite=True)


def clamp_negative_to_zero(ds: PanelDataset, var: str) -> PanelDataset:
    values = np.array(_require(ds, var), copy=True)
    values[values < 0] = 0.0
    return ds.with_column(var, values, overwrite=True)


TRANSFORM_KINDS = ("log", "linear-interpolate", "clamp-negative-to-zero", "lag")


@dataclass(frozen=True)
class VariableTransformSpec:
    source: str
    kind: str
    target: str
    k: int = 1

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValidationError(f"unknown transform kind {self.kind!r}")
        if self.kind == "lag" and int(self.k) < 1:
            raise ValidationError("lag order must be >= 1")


class TransformOutcome(NamedTuple):
    dataset: PanelDataset
    n_invalid: int


def apply_transform(ds: PanelDataset, spec: VariableTransformSpec) -> TransformOutcome:
    """Add ``spec.target`` derived from ``spec.source``.

    ``n_invalid`` counts observed cells that became missing (non-positive
    input to ``log``); it is zero for the other kinds.
    """
    values = _require(ds, spec.source)
    if spec.target in ds.columns:
        raise TargetCollision(f"target column {spec.target!r} already exists")
    n_invalid = 0
    if spec.kind == "log":
        bad = ~np.isnan(values) & (values <= 0)
        n_invalid = int(bad.sum())
        out = np.full(values.shape, MISSING)
        good = ~np.isnan(values) & (values > 0)
        out[good] = np.log(values[good])
    elif spec.kind == "linear-interpolate":
        out = interpolate_series(values)
    elif spec.kind == "clamp-negative-to-zero":
        out = np.where(values < 0, 0.0, values)
    else:
        k = int(spec.k)
        if k >= ds.n_years:
            raise ValidationError(f"lag {k} needs more than {ds.n_years} years")
        out = np.full(values.shape, MISSING)
        out[:, k:] = values[:, :-k]
    return TransformOutcome(ds.with_column(spec.target, out), n_invalid)


@dataclass(frozen=True)
class EmploymentTable:
    """Employment counts keyed by (entity, industry, year)."""

    entries: tuple

    def __post_init__(self):
        seen = set()
        clean = []
        for ent, ind, year, count in self.entries:
            key = (str(ent), str(ind), int(year))
            if key in seen:
                raise DuplicateCell(f"duplicate employment entry {key}")
            count = float(count)
            if not count >= 0:
                raise ValidationError(f"negative employment count at {key}")
            seen.add(key)
            clean.append((*key, count))
        object.__setattr__(self, "entries", tuple(clean))


def load_employment(source) -> EmploymentTable:
    rows = [r for r in _read_rows(source) if r]
    header = [h.strip() for h in rows[0]]
    if header != ["entity", "industry", "year", "employment"]:
        raise RaggedHeader("employment header must be entity,industry,year,employment")
    entries = []
    for rownum, r in enumerate(rows[1:], start=2):
        if len(r) != 4:
            raise RaggedHeader(f"row {rownum} has {len(r)} fields")
        if not _INTEGER.match(r[2].strip()):
            raise NonNumericValue(f"unparseable year at row {rownum}", rownum)
        count = parse_number(r[3], rownum)
        if math.isnan(count):
            raise NonNumericValue(f"empty employment count at row {rownum}", rownum)
        entries.append((r[0].strip(), r[1].strip(), int(r[2]), count))
    return EmploymentTable(tuple(entries))


def location_quotient(emp: EmploymentTable, industry: str, year: int) -> dict[str, float]:
    """Location quotient of ``industry`` for every entity observed in ``year``.

    lq(i) = (e_ir / e_i.) / (e_.r / e_..)
    """
    totals: dict[str, float] = {}
    in_industry: dict[str, float] = {}
    for ent, ind, yr, count in emp.entries:
        if yr != int(year):
            continue
        totals[ent] = totals.get(ent, 0.0) + count
        if ind == str(industry):
            in_industry[ent] = in_industry.get(ent, 0.0) + count
    grand = sum(totals.values())
    national = sum(in_industry.values())
    if grand <= 0 or national <= 0:
        raise ZeroDenominator(f"national employment total is zero in {year}")
    share = national / grand
    out = {}
    for ent, tot in totals.items():
        if tot <= 0:
            raise ZeroDenominator(f"employment total of {ent!r} is zero in {year}")
        out[ent] = (in_industry.get(ent, 0.0) / tot) / share
    return out


def location_quotient_column(
    emp: EmploymentTable, industry: str, ds: PanelDataset
) -> np.ndarray:
    """Location quotients laid out as a panel column (missing where unobserved)."""
    out = np.full(ds.shape, MISSING)
    years = {int(y) for _, _, y, _ in emp.entries}
    for year in sorted(years):
        if not ds.years[0] <= year <= ds.years[-1]:
            continue
        j = year - int(ds.years[0])
        for ent, value in location_quotient(emp, industry, year).items():
            if ent in ds.entities:
                out[ds.entity_index(ent), j] = value
    return out


class DescribeRow(NamedTuple):
    variable: str
    n: int
    mean: float
    sd: float
    min: float
    max: float


def describe(ds: PanelDataset, variables: Sequence[str] | None = None) -> list[DescribeRow]:
    """N, mean, sample sd, min and max over observed cells of each variable."""
    names = list(ds.columns) if variables is None else list(variables)
    out = []
    for name in names:
        vals = _require(ds, name)
        vals = vals[~np.isnan(vals)]
        n = int(vals.size)
        if n == 0:
            out.append(DescribeRow(name, 0, MISSING, MISSING, MISSING, MISSING))
            continue
        sd = float(np.std(vals, ddof=1)) if n > 1 else MISSING
        out.append(
            DescribeRow(name, n, float(np.mean(vals)), sd, float(vals.min()), float(vals.max()))
        )
    return out


def _sig6(x: float) -> str:
    return "" if math.isnan(x) else f"{x:.6g}"


def describe_rows(stats: Sequence[DescribeRow]) -> list[list[str]]:
    rows = [["variable", "n", "mean", "sd", "min", "max"]]
    for s in stats:
        rows.append([s.variable, str(s.n), _sig6(s.mean), _sig6(s.sd), _sig6(s.min), _sig6(s.max)])
    return rows


def write_describe_csv(stats: Sequence[DescribeRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(describe_rows(stats))
