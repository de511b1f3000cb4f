"""Command-line front end.

Every command reads its settings from flags, optionally layered over a flat
JSON config (``--config``; a previous run's ``manifest.json`` also works).
Outputs are assembled in memory and written only when the command succeeds.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bacon import bacon_decompose, flag_bad_controls
from .did import (
    PLACEBO_MODES,
    TREATMENT,
    ModerationSpec,
    att_estimate,
    event_study,
    load_schedule,
    moderation_fit,
    placebo,
    selection_test,
    treatment_for,
    treatment_status,
)
from .errors import EstimationError, PolicyEvalError, ValidationError
from .panel import (
    clamp_negative_to_zero,
    describe,
    describe_rows,
    interpolate_missing,
    load_meta,
    load_panel,
)
from .spatial import (
    load_adjacency,
    load_centroids,
    load_zones,
    ring_dummies,
    ring_regression,
    ring_rows,
    row_normalize,
    sdm_fit,
)
from .synth import DgpSpec, lattice_weights, simulate_did, simulate_sdm

COMMANDS = ("ingest", "describe", "did", "event-study", "bacon", "placebo", "sdm",
            "ring", "logit-check", "moderate", "simulate")
PATH_KEYS = ("panel", "schedule", "meta", "centroids", "zones", "adjacency")

DEFAULTS = {
    "panel": None, "schedule": None, "meta": None, "outcome": None, "controls": [],
    "cluster": None, "lag": 1, "drop_before": None, "window": [-5, 5], "reps": 500,
    "seed": 0, "moderator": None, "center": False, "ring_d": 10.0, "rings": None,
    "centroids": None, "zones": None, "adjacency": None, "out": ".",
    "placebo_mode": "permute-both", "year": None, "interpolate": [],
    "clamp_negative": [], "bad_control_threshold": 0.05,
    "entities": 200, "years": 20, "delta": 5.0, "cohorts": None, "noise_sd": 1.0,
    "rho": None, "lattice": None, "start_year": 2000,
}


def _list(text):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return [str(x).strip() for x in text if str(x).strip()]
    return [x.strip() for x in str(text).split(",") if x.strip()]


def _window(text):
    vals = _list(text)
    if vals is None:
        return None
    try:
        a, b = (int(v) for v in vals)
    except ValueError:
        raise ValidationError(f"window must be two integers, got {text!r}") from None
    return [a, b]


def _cohorts(text):
    """``2005:0.2,2010:0.3`` -> {2005: 0.2, 2010: 0.3}"""
    if text is None or isinstance(text, dict):
        return None if text is None else {str(k): float(v) for k, v in text.items()}
    out = {}
    for part in _list(text):
        try:
            year, frac = part.split(":")
            out[str(int(year))] = float(frac)
        except ValueError:
            raise ValidationError(f"bad cohort entry {part!r}; use YEAR:FRACTION") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="policyeval", description="Staggered DiD policy evaluation")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("--panel")
        s.add_argument("--schedule")
        s.add_argument("--meta", help="entity-level attributes CSV (entity,<attr>...)")
        s.add_argument("--outcome")
        s.add_argument("--controls", type=_list)
        s.add_argument("--cluster")
        s.add_argument("--lag", type=int)
        s.add_argument("--drop-before", dest="drop_before", type=int)
        s.add_argument("--window", type=_window)
        s.add_argument("--reps", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--moderator")
        s.add_argument("--center", action="store_true", default=None)
        s.add_argument("--ring-d", dest="ring_d", type=float)
        s.add_argument("--rings", type=int)
        s.add_argument("--centroids")
        s.add_argument("--zones")
        s.add_argument("--adjacency")
        s.add_argument("--out")
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--placebo-mode", dest="placebo_mode", choices=PLACEBO_MODES)
        s.add_argument("--year", type=int, help="cross-section year for logit-check")
        s.add_argument("--interpolate", type=_list)
        s.add_argument("--clamp-negative", dest="clamp_negative", type=_list)
        s.add_argument("--bad-control-threshold", dest="bad_control_threshold", type=float)
        s.add_argument("--entities", type=int)
        s.add_argument("--years", type=int)
        s.add_argument("--start-year", dest="start_year", type=int)
        s.add_argument("--delta", type=float)
        s.add_argument("--cohorts", type=_cohorts)
        s.add_argument("--noise-sd", dest="noise_sd", type=float)
        s.add_argument("--rho", type=float)
        s.add_argument("--lattice", type=_list, help="ROWS,COLS contiguity grid for simulate")
    return p


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config, then explicit flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ValidationError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ValidationError("config must be a JSON object")
        if isinstance(loaded.get("config"), dict) and "command" in loaded:
            loaded = loaded["config"]
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg["controls"] = _list(cfg["controls"]) or []
    cfg["interpolate"] = _list(cfg["interpolate"]) or []
    cfg["clamp_negative"] = _list(cfg["clamp_negative"]) or []
    cfg["window"] = _window(cfg["window"])
    cfg["cohorts"] = _cohorts(cfg["cohorts"])
    return cfg


# --------------------------------------------------------------------------
# output helpers


def _json_bytes(obj) -> bytes:
    return (json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n").encode()


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _csv_bytes(rows) -> bytes:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue().encode()


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _need(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ValidationError(f"missing required setting(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def _open(path, what):
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} file not found: {path}")
    return p


def _load_data(cfg):
    _need(cfg, "panel")
    ds = load_panel(_open(cfg["panel"], "panel"))
    if cfg["meta"]:
        ds = load_meta(ds, _open(cfg["meta"], "meta"))
    for var in cfg["interpolate"]:
        ds = interpolate_missing(ds, var)
    for var in cfg["clamp_negative"]:
        ds = clamp_negative_to_zero(ds, var)
    return ds


def _load_schedule(cfg):
    _need(cfg, "schedule")
    return load_schedule(_open(cfg["schedule"], "schedule"))


def _check_columns(ds, cfg):
    for name in [cfg["outcome"], *cfg["controls"]]:
        if name is not None and name not in ds.columns:
            raise ValidationError(f"unknown variable {name!r}")


def _treatment(ds, cfg):
    schedule = _load_schedule(cfg)
    return schedule, *treatment_for(ds, schedule, cfg["lag"], cfg["drop_before"])


# --------------------------------------------------------------------------
# commands; each returns {filename: bytes}


def cmd_ingest(cfg, threads):
    ds = _load_data(cfg)
    summary = {
        "entities": len(ds.entities),
        "years": [int(ds.years[0]), int(ds.years[-1])],
        "columns": list(ds.columns),
        "meta": list(ds.meta),
        "missing": {c: ds.missing_count(c) for c in ds.columns},
    }
    return {"ingest.json": _json_bytes(summary), "ingest_panel.csv": _csv_bytes(ds.to_rows())}


def cmd_describe(cfg, threads):
    ds = _load_data(cfg)
    names = ([cfg["outcome"]] if cfg["outcome"] else []) + cfg["controls"] or None
    stats = describe(ds, names)
    rows = describe_rows(stats)
    return {"describe.csv": _csv_bytes(rows),
            "describe.json": _json_bytes({r.variable: r._asdict() for r in stats})}


def cmd_did(cfg, threads):
    _need(cfg, "outcome")
    ds = _load_data(cfg)
    _check_columns(ds, cfg)
    _, treatment, excluded = _treatment(ds, cfg)
    fit = att_estimate(ds, treatment, cfg["outcome"], cfg["controls"], cfg["cluster"])
    out = fit.to_dict()
    lo, hi = fit.conf_int(TREATMENT)
    out["ci95"] = {TREATMENT: [lo, hi]}
    out["excluded_entities"] = excluded
    return {"did.json": _json_bytes(out)}


def cmd_event_study(cfg, threads):
    _need(cfg, "outcome")
    ds = _load_data(cfg)
    _check_columns(ds, cfg)
    schedule = _load_schedule(cfg)
    res = event_study(ds, schedule, cfg["outcome"], cfg["controls"], tuple(cfg["window"]),
                      cfg["cluster"], cfg["lag"], cfg["drop_before"])
    body = {
        "window": list(res.window),
        "reference_period": res.reference_period,
        "binned_endpoints": res.binned_endpoints,
        "coef": {str(k): c for k, (c, _) in sorted(res.coefficients.items())},
        "se": {str(k): s for k, (_, s) in sorted(res.coefficients.items())},
        "df_resid": res.df_resid,
    }
    return {"event-study.json": _json_bytes(body), "event-study.csv": _csv_bytes(res.to_rows())}


def cmd_bacon(cfg, threads):
    _need(cfg, "outcome")
    ds = _load_data(cfg)
    _check_columns(ds, cfg)
    schedule = _load_schedule(cfg)
    res = bacon_decompose(ds, schedule, cfg["outcome"], cfg["lag"], cfg["controls"],
                          cfg["drop_before"], balance=True)
    report = flag_bad_controls(res, cfg["bad_control_threshold"])
    body = res.to_dict()
    body["bad_controls"] = report.to_dict()
    return {
        "bacon.json": _json_bytes(body),
        "bacon_pairs.csv": _csv_bytes(res.pair_rows()),
        "bacon_categories.csv": _csv_bytes(res.category_rows()),
    }


def cmd_placebo(cfg, threads):
    _need(cfg, "outcome")
    ds = _load_data(cfg)
    _check_columns(ds, cfg)
    schedule = _load_schedule(cfg)
    res = placebo(ds, schedule, cfg["outcome"], cfg["controls"], cfg["reps"], cfg["seed"],
                  cfg["placebo_mode"], cfg["lag"], cfg["drop_before"], threads=threads)
    return {"placebo.json": _json_bytes(res.to_dict()), "placebo.csv": _csv_bytes(res.to_rows())}


def cmd_sdm(cfg, threads):
    _need(cfg, "outcome", "adjacency")
    ds = _load_data(cfg)
    _check_columns(ds, cfg)
    _, treatment, excluded = _treatment(ds, cfg)
    W = row_normalize(load_adjacency(_open(cfg["adjacency"], "adjacency"), treatment.entities))
    fit = sdm_fit(ds, W, treatment, cfg["outcome"], cfg["controls"])
    body = fit.to_dict()
    body["zero_weight_rows"] = list(W.zero_rows)
    body["excluded_entities"] = excluded
    return {"sdm.json": _json_bytes(body)}


def cmd_ring(cfg, threads):
    _need(cfg, "outcome", "centroids", "zones")
    ds = _load_data(cfg)
    _check_columns(ds, cfg)
    _, treatment, excluded = _treatment(ds, cfg)
    centroids = load_centroids(_open(cfg["centroids"], "centroids"))
    zones = load_zones(_open(cfg["zones"], "zones"))
    rings = ring_dummies(centroids, zones, ds.years, cfg["ring_d"], cfg["rings"], cfg["lag"],
                         entities=treatment.entities)
    fit = ring_regression(ds, treatment, rings, cfg["outcome"], cfg["controls"], cfg["cluster"])
    body = fit.to_dict()
    body["ring_d"] = rings.d
    body["rings"] = rings.m
    body["excluded_entities"] = excluded
    return {"ring.json": _json_bytes(body), "ring.csv": _csv_bytes(ring_rows(fit, rings.m))}


def cmd_logit_check(cfg, threads):
    _need(cfg, "outcome")
    ds = _load_data(cfg)
    _check_columns(ds, cfg)
    _, treatment, excluded = _treatment(ds, cfg)
    data = treatment_status(ds, treatment, "treated_ever", ever=True)
    year = cfg["year"] if cfg["year"] is not None else int(data.years[0])
    fit = selection_test(data, "treated_ever", [cfg["outcome"], *cfg["controls"]], year=year)
    body = fit.to_dict()
    body["year"] = year
    body["excluded_entities"] = excluded
    return {"logit-check.json": _json_bytes(body)}


def cmd_moderate(cfg, threads):
    _need(cfg, "outcome", "moderator")
    ds = _load_data(cfg)
    _check_columns(ds, cfg)
    _, treatment, excluded = _treatment(ds, cfg)
    fit = moderation_fit(ds, treatment, ModerationSpec(cfg["moderator"], bool(cfg["center"])),
                         cfg["outcome"], cfg["controls"], cfg["cluster"])
    body = fit.to_dict()
    body["excluded_entities"] = excluded
    return {"moderate.json": _json_bytes(body)}


def cmd_simulate(cfg, threads):
    cohorts = cfg["cohorts"]
    if cohorts is None:
        y0 = cfg["start_year"]
        n = cfg["years"]
        cohorts = {str(y0 + n // 4): 0.2, str(y0 + n // 2): 0.2, str(y0 + 3 * n // 4): 0.2}
    spec = DgpSpec(
        n_entities=cfg["entities"], n_years=cfg["years"], delta=cfg["delta"],
        cohort_fractions={int(k): v for k, v in cohorts.items()}, noise_sd=cfg["noise_sd"],
        rho=cfg["rho"], seed=cfg["seed"], start_year=cfg["start_year"], lag=cfg["lag"],
        beta=(1.0,) * len(cfg["controls"]),
    )
    files = {}
    if cfg["lattice"]:
        try:
            rows, cols = (int(v) for v in cfg["lattice"])
        except ValueError:
            raise ValidationError("lattice must be ROWS,COLS") from None
        if rows * cols != spec.n_entities:
            raise ValidationError("lattice size must equal the number of entities")
        W = lattice_weights(rows, cols)
        ds, schedule = simulate_sdm(spec, row_normalize(W))
        pairs = [["entity_a", "entity_b"]]
        for i, j in zip(*np.nonzero(np.triu(W.matrix))):
            pairs.append([W.entities[i], W.entities[j]])
        files["adjacency.csv"] = _csv_bytes(pairs)
    elif spec.rho:
        raise ValidationError("simulating a spatial model needs --lattice")
    else:
        ds, schedule = simulate_did(spec)
    if cfg["controls"]:
        renamed = {f"x{j + 1}": name for j, name in enumerate(cfg["controls"])}
        cols = {renamed.get(k, k): v for k, v in ds.columns.items()}
        ds = type(ds)(ds.entities, ds.years, cols)
    files["panel.csv"] = _csv_bytes(ds.to_rows())
    files["schedule.csv"] = _csv_bytes(schedule.to_rows())
    return files


HANDLERS = {
    "ingest": cmd_ingest, "describe": cmd_describe, "did": cmd_did,
    "event-study": cmd_event_study, "bacon": cmd_bacon, "placebo": cmd_placebo,
    "sdm": cmd_sdm, "ring": cmd_ring, "logit-check": cmd_logit_check,
    "moderate": cmd_moderate, "simulate": cmd_simulate,
}


def _manifest(command, cfg):
    inputs = {}
    for key in PATH_KEYS:
        if cfg.get(key):
            inputs[key] = {"path": str(cfg[key]), "sha256": _sha256(cfg[key])}
    return {"command": command, "config": cfg, "seed": cfg["seed"], "inputs": inputs,
            "version": __version__}


def run(command: str, cfg: dict, threads: int = 1) -> dict:
    """Execute ``command`` and return the output files as ``{name: bytes}``."""
    if command not in HANDLERS:
        raise ValidationError(f"unknown command {command!r}")
    if threads < 1:
        raise ValidationError("--threads must be >= 1")
    files = HANDLERS[command](cfg, threads)
    files["manifest.json"] = _json_bytes(_manifest(command, cfg))
    return files


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        files = run(args.command, cfg, args.threads)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        for name, data in files.items():
            (out / name).write_bytes(data)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EstimationError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return 2
    except PolicyEvalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
