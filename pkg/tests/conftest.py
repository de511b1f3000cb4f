from pathlib import Path

import numpy as np
import pytest

from policyeval.panel import PanelDataset

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "policyeval" / "fixtures"


def make_panel(columns, entities=None, start=2000, meta=None):
    first = np.asarray(next(iter(columns.values())), dtype=float)
    n, t = first.shape
    entities = entities or [f"u{i}" for i in range(n)]
    return PanelDataset(entities, np.arange(start, start + t), columns, meta or {})


@pytest.fixture
def fixtures_dir():
    return FIXTURES


def write_csv(path, rows):
    import csv
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def build_workspace(directory, seed=0):
    """Write a small set of CLI inputs: panel, schedule, adjacency, centroids and zones."""
    from policyeval.synth import DgpSpec, lattice_weights, simulate_rings

    directory = Path(directory)
    spec = DgpSpec(64, 10, delta=2.0, cohort_fractions={2003: 0.25, 2006: 0.25},
                   beta=(1.0,), interaction=("M", 1.0), seed=seed)
    ds, schedule, centroids, zones = simulate_rings(spec, radius_km=15.0)
    ds.to_csv(directory / "panel.csv")
    write_csv(directory / "schedule.csv", schedule.to_rows())
    W = lattice_weights(8, 8)
    pairs = [["entity_a", "entity_b"]]
    for i, j in zip(*np.nonzero(np.triu(W.matrix))):
        pairs.append([W.entities[i], W.entities[j]])
    write_csv(directory / "adjacency.csv", pairs)
    write_csv(directory / "centroids.csv",
              [["entity", "lon", "lat"]] + [[e, repr(p.lon), repr(p.lat)] for e, p in centroids.items()])
    write_csv(directory / "zones.csv",
              [["lon", "lat", "year", "entity"]]
              + [[repr(z.point.lon), repr(z.point.lat), str(z.year), z.entity] for z in zones])
    return directory


@pytest.fixture
def workspace(tmp_path):
    d = tmp_path / "inputs"
    d.mkdir()
    return build_workspace(d)


def command_args(inputs):
    """Flags for every CLI command against a :func:`build_workspace` directory."""
    i = Path(inputs)
    base = ["--panel", str(i / "panel.csv"), "--schedule", str(i / "schedule.csv"), "--outcome", "y"]
    return {
        "ingest": ["--panel", str(i / "panel.csv")],
        "describe": ["--panel", str(i / "panel.csv")],
        "did": base + ["--controls", "x1", "--cluster", "entity"],
        "event-study": base + ["--window=-3,3"],
        "bacon": base,
        "placebo": base + ["--reps", "30", "--seed", "4"],
        "sdm": base + ["--controls", "x1", "--adjacency", str(i / "adjacency.csv")],
        "ring": base + ["--centroids", str(i / "centroids.csv"), "--zones", str(i / "zones.csv"),
                        "--ring-d", "10"],
        "logit-check": base,
        "moderate": base + ["--moderator", "M"],
        "simulate": ["--entities", "30", "--years", "8", "--seed", "3"],
    }


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
