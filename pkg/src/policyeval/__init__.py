"""Staggered difference-in-differences toolkit for place-based policy evaluation."""

__version__ = "0.1.0"

from .bacon import BaconResult, TwoByTwoComparison, bacon_decompose, flag_bad_controls
from .did import (
    TREATMENT,
    ModerationSpec,
    TreatmentSchedule,
    att_estimate,
    build_treatment,
    event_study,
    load_schedule,
    moderation_fit,
    placebo,
    selection_test,
    subset,
)
from .panel import PanelDataset, describe, load_panel
from .regress import ClusterSpec, DesignSpec, FitResult, logit_fit, twfe_fit
from .spatial import (
    GeoPoint,
    SpatialWeights,
    build_weights_adjacency,
    haversine,
    ring_dummies,
    ring_regression,
    row_normalize,
    sdm_fit,
)
from .synth import DgpSpec, oracle_dummy_ols, simulate_did, simulate_sdm
