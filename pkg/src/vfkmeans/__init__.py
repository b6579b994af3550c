"""Differentially private vertical federated k-means toolkit."""

from .core import (
    BudgetLedger,
    BudgetSplit,
    ConfigInvalid,
    DataFormatError,
    DimMismatch,
    IdMismatch,
    IncompatibleSketches,
    InvalidParameter,
    LengthMismatch,
    PrivacyBudget,
    Seed,
    SingularTransition,
    SplitSpecInvalid,
    VfkmError,
    split_budget,
)
from .data import (
    DEFAULT_SPREAD,
    DatasetView,
    SplitSpec,
    gen_mixed_gaussian,
    ingest_csv,
    vsplit,
    write_csv,
)
from .sketch import (
    Partition,
    SketchParams,
    SketchSet,
    calibrate_xi,
    dpfm,
    dpfmps_gen,
    harmonic_decode,
)
from .weights import (
    SigmaModel,
    UpdateSchedule,
    WeightGrid,
    auto_kprime,
    basic_est,
    project_pair,
    two_phase_est,
)
from .clustering import (
    LocalModel,
    WeightedPoints,
    assign_nearest,
    dplloyd,
    dplsf,
    vscore,
    weighted_kmeans,
)
from .baselines import (
    LdpReport,
    ind_lap,
    ldp_agg_2pest,
    ldp_decode,
    ldp_encode,
    noisy_histogram,
)
from .federation import ESTIMATORS, ProtocolMessage, RunConfig, run_protocol
from .metrics import RunReport, normalized_loss, rel_intersection_error
from .experiments import preset, run_matrix

__version__ = "0.1.0"

__all__ = [
    "BudgetLedger", "BudgetSplit", "ConfigInvalid", "DataFormatError",
    "DimMismatch", "IdMismatch", "IncompatibleSketches", "InvalidParameter",
    "LengthMismatch", "PrivacyBudget", "Seed", "SingularTransition",
    "SplitSpecInvalid", "VfkmError", "split_budget",
    "DEFAULT_SPREAD", "DatasetView", "SplitSpec", "gen_mixed_gaussian",
    "ingest_csv", "vsplit", "write_csv",
    "Partition", "SketchParams", "SketchSet", "calibrate_xi", "dpfm",
    "dpfmps_gen", "harmonic_decode",
    "SigmaModel", "UpdateSchedule", "WeightGrid", "auto_kprime", "basic_est",
    "project_pair", "two_phase_est",
    "LocalModel", "WeightedPoints", "assign_nearest", "dplloyd", "dplsf",
    "vscore", "weighted_kmeans",
    "LdpReport", "ind_lap", "ldp_agg_2pest", "ldp_decode", "ldp_encode",
    "noisy_histogram",
    "ESTIMATORS", "ProtocolMessage", "RunConfig", "run_protocol",
    "RunReport", "normalized_loss", "rel_intersection_error",
    "preset", "run_matrix",
    "__version__",
]
