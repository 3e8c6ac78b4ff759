"""Empirical variational Bayes shrinkage, decomposition and imputation for
linked matrices: closed-form singular value thresholding with data-driven
noise scales, decomposition of block-matrix grids into shared / partially
shared / specific low-rank modules, EM-style missing-data imputation, and a
seeded simulation bench."""

from evblink.shrinkage import (
    NoiseFitDiagnostics,
    ShrinkageResult,
    SvdTriple,
    estimate_sigma,
    evb_detection_threshold,
    evb_shrink_matrix,
    evb_shrink_value,
    evb_threshold,
    hard_threshold_matrix,
    kappa,
    oracle_operator,
    retention_kappa,
    soft_threshold_matrix,
)
from evblink.linked import (
    BlockGrid,
    Decomposition,
    ModuleGrid,
    embed_submatrix,
    enumerate_modules,
    extract_submatrix,
)
from evblink.decompose import (
    FitOptions,
    UniquenessReport,
    bidifac_plus,
    check_uniqueness,
    default_lambda,
    ev_bidifac,
)
from evblink.impute import (
    MissingPattern,
    classify_pattern,
    em_impute_hard,
    em_impute_soft,
    ev_bidifac_impute,
    sigma_for_missing,
)
from evblink.simbench import (
    ExperimentSpec,
    ResultTable,
    cv_impute,
    gen_bidim,
    gen_hetero,
    gen_single_fixed,
    gen_two_linked,
    mrse_miss,
    onse,
    rdse,
    rse,
    rse_miss,
    rse_miss_blockwise,
    run_experiment,
)

__version__ = "0.1.0"
