"""Linear mixed models with endogenous time-varying covariates for micro-randomized trials."""
from .data import (
    DataError,
    DesignBundle,
    IndividualSeries,
    LongitudinalDataset,
    ModelSpec,
    ParseError,
    SchemaError,
    ValidationError,
    build_design,
    load_csv,
    save_csv,
)
from .harness import (
    AnalysisReport,
    MarginalOracleResult,
    ReplicationReport,
    analyze,
    LrtStudy,
    fccm_bias_demo,
    lrt_study,
    marginal_oracle,
    run_replication,
)
from .inference import CoefInference, VarCompTest, lrt_variance, satterthwaite_ci
from .lmm import (
    FitOptions,
    FitResult,
    NumericalError,
    RandomEffectsPrediction,
    VarianceParams,
    direct_deviance,
    fit,
    gls_fixed_effects,
    marginal_covariance,
    predict_random_effects,
    profiled_deviance,
)
from .simulate import GmParams, SimConfig, simulate_gm, simulate_heartsteps_like

__version__ = "0.1.0"
