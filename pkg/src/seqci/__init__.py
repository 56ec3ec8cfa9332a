"""Anytime-valid sequential tests of conditional independence under model-X.

E-factors built from arbitrary nonnegative test functions and the known
conditional law of x given z multiply into a test martingale; Ville's
inequality then gives type-I error control at any stopping time.  The
package adds a logistic-regression specialization refit per observation,
batch comparators (conditional randomization test, likelihood ratio test,
running-MLE e-process), and a simulation harness with a CLI.
"""

from .baselines import CrtResult, LrtResult, RmleProcess, RmleState, crt_pvalue, lrt_pvalue, rmle_evalue
from .evalue import (
    CallableTestFunction,
    EFactor,
    MartingaleState,
    Observation,
    StepRecord,
    TestConfig,
    TestFunction,
    e_factor_exact,
    e_factor_mc,
    mc_factor,
    naive_e_factor_mc,
    run_factored_stream,
    run_sequential_test,
    symmetry_e_factor,
    update_martingale,
    write_trace,
)
from .logistic import (
    EcrtEngine,
    FitConfig,
    FitDiagnostics,
    LogisticParams,
    ecrt_factor,
    fit_mle,
    predict_prob,
    prob_of_label,
    run_ecrt,
)
from .modelx import (
    ConditionalModel,
    DiscreteConditional,
    DistortedGaussian,
    FixedGaussian,
    GaussianConditional,
    distort_mean,
    fit_gaussian_conditional,
    gaussian_conditional_from_joint,
    model_from_json,
    model_to_json,
    toeplitz_joint,
    tv_distance_discrete,
    tv_distance_product,
)
from .simharness import (
    Dataset,
    PowerSummary,
    RunRecord,
    ScenarioSpec,
    calibration_summary,
    gen_dataset,
    power_curve,
    robustness_experiment,
    run_replications,
    write_records,
)

__version__ = "0.1.0"
