"""Principal stratification under noncompliance via principal scores."""

__version__ = "0.1.0"

from .data import (
    AssumptionSet,
    DataError,
    Dataset,
    Design,
    EstimateSet,
    EstimationError,
    StratumEstimate,
    load_dataset,
    save_dataset,
    validate,
)
from .pscore import (
    PrincipalScoreSet,
    fit_logit,
    predict_proba,
    pscore_cell,
    pscore_onesided,
    pscore_twosided_joint,
    pscore_twosided_marginal,
)
from .onesided import (
    estimate_binary_plugin,
    estimate_discrete_subgroup,
    estimate_weighting_strong,
    estimate_weighting_weak,
    strong_pi_implication_test,
)
from .twosided import (
    estimate_iv_both_er,
    estimate_strong_twosided,
    estimate_weak_er_nt,
    estimate_weak_twosided,
    strata_proportions,
)
